#include "sttn/config.hpp"

#include <fstream>
#include <sstream>

namespace sttn {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key, int line) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ParseError("config line " + std::to_string(line) + ": key '" + key +
                     "' expects a boolean, got '" + v + "'");
}

template <class T>
T parse_num(const std::string& v, const std::string& key, int line) {
    std::istringstream ss(v);
    T out{};
    ss >> out;
    if (ss.fail() || !ss.eof())
        throw ParseError("config line " + std::to_string(line) + ": key '" + key +
                         "' expects a number, got '" + v + "'");
    return out;
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    bool width_set = false;
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string s = raw;
        const auto hash = s.find('#');
        if (hash != std::string::npos) s = s.substr(0, hash);
        s = trim(s);
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ParseError(origin + " line " + std::to_string(line) + ": expected 'key = value', got '" +
                             trim(raw) + "'");
        const std::string key = trim(s.substr(0, eq));
        const std::string val = trim(s.substr(eq + 1));
        if (val.empty())
            throw ParseError(origin + " line " + std::to_string(line) + ": key '" + key + "' has no value");
        try {
            if (key == "arch") cfg.model.arch = arch_from(val);
            else if (key == "mode") cfg.model.mode = quant_mode_from(val);
            else if (key == "backward") {
                if (val == "consistent") cfg.model.backward = quant::BackwardMode::consistent;
                else if (val == "paper_literal") cfg.model.backward = quant::BackwardMode::paper_literal;
                else throw ValueError("expects consistent|paper_literal, got '" + val + "'");
            } else if (key == "width_mult") {
                cfg.model.width_mult = parse_num<float>(val, key, line);
                width_set = true;
            } else if (key == "classes") cfg.model.classes = parse_num<int>(val, key, line);
            else if (key == "dataset") cfg.dataset = dataset_kind_from(val);
            else if (key == "data_dir") cfg.data_dir = val;
            else if (key == "epochs") cfg.epochs = parse_num<int>(val, key, line);
            else if (key == "batch") cfg.batch = parse_num<int>(val, key, line);
            else if (key == "lr") cfg.lr = parse_num<float>(val, key, line);
            else if (key == "weight_decay") cfg.weight_decay = parse_num<float>(val, key, line);
            else if (key == "seed") cfg.seed = parse_num<uint64_t>(val, key, line);
            else if (key == "augment_pad_crop") cfg.augment_pad_crop = parse_bool(val, key, line);
            else if (key == "augment_hflip") cfg.augment_hflip = parse_bool(val, key, line);
            else if (key == "threads") cfg.threads = parse_num<int>(val, key, line);
            else
                throw ParseError(origin + " line " + std::to_string(line) + ": unknown key '" + key + "'");
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(origin + " line " + std::to_string(line) + ": key '" + key + "': " + e.what());
        }
    }
    if (!width_set && cfg.model.arch == Arch::vgg7_t) cfg.model.width_mult = 0.25f;
    if (cfg.epochs < 0) throw ParseError(origin + ": key 'epochs' must be >= 0");
    if (cfg.batch < 1) throw ParseError(origin + ": key 'batch' must be >= 1");
    if (cfg.lr <= 0) throw ParseError(origin + ": key 'lr' must be > 0");
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), path);
}

std::string config_to_text(const RunConfig& cfg) {
    std::ostringstream out;
    out << "arch = " << to_string(cfg.model.arch) << "\n";
    out << "mode = " << to_string(cfg.model.mode) << "\n";
    out << "backward = "
        << (cfg.model.backward == quant::BackwardMode::consistent ? "consistent" : "paper_literal") << "\n";
    out << "width_mult = " << cfg.model.width_mult << "\n";
    out << "classes = " << cfg.model.classes << "\n";
    out << "dataset = " << to_string(cfg.dataset) << "\n";
    if (!cfg.data_dir.empty()) out << "data_dir = " << cfg.data_dir << "\n";
    out << "epochs = " << cfg.epochs << "\n";
    out << "batch = " << cfg.batch << "\n";
    out << "lr = " << cfg.lr << "\n";
    out << "weight_decay = " << cfg.weight_decay << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "augment_pad_crop = " << (cfg.augment_pad_crop ? "true" : "false") << "\n";
    out << "augment_hflip = " << (cfg.augment_hflip ? "true" : "false") << "\n";
    out << "threads = " << cfg.threads << "\n";
    return out.str();
}

}  // namespace sttn
