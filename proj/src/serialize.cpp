#include "sttn/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace sttn {

static_assert(std::endian::native == std::endian::little, "serialization assumes little-endian host");

uint32_t crc32(const uint8_t* data, size_t n) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

struct Writer {
    std::vector<uint8_t> buf;
    void u8(uint8_t v) { buf.push_back(v); }
    void u16(uint16_t v) { append(&v, 2); }
    void u32(uint32_t v) { append(&v, 4); }
    void i32(int32_t v) { append(&v, 4); }
    void u64(uint64_t v) { append(&v, 8); }
    void f32(float v) { append(&v, 4); }
    void bytes(const void* p, size_t n) { append(p, n); }
    void append(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
};

struct Reader {
    const std::vector<uint8_t>& buf;
    size_t off = 0;
    std::string origin;

    void need(size_t n, const char* what) {
        if (off + n > buf.size())
            throw ParseError("'" + origin + "': truncated at byte offset " + std::to_string(off) +
                             " while reading " + what);
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return buf[off++];
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v;
        std::memcpy(&v, buf.data() + off, 2);
        off += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v;
        std::memcpy(&v, buf.data() + off, 4);
        off += 4;
        return v;
    }
    int32_t i32(const char* what) { return int32_t(u32(what)); }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v;
        std::memcpy(&v, buf.data() + off, 8);
        off += 8;
        return v;
    }
    float f32(const char* what) {
        need(4, what);
        float v;
        std::memcpy(&v, buf.data() + off, 4);
        off += 4;
        return v;
    }
    void bytes(void* p, size_t n, const char* what) {
        need(n, what);
        std::memcpy(p, buf.data() + off, n);
        off += n;
    }
    std::vector<float> f32_array(size_t n, const char* what) {
        std::vector<float> v(n);
        bytes(v.data(), 4 * n, what);
        return v;
    }
    std::vector<uint64_t> u64_array(size_t n, const char* what) {
        std::vector<uint64_t> v(n);
        bytes(v.data(), 8 * n, what);
        return v;
    }
};

std::vector<uint8_t> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "'");
    f.seekg(0, std::ios::end);
    const std::streamoff n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> buf(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(buf.data()), n);
    if (!f) throw ParseError("short read on '" + path + "'");
    return buf;
}

void dump(const std::string& path, const std::vector<uint8_t>& buf) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot write '" + path + "'");
    f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
    if (!f) throw ParseError("short write on '" + path + "'");
}

}  // namespace

// ---- training checkpoint ----

void save_checkpoint(const std::string& path, Model& model, const CheckpointMeta& meta) {
    nlohmann::json hdr;
    hdr["format"] = 1;
    hdr["config"] = config_to_text(meta.cfg);
    hdr["epoch"] = meta.epoch;
    hdr["test_acc"] = meta.test_acc;
    hdr["norm_mean"] = meta.norm.mean;
    hdr["norm_std"] = meta.norm.stddev;
    const std::string hs = hdr.dump();

    Writer w;
    w.u32(uint32_t(hs.size()));
    w.bytes(hs.data(), hs.size());

    auto params = model.parameters();
    auto bufs = model.buffers();
    w.u32(uint32_t(params.size() + bufs.size()));
    auto put_tensor = [&w](const std::string& name, const Shape& shape, const float* data, size_t n) {
        w.u16(uint16_t(name.size()));
        w.bytes(name.data(), name.size());
        w.u8(uint8_t(shape.size()));
        for (int d : shape) w.i32(d);
        w.bytes(data, 4 * n);
    };
    for (auto& p : params)
        put_tensor(p.name, p.value->shape, p.value->ptr(), size_t(p.value->size()));
    for (auto& b : bufs)
        put_tensor(b.name, Shape{int(b.value->size())}, b.value->data(), b.value->size());

    std::vector<uint8_t> out;
    out.insert(out.end(), {'S', 'T', 'C', 'K'});
    out.push_back(1);  // version
    const uint32_t crc = crc32(w.buf.data(), w.buf.size());
    out.insert(out.end(), reinterpret_cast<const uint8_t*>(&crc), reinterpret_cast<const uint8_t*>(&crc) + 4);
    out.insert(out.end(), w.buf.begin(), w.buf.end());
    dump(path, out);
}

Model load_checkpoint(const std::string& path, CheckpointMeta* meta_out) {
    const auto raw = slurp(path);
    if (raw.size() < 9 || std::memcmp(raw.data(), "STCK", 4) != 0)
        throw ParseError("'" + path + "': not a training checkpoint (bad magic)");
    if (raw[4] != 1)
        throw ParseError("'" + path + "': unsupported checkpoint version " + std::to_string(raw[4]));
    uint32_t stored_crc;
    std::memcpy(&stored_crc, raw.data() + 5, 4);
    const std::vector<uint8_t> payload(raw.begin() + 9, raw.end());
    const uint32_t actual = crc32(payload.data(), payload.size());
    if (actual != stored_crc)
        throw ParseError("'" + path + "': checksum mismatch (stored " + std::to_string(stored_crc) +
                         ", computed " + std::to_string(actual) + "); file corrupt");

    Reader r{payload, 0, path};
    const uint32_t hlen = r.u32("header length");
    r.need(hlen, "header json");
    std::string hs(reinterpret_cast<const char*>(payload.data() + r.off), hlen);
    r.off += hlen;
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
        throw ParseError("'" + path + "': bad header json: " + e.what());
    }

    CheckpointMeta meta;
    meta.cfg = parse_config_text(hdr.at("config").get<std::string>(), path + "(embedded config)");
    meta.epoch = hdr.at("epoch").get<int>();
    meta.test_acc = hdr.at("test_acc").get<float>();
    meta.norm.mean = hdr.at("norm_mean").get<std::vector<float>>();
    meta.norm.stddev = hdr.at("norm_std").get<std::vector<float>>();

    Model model = build_model(meta.cfg.model, meta.cfg.seed);

    std::unordered_map<std::string, std::pair<Shape, std::vector<float>>> tensors;
    const uint32_t count = r.u32("tensor count");
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t nl = r.u16("tensor name length");
        r.need(nl, "tensor name");
        std::string name(reinterpret_cast<const char*>(payload.data() + r.off), nl);
        r.off += nl;
        const uint8_t nd = r.u8("tensor rank");
        Shape shape(nd);
        int64_t n = 1;
        for (auto& d : shape) {
            d = r.i32("tensor dim");
            n *= d;
        }
        auto data = r.f32_array(size_t(n), ("tensor '" + name + "' data").c_str());
        tensors.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
    }

    for (auto& p : model.parameters()) {
        auto it = tensors.find(p.name);
        if (it == tensors.end())
            throw ParseError("'" + path + "': checkpoint is missing parameter '" + p.name + "'");
        if (it->second.first != p.value->shape)
            throw ParseError("'" + path + "': parameter '" + p.name + "' has shape " +
                             shape_str(it->second.first) + ", model expects " + shape_str(p.value->shape));
        *p.value->data = it->second.second;
        tensors.erase(it);
    }
    for (auto& b : model.buffers()) {
        auto it = tensors.find(b.name);
        if (it == tensors.end())
            throw ParseError("'" + path + "': checkpoint is missing buffer '" + b.name + "'");
        if (it->second.second.size() != b.value->size())
            throw ParseError("'" + path + "': buffer '" + b.name + "' has wrong length");
        *b.value = it->second.second;
        tensors.erase(it);
    }
    if (!tensors.empty())
        throw ParseError("'" + path + "': checkpoint contains unknown tensor '" + tensors.begin()->first + "'");

    if (meta_out) *meta_out = std::move(meta);
    return model;
}

// ---- fused model ----

namespace {
constexpr uint8_t kTagConvFP = 1, kTagLinearFP = 2, kTagMaxPool = 3, kTagFlatten = 4, kTagGap = 5,
                  kTagQuantConv = 6, kTagResOpen = 7, kTagResClose = 8;
}

FusedModel build_fused(Model& model, const NormStats& norm) {
    if (model.cfg.mode == QuantMode::float_full)
        throw ValueError("nothing to fuse: checkpoint is a full-precision (float mode) model");
    FusedModel fm;
    fm.in_ch = model.cfg.in_ch;
    fm.in_h = model.cfg.in_h;
    fm.in_w = model.cfg.in_w;
    fm.classes = model.cfg.classes;
    fm.norm = norm;

    auto fuse_block = [](QuantConvBlock& q) {
        FusedQuantConv rec;
        rec.out_ch = q.out_ch;
        rec.in_ch = q.in_ch;
        rec.kh = q.kh;
        rec.kw = q.kw;
        rec.stride = q.stride;
        rec.pad = q.pad;
        rec.post = q.post == PostAct::relu ? 1 : 0;
        rec.ternarize_input = q.ternarizes_input() ? 1 : 0;
        rec.bn_eps = q.bn.eps;
        rec.bn_gamma = *q.bn.gamma.data;
        rec.bn_beta = *q.bn.beta.data;
        rec.bn_mean = q.bn.running_mean;
        rec.bn_var = q.bn.running_var;
        rec.kernel = pack_kernel(q.fused_kernel());
        return rec;
    };

    for (auto& nl : model.layers) {
        Layer* l = nl.layer.get();
        if (auto* c = dynamic_cast<ConvFPLayer*>(l)) {
            FusedConvFP rec;
            rec.out_ch = c->w.shape[0];
            rec.in_ch = c->w.shape[1];
            rec.kh = c->w.shape[2];
            rec.kw = c->w.shape[3];
            rec.stride = c->stride;
            rec.pad = c->pad;
            rec.post = c->post == PostAct::relu ? 1 : 0;
            rec.w = *c->w.data;
            rec.b = *c->b.data;
            fm.records.emplace_back(std::move(rec));
        } else if (auto* fc = dynamic_cast<LinearFPLayer*>(l)) {
            FusedLinearFP rec;
            rec.out_d = fc->w.shape[0];
            rec.in_d = fc->w.shape[1];
            rec.post = fc->post == PostAct::relu ? 1 : 0;
            rec.w = *fc->w.data;
            rec.b = *fc->b.data;
            fm.records.emplace_back(std::move(rec));
        } else if (auto* mp = dynamic_cast<MaxPoolLayer*>(l)) {
            fm.records.emplace_back(FusedMaxPool{mp->k, mp->stride});
        } else if (dynamic_cast<FlattenLayer*>(l)) {
            fm.records.emplace_back(FusedFlatten{});
        } else if (dynamic_cast<GlobalAvgPoolLayer*>(l)) {
            fm.records.emplace_back(FusedGlobalAvgPool{});
        } else if (auto* q = dynamic_cast<QuantConvBlock*>(l)) {
            fm.records.emplace_back(fuse_block(*q));
        } else if (auto* r = dynamic_cast<ResidualUnit*>(l)) {
            fm.records.emplace_back(FusedResOpen{r->pad_ch});
            fm.records.emplace_back(fuse_block(*r->a));
            fm.records.emplace_back(fuse_block(*r->b));
            fm.records.emplace_back(FusedResClose{});
        } else {
            throw ValueError("export: unknown layer kind at '" + nl.name + "'");
        }
    }
    return fm;
}

void save_fused(const std::string& path, const FusedModel& fm) {
    Writer w;
    w.bytes("STTN", 4);
    w.u8(1);  // version
    w.i32(fm.in_ch);
    w.i32(fm.in_h);
    w.i32(fm.in_w);
    w.i32(fm.classes);
    for (int c = 0; c < fm.in_ch; ++c) w.f32(fm.norm.mean[size_t(c)]);
    for (int c = 0; c < fm.in_ch; ++c) w.f32(fm.norm.stddev[size_t(c)]);
    w.u32(uint32_t(fm.records.size()));
    for (const auto& rec : fm.records) {
        if (const auto* c = std::get_if<FusedConvFP>(&rec)) {
            w.u8(kTagConvFP);
            w.i32(c->out_ch); w.i32(c->in_ch); w.i32(c->kh); w.i32(c->kw);
            w.i32(c->stride); w.i32(c->pad);
            w.u8(c->post);
            w.bytes(c->w.data(), 4 * c->w.size());
            w.bytes(c->b.data(), 4 * c->b.size());
        } else if (const auto* fc = std::get_if<FusedLinearFP>(&rec)) {
            w.u8(kTagLinearFP);
            w.i32(fc->out_d); w.i32(fc->in_d);
            w.u8(fc->post);
            w.bytes(fc->w.data(), 4 * fc->w.size());
            w.bytes(fc->b.data(), 4 * fc->b.size());
        } else if (const auto* mp = std::get_if<FusedMaxPool>(&rec)) {
            w.u8(kTagMaxPool);
            w.i32(mp->k); w.i32(mp->stride);
        } else if (std::get_if<FusedFlatten>(&rec)) {
            w.u8(kTagFlatten);
        } else if (std::get_if<FusedGlobalAvgPool>(&rec)) {
            w.u8(kTagGap);
        } else if (const auto* q = std::get_if<FusedQuantConv>(&rec)) {
            w.u8(kTagQuantConv);
            w.i32(q->out_ch); w.i32(q->in_ch); w.i32(q->kh); w.i32(q->kw);
            w.i32(q->stride); w.i32(q->pad);
            w.u8(q->post);
            w.u8(q->ternarize_input);
            w.f32(q->kernel.scale);
            w.f32(q->bn_eps);
            w.bytes(q->bn_gamma.data(), 4 * q->bn_gamma.size());
            w.bytes(q->bn_beta.data(), 4 * q->bn_beta.size());
            w.bytes(q->bn_mean.data(), 4 * q->bn_mean.size());
            w.bytes(q->bn_var.data(), 4 * q->bn_var.size());
            w.u32(uint32_t(q->kernel.words_per_filter));
            w.bytes(q->kernel.mask.data(), 8 * q->kernel.mask.size());
            w.bytes(q->kernel.sign.data(), 8 * q->kernel.sign.size());
        } else if (const auto* ro = std::get_if<FusedResOpen>(&rec)) {
            w.u8(kTagResOpen);
            w.i32(ro->pad_ch);
        } else {
            w.u8(kTagResClose);
        }
    }
    dump(path, w.buf);
}

FusedModel load_fused(const std::string& path) {
    const auto raw = slurp(path);
    Reader r{raw, 0, path};
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::memcmp(magic, "STTN", 4) != 0)
        throw ParseError("'" + path + "': not a fused ternary model (bad magic)");
    const uint8_t version = r.u8("version");
    if (version != 1)
        throw ParseError("'" + path + "': unsupported fused model version " + std::to_string(version));
    FusedModel fm;
    fm.in_ch = r.i32("in_ch");
    fm.in_h = r.i32("in_h");
    fm.in_w = r.i32("in_w");
    fm.classes = r.i32("classes");
    if (fm.in_ch <= 0 || fm.in_ch > 4096 || fm.classes <= 0)
        throw ParseError("'" + path + "': implausible header geometry");
    fm.norm.mean = r.f32_array(size_t(fm.in_ch), "norm mean");
    fm.norm.stddev = r.f32_array(size_t(fm.in_ch), "norm std");
    const uint32_t count = r.u32("record count");
    for (uint32_t i = 0; i < count; ++i) {
        const uint8_t tag = r.u8("record tag");
        switch (tag) {
            case kTagConvFP: {
                FusedConvFP c;
                c.out_ch = r.i32("conv out_ch"); c.in_ch = r.i32("conv in_ch");
                c.kh = r.i32("conv kh"); c.kw = r.i32("conv kw");
                c.stride = r.i32("conv stride"); c.pad = r.i32("conv pad");
                c.post = r.u8("conv post");
                c.w = r.f32_array(size_t(c.out_ch) * c.in_ch * c.kh * c.kw, "conv weights");
                c.b = r.f32_array(size_t(c.out_ch), "conv bias");
                fm.records.emplace_back(std::move(c));
                break;
            }
            case kTagLinearFP: {
                FusedLinearFP fc;
                fc.out_d = r.i32("linear out_d"); fc.in_d = r.i32("linear in_d");
                fc.post = r.u8("linear post");
                fc.w = r.f32_array(size_t(fc.out_d) * fc.in_d, "linear weights");
                fc.b = r.f32_array(size_t(fc.out_d), "linear bias");
                fm.records.emplace_back(std::move(fc));
                break;
            }
            case kTagMaxPool: {
                FusedMaxPool mp;
                mp.k = r.i32("pool k");
                mp.stride = r.i32("pool stride");
                fm.records.emplace_back(mp);
                break;
            }
            case kTagFlatten:
                fm.records.emplace_back(FusedFlatten{});
                break;
            case kTagGap:
                fm.records.emplace_back(FusedGlobalAvgPool{});
                break;
            case kTagQuantConv: {
                FusedQuantConv q;
                q.out_ch = r.i32("qconv out_ch"); q.in_ch = r.i32("qconv in_ch");
                q.kh = r.i32("qconv kh"); q.kw = r.i32("qconv kw");
                q.stride = r.i32("qconv stride"); q.pad = r.i32("qconv pad");
                q.post = r.u8("qconv post");
                q.ternarize_input = r.u8("qconv ternarize flag");
                q.kernel.scale = r.f32("qconv scale");
                q.bn_eps = r.f32("qconv bn eps");
                q.bn_gamma = r.f32_array(size_t(q.in_ch), "bn gamma");
                q.bn_beta = r.f32_array(size_t(q.in_ch), "bn beta");
                q.bn_mean = r.f32_array(size_t(q.in_ch), "bn mean");
                q.bn_var = r.f32_array(size_t(q.in_ch), "bn var");
                q.kernel.out_ch = q.out_ch;
                q.kernel.in_ch = q.in_ch;
                q.kernel.kh = q.kh;
                q.kernel.kw = q.kw;
                q.kernel.k_len = int64_t(q.in_ch) * q.kh * q.kw;
                q.kernel.words_per_filter = int(r.u32("qconv words per filter"));
                if (q.kernel.words_per_filter != int((q.kernel.k_len + 63) / 64))
                    throw ParseError("'" + path + "': words_per_filter inconsistent with geometry at byte offset " +
                                     std::to_string(r.off));
                q.kernel.mask = r.u64_array(size_t(q.out_ch) * q.kernel.words_per_filter, "mask words");
                q.kernel.sign = r.u64_array(size_t(q.out_ch) * q.kernel.words_per_filter, "sign words");
                fm.records.emplace_back(std::move(q));
                break;
            }
            case kTagResOpen: {
                FusedResOpen ro;
                ro.pad_ch = r.i32("res pad_ch");
                fm.records.emplace_back(ro);
                break;
            }
            case kTagResClose:
                fm.records.emplace_back(FusedResClose{});
                break;
            default:
                throw ParseError("'" + path + "': unknown record tag " + std::to_string(tag) +
                                 " at byte offset " + std::to_string(r.off - 1));
        }
    }
    if (r.off != raw.size())
        throw ParseError("'" + path + "': " + std::to_string(raw.size() - r.off) +
                         " trailing bytes at offset " + std::to_string(r.off));
    return fm;
}

std::string sniff_format(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open '" + path + "'");
    char magic[4] = {0, 0, 0, 0};
    f.read(magic, 4);
    if (std::memcmp(magic, "STCK", 4) == 0) return "STCK";
    if (std::memcmp(magic, "STTN", 4) == 0) return "STTN";
    throw ParseError("'" + path + "': unrecognized file magic");
}

// ---- fused execution ----

namespace {

struct PlaneState {
    std::vector<float> data;
    int c = 0, h = 0, w = 0;  // h=w=0 means flat vector of length c
};

void run_record(const FusedRecord& rec, PlaneState& st, std::vector<PlaneState>& skips,
                std::vector<float>* capture) {
    if (const auto* c = std::get_if<FusedConvFP>(&rec)) {
        ConvGeom<float> g = conv_geom<float>({1, st.c, st.h, st.w}, {c->out_ch, c->in_ch, c->kh, c->kw},
                                             c->stride, c->pad);
        std::vector<float> out(size_t(g.F) * g.P);
        conv2d_forward_raw<float>(g, st.data.data(), c->w.data(), out.data(), nullptr);
        for (int f = 0; f < g.F; ++f) {
            const float bv = c->b[size_t(f)];
            for (int p = 0; p < g.P; ++p) out[size_t(f) * g.P + p] += bv;
        }
        if (c->post == 1)
            for (auto& v : out) v = v > 0.f ? v : 0.f;
        st.data = std::move(out);
        st.c = g.F;
        st.h = g.OH;
        st.w = g.OW;
    } else if (const auto* fc = std::get_if<FusedLinearFP>(&rec)) {
        if (int(st.data.size()) != fc->in_d) throw ShapeError("fused linear input size mismatch");
        std::vector<float> out(size_t(fc->out_d));
        gemm_nt(1, fc->in_d, fc->out_d, st.data.data(), fc->w.data(), out.data());
        for (int j = 0; j < fc->out_d; ++j) out[size_t(j)] += fc->b[size_t(j)];
        if (fc->post == 1)
            for (auto& v : out) v = v > 0.f ? v : 0.f;
        st.data = std::move(out);
        st.c = fc->out_d;
        st.h = st.w = 0;
    } else if (const auto* mp = std::get_if<FusedMaxPool>(&rec)) {
        const int OH = conv_out_dim(st.h, mp->k, mp->stride, 0);
        const int OW = conv_out_dim(st.w, mp->k, mp->stride, 0);
        std::vector<float> out(size_t(st.c) * OH * OW);
        for (int c2 = 0; c2 < st.c; ++c2)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    float best = -std::numeric_limits<float>::infinity();
                    for (int r2 = 0; r2 < mp->k; ++r2)
                        for (int s2 = 0; s2 < mp->k; ++s2) {
                            const float v =
                                st.data[(size_t(c2) * st.h + oh * mp->stride + r2) * st.w + ow * mp->stride + s2];
                            best = std::max(best, v);
                        }
                    out[(size_t(c2) * OH + oh) * OW + ow] = best;
                }
        st.data = std::move(out);
        st.h = OH;
        st.w = OW;
    } else if (std::get_if<FusedFlatten>(&rec)) {
        st.c = int(st.data.size());
        st.h = st.w = 0;
    } else if (std::get_if<FusedGlobalAvgPool>(&rec)) {
        const int HW = st.h * st.w;
        std::vector<float> out(size_t(st.c));
        for (int c2 = 0; c2 < st.c; ++c2) {
            float acc = 0.f;
            const float* p = st.data.data() + size_t(c2) * HW;
            for (int i = 0; i < HW; ++i) acc += p[i];
            out[size_t(c2)] = acc / float(HW);
        }
        st.data = std::move(out);
        st.h = st.w = 0;
    } else if (const auto* q = std::get_if<FusedQuantConv>(&rec)) {
        if (st.c != q->in_ch) throw ShapeError("fused quant conv channel mismatch");
        const int HW = st.h * st.w;
        // batch-norm affine through the running statistics
        std::vector<float> bnout(st.data.size());
        for (int c2 = 0; c2 < st.c; ++c2) {
            const float invstd = 1.f / std::sqrt(q->bn_var[size_t(c2)] + q->bn_eps);
            const float gmm = q->bn_gamma[size_t(c2)], bta = q->bn_beta[size_t(c2)],
                        mu = q->bn_mean[size_t(c2)];
            for (int i = 0; i < HW; ++i) {
                const float xh = (st.data[size_t(c2) * HW + i] - mu) * invstd;
                bnout[size_t(c2) * HW + i] = gmm * xh + bta;
            }
        }
        const int OH = conv_out_dim(st.h, q->kh, q->stride, q->pad);
        const int OW = conv_out_dim(st.w, q->kw, q->stride, q->pad);
        std::vector<float> out;
        if (q->ternarize_input) {
            std::vector<int8_t> tern(bnout.size());
            for (size_t i = 0; i < bnout.size(); ++i) {
                const float v = bnout[i];
                tern[i] = std::abs(v) > 0.5f ? (v < 0.f ? int8_t(-1) : int8_t(1)) : int8_t(0);
            }
            std::vector<int32_t> acc;
            ternary_conv2d(q->kernel, tern.data(), st.c, st.h, st.w, q->stride, q->pad, acc, out);
        } else {
            // float activations: decode the ternary kernel and run the float path
            TernaryKernel tk = unpack_kernel(q->kernel);
            std::vector<float> kt(tk.t.size());
            for (size_t i = 0; i < kt.size(); ++i) kt[i] = float(tk.t[i]);
            ConvGeom<float> g = conv_geom<float>({1, st.c, st.h, st.w}, {q->out_ch, q->in_ch, q->kh, q->kw},
                                                 q->stride, q->pad);
            out.assign(size_t(g.F) * g.P, 0.f);
            conv2d_forward_raw<float>(g, bnout.data(), kt.data(), out.data(), nullptr);
            for (auto& v : out) v *= q->kernel.scale;
        }
        if (q->post == 1)
            for (auto& v : out) v = v > 0.f ? v : 0.f;
        st.data = std::move(out);
        st.c = q->out_ch;
        st.h = OH;
        st.w = OW;
        if (capture) *capture = st.data;
    } else if (const auto* ro = std::get_if<FusedResOpen>(&rec)) {
        PlaneState skip = st;
        if (ro->pad_ch > 0) {
            skip.data.resize(size_t(st.c + ro->pad_ch) * st.h * st.w, 0.f);
            skip.c = st.c + ro->pad_ch;
        }
        skips.push_back(std::move(skip));
    } else {  // FusedResClose
        if (skips.empty()) throw ParseError("fused model: residual close without open");
        PlaneState skip = std::move(skips.back());
        skips.pop_back();
        if (skip.data.size() != st.data.size()) throw ShapeError("fused model: residual shape mismatch");
        for (size_t i = 0; i < st.data.size(); ++i) st.data[i] += skip.data[i];
    }
}

}  // namespace

Tensor32 FusedModel::forward(const Tensor32& batch, std::vector<std::vector<float>>* per_layer) const {
    if (batch.shape.size() != 4 || batch.shape[1] != in_ch || batch.shape[2] != in_h ||
        batch.shape[3] != in_w)
        throw ShapeError("fused model input " + shape_str(batch.shape) + " does not match [Nx" +
                         std::to_string(in_ch) + "x" + std::to_string(in_h) + "x" + std::to_string(in_w) + "]");
    const int N = batch.shape[0];
    Tensor32 logits = Tensor32::zeros({N, classes});
    if (per_layer) per_layer->clear();

    for (int b = 0; b < N; ++b) {
        PlaneState st;
        st.c = in_ch;
        st.h = in_h;
        st.w = in_w;
        st.data.assign(batch.ptr() + size_t(b) * in_ch * in_h * in_w,
                       batch.ptr() + size_t(b + 1) * in_ch * in_h * in_w);
        std::vector<PlaneState> skips;
        size_t qi = 0;
        for (const auto& rec : records) {
            std::vector<float> cap;
            const bool want = per_layer && std::holds_alternative<FusedQuantConv>(rec);
            run_record(rec, st, skips, want ? &cap : nullptr);
            if (want) {
                if (per_layer->size() <= qi) per_layer->emplace_back();
                auto& sink = (*per_layer)[qi++];
                sink.insert(sink.end(), cap.begin(), cap.end());
            }
        }
        if (int(st.data.size()) != classes)
            throw ShapeError("fused model produced " + std::to_string(st.data.size()) +
                             " outputs, expected " + std::to_string(classes) + " classes");
        std::copy(st.data.begin(), st.data.end(), logits.ptr() + size_t(b) * classes);
    }
    return logits;
}

// ---- equivalence probe & checked export ----

namespace {

// training-graph forward (eval mode) that captures each quantized block's
// post-activation output, mirroring the fused capture points
Tensor32 training_forward_capture(Model& m, const Tensor32& x, std::vector<std::vector<float>>& caps,
                                  std::vector<std::string>& names) {
    Tensor32 h = x;
    caps.clear();
    names.clear();
    auto run_block = [&](const std::string& name, QuantConvBlock& q, const Tensor32& in) {
        Tensor32 out = q.forward(nullptr, in, false);
        caps.emplace_back(out.data->begin(), out.data->end());
        names.push_back(name);
        return out;
    };
    for (auto& nl : m.layers) {
        if (auto* q = dynamic_cast<QuantConvBlock*>(nl.layer.get())) {
            h = run_block(nl.name, *q, h);
        } else if (auto* r = dynamic_cast<ResidualUnit*>(nl.layer.get())) {
            Tensor32 main = run_block(nl.name + ".a", *r->a, h);
            main = run_block(nl.name + ".b", *r->b, main);
            Tensor32 skip = r->pad_ch > 0 ? pad_channels<float>(nullptr, h, r->pad_ch) : h;
            h = add<float>(nullptr, main, skip);
        } else {
            h = nl.layer->forward(nullptr, h, false);
        }
    }
    return h;
}

}  // namespace

ProbeReport probe_equivalence(Model& model, const FusedModel& fm, uint64_t seed) {
    Rng rng(seed);
    const int N = 4;
    Tensor32 probe = Tensor32::zeros({N, model.cfg.in_ch, model.cfg.in_h, model.cfg.in_w});
    for (int64_t i = 0; i < probe.size(); ++i) probe[i] = float(rng.gauss());

    // training captures are [N, rest] flat, identical element order to the
    // fused per-image accumulation
    std::vector<std::vector<float>> train_caps, fused_caps;
    std::vector<std::string> names;
    Tensor32 ref_logits = training_forward_capture(model, probe, train_caps, names);
    Tensor32 fused_logits = fm.forward(probe, &fused_caps);

    ProbeReport rep;
    rep.tolerance = 1e-5f;
    if (fused_caps.size() != train_caps.size())
        throw ValueError("probe: quantized layer count mismatch between training graph and fused model");

    float worst = 0.f;
    std::string worst_layer = "(none)";
    for (size_t c = 0; c < fused_caps.size(); ++c) {
        if (fused_caps[c].size() != train_caps[c].size())
            throw ValueError("probe: layer '" + names[c] + "' output size mismatch");
        float scale = 1.f;
        for (float v : train_caps[c]) scale = std::max(scale, std::abs(v));
        for (size_t i = 0; i < fused_caps[c].size(); ++i) {
            const float dev = std::abs(fused_caps[c][i] - train_caps[c][i]) / scale;
            if (dev > worst) {
                worst = dev;
                worst_layer = names[c];
            }
        }
    }
    {
        float scale = 1.f;
        for (int64_t i = 0; i < ref_logits.size(); ++i) scale = std::max(scale, std::abs(ref_logits[i]));
        for (int64_t i = 0; i < ref_logits.size(); ++i) {
            const float dev = std::abs(ref_logits[i] - fused_logits[i]) / scale;
            if (dev > worst) {
                worst = dev;
                worst_layer = "logits";
            }
        }
    }
    rep.max_dev = worst;
    rep.worst_layer = worst_layer;
    rep.ok = worst < rep.tolerance;
    return rep;
}

ProbeReport export_fused_checked(Model& model, const NormStats& norm, const std::string& out_path,
                                 uint64_t seed) {
    FusedModel fm = build_fused(model, norm);
    ProbeReport rep = probe_equivalence(model, fm, seed);
    if (!rep.ok)
        throw ValueError("export refused: fusion equivalence probe failed at layer '" + rep.worst_layer +
                         "' (relative deviation " + std::to_string(rep.max_dev) + " >= " +
                         std::to_string(rep.tolerance) + ")");
    save_fused(out_path, fm);
    return rep;
}

}  // namespace sttn
