#include "sttn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "sttn/common.hpp"

namespace sttn::synth {

namespace {

struct Seg {
    double x0, y0, x1, y1;
};

void arc(std::vector<Seg>& out, double cx, double cy, double rx, double ry, double a0, double a1,
         int n = 10) {
    double px = cx + rx * std::cos(a0), py = cy + ry * std::sin(a0);
    for (int i = 1; i <= n; ++i) {
        const double a = a0 + (a1 - a0) * double(i) / n;
        const double x = cx + rx * std::cos(a), y = cy + ry * std::sin(a);
        out.push_back({px, py, x, y});
        px = x;
        py = y;
    }
}

// Glyph strokes in a unit box, x right, y down.
std::vector<Seg> digit_strokes(int d) {
    std::vector<Seg> s;
    const double pi = 3.14159265358979323846;
    switch (d) {
        case 0:
            arc(s, 0.50, 0.50, 0.20, 0.34, 0, 2 * pi, 16);
            break;
        case 1:
            s.push_back({0.36, 0.28, 0.52, 0.14});
            s.push_back({0.52, 0.14, 0.52, 0.86});
            s.push_back({0.38, 0.86, 0.66, 0.86});
            break;
        case 2:
            arc(s, 0.50, 0.32, 0.20, 0.18, -pi, 0.15 * pi, 10);
            s.push_back({0.69, 0.40, 0.31, 0.86});
            s.push_back({0.31, 0.86, 0.72, 0.86});
            break;
        case 3:
            arc(s, 0.47, 0.31, 0.19, 0.17, -0.85 * pi, 0.5 * pi, 10);
            arc(s, 0.47, 0.67, 0.21, 0.19, -0.5 * pi, 0.85 * pi, 10);
            break;
        case 4:
            s.push_back({0.60, 0.14, 0.30, 0.58});
            s.push_back({0.30, 0.58, 0.74, 0.58});
            s.push_back({0.60, 0.32, 0.60, 0.86});
            break;
        case 5:
            s.push_back({0.70, 0.14, 0.34, 0.14});
            s.push_back({0.34, 0.14, 0.33, 0.45});
            arc(s, 0.48, 0.63, 0.21, 0.21, -0.42 * pi, 0.8 * pi, 12);
            break;
        case 6:
            arc(s, 0.62, 0.46, 0.34, 0.34, 0.78 * pi, 1.25 * pi, 8);
            arc(s, 0.50, 0.64, 0.18, 0.20, 0, 2 * pi, 14);
            break;
        case 7:
            s.push_back({0.30, 0.14, 0.72, 0.14});
            s.push_back({0.72, 0.14, 0.42, 0.86});
            break;
        case 8:
            arc(s, 0.50, 0.32, 0.155, 0.16, 0, 2 * pi, 12);
            arc(s, 0.50, 0.67, 0.19, 0.185, 0, 2 * pi, 14);
            break;
        case 9:
            arc(s, 0.50, 0.35, 0.18, 0.19, 0, 2 * pi, 14);
            s.push_back({0.67, 0.42, 0.58, 0.86});
            break;
        default:
            throw ValueError("digit out of range");
    }
    return s;
}

void render_digit(int digit, Rng& rng, uint8_t* out /*28x28*/) {
    const int N = 28;
    std::vector<float> img(size_t(N) * N, 0.f);

    const double rot = rng.uniform(-0.22, 0.22);
    const double sx = rng.uniform(0.85, 1.15), sy = rng.uniform(0.85, 1.15);
    const double shear = rng.uniform(-0.12, 0.12);
    const double tx = rng.uniform(-2.4, 2.4), ty = rng.uniform(-2.4, 2.4);
    const double thick = rng.uniform(1.05, 1.75);
    const double amp = rng.uniform(0.72, 1.0);
    const double cr = std::cos(rot), sr = std::sin(rot);

    auto map = [&](double x, double y, double& px, double& py) {
        double u = (x - 0.5) * sx, v = (y - 0.5) * sy;
        u += shear * v;
        const double ru = cr * u - sr * v, rv = sr * u + cr * v;
        px = 14.0 + ru * double(N) + tx;
        py = 14.0 + rv * double(N) + ty;
    };

    for (const Seg& g : digit_strokes(digit)) {
        double x0, y0, x1, y1;
        map(g.x0, g.y0, x0, y0);
        map(g.x1, g.y1, x1, y1);
        const double len = std::hypot(x1 - x0, y1 - y0);
        const int steps = std::max(1, int(len / 0.3));
        for (int i = 0; i <= steps; ++i) {
            const double t = double(i) / steps;
            const double cx = x0 + (x1 - x0) * t, cy = y0 + (y1 - y0) * t;
            const int lo_y = std::max(0, int(cy - thick - 1)), hi_y = std::min(N - 1, int(cy + thick + 1));
            const int lo_x = std::max(0, int(cx - thick - 1)), hi_x = std::min(N - 1, int(cx + thick + 1));
            for (int yy = lo_y; yy <= hi_y; ++yy)
                for (int xx = lo_x; xx <= hi_x; ++xx) {
                    const double d = std::hypot(xx - cx, yy - cy);
                    const float v = float(std::clamp((thick - d) * 1.4 + 0.5, 0.0, 1.0));
                    img[size_t(yy) * N + xx] = std::max(img[size_t(yy) * N + xx], v);
                }
        }
    }

    // 3x3 binomial blur + gaussian pixel noise
    std::vector<float> blur(size_t(N) * N, 0.f);
    static const float k[3] = {0.25f, 0.5f, 0.25f};
    for (int y = 0; y < N; ++y)
        for (int x = 0; x < N; ++x) {
            float acc = 0.f;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int sy2 = y + dy, sx2 = x + dx;
                    if (sy2 < 0 || sy2 >= N || sx2 < 0 || sx2 >= N) continue;
                    acc += k[dy + 1] * k[dx + 1] * img[size_t(sy2) * N + sx2];
                }
            blur[size_t(y) * N + x] = acc;
        }
    for (int i = 0; i < N * N; ++i) {
        double v = 255.0 * amp * blur[size_t(i)] + 10.0 * rng.gauss();
        out[i] = uint8_t(std::clamp(v, 0.0, 255.0));
    }
}

void write_be32(std::ofstream& f, uint32_t v) {
    const uint8_t b[4] = {uint8_t(v >> 24), uint8_t(v >> 16), uint8_t(v >> 8), uint8_t(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

void write_idx_pair(const std::string& dir, const std::string& img_name, const std::string& lbl_name,
                    int count, Rng& rng) {
    std::ofstream fi(dir + "/" + img_name, std::ios::binary);
    std::ofstream fl(dir + "/" + lbl_name, std::ios::binary);
    if (!fi || !fl) throw ParseError("cannot write corpus files in '" + dir + "'");
    write_be32(fi, 0x00000803u);
    write_be32(fi, uint32_t(count));
    write_be32(fi, 28);
    write_be32(fi, 28);
    write_be32(fl, 0x00000801u);
    write_be32(fl, uint32_t(count));
    uint8_t px[28 * 28];
    for (int i = 0; i < count; ++i) {
        const int digit = i % 10;
        render_digit(digit, rng, px);
        fi.write(reinterpret_cast<const char*>(px), sizeof px);
        const uint8_t y = uint8_t(digit);
        fl.write(reinterpret_cast<const char*>(&y), 1);
    }
}

}  // namespace

void write_digit_corpus_idx(const std::string& dir, int train_count, int test_count, uint64_t seed) {
    std::filesystem::create_directories(dir);
    Rng rng_train(seed), rng_test(seed ^ 0xabcdef1234567ull);
    write_idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", train_count, rng_train);
    write_idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", test_count, rng_test);
}

namespace {

void render_shape(int cls, Rng& rng, uint8_t* out /*3*32*32 channel-major*/) {
    const int N = 32;
    const int shape = cls % 5, palette = cls / 5;
    const double cx = 15.5 + rng.uniform(-3, 3), cy = 15.5 + rng.uniform(-3, 3);
    const double r = rng.uniform(6.5, 10.5);
    const double rot = rng.uniform(0, 3.14159);

    float base[3], fg[3];
    if (palette == 0) {
        base[0] = 0.25f; base[1] = 0.18f; base[2] = 0.12f;
        fg[0] = 0.95f; fg[1] = 0.55f; fg[2] = 0.15f;
    } else {
        base[0] = 0.10f; base[1] = 0.18f; base[2] = 0.28f;
        fg[0] = 0.20f; fg[1] = 0.65f; fg[2] = 0.95f;
    }

    auto inside = [&](double x, double y) -> bool {
        const double dx0 = x - cx, dy0 = y - cy;
        const double dx = std::cos(rot) * dx0 - std::sin(rot) * dy0;
        const double dy = std::sin(rot) * dx0 + std::cos(rot) * dy0;
        switch (shape) {
            case 0: return dx * dx + dy * dy <= r * r;                       // disc
            case 1: return std::abs(dx) <= r * 0.8 && std::abs(dy) <= r * 0.8;  // square
            case 2: {                                                        // triangle
                if (dy < -r || dy > r * 0.7) return false;
                const double half = (dy + r) / (1.7 * r) * r;
                return std::abs(dx) <= half;
            }
            case 3:  // cross
                return (std::abs(dx) <= r * 0.32 && std::abs(dy) <= r) ||
                       (std::abs(dy) <= r * 0.32 && std::abs(dx) <= r);
            default: {  // ring
                const double d2 = dx * dx + dy * dy;
                return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
            }
        }
    };

    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < N; ++y)
            for (int x = 0; x < N; ++x) {
                const float v = inside(x, y) ? fg[c] : base[c];
                const double noisy = 255.0 * v + 16.0 * rng.gauss();
                out[(size_t(c) * N + y) * N + x] = uint8_t(std::clamp(noisy, 0.0, 255.0));
            }
}

void write_cifar_file(const std::string& path, int count, int first_index, Rng& rng) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot write '" + path + "'");
    uint8_t rec[3073];
    for (int i = 0; i < count; ++i) {
        const int cls = (first_index + i) % 10;
        rec[0] = uint8_t(cls);
        render_shape(cls, rng, rec + 1);
        f.write(reinterpret_cast<const char*>(rec), sizeof rec);
    }
}

}  // namespace

void write_shape_corpus_cifar(const std::string& dir, int train_count, int test_count, uint64_t seed) {
    std::filesystem::create_directories(dir);
    Rng rng_train(seed), rng_test(seed ^ 0x5ca1ab1e5eedull);
    const int per_file = (train_count + 4) / 5;
    int written = 0;
    for (int i = 1; i <= 5; ++i) {
        const int n = std::min(per_file, train_count - written);
        write_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin", std::max(n, 0), written,
                         rng_train);
        written += std::max(n, 0);
    }
    write_cifar_file(dir + "/test_batch.bin", test_count, 0, rng_test);
}

}  // namespace sttn::synth
