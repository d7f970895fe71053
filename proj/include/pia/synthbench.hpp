#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pia/hash.hpp"
#include "pia/image_io.hpp"
#include "pia/rng.hpp"
#include "pia/tensor.hpp"

// Synthetic cross-modality clothing-change benchmark. Identity lives in the
// silhouette geometry (grayscale-stable); clothing lives in color and stripe
// texture, which the infrared rendering compresses toward the body intensity.
namespace pia::synth {

enum class Modality { V, I };
enum class Split { train, test };
enum class Coupling { coupled, decoupled };

inline char modality_char(Modality m) { return m == Modality::V ? 'V' : 'I'; }
inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }
inline const char* coupling_name(Coupling c) { return c == Coupling::coupled ? "coupled" : "decoupled"; }

inline Coupling parse_coupling(const std::string& s) {
    if (s == "coupled") return Coupling::coupled;
    if (s == "decoupled") return Coupling::decoupled;
    throw ConfigError("clothing_modality_coupling: expected coupled or decoupled, got '" + s + "'");
}

struct GenConfig {
    std::size_t n_identities = 48;
    std::size_t images_per_identity_per_modality = 12;
    std::size_t image_height = 64;
    std::size_t image_width = 32;
    std::size_t outfits_per_identity = 2;
    Coupling clothing_modality_coupling = Coupling::coupled;
    double noise_level = 0.02;
    std::uint64_t seed = 0;
    double split_ratio = 2.0;  // train identities : test identities

    void validate() const {
        if (n_identities < 2) throw ConfigError("n_identities must be >= 2 (got " + std::to_string(n_identities) + ")");
        if (images_per_identity_per_modality < 1) throw ConfigError("images_per_identity_per_modality must be >= 1");
        if (image_height < 16 || image_width < 8) throw ConfigError("image_height/image_width too small (min 16x8)");
        if (outfits_per_identity < 1) throw ConfigError("outfits_per_identity must be >= 1");
        if (clothing_modality_coupling == Coupling::coupled && outfits_per_identity != 2) {
            throw ConfigError("outfits_per_identity must be 2 in coupled mode");
        }
        if (!(noise_level >= 0.0) || noise_level > 0.5) throw ConfigError("noise_level must lie in [0, 0.5]");
        if (!(split_ratio > 0.0)) throw ConfigError("split_ratio must be > 0");
        const auto t = train_identities();
        if (t == 0 || t >= n_identities) throw ConfigError("split_ratio leaves an empty train or test split");
    }

    /// Identities [0, train_identities()) form the training split.
    std::size_t train_identities() const {
        return static_cast<std::size_t>(
            std::llround(static_cast<double>(n_identities) * split_ratio / (split_ratio + 1.0)));
    }

    std::string canonical() const {
        char buf[512];
        std::snprintf(buf, sizeof buf,
                      "n_identities=%zu;images_per_identity_per_modality=%zu;image_height=%zu;image_width=%zu;"
                      "outfits_per_identity=%zu;clothing_modality_coupling=%s;noise_level=%.17g;seed=%llu;"
                      "split_ratio=%.17g",
                      n_identities, images_per_identity_per_modality, image_height, image_width, outfits_per_identity,
                      coupling_name(clothing_modality_coupling), noise_level, static_cast<unsigned long long>(seed),
                      split_ratio);
        return buf;
    }

    /// FNV-1a 64 of canonical(), as 16 hex digits.
    std::string fingerprint() const { return hex64(fnv1a64(canonical())); }
};

/// Pixel rectangle [top, top+height) x [left, left+width).
struct Rect {
    int top = 0, left = 0, height = 0, width = 0;
    bool contains(int y, int x) const { return y >= top && y < top + height && x >= left && x < left + width; }
};

/// Silhouette proportions of one identity, in 64x32 reference pixels.
struct IdentityFactor {
    int head_w = 0, head_h = 0;
    int torso_w = 0, torso_h = 0;
    int legs_w = 0, legs_h = 0;
};

struct ClothingFactor {
    std::array<double, 3> torso_rgb{};
    std::array<double, 3> legs_rgb{};
    int stripe_period = 2;
};

namespace detail {

inline constexpr double kBackground = 0.06;
inline constexpr std::array<double, 3> kSkin{0.88, 0.72, 0.60};
inline constexpr double kIrBody = 0.62;
inline constexpr double kIrHead = 0.82;
inline constexpr double kIrBackground = 0.10;
inline constexpr double kIrClothingContrast = 0.15;

inline int randint(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

inline double gray(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace detail

inline IdentityFactor identity_factor(std::uint64_t seed, std::size_t identity) {
    Rng rng(mix_seed(seed, 0x1d000000ull + identity));
    IdentityFactor f;
    f.head_w = detail::randint(rng, 6, 14);
    f.head_h = detail::randint(rng, 6, 12);
    f.torso_w = detail::randint(rng, 10, 28);
    f.torso_h = detail::randint(rng, 12, 22);
    f.legs_w = detail::randint(rng, 6, 24);
    f.legs_h = detail::randint(rng, 12, 22);
    return f;
}

inline ClothingFactor clothing_factor(std::uint64_t seed, std::size_t identity, std::size_t outfit) {
    Rng rng(mix_seed(seed, 0xc1000000ull + identity * 64 + outfit));
    ClothingFactor c;
    for (auto& v : c.torso_rgb) v = rng.uniform(0.1, 0.9);
    // One saturated channel keeps the stripe contrast against the complement high.
    const auto strong = static_cast<std::size_t>(rng.below(3));
    c.torso_rgb[strong] = rng.bernoulli(0.5) ? rng.uniform(0.85, 0.95) : rng.uniform(0.05, 0.15);
    for (auto& v : c.legs_rgb) v = rng.uniform(0.25, 0.95);
    c.stripe_period = detail::randint(rng, 2, 5);
    return c;
}

/// Body regions for an identity in an image of the given size, shifted by (dy, dx).
struct BodyLayout {
    Rect head, torso, legs;
};

inline BodyLayout body_layout(const IdentityFactor& f, std::size_t height, std::size_t width, int dy = 0, int dx = 0) {
    const double sy = static_cast<double>(height) / 64.0, sx = static_cast<double>(width) / 32.0;
    const auto rect = [&](int cy, int h, int w) {
        const int hh = std::max(1, static_cast<int>(std::lround(h * sy)));
        const int ww = std::max(1, static_cast<int>(std::lround(w * sx)));
        const int top = static_cast<int>(std::lround(cy * sy)) - hh / 2 + dy;
        const int left = static_cast<int>(width) / 2 - ww / 2 + dx;
        return Rect{top, left, hh, ww};
    };
    return {rect(9, f.head_h, f.head_w), rect(27, f.torso_h, f.torso_w), rect(48, f.legs_h, f.legs_w)};
}

struct RenderGeometry {
    std::size_t height = 64;
    std::size_t width = 32;
    double noise_level = 0.02;
};

/// Renders one [3,H,W] image in [0,1]. Per-image jitter (±1 px shift,
/// ±8% gain) and pixel noise are drawn from `rng`.
inline Tensor render_sample(const IdentityFactor& idf, const ClothingFactor& cf, Modality modality, Rng& rng,
                            const RenderGeometry& geo = {}) {
    const int h = static_cast<int>(geo.height), w = static_cast<int>(geo.width);
    const int dy = detail::randint(rng, -1, 1), dx = detail::randint(rng, -1, 1);
    const double gain = rng.uniform(0.92, 1.08);
    const BodyLayout body = body_layout(idf, geo.height, geo.width, dy, dx);
    Tensor img = Tensor::zeros({3, geo.height, geo.width});
    const auto put = [&](int y, int x, const std::array<double, 3>& c) {
        for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * geo.height + y) * geo.width + x] = c[ch];
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            std::array<double, 3> vis{detail::kBackground, detail::kBackground, detail::kBackground};
            double ir = detail::kIrBackground;
            if (body.head.contains(y, x)) {
                vis = detail::kSkin;
                ir = detail::kIrHead;
            } else if (body.torso.contains(y, x) || body.legs.contains(y, x)) {
                if (body.torso.contains(y, x)) {
                    const bool alt = ((y - body.torso.top) / cf.stripe_period) % 2 == 1;
                    for (std::size_t ch = 0; ch < 3; ++ch) vis[ch] = alt ? 1.0 - cf.torso_rgb[ch] : cf.torso_rgb[ch];
                } else {
                    vis = cf.legs_rgb;
                }
                ir = detail::kIrBody + detail::kIrClothingContrast * (detail::gray(vis) - detail::kIrBody);
            }
            if (modality == Modality::V) {
                for (auto& v : vis) v *= gain;
                put(y, x, vis);
            } else {
                const double g = ir * gain;
                put(y, x, {g, g, g});
            }
        }
    }
    if (geo.noise_level > 0.0) {
        const std::size_t hw = geo.height * geo.width;
        for (std::size_t p = 0; p < hw; ++p) {
            if (modality == Modality::V) {
                for (std::size_t ch = 0; ch < 3; ++ch) img[ch * hw + p] += geo.noise_level * rng.normal();
            } else {
                const double n = geo.noise_level * rng.normal();
                for (std::size_t ch = 0; ch < 3; ++ch) img[ch * hw + p] += n;
            }
        }
    }
    for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
    return img;
}

/// Standard deviation over all channel values inside the (unjittered) torso.
inline double torso_contrast(const Tensor& img, const IdentityFactor& idf) {
    const std::size_t h = img.dim(1), w = img.dim(2);
    const Rect torso = body_layout(idf, h, w).torso;
    std::vector<double> vals;
    // Shrink by one pixel so the ±1 jitter never pulls background in.
    for (int y = torso.top + 1; y < torso.top + torso.height - 1; ++y) {
        for (int x = torso.left + 1; x < torso.left + torso.width - 1; ++x) {
            for (std::size_t c = 0; c < 3; ++c) vals.push_back(img[(c * h + y) * w + x]);
        }
    }
    if (vals.size() < 2) return 0.0;
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    return std::sqrt(var / static_cast<double>(vals.size()));
}

struct ManifestRow {
    std::string path;
    std::size_t identity = 0;
    std::size_t clothing = 0;
    Modality modality = Modality::V;
    Split split = Split::train;

    bool operator==(const ManifestRow&) const = default;
};

class ManifestError : public Error {
public:
    ManifestError(const std::string& what, std::size_t line = 0, std::size_t column = 0)
        : Error(line ? "manifest line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what
                     : "manifest: " + what),
          line_(line),
          column_(column) {}
    std::size_t line() const { return line_; }
    std::size_t column() const { return column_; }

private:
    std::size_t line_, column_;
};

inline constexpr const char* kManifestHeader = "path,identity,clothing,modality,split";

struct Manifest {
    std::filesystem::path root;  // directory holding the manifest
    std::vector<ManifestRow> rows;
    std::string fingerprint;
    std::size_t image_height = 0;
    std::size_t image_width = 0;

    /// Decodes the pixels of one row as [3,H,W].
    Tensor load_pixels(const ManifestRow& row) const {
        Tensor t = image_io::read_ppm(root / row.path);
        if (image_height && (t.dim(1) != image_height || t.dim(2) != image_width)) {
            throw ShapeError("image " + row.path + " has shape " + to_string(t.shape) + ", expected [3," +
                             std::to_string(image_height) + "," + std::to_string(image_width) + "]");
        }
        return t;
    }

    std::vector<ManifestRow> select(Split split) const {
        std::vector<ManifestRow> out;
        std::copy_if(rows.begin(), rows.end(), std::back_inserter(out), [&](const auto& r) { return r.split == split; });
        return out;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os << kManifestHeader << '\n';
        for (const auto& r : rows) {
            os << r.path << ',' << r.identity << ',' << r.clothing << ',' << modality_char(r.modality) << ','
               << split_name(r.split) << '\n';
        }
        os << "# fingerprint=" << fingerprint << '\n';
        return os.str();
    }
};

inline std::string image_name(std::size_t identity, Modality m, std::size_t index) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "images/id%04zu_%c_%03zu.ppm", identity, modality_char(m), index);
    return buf;
}

/// Writes the dataset under `out_dir` and returns its manifest. The
/// manifest is written last via a temporary file and rename.
inline Manifest generate_dataset(const GenConfig& cfg, const std::filesystem::path& out_dir, bool overwrite = false) {
    namespace fs = std::filesystem;
    cfg.validate();
    std::error_code ec;
    if (fs::exists(out_dir)) {
        if (!fs::is_directory(out_dir)) throw IoError(out_dir.string() + " exists and is not a directory");
        if (!fs::is_empty(out_dir)) {
            if (!overwrite) throw IoError("output directory " + out_dir.string() + " is not empty (use overwrite)");
            fs::remove_all(out_dir / "images", ec);
            fs::remove(out_dir / "manifest.csv", ec);
        }
    }
    fs::create_directories(out_dir / "images", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

    Manifest m;
    m.root = out_dir;
    m.fingerprint = cfg.fingerprint();
    m.image_height = cfg.image_height;
    m.image_width = cfg.image_width;
    const RenderGeometry geo{cfg.image_height, cfg.image_width, cfg.noise_level};
    const std::size_t n_train = cfg.train_identities();
    for (std::size_t id = 0; id < cfg.n_identities; ++id) {
        const IdentityFactor idf = identity_factor(cfg.seed, id);
        const Split split = id < n_train ? Split::train : Split::test;
        for (Modality mod : {Modality::V, Modality::I}) {
            for (std::size_t j = 0; j < cfg.images_per_identity_per_modality; ++j) {
                std::size_t outfit = 0;
                if (cfg.clothing_modality_coupling == Coupling::coupled) {
                    outfit = mod == Modality::V ? 0 : 1;
                } else {
                    outfit = j % cfg.outfits_per_identity;
                }
                const ClothingFactor cf = clothing_factor(cfg.seed, id, outfit);
                Rng rng(mix_seed(cfg.seed, ((id * 2 + (mod == Modality::V ? 0 : 1)) << 20) + j));
                const Tensor img = render_sample(idf, cf, mod, rng, geo);
                ManifestRow row{image_name(id, mod, j), id, id * cfg.outfits_per_identity + outfit, mod, split};
                image_io::write_ppm(out_dir / row.path, img);
                m.rows.push_back(std::move(row));
            }
        }
    }
    const fs::path tmp = out_dir / "manifest.csv.tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << m.to_csv();
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, out_dir / "manifest.csv", ec);
    if (ec) throw IoError("cannot publish manifest: " + ec.message());
    return m;
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::size_t parse_label(const std::string& s, std::size_t line, std::size_t col) {
    if (s.empty() || s.size() > 9 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw ManifestError("expected a non-negative integer label, got '" + s + "'", line, col);
    }
    return static_cast<std::size_t>(std::stoul(s));
}

inline void check_dense(const std::set<std::size_t>& labels, const char* what) {
    if (labels.empty()) return;
    if (*labels.rbegin() + 1 != labels.size()) {
        std::string missing;
        std::size_t expect = 0;
        for (auto l : labels) {
            if (l != expect) {
                missing = std::to_string(expect);
                break;
            }
            ++expect;
        }
        throw ManifestError(std::string("non-dense ") + what + " labels (missing " + missing + ")");
    }
}

}  // namespace detail

/// Parses and validates a manifest. Image files are checked for existence
/// and, when a shape is given, for matching PPM headers; pixels stay on disk.
inline Manifest load_manifest(const std::filesystem::path& path, std::size_t expect_height = 0,
                              std::size_t expect_width = 0) {
    namespace fs = std::filesystem;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing manifest file " + path.string());
    Manifest m;
    m.root = path.parent_path();
    m.image_height = expect_height;
    m.image_width = expect_width;
    std::string line;
    std::size_t lineno = 0;
    bool header = false;
    std::set<std::size_t> ids, clothes;
    std::map<std::size_t, Split> id_split;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') throw ManifestError("CRLF line ending", lineno, line.size());
        if (!header) {
            if (line != kManifestHeader) throw ManifestError("expected header '" + std::string(kManifestHeader) + "'", lineno, 1);
            header = true;
            continue;
        }
        if (line.empty()) continue;
        if (line[0] == '#') {
            const std::string key = "# fingerprint=";
            if (line.rfind(key, 0) == 0) m.fingerprint = line.substr(key.size());
            continue;
        }
        const auto f = detail::split_csv(line);
        if (f.size() != 5) {
            throw ManifestError("expected 5 fields, got " + std::to_string(f.size()), lineno, 1);
        }
        std::size_t col = 1;
        std::array<std::size_t, 5> cols{};
        for (std::size_t i = 0; i < 5; ++i) {
            cols[i] = col;
            col += f[i].size() + 1;
        }
        ManifestRow r;
        r.path = f[0];
        if (r.path.empty()) throw ManifestError("empty path", lineno, cols[0]);
        r.identity = detail::parse_label(f[1], lineno, cols[1]);
        r.clothing = detail::parse_label(f[2], lineno, cols[2]);
        if (f[3] == "V") r.modality = Modality::V;
        else if (f[3] == "I") r.modality = Modality::I;
        else throw ManifestError("modality must be V or I, got '" + f[3] + "'", lineno, cols[3]);
        if (f[4] == "train") r.split = Split::train;
        else if (f[4] == "test") r.split = Split::test;
        else throw ManifestError("split must be train or test, got '" + f[4] + "'", lineno, cols[4]);

        const fs::path img = m.root / r.path;
        if (!fs::exists(img)) throw IoError("manifest line " + std::to_string(lineno) + ": missing image file " + img.string());
        if (expect_height) {
            std::ifstream probe(img, std::ios::binary);
            std::string magic;
            std::size_t w = 0, h = 0;
            probe >> magic >> w >> h;
            if (magic != "P6" || w != expect_width || h != expect_height) {
                throw ShapeError("manifest line " + std::to_string(lineno) + ": image " + r.path + " is not a " +
                                 std::to_string(expect_height) + "x" + std::to_string(expect_width) + " P6 image");
            }
        }
        auto [it, fresh] = id_split.emplace(r.identity, r.split);
        if (!fresh && it->second != r.split) {
            throw ManifestError("identity " + std::to_string(r.identity) + " appears in both splits", lineno, cols[4]);
        }
        ids.insert(r.identity);
        clothes.insert(r.clothing);
        m.rows.push_back(std::move(r));
    }
    if (!header) throw ManifestError("empty manifest", 1, 1);
    detail::check_dense(ids, "identity");
    detail::check_dense(clothes, "clothing");
    return m;
}

}  // namespace pia::synth
