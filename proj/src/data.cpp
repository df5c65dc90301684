#include "hfgd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <stdexcept>

#include "hfgd/io.hpp"
#include "hfgd/rng.hpp"

namespace hfgd {

namespace fs = std::filesystem;

const char* shape_kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::disk: return "disk";
        case ShapeKind::rectangle: return "rectangle";
        case ShapeKind::triangle: return "triangle";
        case ShapeKind::thin_line: return "thin_line";
        case ShapeKind::ring: return "ring";
    }
    throw std::runtime_error("shape_kind_name: bad enum value");
}

ShapeKind shape_kind_from_name(const std::string& name) {
    for (ShapeKind k : {ShapeKind::disk, ShapeKind::rectangle, ShapeKind::triangle,
                        ShapeKind::thin_line, ShapeKind::ring}) {
        if (name == shape_kind_name(k)) return k;
    }
    throw std::runtime_error("unknown shape kind '" + name + "'");
}

void SceneSpec::validate() const {
    if (image_size < 32 || image_size % 32 != 0) {
        throw std::runtime_error("scene spec: image_size must be a positive multiple of 32");
    }
    if (num_classes < 2) throw std::runtime_error("scene spec: num_classes must be >= 2");
    if (shapes_min < 1 || shapes_max < shapes_min) {
        throw std::runtime_error("scene spec: need 1 <= shapes_min <= shapes_max");
    }
    if (kinds.empty()) throw std::runtime_error("scene spec: kinds must not be empty");
    if (noise_std < 0 || texture_amp < 0 || texture_freq < 0) {
        throw std::runtime_error("scene spec: noise/texture parameters must be >= 0");
    }
    if (ignore_border_px < 0 || ignore_border_px >= image_size / 4) {
        throw std::runtime_error("scene spec: ignore_border_px out of range");
    }
}

KeyValues SceneSpec::to_kv() const {
    KeyValues kv;
    kv.set_int("image_size", image_size);
    kv.set_int("num_classes", num_classes);
    kv.set_int("shapes_min", shapes_min);
    kv.set_int("shapes_max", shapes_max);
    std::string ks;
    for (size_t i = 0; i < kinds.size(); ++i) {
        if (i) ks += ',';
        ks += shape_kind_name(kinds[i]);
    }
    kv.set("kinds", ks);
    kv.set_double("noise_std", noise_std);
    kv.set_double("texture_amp", texture_amp);
    kv.set_double("texture_freq", texture_freq);
    kv.set_int("ignore_border_px", ignore_border_px);
    return kv;
}

SceneSpec SceneSpec::from_kv(const KeyValues& kv) {
    SceneSpec s;
    s.image_size = static_cast<int>(kv.get_int("image_size"));
    s.num_classes = static_cast<int>(kv.get_int("num_classes"));
    s.shapes_min = static_cast<int>(kv.get_int("shapes_min"));
    s.shapes_max = static_cast<int>(kv.get_int("shapes_max"));
    s.kinds.clear();
    std::stringstream ks(kv.get("kinds"));
    std::string item;
    while (std::getline(ks, item, ',')) s.kinds.push_back(shape_kind_from_name(item));
    s.noise_std = kv.get_double("noise_std");
    s.texture_amp = kv.get_double("texture_amp");
    s.texture_freq = kv.get_double("texture_freq");
    s.ignore_border_px = static_cast<int>(kv.get_int("ignore_border_px"));
    s.validate();
    return s;
}

bool SceneSpec::operator==(const SceneSpec& other) const {
    return image_size == other.image_size && num_classes == other.num_classes &&
           shapes_min == other.shapes_min && shapes_max == other.shapes_max &&
           kinds == other.kinds && noise_std == other.noise_std &&
           texture_amp == other.texture_amp && texture_freq == other.texture_freq &&
           ignore_border_px == other.ignore_border_px;
}

// --- rasterizers -------------------------------------------------------------
// Shapes rasterize into a pixel list first; the caller commits the list only
// if it is big enough, so degenerate draws are retried without un-painting.

namespace {

using PixelList = std::vector<std::pair<int, int>>;  // (row, col)

void raster_disk(PixelList& px, int ci, int cj, int r, int size) {
    for (int i = std::max(0, ci - r); i <= std::min(size - 1, ci + r); ++i) {
        for (int j = std::max(0, cj - r); j <= std::min(size - 1, cj + r); ++j) {
            const int di = i - ci, dj = j - cj;
            if (di * di + dj * dj <= r * r) px.push_back({i, j});
        }
    }
}

void raster_ring(PixelList& px, int ci, int cj, int r_out, int r_in, int size) {
    for (int i = std::max(0, ci - r_out); i <= std::min(size - 1, ci + r_out); ++i) {
        for (int j = std::max(0, cj - r_out); j <= std::min(size - 1, cj + r_out); ++j) {
            const int di = i - ci, dj = j - cj;
            const int d2 = di * di + dj * dj;
            if (d2 <= r_out * r_out && d2 >= r_in * r_in) px.push_back({i, j});
        }
    }
}

void raster_rect(PixelList& px, int r0, int c0, int r1, int c1, int size) {
    for (int i = std::max(0, r0); i <= std::min(size - 1, r1); ++i) {
        for (int j = std::max(0, c0); j <= std::min(size - 1, c1); ++j) {
            px.push_back({i, j});
        }
    }
}

double edge_fn(double ax, double ay, double bx, double by, double px_, double py) {
    return (bx - ax) * (py - ay) - (by - ay) * (px_ - ax);
}

void raster_triangle(PixelList& px, double ar, double ac, double br, double bc,
                     double cr, double cc, int size) {
    const int lo_r = std::max(0, static_cast<int>(std::floor(std::min({ar, br, cr}))));
    const int hi_r = std::min(size - 1, static_cast<int>(std::ceil(std::max({ar, br, cr}))));
    const int lo_c = std::max(0, static_cast<int>(std::floor(std::min({ac, bc, cc}))));
    const int hi_c = std::min(size - 1, static_cast<int>(std::ceil(std::max({ac, bc, cc}))));
    const double area = edge_fn(ac, ar, bc, br, cc, cr);
    for (int i = lo_r; i <= hi_r; ++i) {
        for (int j = lo_c; j <= hi_c; ++j) {
            const double x = j + 0.5, y = i + 0.5;
            const double e0 = edge_fn(ac, ar, bc, br, x, y);
            const double e1 = edge_fn(bc, br, cc, cr, x, y);
            const double e2 = edge_fn(cc, cr, ac, ar, x, y);
            if (area >= 0 ? (e0 >= 0 && e1 >= 0 && e2 >= 0)
                          : (e0 <= 0 && e1 <= 0 && e2 <= 0)) {
                px.push_back({i, j});
            }
        }
    }
}

// Bresenham; width 2 adds the neighbor across the minor axis, keeping the
// painted count at most 2*(chebyshev_length + 1).
void raster_line(PixelList& px, int r0, int c0, int r1, int c1, int width, int size) {
    const int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
    const int sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
    const bool col_major = dc >= dr;  // minor axis is the row when stepping cols
    int err = (dc > dr ? dc : -dr) / 2;
    int i = r0, j = c0;
    auto put = [&](int pi, int pj) {
        if (pi >= 0 && pi < size && pj >= 0 && pj < size) px.push_back({pi, pj});
    };
    while (true) {
        put(i, j);
        if (width >= 2) {
            if (col_major) {
                put(i + 1, j);
            } else {
                put(i, j + 1);
            }
        }
        if (i == r1 && j == c1) break;
        const int e2 = err;
        if (e2 > -dc) {
            err -= dr;
            j += sc;
        }
        if (e2 < dr) {
            err += dc;
            i += sr;
        }
    }
}

}  // namespace

// --- sample generation ----------------------------------------------------------

SegSample generate_sample(std::uint64_t seed, const SceneSpec& spec) {
    spec.validate();
    Rng rng(mix_seed(seed, 0xda7aULL));
    const int S = spec.image_size;
    const int C = spec.num_classes;

    std::vector<std::uint16_t> labels(static_cast<size_t>(S) * S, 0);
    const int nshapes =
        spec.shapes_min +
        static_cast<int>(rng.uniform_int(
            static_cast<std::uint64_t>(spec.shapes_max - spec.shapes_min + 1)));

    for (int s = 0; s < nshapes; ++s) {
        const int cls = 1 + static_cast<int>(rng.uniform_int(
                                static_cast<std::uint64_t>(C - 1)));
        const ShapeKind kind =
            spec.kinds[static_cast<size_t>(cls - 1) % spec.kinds.size()];
        PixelList px;
        for (int attempt = 0; attempt < 32; ++attempt) {
            px.clear();
            auto coord = [&](int lo, int hi) {  // inclusive
                return lo + static_cast<int>(rng.uniform_int(
                                static_cast<std::uint64_t>(hi - lo + 1)));
            };
            switch (kind) {
                case ShapeKind::disk: {
                    const int r = coord(4, std::max(4, S / 4));
                    raster_disk(px, coord(r, S - 1 - r), coord(r, S - 1 - r), r, S);
                    break;
                }
                case ShapeKind::rectangle: {
                    const int h = coord(4, S / 3), w = coord(4, S / 3);
                    const int r0 = coord(0, S - 1 - h), c0 = coord(0, S - 1 - w);
                    raster_rect(px, r0, c0, r0 + h, c0 + w, S);
                    break;
                }
                case ShapeKind::triangle: {
                    const double ar = coord(1, S - 2), ac = coord(1, S - 2);
                    const double br = coord(1, S - 2), bc = coord(1, S - 2);
                    const double cr = coord(1, S - 2), cc = coord(1, S - 2);
                    if (std::abs(edge_fn(ac, ar, bc, br, cc, cr)) < S * 2.0) break;
                    raster_triangle(px, ar, ac, br, bc, cr, cc, S);
                    break;
                }
                case ShapeKind::thin_line: {
                    const int r0 = coord(2, S - 3), c0 = coord(2, S - 3);
                    const int r1 = coord(2, S - 3), c1 = coord(2, S - 3);
                    if (std::max(std::abs(r1 - r0), std::abs(c1 - c0)) < S / 4) break;
                    const int width = 1 + static_cast<int>(rng.uniform_int(2));
                    raster_line(px, r0, c0, r1, c1, width, S);
                    break;
                }
                case ShapeKind::ring: {
                    const int r = coord(6, std::max(6, S / 4));
                    const int r_in = std::max(2, (r * 11) / 20);
                    raster_ring(px, coord(r, S - 1 - r), coord(r, S - 1 - r), r, r_in, S);
                    break;
                }
            }
            if (static_cast<int>(px.size()) >= (kind == ShapeKind::thin_line ? 4 : 8)) {
                break;
            }
        }
        for (const auto& [i, j] : px) {
            labels[static_cast<size_t>(i) * S + j] = static_cast<std::uint16_t>(cls);
        }
    }

    // paint: per-class base color, a class-specific sinusoidal texture, noise
    std::vector<double> img(static_cast<size_t>(3) * S * S);
    const std::vector<Rgb> palette = seg_palette(C);
    std::vector<std::array<double, 3>> base(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) {
        const Rgb& rgb = palette[static_cast<size_t>(c)];
        base[static_cast<size_t>(c)] = {rgb[0] / 255.0, rgb[1] / 255.0, rgb[2] / 255.0};
    }
    for (int i = 0; i < S; ++i) {
        for (int j = 0; j < S; ++j) {
            const int cls = labels[static_cast<size_t>(i) * S + j];
            const double theta = 2.39996322972865332 * (cls + 1);
            const double wave =
                spec.texture_amp *
                std::sin(spec.texture_freq * (i * std::cos(theta) + j * std::sin(theta)) +
                         1.7 * cls);
            for (int ch = 0; ch < 3; ++ch) {
                img[(static_cast<size_t>(ch) * S + i) * S + j] =
                    base[static_cast<size_t>(cls)][static_cast<size_t>(ch)] + wave;
            }
        }
    }
    for (auto& v : img) {
        if (spec.noise_std > 0) v += rng.normal() * spec.noise_std;
        v = std::min(1.0, std::max(0.0, v));
    }

    const int b = spec.ignore_border_px;
    for (int i = 0; i < S; ++i) {
        for (int j = 0; j < S; ++j) {
            if (i < b || j < b || i >= S - b || j >= S - b) {
                labels[static_cast<size_t>(i) * S + j] = 255;
            }
        }
    }

    SegSample out;
    out.image = Tensor::from_data({3, S, S}, std::move(img));
    out.labels = std::move(labels);
    return out;
}

// --- dataset files ----------------------------------------------------------------

std::string generate_dataset(int n, std::uint64_t base_seed, const SceneSpec& spec,
                             const std::string& out_dir) {
    spec.validate();
    if (n < 1) throw std::runtime_error("generate_dataset: n must be >= 1");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw std::runtime_error("generate_dataset: cannot create " + out_dir + ": " +
                                 ec.message());
    }
    std::ostringstream manifest;
    manifest << spec.to_kv().serialize() << '\n';
    for (int i = 0; i < n; ++i) {
        SegSample s = generate_sample(base_seed + static_cast<std::uint64_t>(i), spec);
        char img_name[32], lab_name[32];
        std::snprintf(img_name, sizeof img_name, "sample_%05d_image.hfgt", i);
        std::snprintf(lab_name, sizeof lab_name, "sample_%05d_label.hfgt", i);
        save_hfgt((fs::path(out_dir) / img_name).string(), s.image);
        save_hfgt_u16((fs::path(out_dir) / lab_name).string(),
                      {spec.image_size, spec.image_size}, s.labels);
        manifest << i << '\t' << img_name << '\t' << lab_name << '\n';
    }
    const std::string mpath = (fs::path(out_dir) / "manifest.txt").string();
    write_text_file(mpath, manifest.str());
    return mpath;
}

Dataset load_dataset(const std::string& dir) {
    const std::string mpath = (fs::path(dir) / "manifest.txt").string();
    std::istringstream manifest(read_text_file(mpath));
    std::string spec_lines, line;
    std::vector<std::pair<std::string, std::string>> entries;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        if (line.find('\t') == std::string::npos) {
            spec_lines += line;
            spec_lines += '\n';
            continue;
        }
        std::istringstream ls(line);
        std::string idx, img, lab;
        if (!std::getline(ls, idx, '\t') || !std::getline(ls, img, '\t') ||
            !std::getline(ls, lab)) {
            throw std::runtime_error("load_dataset: malformed manifest line in " + mpath);
        }
        entries.push_back({img, lab});
    }
    Dataset ds;
    ds.spec = SceneSpec::from_kv(KeyValues::parse(spec_lines));
    ds.samples.reserve(entries.size());
    for (const auto& [img, lab] : entries) {
        SegSample s;
        HfgtRecord ir = load_hfgt((fs::path(dir) / img).string());
        if (ir.dtype != HfgtDtype::f64 || ir.shape.size() != 3) {
            throw std::runtime_error("load_dataset: " + img + " is not a float64 image");
        }
        s.image = Tensor::from_data(ir.shape, std::move(ir.f64));
        HfgtRecord lr = load_hfgt((fs::path(dir) / lab).string());
        if (lr.dtype != HfgtDtype::u16 || lr.shape.size() != 2) {
            throw std::runtime_error("load_dataset: " + lab + " is not a uint16 label map");
        }
        s.labels = std::move(lr.u16);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

std::pair<Tensor, int> classification_view(const SegSample& sample) {
    std::vector<std::int64_t> counts(256, 0);
    for (std::uint16_t y : sample.labels) ++counts[y];
    int best = -1;
    std::int64_t best_n = 0;
    for (int c = 1; c < 255; ++c) {
        if (counts[static_cast<size_t>(c)] > best_n) {
            best = c;
            best_n = counts[static_cast<size_t>(c)];
        }
    }
    if (best < 0) {
        throw std::runtime_error("classification_view: sample is background-only");
    }
    return {sample.image, best};
}

}  // namespace hfgd
