#include "hfgd/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hfgd {

static void put_u32_le(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {
        static_cast<unsigned char>(v & 0xFF),
        static_cast<unsigned char>((v >> 8) & 0xFF),
        static_cast<unsigned char>((v >> 16) & 0xFF),
        static_cast<unsigned char>((v >> 24) & 0xFF),
    };
    os.write(reinterpret_cast<const char*>(b), 4);
}

static std::uint32_t get_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

static void put_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

static std::uint64_t get_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

static void write_header(std::ostream& os, HfgtDtype dtype, const Shape& shape) {
    if (shape.empty() || shape.size() > 255) {
        throw std::runtime_error("hfgt: unsupported rank " + std::to_string(shape.size()));
    }
    os.write("HFGT", 4);
    const unsigned char meta[2] = {0x01, static_cast<unsigned char>(dtype)};
    os.write(reinterpret_cast<const char*>(meta), 2);
    const unsigned char ndim = static_cast<unsigned char>(shape.size());
    os.write(reinterpret_cast<const char*>(&ndim), 1);
    for (auto d : shape) {
        if (d <= 0 || d > 0xFFFFFFFFLL) {
            throw std::runtime_error("hfgt: dim out of range in " + shape_str(shape));
        }
        put_u32_le(os, static_cast<std::uint32_t>(d));
    }
}

void write_hfgt(std::ostream& os, const Shape& shape, const std::vector<double>& data) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
        throw std::runtime_error("hfgt: payload size does not match " + shape_str(shape));
    }
    write_header(os, HfgtDtype::f64, shape);
    for (double v : data) put_u64_le(os, std::bit_cast<std::uint64_t>(v));
    if (!os) throw std::runtime_error("hfgt: write failed");
}

void write_hfgt(std::ostream& os, const Shape& shape,
                const std::vector<std::uint16_t>& data) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
        throw std::runtime_error("hfgt: payload size does not match " + shape_str(shape));
    }
    write_header(os, HfgtDtype::u16, shape);
    for (std::uint16_t v : data) {
        const unsigned char b[2] = {static_cast<unsigned char>(v & 0xFF),
                                    static_cast<unsigned char>((v >> 8) & 0xFF)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
    if (!os) throw std::runtime_error("hfgt: write failed");
}

HfgtRecord read_hfgt(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "HFGT", 4) != 0) {
        throw std::runtime_error("hfgt: bad magic");
    }
    unsigned char version, dtype, ndim;
    is.read(reinterpret_cast<char*>(&version), 1);
    is.read(reinterpret_cast<char*>(&dtype), 1);
    is.read(reinterpret_cast<char*>(&ndim), 1);
    if (!is || version != 0x01) throw std::runtime_error("hfgt: unsupported version");
    if (dtype != 0x01 && dtype != 0x02) throw std::runtime_error("hfgt: unknown dtype");
    if (ndim == 0) throw std::runtime_error("hfgt: zero rank");

    HfgtRecord rec;
    rec.dtype = static_cast<HfgtDtype>(dtype);
    rec.shape.resize(ndim);
    for (int d = 0; d < ndim; ++d) rec.shape[static_cast<size_t>(d)] = get_u32_le(is);
    const std::int64_t n = shape_numel(rec.shape);
    if (rec.dtype == HfgtDtype::f64) {
        rec.f64.resize(static_cast<size_t>(n));
        for (auto& v : rec.f64) v = std::bit_cast<double>(get_u64_le(is));
    } else {
        rec.u16.resize(static_cast<size_t>(n));
        for (auto& v : rec.u16) {
            unsigned char b[2];
            is.read(reinterpret_cast<char*>(b), 2);
            v = static_cast<std::uint16_t>(b[0] | (b[1] << 8));
        }
    }
    if (!is) throw std::runtime_error("hfgt: truncated payload");
    return rec;
}

void save_hfgt(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    write_hfgt(os, t.shape(), t.data());
}

void save_hfgt_u16(const std::string& path, const Shape& shape,
                   const std::vector<std::uint16_t>& data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    write_hfgt(os, shape, data);
}

HfgtRecord load_hfgt(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for read: " + path);
    return read_hfgt(is);
}

void write_ppm(const std::string& path, int width, int height,
               const std::vector<Rgb>& pixels) {
    if (static_cast<size_t>(width) * static_cast<size_t>(height) != pixels.size()) {
        throw std::runtime_error("ppm: pixel count does not match dimensions");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "P6\n" << width << " " << height << "\n255\n";
    for (const Rgb& p : pixels) {
        os.write(reinterpret_cast<const char*>(p.data()), 3);
    }
    if (!os) throw std::runtime_error("ppm: write failed");
}

Rgb hsv_to_rgb(double hue_deg, double s, double v) {
    double h = std::fmod(hue_deg, 360.0);
    if (h < 0) h += 360.0;
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1)      { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else             { r = c; b = x; }
    const double m = v - c;
    auto q = [m](double u) {
        return static_cast<std::uint8_t>(std::lround((u + m) * 255.0));
    };
    return {q(r), q(g), q(b)};
}

std::vector<Rgb> seg_palette(int num_classes) {
    std::vector<Rgb> pal(static_cast<size_t>(num_classes));
    pal[0] = {128, 128, 128};
    for (int c = 1; c < num_classes; ++c) {
        pal[static_cast<size_t>(c)] =
            hsv_to_rgb(360.0 * c / num_classes, 0.75, 0.9);
    }
    return pal;
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for read: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << content;
    if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace hfgd
