#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "hfgd/tensor.hpp"

namespace hfgd {

// Binary tensor container used for checkpoints, datasets and prediction dumps.
// Layout: magic "HFGT", version byte 0x01, dtype byte (0x01 float64,
// 0x02 uint16), ndim byte, ndim little-endian uint32 dims, row-major payload
// (little-endian). Serialization is explicit about byte order so files are
// portable and round-trips are byte-exact.
enum class HfgtDtype : std::uint8_t { f64 = 0x01, u16 = 0x02 };

struct HfgtRecord {
    HfgtDtype dtype = HfgtDtype::f64;
    Shape shape;
    std::vector<double> f64;
    std::vector<std::uint16_t> u16;

    std::int64_t numel() const { return shape_numel(shape); }
};

void write_hfgt(std::ostream& os, const Shape& shape, const std::vector<double>& data);
void write_hfgt(std::ostream& os, const Shape& shape,
                const std::vector<std::uint16_t>& data);
HfgtRecord read_hfgt(std::istream& is);

void save_hfgt(const std::string& path, const Tensor& t);
void save_hfgt_u16(const std::string& path, const Shape& shape,
                   const std::vector<std::uint16_t>& data);
HfgtRecord load_hfgt(const std::string& path);

using Rgb = std::array<std::uint8_t, 3>;

// Binary PPM ("P6 W H 255" header), 8-bit RGB.
void write_ppm(const std::string& path, int width, int height,
               const std::vector<Rgb>& pixels);

Rgb hsv_to_rgb(double hue_deg, double s, double v);

// Render colors for class ids: class 0 is neutral gray, class c > 0 gets
// hue 360*c/C at S=0.75, V=0.9.
std::vector<Rgb> seg_palette(int num_classes);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace hfgd
