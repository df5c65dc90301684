#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hfgd/config.hpp"
#include "hfgd/tensor.hpp"

namespace hfgd {

enum class ShapeKind { disk, rectangle, triangle, thin_line, ring };

const char* shape_kind_name(ShapeKind k);
ShapeKind shape_kind_from_name(const std::string& name);

// Scene recipe for one synthetic sample. Class 0 is background; class c >= 1
// always draws kinds[(c-1) mod kinds.size()], so a class is a shape kind and
// per-class metrics read directly as per-kind metrics.
struct SceneSpec {
    int image_size = 64;  // square, divisible by 32
    int num_classes = 6;
    int shapes_min = 2;
    int shapes_max = 5;
    std::vector<ShapeKind> kinds = {ShapeKind::disk, ShapeKind::rectangle,
                                    ShapeKind::triangle, ShapeKind::thin_line,
                                    ShapeKind::ring};
    double noise_std = 0.02;
    double texture_amp = 0.08;   // sinusoidal texture on top of the base color
    double texture_freq = 0.35;
    int ignore_border_px = 2;    // labeled 255 around the edge

    void validate() const;
    KeyValues to_kv() const;
    static SceneSpec from_kv(const KeyValues& kv);
    bool operator==(const SceneSpec& other) const;
};

struct SegSample {
    Tensor image;                      // [3,H,W], values in [0,1]
    std::vector<std::uint16_t> labels; // H*W entries, < num_classes or 255
};

// Fully determined by (seed, spec): shapes are painted in draw order (later
// shapes overwrite earlier ones), labels mirror the paint exactly, then
// Gaussian pixel noise and the ignore border are applied.
SegSample generate_sample(std::uint64_t seed, const SceneSpec& spec);

struct Dataset {
    SceneSpec spec;
    std::vector<SegSample> samples;
};

// Writes n samples (seeds base_seed .. base_seed+n-1) as HFGT pairs plus one
// manifest.txt holding the serialized spec and one index<TAB>image<TAB>label
// line per sample. Returns the manifest path.
std::string generate_dataset(int n, std::uint64_t base_seed, const SceneSpec& spec,
                             const std::string& out_dir);

Dataset load_dataset(const std::string& dir);

// Dominant non-background class (ties -> lowest index). Throws if the sample
// is background-only so callers can resample.
std::pair<Tensor, int> classification_view(const SegSample& sample);

}  // namespace hfgd
