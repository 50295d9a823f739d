#pragma once

#include <string>
#include <vector>

#include "ct/tensor.hpp"

namespace ct::synthdata {

enum class TextureFamily { stripes, checker, dots };

TextureFamily texture_from_string(const std::string& s);
std::string to_string(TextureFamily f);

struct SceneConfig {
    int width = 64, height = 48;
    int frames = 8;
    double motion_amplitude = 1.0;
    TextureFamily texture = TextureFamily::stripes;
    bool mixed_textures = true;  // pick per seed, overriding `texture`
    double mask_area_min = 0.10;
    double mask_area_max = 0.25;
    std::uint64_t seed = 0;

    void validate() const;
};

// Frame-to-garment-image placement of the patch for one frame.
struct GarmentPlacement {
    double cx, cy;     // patch center in frame coordinates
    double theta;      // rotation, radians
    double scale;
};

struct SampleTuple {
    std::vector<Tensor> source;    // [3,H,W] each, values k/255
    std::vector<Tensor> agnostic;  // [3,H,W]
    std::vector<Tensor> masks;     // [H,W], values in {0,1}
    std::vector<Tensor> poses;     // [P,H,W]
    Tensor garment;                // [3,H,W], canonical patch on gray canvas

    int frames() const { return static_cast<int>(source.size()); }
    void validate() const;  // throws LoadError naming the violated invariant
};

inline constexpr int kPoseChannels = 8;  // 7 keypoint heatmaps + part-index map

struct SceneResult {
    SampleTuple tuple;
    std::vector<GarmentPlacement> placements;  // per frame
    TextureFamily texture;
};

SceneResult generate_scene(const SceneConfig& cfg);

// ---- on-disk contract ----
// <dir>/{source,agnostic,mask,pose}/frame_%04d.(ppm|pgm), garment.ppm,
// meta.json. 8-bit channels round-trip exactly.
void write_sample(const std::string& dir, const SampleTuple& tuple, const std::string& meta_json);
SampleTuple read_sample(const std::string& dir);
std::string read_sample_meta(const std::string& dir);

// netpbm primitives (binary P6/P5, maxval 255)
void write_ppm(const std::string& path, const Tensor& rgb);
Tensor read_ppm(const std::string& path);
void write_pgm(const std::string& path, const Tensor& gray);
Tensor read_pgm(const std::string& path);

// Deterministic, sorted view over a directory of samples.
class Dataset {
public:
    explicit Dataset(const std::string& root);
    std::size_t size() const { return dirs_.size(); }
    const std::string& sample_dir(std::size_t i) const { return dirs_[i]; }
    SampleTuple load(std::size_t i) const;

private:
    std::vector<std::string> dirs_;
};

// Writes `count` samples sample_00000... under `out`, seeded seed+index.
void generate_dataset(const std::string& out, int count, const SceneConfig& base);

}  // namespace ct::synthdata
