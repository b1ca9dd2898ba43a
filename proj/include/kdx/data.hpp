#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "kdx/tensor.hpp"

namespace kdx {

enum class Split { Train, Val, Test };

const char* split_name(Split s);

struct Sample {
    std::string id;
    Tensor image;  // [C,H,W], values in [0,1]
    size_t label = 0;
    // Quadrant index holding the class evidence, for generated data; -1 when
    // no ground-truth region is known.
    int truth_region = -1;
};

struct Dataset {
    std::string name;
    std::vector<std::string> class_names;
    std::vector<Sample> samples;
    std::map<std::string, Split> split_assignment;
    std::vector<double> split_ratios;
    uint64_t split_seed = 0;

    size_t num_classes() const { return class_names.size(); }
    std::vector<size_t> indices(Split s) const;
    const Sample& by_id(const std::string& id) const;
};

// IDX image/label pair (big-endian magics 0x803 / 0x801, u8 payload). Pixels
// scale by 1/255 into a single channel; image and label counts must agree.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path);

struct ImageDirOptions {
    size_t image_size = 32;
    size_t channels = 1;
};

// Directory of class-named subdirectories of PNGs. Class index is the
// lexicographic rank of the subdirectory name; images are resized bilinearly
// to image_size x image_size.
Dataset load_image_dir(const std::filesystem::path& root, const ImageDirOptions& opts = {});

// Stratified deterministic split. ratios has 2 (train/val) or 3
// (train/val/test) entries summing to 1. Ids in fixed_test are assigned to
// the test split up front and the remainder is split by the first two ratios.
Dataset split_dataset(Dataset dataset, const std::vector<double>& ratios, uint64_t seed,
                      const std::set<std::string>& fixed_test = {});

struct SynthSpec {
    size_t image_size = 32;
    size_t num_classes = 4;
    double blob_sigma = 3.0;
    double noise_sigma = 0.1;
    size_t samples_per_class = 500;
    uint64_t seed = 0;
};

// Four-class testbed: class k is a Gaussian blob (peak 1.0) at the centroid
// of image quadrant k plus i.i.d. pixel noise, clamped to [0,1]. The quadrant
// index is stored as each sample's truth_region.
Dataset make_synthetic(const SynthSpec& spec);

// {"id": "train" | "val" | "test", ...} as a JSON string.
std::string split_manifest_json(const Dataset& dataset);

Tensor one_hot(size_t label, size_t num_classes);

// Quadrant of a pixel: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
int quadrant_of(size_t row, size_t col, size_t height, size_t width);

}  // namespace kdx
