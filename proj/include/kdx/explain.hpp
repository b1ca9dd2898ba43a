#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kdx/image.hpp"
#include "kdx/model.hpp"
#include "kdx/tensor.hpp"

namespace kdx {

enum class AttributionMethod { AvgFeatureMap, GradCam, ShapleyPatch };

const char* attribution_method_name(AttributionMethod method);
AttributionMethod attribution_method_from_name(const std::string& name);

// Per-pixel relevance in input coordinates.
struct AttributionMap {
    enum class Norm { Raw, MinMax };

    Tensor values;  // [H, W]
    AttributionMethod method = AttributionMethod::AvgFeatureMap;
    size_t layer_index = 0;   // conv layer, for avg-feature-map / grad-cam
    size_t target_class = 0;  // for grad-cam / shapley
    Norm normalization = Norm::MinMax;
    double raw_min = 0, raw_max = 0;
    std::array<size_t, 2> source_shape{0, 0};  // native resolution before upsampling
};

// In-place min-max rescale to [0,1]; a constant map becomes all zeros.
void min_max_normalize(Tensor& values);

// Min-max normalized copy (no-op for maps already normalized).
AttributionMap normalized(const AttributionMap& map);

// Mean over a conv layer's post-activation feature maps (the ReLU output
// directly after it, when present), upsampled bilinearly to the model input
// resolution and min-max normalized.
AttributionMap average_feature_map(const ModelSpec& spec, const ForwardTrace& trace,
                                   size_t layer_index);

// One average-feature-map attribution per conv layer, in depth order.
std::vector<AttributionMap> explain_all_layers(const Model& model, const Tensor& image);

// Feature maps weighted by the spatial mean of the target logit's gradient,
// ReLU-rectified. Defaults to the last conv layer.
AttributionMap grad_cam(const Model& model, const Tensor& image, size_t target_class);
AttributionMap grad_cam(const Model& model, const Tensor& image, size_t target_class,
                        size_t layer_index);

// Square patch decomposition of an image; edge patches absorb any remainder.
struct PatchGrid {
    size_t patch_size = 8;
    size_t rows = 0, cols = 0;
    size_t image_h = 0, image_w = 0;
    double baseline_value = 0.0;

    PatchGrid(size_t patch_size_, size_t image_h_, size_t image_w_, double baseline = 0.0);
    size_t count() const { return rows * cols; }
};

// Shapley values of image patches for the model's target-class probability,
// estimated by averaging marginal contributions over sampled patch orderings.
// The map carries the raw signed values.
AttributionMap shapley_patch(const Model& model, const Tensor& image, size_t target_class,
                             const PatchGrid& grid, size_t permutations, uint64_t seed);

// Exact Shapley values by enumerating all orderings (coalition values are
// memoized). Intended for small grids; requires count() <= 10.
AttributionMap shapley_patch_exact(const Model& model, const Tensor& image, size_t target_class,
                                   const PatchGrid& grid);

// Blue -> cyan -> green -> yellow -> red over [0,1].
std::array<double, 3> jet_color(double t);

// Colormapped map alpha-blended over the (gray or RGB) base image. The map
// must be min-max normalized.
Image render_overlay(const Tensor& base_image, const AttributionMap& map, double alpha_blend);

// "{sample_id}_{method}_{layer3|class1}.png"; path separators in the id are
// flattened.
std::string attribution_artifact_stem(const std::string& sample_id, const AttributionMap& map);

// Writes the overlay PNG plus a JSON sidecar (method, parameters, seed, raw
// min/max) and returns the PNG path.
std::filesystem::path write_attribution(const std::filesystem::path& dir,
                                        const std::string& sample_id, const Tensor& base_image,
                                        const AttributionMap& map, double alpha_blend,
                                        uint64_t seed, const std::string& params_json);

}  // namespace kdx
