#include "kdx/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "kdx/errors.hpp"
#include "kdx/ops.hpp"
#include "kdx/rng.hpp"

namespace kdx {

const char* attribution_method_name(AttributionMethod method) {
    switch (method) {
        case AttributionMethod::AvgFeatureMap: return "avg-feature-map";
        case AttributionMethod::GradCam: return "grad-cam";
        case AttributionMethod::ShapleyPatch: return "shapley-patch";
    }
    return "?";
}

AttributionMethod attribution_method_from_name(const std::string& name) {
    if (name == "avg-feature-map") return AttributionMethod::AvgFeatureMap;
    if (name == "grad-cam") return AttributionMethod::GradCam;
    if (name == "shapley-patch") return AttributionMethod::ShapleyPatch;
    throw ConfigError("unknown attribution method '" + name + "'");
}

void min_max_normalize(Tensor& values) {
    const double lo = values.min_value();
    const double hi = values.max_value();
    if (hi - lo <= 0.0) {
        std::fill(values.data.begin(), values.data.end(), 0.0);
        return;
    }
    const double inv = 1.0 / (hi - lo);
    for (double& v : values.data) v = (v - lo) * inv;
}

AttributionMap normalized(const AttributionMap& map) {
    if (map.normalization == AttributionMap::Norm::MinMax) return map;
    AttributionMap out = map;
    min_max_normalize(out.values);
    out.normalization = AttributionMap::Norm::MinMax;
    return out;
}

namespace {

// The feature maps of a conv layer as seen by the attribution methods: the
// output of the ReLU immediately after it when one exists, else the conv
// output itself. Returns the layer index whose activation was used.
size_t post_activation_index(const ModelSpec& spec, size_t conv_index) {
    if (conv_index + 1 < spec.layers.size() &&
        spec.layers[conv_index + 1].kind == LayerKind::Relu) {
        return conv_index + 1;
    }
    return conv_index;
}

AttributionMap finish_map(Tensor native, AttributionMethod method, size_t layer_index,
                          size_t target_class, size_t input_h, size_t input_w) {
    AttributionMap map;
    map.method = method;
    map.layer_index = layer_index;
    map.target_class = target_class;
    map.source_shape = {native.shape[0], native.shape[1]};
    map.raw_min = native.min_value();
    map.raw_max = native.max_value();
    map.values = resize_bilinear(native, input_h, input_w);
    min_max_normalize(map.values);
    map.normalization = AttributionMap::Norm::MinMax;
    return map;
}

}  // namespace

AttributionMap average_feature_map(const ModelSpec& spec, const ForwardTrace& trace,
                                   size_t layer_index) {
    if (layer_index >= spec.layers.size() || spec.layers[layer_index].kind != LayerKind::Conv) {
        throw DomainError("average_feature_map needs the index of a conv layer");
    }
    if (!trace.recorded) throw DomainError("average_feature_map needs a recorded trace");

    const Tensor& fmaps = trace.activations[post_activation_index(spec, layer_index)];
    const size_t n = fmaps.shape[0], h = fmaps.shape[1], w = fmaps.shape[2];
    Tensor native({h, w});
    const double inv = 1.0 / static_cast<double>(n);
    for (size_t k = 0; k < n; ++k) {
        for (size_t i = 0; i < h * w; ++i) native.data[i] += fmaps.data[k * h * w + i];
    }
    for (double& v : native.data) v *= inv;

    return finish_map(std::move(native), AttributionMethod::AvgFeatureMap, layer_index, 0,
                      spec.input_shape[1], spec.input_shape[2]);
}

std::vector<AttributionMap> explain_all_layers(const Model& model, const Tensor& image) {
    ForwardTrace trace = forward(model, image, true);
    std::vector<AttributionMap> maps;
    for (size_t idx : conv_layer_indices(model.spec)) {
        maps.push_back(average_feature_map(model.spec, trace, idx));
    }
    return maps;
}

AttributionMap grad_cam(const Model& model, const Tensor& image, size_t target_class) {
    auto convs = conv_layer_indices(model.spec);
    return grad_cam(model, image, target_class, convs.back());
}

AttributionMap grad_cam(const Model& model, const Tensor& image, size_t target_class,
                        size_t layer_index) {
    if (target_class >= model.spec.num_classes) {
        throw DomainError("grad_cam target class out of range");
    }
    if (layer_index >= model.spec.layers.size() ||
        model.spec.layers[layer_index].kind != LayerKind::Conv) {
        throw DomainError("grad_cam needs the index of a conv layer");
    }
    ForwardTrace trace = forward(model, image, true);

    // Gradient of the raw target logit with respect to the post-activation
    // feature maps of the chosen layer.
    Tensor dlogits({model.spec.num_classes});
    dlogits[target_class] = 1.0;
    const size_t act_index = post_activation_index(model.spec, layer_index);
    ModelGrads grads = backprop(model, image, trace, dlogits, act_index);

    const Tensor& fmaps = trace.activations[act_index];
    const Tensor& fgrad = grads.input_grad;
    const size_t n = fmaps.shape[0], h = fmaps.shape[1], w = fmaps.shape[2];

    Tensor native({h, w});
    const double inv_hw = 1.0 / static_cast<double>(h * w);
    for (size_t k = 0; k < n; ++k) {
        double wk = 0.0;
        for (size_t i = 0; i < h * w; ++i) wk += fgrad.data[k * h * w + i];
        wk *= inv_hw;
        for (size_t i = 0; i < h * w; ++i) native.data[i] += wk * fmaps.data[k * h * w + i];
    }
    for (double& v : native.data) v = v > 0.0 ? v : 0.0;

    AttributionMap map = finish_map(std::move(native), AttributionMethod::GradCam, layer_index,
                                    target_class, model.spec.input_shape[1],
                                    model.spec.input_shape[2]);
    return map;
}

// ---------------------------------------------------------------------------
// Shapley patch attribution

PatchGrid::PatchGrid(size_t patch_size_, size_t image_h_, size_t image_w_, double baseline)
    : patch_size(patch_size_), image_h(image_h_), image_w(image_w_), baseline_value(baseline) {
    if (patch_size == 0) throw DomainError("patch size must be positive");
    if (image_h == 0 || image_w == 0) throw ShapeError("patch grid over an empty image");
    rows = (image_h + patch_size - 1) / patch_size;
    cols = (image_w + patch_size - 1) / patch_size;
}

namespace {

struct PatchGame {
    const Model& model;
    const Tensor& image;
    size_t target_class;
    const PatchGrid& grid;
    std::map<uint64_t, double> cache;

    // Model probability of the target class with patches outside the
    // coalition replaced by the baseline fill.
    double value(uint64_t mask) {
        auto it = cache.find(mask);
        if (it != cache.end()) return it->second;
        Tensor masked = image;
        for (size_t p = 0; p < grid.count(); ++p) {
            if (mask & (1ull << p)) continue;
            const size_t r0 = (p / grid.cols) * grid.patch_size;
            const size_t c0 = (p % grid.cols) * grid.patch_size;
            const size_t r1 = std::min(r0 + grid.patch_size, grid.image_h);
            const size_t c1 = std::min(c0 + grid.patch_size, grid.image_w);
            for (size_t ch = 0; ch < image.shape[0]; ++ch) {
                for (size_t r = r0; r < r1; ++r) {
                    for (size_t c = c0; c < c1; ++c) {
                        masked.at(ch, r, c) = grid.baseline_value;
                    }
                }
            }
        }
        double v = softmax_t(forward(model, masked, false).logits, 1.0)[target_class];
        cache.emplace(mask, v);
        return v;
    }
};

AttributionMap phi_to_map(const std::vector<double>& phi, const PatchGrid& grid,
                          size_t target_class) {
    AttributionMap map;
    map.method = AttributionMethod::ShapleyPatch;
    map.target_class = target_class;
    map.normalization = AttributionMap::Norm::Raw;
    map.source_shape = {grid.rows, grid.cols};
    map.values = Tensor({grid.image_h, grid.image_w});
    for (size_t p = 0; p < grid.count(); ++p) {
        const size_t r0 = (p / grid.cols) * grid.patch_size;
        const size_t c0 = (p % grid.cols) * grid.patch_size;
        const size_t r1 = std::min(r0 + grid.patch_size, grid.image_h);
        const size_t c1 = std::min(c0 + grid.patch_size, grid.image_w);
        for (size_t r = r0; r < r1; ++r) {
            for (size_t c = c0; c < c1; ++c) map.values.at(r, c) = phi[p];
        }
    }
    map.raw_min = map.values.min_value();
    map.raw_max = map.values.max_value();
    return map;
}

void check_grid(const Tensor& image, const PatchGrid& grid) {
    if (image.rank() != 3 || image.shape[1] != grid.image_h || image.shape[2] != grid.image_w) {
        throw ShapeError("patch grid built for " + std::to_string(grid.image_h) + "x" +
                         std::to_string(grid.image_w) + " does not match image " +
                         shape_str(image.shape));
    }
}

}  // namespace

AttributionMap shapley_patch(const Model& model, const Tensor& image, size_t target_class,
                             const PatchGrid& grid, size_t permutations, uint64_t seed) {
    if (permutations < 1) throw DomainError("permutations must be >= 1");
    if (target_class >= model.spec.num_classes) throw DomainError("target class out of range");
    check_grid(image, grid);
    const size_t n = grid.count();
    if (n > 63) throw DomainError("patch grid too fine (> 63 patches)");

    PatchGame game{model, image, target_class, grid, {}};
    std::vector<double> phi(n, 0.0);
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    Rng rng(seed);
    for (size_t it = 0; it < permutations; ++it) {
        rng.shuffle(order);
        uint64_t mask = 0;
        double prev = game.value(0);
        for (size_t p : order) {
            mask |= 1ull << p;
            double cur = game.value(mask);
            phi[p] += cur - prev;
            prev = cur;
        }
    }
    for (double& v : phi) v /= static_cast<double>(permutations);
    return phi_to_map(phi, grid, target_class);
}

AttributionMap shapley_patch_exact(const Model& model, const Tensor& image, size_t target_class,
                                   const PatchGrid& grid) {
    if (target_class >= model.spec.num_classes) throw DomainError("target class out of range");
    check_grid(image, grid);
    const size_t n = grid.count();
    if (n > 10) throw DomainError("exact Shapley limited to 10 patches");

    PatchGame game{model, image, target_class, grid, {}};
    std::vector<double> phi(n, 0.0);
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    size_t permutations = 0;
    do {
        uint64_t mask = 0;
        double prev = game.value(0);
        for (size_t p : order) {
            mask |= 1ull << p;
            double cur = game.value(mask);
            phi[p] += cur - prev;
            prev = cur;
        }
        ++permutations;
    } while (std::next_permutation(order.begin(), order.end()));

    for (double& v : phi) v /= static_cast<double>(permutations);
    return phi_to_map(phi, grid, target_class);
}

// ---------------------------------------------------------------------------
// Rendering

std::array<double, 3> jet_color(double t) {
    t = std::clamp(t, 0.0, 1.0);
    if (t <= 0.25) return {0.0, 4.0 * t, 1.0};
    if (t <= 0.5) return {0.0, 1.0, 1.0 - 4.0 * (t - 0.25)};
    if (t <= 0.75) return {4.0 * (t - 0.5), 1.0, 0.0};
    return {1.0, 1.0 - 4.0 * (t - 0.75), 0.0};
}

Image render_overlay(const Tensor& base_image, const AttributionMap& map, double alpha_blend) {
    if (alpha_blend < 0.0 || alpha_blend > 1.0) throw DomainError("alpha_blend must lie in [0,1]");
    if (map.normalization != AttributionMap::Norm::MinMax) {
        throw DomainError("render_overlay needs a min-max normalized map");
    }
    if (base_image.rank() != 3 || (base_image.shape[0] != 1 && base_image.shape[0] != 3)) {
        throw ShapeError("overlay base must be [1,H,W] or [3,H,W]");
    }
    const size_t h = base_image.shape[1], w = base_image.shape[2];
    if (map.values.shape != std::vector<size_t>{h, w}) {
        throw ShapeError("attribution map " + shape_str(map.values.shape) +
                         " does not match base image " + shape_str(base_image.shape));
    }

    Image out(w, h, 3);
    for (size_t y = 0; y < h; ++y) {
        for (size_t x = 0; x < w; ++x) {
            std::array<double, 3> heat = jet_color(map.values.at(y, x));
            for (size_t c = 0; c < 3; ++c) {
                const double base = base_image.shape[0] == 1 ? base_image.at(0, y, x)
                                                             : base_image.at(c, y, x);
                const double v = (1.0 - alpha_blend) * base + alpha_blend * heat[c];
                out.at(y, x, c) =
                    static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
    }
    return out;
}

std::string attribution_artifact_stem(const std::string& sample_id, const AttributionMap& map) {
    std::string id = sample_id;
    for (char& c : id) {
        if (c == '/' || c == '\\') c = '_';
    }
    std::string suffix = map.method == AttributionMethod::AvgFeatureMap
                             ? "layer" + std::to_string(map.layer_index)
                             : "class" + std::to_string(map.target_class);
    return id + "_" + attribution_method_name(map.method) + "_" + suffix;
}

std::filesystem::path write_attribution(const std::filesystem::path& dir,
                                        const std::string& sample_id, const Tensor& base_image,
                                        const AttributionMap& map, double alpha_blend,
                                        uint64_t seed, const std::string& params_json) {
    const std::string stem = attribution_artifact_stem(sample_id, map);
    const AttributionMap shown = normalized(map);
    Image overlay = render_overlay(base_image, shown, alpha_blend);
    std::filesystem::path png_path = dir / (stem + ".png");
    write_png(overlay, png_path);

    nlohmann::json sidecar;
    sidecar["method"] = attribution_method_name(map.method);
    sidecar["sample_id"] = sample_id;
    sidecar["seed"] = seed;
    sidecar["raw_min"] = map.raw_min;
    sidecar["raw_max"] = map.raw_max;
    sidecar["parameters"] = nlohmann::json::parse(params_json);
    std::ofstream out(dir / (stem + ".json"));
    if (!out) throw IoError("cannot write sidecar for " + stem);
    out << sidecar.dump(2) << "\n";
    return png_path;
}

}  // namespace kdx
