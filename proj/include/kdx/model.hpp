#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kdx/ops.hpp"
#include "kdx/tensor.hpp"

namespace kdx {

enum class LayerKind { Conv, MaxPool, AvgPool, Relu, Flatten, Dense, GlobalAvgPool };

const char* layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

// One layer of a declarative CNN architecture. Only the fields relevant to
// the kind are meaningful.
struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    size_t out_channels = 0;  // conv
    size_t kernel_h = 0, kernel_w = 0, stride = 1, padding = 0;
    size_t window = 0, pool_stride = 1;  // maxpool / avgpool
    size_t units = 0;                    // dense

    static LayerSpec conv(size_t out_channels, size_t kernel, size_t stride, size_t padding);
    static LayerSpec maxpool(size_t window, size_t stride);
    static LayerSpec avgpool(size_t window, size_t stride);
    static LayerSpec relu();
    static LayerSpec flatten();
    static LayerSpec dense(size_t units);
    static LayerSpec global_avgpool();
};

struct ModelSpec {
    std::string name;
    std::array<size_t, 3> input_shape{0, 0, 0};  // [C, H, W]
    std::vector<LayerSpec> layers;
    size_t num_classes = 0;
};

// Output shape of every layer in order. Throws ShapeError when any layer is
// inconsistent, the spec has no conv layer, or the final shape is not a
// vector of num_classes logits.
std::vector<std::vector<size_t>> propagate_shapes(const ModelSpec& spec);

// Indices of conv layers in depth order.
std::vector<size_t> conv_layer_indices(const ModelSpec& spec);

// The five conv-block student: conv(3x3, pad 1) + relu + maxpool(2,2) blocks
// with widths 8/16/32/32/64, then global average pooling and a dense head.
ModelSpec build_student_spec(std::array<size_t, 3> input_shape, size_t num_classes);

// Deeper plain CNN with average pooling after every second conv; channel
// widths double from 16 and cap at 128. depth >= 6 conv layers.
ModelSpec build_teacher_spec(std::array<size_t, 3> input_shape, size_t num_classes,
                             size_t depth = 10);

// Weights and bias for one layer; both empty for non-parametric kinds.
struct LayerParams {
    Tensor weights;
    Tensor bias;
    bool has_params() const { return !weights.empty(); }
};

struct Model {
    ModelSpec spec;
    std::vector<LayerParams> params;  // aligned with spec.layers
    uint64_t rng_seed = 0;
};

// He-uniform init (bound sqrt(6/fan_in)) for conv/dense weights, zero biases.
// Fully determined by the seed.
Model init_weights(const ModelSpec& spec, uint64_t seed);

struct ForwardTrace {
    Tensor logits;
    bool recorded = false;
    std::vector<Tensor> activations;  // per-layer outputs when recorded
    std::map<size_t, std::vector<size_t>> pool_argmax;
};

ForwardTrace forward(const Model& model, const Tensor& input, bool record);

// Per-parameter gradients plus the gradient reaching the requested depth:
// with stop_layer unset, input_grad is d(objective)/d(model input); when set,
// it is the gradient with respect to that layer's output and parameter
// gradients are only filled for layers above it.
struct ModelGrads {
    std::vector<LayerParams> layers;
    Tensor input_grad;
};

ModelGrads backprop(const Model& model, const Tensor& input, const ForwardTrace& trace,
                    const Tensor& dlogits, std::optional<size_t> stop_layer = {});

// Analytic FLOPs, independent of weights and input data. Convention:
// multiply+add counts as 2, bias adds counted, pooling window^2 per output,
// ReLU one per element, global average pool one per input element.
struct FlopsReport {
    std::vector<unsigned long long> per_layer;
    unsigned long long total = 0;
};

FlopsReport count_flops(const ModelSpec& spec);

// Binary model format: magic "KDFM", u32 version, length-prefixed spec JSON,
// parameters as little-endian f64 in layer order, trailing CRC32 of all
// preceding bytes. Round-trips bit-exactly.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
std::vector<uint8_t> encode_model(const Model& model);
Model decode_model(const uint8_t* bytes, size_t size);

std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const std::string& text);

}  // namespace kdx
