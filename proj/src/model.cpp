#include "kdx/model.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "kdx/errors.hpp"
#include "kdx/rng.hpp"

namespace kdx {

using json = nlohmann::json;

const char* layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::Conv: return "conv";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::AvgPool: return "avgpool";
        case LayerKind::Relu: return "relu";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Dense: return "dense";
        case LayerKind::GlobalAvgPool: return "global-avgpool";
    }
    return "?";
}

LayerKind layer_kind_from_name(const std::string& name) {
    if (name == "conv") return LayerKind::Conv;
    if (name == "maxpool") return LayerKind::MaxPool;
    if (name == "avgpool") return LayerKind::AvgPool;
    if (name == "relu") return LayerKind::Relu;
    if (name == "flatten") return LayerKind::Flatten;
    if (name == "dense") return LayerKind::Dense;
    if (name == "global-avgpool") return LayerKind::GlobalAvgPool;
    throw ParseError(ParseFault::Malformed, "unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv(size_t out_channels, size_t kernel, size_t stride, size_t padding) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.out_channels = out_channels;
    l.kernel_h = l.kernel_w = kernel;
    l.stride = stride;
    l.padding = padding;
    return l;
}

LayerSpec LayerSpec::maxpool(size_t window, size_t stride) {
    LayerSpec l;
    l.kind = LayerKind::MaxPool;
    l.window = window;
    l.pool_stride = stride;
    return l;
}

LayerSpec LayerSpec::avgpool(size_t window, size_t stride) {
    LayerSpec l;
    l.kind = LayerKind::AvgPool;
    l.window = window;
    l.pool_stride = stride;
    return l;
}

LayerSpec LayerSpec::relu() {
    LayerSpec l;
    l.kind = LayerKind::Relu;
    return l;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec l;
    l.kind = LayerKind::Flatten;
    return l;
}

LayerSpec LayerSpec::dense(size_t units) {
    LayerSpec l;
    l.kind = LayerKind::Dense;
    l.units = units;
    return l;
}

LayerSpec LayerSpec::global_avgpool() {
    LayerSpec l;
    l.kind = LayerKind::GlobalAvgPool;
    return l;
}

std::vector<std::vector<size_t>> propagate_shapes(const ModelSpec& spec) {
    if (spec.num_classes < 2) throw ShapeError("model needs at least 2 classes");
    for (size_t d : spec.input_shape) {
        if (d == 0) throw ShapeError("model input shape has a zero dimension");
    }
    std::vector<std::vector<size_t>> shapes;
    shapes.reserve(spec.layers.size());
    std::vector<size_t> cur{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
    size_t conv_count = 0;

    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
        switch (l.kind) {
            case LayerKind::Conv: {
                if (cur.size() != 3) throw ShapeError(where + ": expects a [C,H,W] input");
                if (l.kernel_h == 0 || l.kernel_w == 0) throw ShapeError(where + ": kernel dims must be >= 1");
                if (l.out_channels == 0) throw ShapeError(where + ": out_channels must be >= 1");
                size_t h = conv_out_dim(cur[1], l.kernel_h, l.stride, l.padding);
                size_t w = conv_out_dim(cur[2], l.kernel_w, l.stride, l.padding);
                cur = {l.out_channels, h, w};
                ++conv_count;
                break;
            }
            case LayerKind::MaxPool:
            case LayerKind::AvgPool: {
                if (cur.size() != 3) throw ShapeError(where + ": expects a [C,H,W] input");
                size_t h = pool_out_dim(cur[1], l.window, l.pool_stride);
                size_t w = pool_out_dim(cur[2], l.window, l.pool_stride);
                cur = {cur[0], h, w};
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::Flatten: {
                size_t n = 1;
                for (size_t d : cur) n *= d;
                cur = {n};
                break;
            }
            case LayerKind::GlobalAvgPool: {
                if (cur.size() != 3) throw ShapeError(where + ": expects a [C,H,W] input");
                cur = {cur[0]};
                break;
            }
            case LayerKind::Dense: {
                if (cur.size() != 1) throw ShapeError(where + ": expects a flat vector input");
                if (l.units == 0) throw ShapeError(where + ": units must be >= 1");
                cur = {l.units};
                break;
            }
        }
        shapes.push_back(cur);
    }

    if (conv_count == 0) throw ShapeError("model spec must contain at least one conv layer");
    if (cur.size() != 1 || cur[0] != spec.num_classes) {
        throw ShapeError("model spec does not end at a logits vector of length " +
                         std::to_string(spec.num_classes) + "; final shape is " + shape_str(cur));
    }
    return shapes;
}

std::vector<size_t> conv_layer_indices(const ModelSpec& spec) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        if (spec.layers[i].kind == LayerKind::Conv) idx.push_back(i);
    }
    return idx;
}

ModelSpec build_student_spec(std::array<size_t, 3> input_shape, size_t num_classes) {
    ModelSpec spec;
    spec.name = "student";
    spec.input_shape = input_shape;
    spec.num_classes = num_classes;
    const size_t widths[5] = {8, 16, 32, 32, 64};
    for (size_t width : widths) {
        spec.layers.push_back(LayerSpec::conv(width, 3, 1, 1));
        spec.layers.push_back(LayerSpec::relu());
        spec.layers.push_back(LayerSpec::maxpool(2, 2));
    }
    spec.layers.push_back(LayerSpec::global_avgpool());
    spec.layers.push_back(LayerSpec::dense(num_classes));
    propagate_shapes(spec);
    return spec;
}

ModelSpec build_teacher_spec(std::array<size_t, 3> input_shape, size_t num_classes,
                             size_t depth) {
    if (depth < 6) throw ShapeError("teacher depth must be at least 6");
    ModelSpec spec;
    spec.name = "teacher";
    spec.input_shape = input_shape;
    spec.num_classes = num_classes;
    for (size_t i = 0; i < depth; ++i) {
        size_t width = std::min<size_t>(16ull << (i / 2), 128);
        spec.layers.push_back(LayerSpec::conv(width, 3, 1, 1));
        spec.layers.push_back(LayerSpec::relu());
        if (i % 2 == 1) spec.layers.push_back(LayerSpec::avgpool(2, 2));
    }
    spec.layers.push_back(LayerSpec::global_avgpool());
    spec.layers.push_back(LayerSpec::dense(num_classes));
    propagate_shapes(spec);
    return spec;
}

Model init_weights(const ModelSpec& spec, uint64_t seed) {
    auto shapes = propagate_shapes(spec);
    Model model;
    model.spec = spec;
    model.rng_seed = seed;
    model.params.resize(spec.layers.size());
    Rng rng(seed);

    std::vector<size_t> cur{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (l.kind == LayerKind::Conv) {
            size_t c_in = cur[0];
            size_t fan_in = c_in * l.kernel_h * l.kernel_w;
            double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            Tensor w({l.out_channels, c_in, l.kernel_h, l.kernel_w});
            for (double& v : w.data) v = rng.uniform(-bound, bound);
            model.params[i].weights = std::move(w);
            model.params[i].bias = Tensor({l.out_channels});
        } else if (l.kind == LayerKind::Dense) {
            size_t d_in = cur[0];
            double bound = std::sqrt(6.0 / static_cast<double>(d_in));
            Tensor w({l.units, d_in});
            for (double& v : w.data) v = rng.uniform(-bound, bound);
            model.params[i].weights = std::move(w);
            model.params[i].bias = Tensor({l.units});
        }
        cur = shapes[i];
    }
    return model;
}

namespace {

Tensor global_avgpool_forward(const Tensor& x) {
    const size_t c = x.shape[0], hw = x.shape[1] * x.shape[2];
    Tensor out({c});
    for (size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (size_t i = 0; i < hw; ++i) s += x.data[ch * hw + i];
        out[ch] = s / static_cast<double>(hw);
    }
    return out;
}

}  // namespace

ForwardTrace forward(const Model& model, const Tensor& input, bool record) {
    if (input.shape != std::vector<size_t>{model.spec.input_shape[0], model.spec.input_shape[1],
                                           model.spec.input_shape[2]}) {
        throw ShapeError("forward input shape " + shape_str(input.shape) +
                         " does not match model input " +
                         shape_str({model.spec.input_shape[0], model.spec.input_shape[1],
                                    model.spec.input_shape[2]}));
    }
    ForwardTrace trace;
    trace.recorded = record;
    if (record) trace.activations.reserve(model.spec.layers.size());

    Tensor x = input;
    for (size_t i = 0; i < model.spec.layers.size(); ++i) {
        const LayerSpec& l = model.spec.layers[i];
        switch (l.kind) {
            case LayerKind::Conv:
                x = conv2d_forward(x, model.params[i].weights, model.params[i].bias, l.stride,
                                   l.padding);
                break;
            case LayerKind::MaxPool: {
                MaxPoolResult r = maxpool2d(x, l.window, l.pool_stride);
                x = std::move(r.output);
                if (record) trace.pool_argmax[i] = std::move(r.argmax);
                break;
            }
            case LayerKind::AvgPool:
                x = avgpool2d(x, l.window, l.pool_stride);
                break;
            case LayerKind::Relu:
                x = relu(x);
                break;
            case LayerKind::Flatten: {
                const size_t n = x.numel();
                x = Tensor({n}, std::move(x.data));
                break;
            }
            case LayerKind::GlobalAvgPool:
                x = global_avgpool_forward(x);
                break;
            case LayerKind::Dense:
                x = dense_forward(x, model.params[i].weights, model.params[i].bias);
                break;
        }
        if (record) trace.activations.push_back(x);
    }
    trace.logits = std::move(x);
    return trace;
}

ModelGrads backprop(const Model& model, const Tensor& input, const ForwardTrace& trace,
                    const Tensor& dlogits, std::optional<size_t> stop_layer) {
    if (!trace.recorded) throw DomainError("backprop needs a trace recorded with record=true");
    if (dlogits.shape != trace.logits.shape) {
        throw ShapeError("dlogits shape " + shape_str(dlogits.shape) +
                         " does not match logits " + shape_str(trace.logits.shape));
    }
    const auto& layers = model.spec.layers;
    ModelGrads grads;
    grads.layers.resize(layers.size());

    Tensor g = dlogits;
    for (size_t ri = layers.size(); ri-- > 0;) {
        if (stop_layer && ri == *stop_layer) {
            grads.input_grad = std::move(g);
            return grads;
        }
        const LayerSpec& l = layers[ri];
        const Tensor& in = ri == 0 ? input : trace.activations[ri - 1];
        switch (l.kind) {
            case LayerKind::Conv: {
                LayerGrad lg = conv2d_backward(in, model.params[ri].weights, l.stride, l.padding, g);
                grads.layers[ri].weights = std::move(lg.weight_grad);
                grads.layers[ri].bias = std::move(lg.bias_grad);
                g = std::move(lg.input_grad);
                break;
            }
            case LayerKind::MaxPool:
                g = maxpool2d_backward(trace.pool_argmax.at(ri), in.shape, g);
                break;
            case LayerKind::AvgPool:
                g = avgpool2d_backward(in.shape, l.window, l.pool_stride, g);
                break;
            case LayerKind::Relu:
                g = relu_backward(in, g);
                break;
            case LayerKind::Flatten:
                g = Tensor(in.shape, std::move(g.data));
                break;
            case LayerKind::GlobalAvgPool: {
                const size_t c = in.shape[0], hw = in.shape[1] * in.shape[2];
                Tensor gi(in.shape);
                for (size_t ch = 0; ch < c; ++ch) {
                    const double v = g[ch] / static_cast<double>(hw);
                    for (size_t i = 0; i < hw; ++i) gi.data[ch * hw + i] = v;
                }
                g = std::move(gi);
                break;
            }
            case LayerKind::Dense: {
                LayerGrad lg = dense_backward(in, model.params[ri].weights, g);
                grads.layers[ri].weights = std::move(lg.weight_grad);
                grads.layers[ri].bias = std::move(lg.bias_grad);
                g = std::move(lg.input_grad);
                break;
            }
        }
    }
    grads.input_grad = std::move(g);
    return grads;
}

FlopsReport count_flops(const ModelSpec& spec) {
    auto shapes = propagate_shapes(spec);
    FlopsReport report;
    report.per_layer.reserve(spec.layers.size());
    std::vector<size_t> cur{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        const auto& out = shapes[i];
        unsigned long long f = 0;
        switch (l.kind) {
            case LayerKind::Conv: {
                unsigned long long out_px = out[1] * out[2];
                f = 2ull * out_px * out[0] * (l.kernel_h * l.kernel_w * cur[0]) + out_px * out[0];
                break;
            }
            case LayerKind::MaxPool:
            case LayerKind::AvgPool:
                f = static_cast<unsigned long long>(out[1]) * out[2] * out[0] * l.window * l.window;
                break;
            case LayerKind::Relu:
                f = Tensor::numel_of(cur);
                break;
            case LayerKind::Flatten:
                f = 0;
                break;
            case LayerKind::GlobalAvgPool:
                f = Tensor::numel_of(cur);
                break;
            case LayerKind::Dense:
                f = 2ull * cur[0] * l.units + l.units;
                break;
        }
        report.per_layer.push_back(f);
        report.total += f;
        cur = out;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Serialization

std::string spec_to_json(const ModelSpec& spec) {
    json j;
    j["name"] = spec.name;
    j["input_shape"] = spec.input_shape;
    j["num_classes"] = spec.num_classes;
    json layers = json::array();
    for (const LayerSpec& l : spec.layers) {
        json lj;
        lj["kind"] = layer_kind_name(l.kind);
        switch (l.kind) {
            case LayerKind::Conv:
                lj["out_channels"] = l.out_channels;
                lj["kernel_h"] = l.kernel_h;
                lj["kernel_w"] = l.kernel_w;
                lj["stride"] = l.stride;
                lj["padding"] = l.padding;
                break;
            case LayerKind::MaxPool:
            case LayerKind::AvgPool:
                lj["window"] = l.window;
                lj["stride"] = l.pool_stride;
                break;
            case LayerKind::Dense:
                lj["units"] = l.units;
                break;
            default:
                break;
        }
        layers.push_back(lj);
    }
    j["layers"] = layers;
    return j.dump();
}

ModelSpec spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(ParseFault::Malformed, std::string("bad spec json: ") + e.what());
    }
    try {
        ModelSpec spec;
        spec.name = j.at("name").get<std::string>();
        auto shape = j.at("input_shape").get<std::vector<size_t>>();
        if (shape.size() != 3) throw ParseError(ParseFault::Malformed, "input_shape must have 3 dims");
        spec.input_shape = {shape[0], shape[1], shape[2]};
        spec.num_classes = j.at("num_classes").get<size_t>();
        for (const json& lj : j.at("layers")) {
            LayerSpec l;
            l.kind = layer_kind_from_name(lj.at("kind").get<std::string>());
            switch (l.kind) {
                case LayerKind::Conv:
                    l.out_channels = lj.at("out_channels").get<size_t>();
                    l.kernel_h = lj.at("kernel_h").get<size_t>();
                    l.kernel_w = lj.at("kernel_w").get<size_t>();
                    l.stride = lj.at("stride").get<size_t>();
                    l.padding = lj.at("padding").get<size_t>();
                    break;
                case LayerKind::MaxPool:
                case LayerKind::AvgPool:
                    l.window = lj.at("window").get<size_t>();
                    l.pool_stride = lj.at("stride").get<size_t>();
                    break;
                case LayerKind::Dense:
                    l.units = lj.at("units").get<size_t>();
                    break;
                default:
                    break;
            }
            spec.layers.push_back(l);
        }
        return spec;
    } catch (const json::exception& e) {
        throw ParseError(ParseFault::Malformed, std::string("bad spec json: ") + e.what());
    }
}

namespace {

constexpr char kMagic[4] = {'K', 'D', 'F', 'M'};
constexpr uint32_t kVersion = 1;

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}
    uint32_t u32() {
        need(4);
        uint32_t v = static_cast<uint32_t>(p_[pos_]) | (static_cast<uint32_t>(p_[pos_ + 1]) << 8) |
                     (static_cast<uint32_t>(p_[pos_ + 2]) << 16) |
                     (static_cast<uint32_t>(p_[pos_ + 3]) << 24);
        pos_ += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    const uint8_t* bytes(size_t n) {
        need(n);
        const uint8_t* r = p_ + pos_;
        pos_ += n;
        return r;
    }
    size_t pos() const { return pos_; }
    size_t remaining() const { return n_ - pos_; }

private:
    void need(size_t n) {
        if (pos_ + n > n_) throw ParseError(ParseFault::Truncated, "model file is truncated");
    }
    const uint8_t* p_;
    size_t n_;
    size_t pos_ = 0;
};

uint32_t crc_of(const uint8_t* p, size_t n) {
    return static_cast<uint32_t>(::crc32(0L, p, static_cast<uInt>(n)));
}

}  // namespace

std::vector<uint8_t> encode_model(const Model& model) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    std::string spec_json = spec_to_json(model.spec);
    put_u32(out, static_cast<uint32_t>(spec_json.size()));
    out.insert(out.end(), spec_json.begin(), spec_json.end());
    put_u64(out, model.rng_seed);
    for (const LayerParams& p : model.params) {
        if (!p.has_params()) continue;
        for (const Tensor* t : {&p.weights, &p.bias}) {
            for (double v : t->data) {
                uint64_t bits;
                std::memcpy(&bits, &v, 8);
                put_u64(out, bits);
            }
        }
    }
    put_u32(out, crc_of(out.data(), out.size()));
    return out;
}

Model decode_model(const uint8_t* bytes, size_t size) {
    if (size < 4 || std::memcmp(bytes, kMagic, 4) != 0) {
        throw ParseError(ParseFault::BadMagic, "not a model file (bad magic)");
    }
    if (size < 12) throw ParseError(ParseFault::Truncated, "model file is truncated");
    // Structure first so truncation is reported as such; the trailing CRC32
    // (over all preceding bytes) is verified once the layout parses.
    ByteReader r(bytes, size - 4);
    r.bytes(4);  // magic
    uint32_t version = r.u32();
    if (version != kVersion) {
        throw ParseError(ParseFault::BadVersion,
                         "unsupported model file version " + std::to_string(version));
    }
    uint32_t spec_len = r.u32();
    const uint8_t* spec_bytes = r.bytes(spec_len);
    ModelSpec spec = spec_from_json(std::string(spec_bytes, spec_bytes + spec_len));

    Model model;
    model.spec = spec;
    model.rng_seed = r.u64();

    std::vector<std::vector<size_t>> shapes;
    try {
        shapes = propagate_shapes(spec);
    } catch (const ShapeError& e) {
        throw ParseError(ParseFault::Malformed, std::string("invalid spec in model file: ") + e.what());
    }
    model.params.resize(spec.layers.size());
    std::vector<size_t> cur{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (l.kind == LayerKind::Conv) {
            model.params[i].weights = Tensor({l.out_channels, cur[0], l.kernel_h, l.kernel_w});
            model.params[i].bias = Tensor({l.out_channels});
        } else if (l.kind == LayerKind::Dense) {
            model.params[i].weights = Tensor({l.units, cur[0]});
            model.params[i].bias = Tensor({l.units});
        }
        cur = shapes[i];
    }
    for (LayerParams& p : model.params) {
        if (!p.has_params()) continue;
        for (Tensor* t : {&p.weights, &p.bias}) {
            for (double& v : t->data) {
                uint64_t bits = r.u64();
                std::memcpy(&v, &bits, 8);
            }
        }
    }
    if (r.remaining() != 0) {
        throw ParseError(ParseFault::TrailingBytes, "model file has trailing bytes");
    }
    ByteReader tail(bytes + size - 4, 4);
    if (tail.u32() != crc_of(bytes, size - 4)) {
        throw ParseError(ParseFault::Checksum, "model file checksum mismatch");
    }
    return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
    std::vector<uint8_t> bytes = encode_model(model);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_model(bytes.data(), bytes.size());
}

}  // namespace kdx
