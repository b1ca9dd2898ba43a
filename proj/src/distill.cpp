#include "kdx/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "kdx/csv.hpp"
#include "kdx/errors.hpp"
#include "kdx/ops.hpp"
#include "kdx/rng.hpp"

namespace kdx {

const char* soft_mode_name(SoftMode mode) {
    return mode == SoftMode::TeacherVsStudent ? "teacher-vs-student" : "paper-literal";
}

SoftMode soft_mode_from_name(const std::string& name) {
    if (name == "teacher-vs-student") return SoftMode::TeacherVsStudent;
    if (name == "paper-literal") return SoftMode::Literal;
    throw ConfigError("unknown soft mode '" + name + "'");
}

void DistillConfig::validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0,1]");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
}

namespace {
constexpr double kProbFloor = 1e-12;

double clamped_log(double p) { return std::log(std::clamp(p, kProbFloor, 1.0)); }
}  // namespace

double hard_loss(const Tensor& probs, const Tensor& onehot) {
    if (probs.rank() != 2 || !probs.same_shape(onehot)) {
        throw ShapeError("hard_loss expects matching [N,M] tensors, got " +
                         shape_str(probs.shape) + " and " + shape_str(onehot.shape));
    }
    const size_t n = probs.shape[0], m = probs.shape[1];
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        for (size_t c = 0; c < m; ++c) {
            if (onehot.at(i, c) != 0.0) total -= onehot.at(i, c) * clamped_log(probs.at(i, c));
        }
    }
    return total / static_cast<double>(n);
}

double soft_loss(const Tensor& y_true_onehot, const Tensor& teacher_logits,
                 const Tensor& student_logits, double temperature, SoftMode mode) {
    if (!(temperature > 0.0)) throw DomainError("soft_loss temperature must be positive");
    if (!y_true_onehot.same_shape(teacher_logits) || !y_true_onehot.same_shape(student_logits)) {
        throw ShapeError("soft_loss vectors must share one shape");
    }
    const size_t m = y_true_onehot.numel();
    if (mode == SoftMode::Literal) {
        // Softened one-hot labels against the teacher's softened output; the
        // student does not appear.
        Tensor p = softmax_t(y_true_onehot, temperature);
        Tensor q = softmax_t(teacher_logits, temperature);
        double total = 0.0;
        for (size_t c = 0; c < m; ++c) total -= p[c] * clamped_log(q[c]);
        return total;
    }
    Tensor q = softmax_t(teacher_logits, temperature);
    Tensor s = softmax_t(student_logits, temperature);
    double total = 0.0;
    for (size_t c = 0; c < m; ++c) total -= q[c] * clamped_log(s[c]);
    return total;
}

double distill_loss(double hard, double soft, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw DomainError("alpha must lie in [0,1]");
    return alpha * hard + (1.0 - alpha) * soft;
}

AdamState AdamState::init(const std::vector<LayerParams>& params, const AdamConfig& config) {
    AdamState state;
    state.config = config;
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_params()) continue;
        state.m[i].weights = Tensor(params[i].weights.shape);
        state.m[i].bias = Tensor(params[i].bias.shape);
        state.v[i].weights = Tensor(params[i].weights.shape);
        state.v[i].bias = Tensor(params[i].bias.shape);
    }
    return state;
}

namespace {

void adam_update(const AdamConfig& c, size_t step, Tensor& p, const Tensor& g, Tensor& m,
                 Tensor& v) {
    if (!p.same_shape(g)) {
        throw ShapeError("adam gradient shape " + shape_str(g.shape) +
                         " does not match parameter " + shape_str(p.shape));
    }
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
    for (size_t i = 0; i < p.numel(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
}

}  // namespace

void adam_step(AdamState& state, std::vector<LayerParams>& params,
               const std::vector<LayerParams>& grads) {
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw ShapeError("adam_step parameter list size mismatch");
    }
    state.step += 1;
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_params()) continue;
        adam_update(state.config, state.step, params[i].weights, grads[i].weights,
                    state.m[i].weights, state.v[i].weights);
        adam_update(state.config, state.step, params[i].bias, grads[i].bias, state.m[i].bias,
                    state.v[i].bias);
    }
}

std::pair<double, double> evaluate_split(const Model& model, const Dataset& dataset, Split split) {
    std::vector<size_t> idx = dataset.indices(split);
    if (idx.empty()) {
        throw ConfigError(std::string("dataset split '") + split_name(split) + "' is empty");
    }
    size_t correct = 0;
    double loss = 0.0;
    for (size_t i : idx) {
        const Sample& s = dataset.samples[i];
        ForwardTrace trace = forward(model, s.image, false);
        Tensor p = softmax_t(trace.logits, 1.0);
        size_t pred = 0;
        for (size_t c = 1; c < p.numel(); ++c) {
            if (p[c] > p[pred]) pred = c;
        }
        if (pred == s.label) ++correct;
        loss -= clamped_log(p[s.label]);
    }
    return {static_cast<double>(correct) / static_cast<double>(idx.size()),
            loss / static_cast<double>(idx.size())};
}

namespace {

void accumulate(std::vector<LayerParams>& acc, const std::vector<LayerParams>& g) {
    for (size_t i = 0; i < acc.size(); ++i) {
        if (!acc[i].has_params()) continue;
        for (size_t k = 0; k < acc[i].weights.numel(); ++k) acc[i].weights[k] += g[i].weights[k];
        for (size_t k = 0; k < acc[i].bias.numel(); ++k) acc[i].bias[k] += g[i].bias[k];
    }
}

std::vector<LayerParams> zero_like(const std::vector<LayerParams>& params) {
    std::vector<LayerParams> z(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_params()) continue;
        z[i].weights = Tensor(params[i].weights.shape);
        z[i].bias = Tensor(params[i].bias.shape);
    }
    return z;
}

}  // namespace

ObjectiveEval distill_objective(const Model& student, const Dataset& dataset,
                                const std::vector<size_t>& batch_indices,
                                const TeacherLogits* soft_targets, const DistillConfig& config) {
    const size_t m = student.spec.num_classes;
    // The soft branch is skipped entirely when its weight is zero so that an
    // alpha = 1 run reproduces plain training bit for bit.
    const bool use_soft = soft_targets != nullptr;
    const double hard_coeff = use_soft ? config.alpha : 1.0;
    const double soft_coeff = use_soft ? 1.0 - config.alpha : 0.0;

    ObjectiveEval eval;
    eval.grad_sum = zero_like(student.params);
    for (size_t idx : batch_indices) {
        const Sample& s = dataset.samples[idx];
        ForwardTrace trace = forward(student, s.image, true);
        Tensor p = softmax_t(trace.logits, 1.0);

        double sample_loss = hard_coeff * -clamped_log(p[s.label]);

        Tensor dlogits({m});
        for (size_t c = 0; c < m; ++c) {
            dlogits[c] = hard_coeff * (p[c] - (c == s.label ? 1.0 : 0.0));
        }

        if (use_soft && soft_coeff != 0.0) {
            auto it = soft_targets->find(s.id);
            if (it == soft_targets->end()) {
                throw DataError("teacher logits missing for sample " + s.id);
            }
            const Tensor& t_logits = it->second;
            const Tensor y = one_hot(s.label, m);
            sample_loss += soft_coeff * soft_loss(y, t_logits, trace.logits, config.temperature,
                                                  config.soft_mode);
            if (config.soft_mode == SoftMode::TeacherVsStudent) {
                Tensor q = softmax_t(t_logits, config.temperature);
                Tensor sm = softmax_t(trace.logits, config.temperature);
                for (size_t c = 0; c < m; ++c) {
                    dlogits[c] += soft_coeff * (sm[c] - q[c]) / config.temperature;
                }
            }
            // Literal mode has no student term: zero gradient.
        }

        eval.loss_sum += sample_loss;
        ModelGrads g = backprop(student, s.image, trace, dlogits);
        accumulate(eval.grad_sum, g.layers);
    }
    return eval;
}

namespace {

// Shared training loop for teacher pre-training (no soft targets) and
// distillation.
TrainResult train_impl(const ModelSpec& spec, const Dataset& dataset, const DistillConfig& config,
                       const TeacherLogits* soft_targets) {
    config.validate();
    const auto started = std::chrono::steady_clock::now();

    std::vector<size_t> train_idx = dataset.indices(Split::Train);
    if (train_idx.empty()) throw ConfigError("training split is empty");
    const size_t m = dataset.num_classes();
    if (spec.num_classes != m) {
        throw ConfigError("model expects " + std::to_string(spec.num_classes) +
                          " classes but dataset has " + std::to_string(m));
    }

    if (soft_targets) {
        for (size_t i : train_idx) {
            const Sample& s = dataset.samples[i];
            auto it = soft_targets->find(s.id);
            if (it == soft_targets->end()) {
                throw DataError("teacher logits missing for sample " + s.id);
            }
            if (it->second.numel() != m) {
                throw DataError("teacher logits for sample " + s.id + " have wrong length");
            }
        }
    }

    Model model = init_weights(spec, config.seed);
    AdamConfig adam_config;
    adam_config.learning_rate = config.learning_rate;
    AdamState adam = AdamState::init(model.params, adam_config);

    TrainReport report;
    std::vector<LayerParams> best_params;
    double best_acc = -1.0, best_loss = 0.0;

    for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(config.seed, epoch));
        std::vector<size_t> order = train_idx;
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        for (size_t start = 0; start < order.size(); start += config.batch_size) {
            const size_t end = std::min(order.size(), start + config.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            std::vector<size_t> batch(order.begin() + start, order.begin() + end);

            ObjectiveEval eval = distill_objective(model, dataset, batch, soft_targets, config);
            epoch_loss += eval.loss_sum;
            for (LayerParams& lp : eval.grad_sum) {
                if (!lp.has_params()) continue;
                for (double& v : lp.weights.data) v *= inv_batch;
                for (double& v : lp.bias.data) v *= inv_batch;
            }
            adam_step(adam, model.params, eval.grad_sum);
        }

        EpochStats stats;
        stats.train_loss = epoch_loss / static_cast<double>(order.size());
        std::tie(stats.val_accuracy, stats.val_loss) = evaluate_split(model, dataset, Split::Val);
        report.epochs.push_back(stats);

        // Keep the best validation accuracy; ties go to lower loss, then to
        // the earlier epoch.
        if (stats.val_accuracy > best_acc ||
            (stats.val_accuracy == best_acc && stats.val_loss < best_loss)) {
            best_acc = stats.val_accuracy;
            best_loss = stats.val_loss;
            best_params = model.params;
            report.best_epoch = epoch;
        }
    }

    model.params = std::move(best_params);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return {std::move(model), std::move(report)};
}

}  // namespace

TrainResult train_teacher(const ModelSpec& spec, const Dataset& dataset,
                          const DistillConfig& config) {
    return train_impl(spec, dataset, config, nullptr);
}

TrainResult distill(const Model& teacher, const ModelSpec& student_spec, const Dataset& dataset,
                    const DistillConfig& config) {
    // The teacher is frozen, so its logits per training sample are constants;
    // compute them once in inference mode.
    TeacherLogits table;
    for (size_t i : dataset.indices(Split::Train)) {
        const Sample& s = dataset.samples[i];
        table[s.id] = forward(teacher, s.image, false).logits;
    }
    return train_impl(student_spec, dataset, config, &table);
}

TrainResult distill(const TeacherLogits& table, const ModelSpec& student_spec,
                    const Dataset& dataset, const DistillConfig& config) {
    return train_impl(student_spec, dataset, config, &table);
}

TeacherLogits load_teacher_logits_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");

    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError(ParseFault::Truncated, path.string() + ": missing header");
    }
    std::vector<std::string> header = split_csv_line(line);
    if (header.size() < 2 || header[0] != "sample_id") {
        throw ParseError(ParseFault::Malformed,
                         path.string() + ": header must be sample_id,logit_0,...");
    }
    for (size_t c = 1; c < header.size(); ++c) {
        if (header[c] != "logit_" + std::to_string(c - 1)) {
            throw ParseError(ParseFault::Malformed,
                             path.string() + ": unexpected header column '" + header[c] + "'");
        }
    }
    const size_t m = header.size() - 1;

    TeacherLogits table;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != m + 1) {
            throw ParseError(ParseFault::Malformed, path.string() + ":" + std::to_string(line_no) +
                                                        ": expected " + std::to_string(m + 1) +
                                                        " fields");
        }
        Tensor logits({m});
        for (size_t c = 0; c < m; ++c) logits[c] = parse_double(fields[c + 1]);
        table[fields[0]] = std::move(logits);
    }
    return table;
}

void write_teacher_logits_csv(const TeacherLogits& table, size_t num_classes,
                              const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "sample_id";
    for (size_t c = 0; c < num_classes; ++c) out << ",logit_" << c;
    out << "\n";
    for (const auto& [id, logits] : table) {
        out << id;
        for (size_t c = 0; c < logits.numel(); ++c) out << "," << format_double(logits[c]);
        out << "\n";
    }
}

}  // namespace kdx
