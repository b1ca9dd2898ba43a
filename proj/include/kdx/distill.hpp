#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kdx/data.hpp"
#include "kdx/model.hpp"
#include "kdx/tensor.hpp"

namespace kdx {

// Which cross-entropy the soft term uses. TeacherVsStudent is the
// conventional form (teacher's softened output as target for the student's
// softened output) and the default for training. Literal compares the
// softened one-hot labels to the teacher's softened output; it contains no
// student term, so it contributes zero gradient and is kept for analysis.
enum class SoftMode { TeacherVsStudent, Literal };

const char* soft_mode_name(SoftMode mode);
SoftMode soft_mode_from_name(const std::string& name);

struct DistillConfig {
    double alpha = 0.7;
    double temperature = 10.0;
    SoftMode soft_mode = SoftMode::TeacherVsStudent;
    size_t epochs = 10;
    size_t batch_size = 16;
    double learning_rate = 1e-4;
    uint64_t seed = 0;

    void validate() const;
};

// Mean cross-entropy of predicted probability rows against one-hot labels,
// probabilities clamped to [1e-12, 1] before the log.
double hard_loss(const Tensor& probs, const Tensor& onehot);

// Soft loss for one sample at temperature T; see SoftMode.
double soft_loss(const Tensor& y_true_onehot, const Tensor& teacher_logits,
                 const Tensor& student_logits, double temperature, SoftMode mode);

// alpha * hard + (1 - alpha) * soft.
double distill_loss(double hard, double soft, double alpha);

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Standard Adam with bias correction over a model's parameter list.
struct AdamState {
    std::vector<LayerParams> m, v;
    size_t step = 0;
    AdamConfig config;

    static AdamState init(const std::vector<LayerParams>& params, const AdamConfig& config);
};

void adam_step(AdamState& state, std::vector<LayerParams>& params,
               const std::vector<LayerParams>& grads);

// Imported table of teacher logits keyed by sample id.
using TeacherLogits = std::map<std::string, Tensor>;

// Summed loss and parameter gradients of the blended objective over one
// batch, exactly as consumed by the training loop (divide by the batch size
// for means). soft_targets == nullptr gives the pure cross-entropy objective.
struct ObjectiveEval {
    double loss_sum = 0;
    std::vector<LayerParams> grad_sum;
};

ObjectiveEval distill_objective(const Model& student, const Dataset& dataset,
                                const std::vector<size_t>& batch_indices,
                                const TeacherLogits* soft_targets, const DistillConfig& config);

struct EpochStats {
    double train_loss = 0;
    double val_accuracy = 0;
    double val_loss = 0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    size_t best_epoch = 0;
    double wall_seconds = 0;
};

struct TrainResult {
    Model model;
    TrainReport report;
};

// Teacher pre-training: pure cross-entropy, best-validation weights kept.
TrainResult train_teacher(const ModelSpec& spec, const Dataset& dataset,
                          const DistillConfig& config);

// Distillation against a live, frozen teacher model. Teacher logits are
// computed once per training sample up front (the teacher never changes).
TrainResult distill(const Model& teacher, const ModelSpec& student_spec, const Dataset& dataset,
                    const DistillConfig& config);

// Distillation against an imported logits table. A training sample missing
// from the table is a DataError naming the sample.
TrainResult distill(const TeacherLogits& table, const ModelSpec& student_spec,
                    const Dataset& dataset, const DistillConfig& config);

// CSV with header sample_id,logit_0,...,logit_{M-1}.
TeacherLogits load_teacher_logits_csv(const std::filesystem::path& path);
void write_teacher_logits_csv(const TeacherLogits& table, size_t num_classes,
                              const std::filesystem::path& path);

// Mean argmax accuracy and mean cross-entropy loss of a model over a split.
std::pair<double, double> evaluate_split(const Model& model, const Dataset& dataset, Split split);

}  // namespace kdx
