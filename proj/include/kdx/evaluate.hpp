#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kdx/data.hpp"
#include "kdx/explain.hpp"
#include "kdx/model.hpp"

namespace kdx {

struct MetricsReport {
    double accuracy = 0;
    double macro_f1 = 0;
    double mean_loss = 0;
    std::vector<double> precision, recall, f1;
    std::vector<double> auc;  // one-vs-rest, rank statistic with ties at 1/2
    std::vector<std::vector<size_t>> confusion;  // [true][pred]
};

MetricsReport classification_metrics(const Model& model, const Dataset& dataset, Split split);

// One-vs-rest ROC-AUC by rank statistic, ties counted 1/2. Returns 0.5 when
// either class is empty.
double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

struct NetBenefitRow {
    double threshold = 0;
    double net_benefit = 0;
    double treat_all = 0;
    double treat_none = 0;
};

// Decision curve analysis against one positive class: a sample is called
// positive when its positive-class probability reaches the threshold.
std::vector<NetBenefitRow> decision_curve(const Model& model, const Dataset& dataset, Split split,
                                          const std::vector<double>& thresholds,
                                          size_t positive_class);

// One-step sign attack: clip(x + epsilon * sign(dL/dx)) with L the
// cross-entropy of the true class. The unmasked form perturbs every pixel.
Tensor fgsm(const Model& model, const Tensor& image, size_t true_class, double epsilon);

// Perturbs only pixels whose attribution value exceeds the map's q-quantile.
Tensor fgsm_masked(const Model& model, const Tensor& image, size_t true_class, double epsilon,
                   const AttributionMap& map, double quantile);

// Nearest-rank quantile of a tensor's values (q in [0,1]).
double quantile_value(const Tensor& values, double q);

struct FidelitySample {
    std::string id;
    size_t label = 0;
    double c_orig = 0, c_adv = 0, ratio = 0;
};

struct FidelityResult {
    std::vector<FidelitySample> samples;  // correctly classified only
    std::vector<double> per_class_mean;   // 0 where a class has no samples
    std::vector<size_t> per_class_count;
    double mean_ratio = 0;  // over included (non-normal) classes
    double epsilon = 0, quantile = 0;
    AttributionMethod method = AttributionMethod::GradCam;
    std::optional<size_t> normal_class;
};

struct FidelityOptions {
    double epsilon = 0.02;
    double quantile = 0.8;
    size_t shapley_patch_size = 8;
    size_t shapley_permutations = 8;
    // Class excluded from the aggregate mean (none for datasets without a
    // normal/background class).
    std::optional<size_t> normal_class;
    uint64_t seed = 0;
};

// Confidence ratio C_adv/C_orig of the true class under attribution-masked
// FGSM, aggregated over correctly classified samples.
FidelityResult fidelity_score(const Model& model, const Dataset& dataset, Split split,
                              AttributionMethod method, const FidelityOptions& opts = {});

struct TimingReport {
    std::string name;
    size_t warmup = 0, runs = 0;
    double mean_seconds = 0;
    double stddev_seconds = 0;
};

// Wall-clock mean execution time over `runs` timed invocations after
// `warmup` untimed ones.
TimingReport measure_met(const std::string& name, const std::function<void()>& op,
                         size_t warmup = 3, size_t runs = 20);

struct EfficiencyRow {
    std::string model;
    std::string method;
    unsigned long long flops = 0;
    double met_seconds = 0;
    double met_stddev = 0;
};

// {teacher, student} x {grad-cam, shapley-patch, avg-feature-maps}: model
// forward FLOPs plus measured time of one explanation on the given image.
std::vector<EfficiencyRow> efficiency_report(const Model& teacher, const Model& student,
                                             const Tensor& image, size_t warmup = 3,
                                             size_t runs = 20);

// CSV emission (UTF-8, '.' decimal, header row).
std::string metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& reports);
std::string per_class_metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& reports,
                                  const std::vector<std::string>& class_names);
std::string fidelity_csv(const std::vector<FidelityResult>& results,
                         const std::vector<std::string>& class_names);
std::string efficiency_csv(const std::vector<EfficiencyRow>& rows);
std::string decision_curve_csv(const std::vector<NetBenefitRow>& rows);

// Annotated confusion-matrix heatmap; one cell block per entry.
Image render_confusion_matrix(const std::vector<std::vector<size_t>>& confusion);

}  // namespace kdx
