#include "kdx/evaluate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "kdx/csv.hpp"
#include "kdx/errors.hpp"
#include "kdx/ops.hpp"
#include "kdx/rng.hpp"

namespace kdx {

namespace {

constexpr double kProbFloor = 1e-12;

size_t argmax(const Tensor& v) {
    size_t best = 0;
    for (size_t i = 1; i < v.numel(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

}  // namespace

// Mann-Whitney formulation with average ranks for ties.
double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
    const size_t n = scores.size();
    size_t n_pos = 0;
    for (bool b : positive) n_pos += b ? 1 : 0;
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return 0.5;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (size_t k = i; k < j; ++k) {
            if (positive[order[k]]) rank_sum_pos += avg_rank;
        }
        i = j;
    }
    const double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

MetricsReport classification_metrics(const Model& model, const Dataset& dataset, Split split) {
    std::vector<size_t> idx = dataset.indices(split);
    if (idx.empty()) {
        throw ConfigError(std::string("dataset split '") + split_name(split) + "' is empty");
    }
    const size_t m = dataset.num_classes();

    MetricsReport report;
    report.confusion.assign(m, std::vector<size_t>(m, 0));
    std::vector<std::vector<double>> scores(m);  // per class, per sample
    std::vector<std::vector<bool>> is_class(m);

    double loss = 0.0;
    size_t correct = 0;
    for (size_t i : idx) {
        const Sample& s = dataset.samples[i];
        Tensor p = softmax_t(forward(model, s.image, false).logits, 1.0);
        const size_t pred = argmax(p);
        report.confusion[s.label][pred] += 1;
        if (pred == s.label) ++correct;
        loss -= std::log(std::clamp(p[s.label], kProbFloor, 1.0));
        for (size_t c = 0; c < m; ++c) {
            scores[c].push_back(p[c]);
            is_class[c].push_back(s.label == c);
        }
    }

    report.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
    report.mean_loss = loss / static_cast<double>(idx.size());
    report.precision.assign(m, 0.0);
    report.recall.assign(m, 0.0);
    report.f1.assign(m, 0.0);
    report.auc.assign(m, 0.0);

    double f1_sum = 0.0;
    for (size_t c = 0; c < m; ++c) {
        size_t tp = report.confusion[c][c];
        size_t pred_c = 0, true_c = 0;
        for (size_t k = 0; k < m; ++k) {
            pred_c += report.confusion[k][c];
            true_c += report.confusion[c][k];
        }
        report.precision[c] = pred_c ? static_cast<double>(tp) / pred_c : 0.0;
        report.recall[c] = true_c ? static_cast<double>(tp) / true_c : 0.0;
        const double pr = report.precision[c] + report.recall[c];
        report.f1[c] = pr > 0.0 ? 2.0 * report.precision[c] * report.recall[c] / pr : 0.0;
        f1_sum += report.f1[c];
        report.auc[c] = roc_auc(scores[c], is_class[c]);
    }
    report.macro_f1 = f1_sum / static_cast<double>(m);
    return report;
}

std::vector<NetBenefitRow> decision_curve(const Model& model, const Dataset& dataset, Split split,
                                          const std::vector<double>& thresholds,
                                          size_t positive_class) {
    std::vector<size_t> idx = dataset.indices(split);
    if (idx.empty()) throw ConfigError("decision_curve over an empty split");
    if (positive_class >= dataset.num_classes()) throw DomainError("positive class out of range");
    for (double t : thresholds) {
        if (!(t > 0.0) || !(t < 1.0)) throw DomainError("thresholds must lie in (0,1)");
    }

    std::vector<double> probs;
    std::vector<bool> positives;
    for (size_t i : idx) {
        const Sample& s = dataset.samples[i];
        Tensor p = softmax_t(forward(model, s.image, false).logits, 1.0);
        probs.push_back(p[positive_class]);
        positives.push_back(s.label == positive_class);
    }
    const double n = static_cast<double>(idx.size());
    double prevalence = 0.0;
    for (bool b : positives) prevalence += b ? 1.0 : 0.0;
    prevalence /= n;

    std::vector<NetBenefitRow> rows;
    for (double t : thresholds) {
        size_t tp = 0, fp = 0;
        for (size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] >= t) {
                if (positives[i]) ++tp;
                else ++fp;
            }
        }
        const double odds = t / (1.0 - t);
        NetBenefitRow row;
        row.threshold = t;
        row.net_benefit = static_cast<double>(tp) / n - static_cast<double>(fp) / n * odds;
        row.treat_all = prevalence - (1.0 - prevalence) * odds;
        row.treat_none = 0.0;
        rows.push_back(row);
    }
    return rows;
}

namespace {

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Tensor input_gradient(const Model& model, const Tensor& image, size_t true_class) {
    ForwardTrace trace = forward(model, image, true);
    Tensor p = softmax_t(trace.logits, 1.0);
    Tensor dlogits({model.spec.num_classes});
    for (size_t c = 0; c < p.numel(); ++c) dlogits[c] = p[c] - (c == true_class ? 1.0 : 0.0);
    return backprop(model, image, trace, dlogits).input_grad;
}

}  // namespace

Tensor fgsm(const Model& model, const Tensor& image, size_t true_class, double epsilon) {
    if (epsilon < 0.0) throw DomainError("fgsm epsilon must be non-negative");
    if (true_class >= model.spec.num_classes) throw DomainError("true class out of range");
    Tensor grad = input_gradient(model, image, true_class);
    Tensor adv = image;
    for (size_t i = 0; i < adv.numel(); ++i) {
        adv.data[i] = std::clamp(adv.data[i] + epsilon * sign_of(grad.data[i]), 0.0, 1.0);
    }
    return adv;
}

double quantile_value(const Tensor& values, double q) {
    if (q < 0.0 || q > 1.0) throw DomainError("quantile must lie in [0,1]");
    if (values.numel() == 0) throw ShapeError("quantile of an empty tensor");
    std::vector<double> sorted = values.data;
    std::sort(sorted.begin(), sorted.end());
    const size_t idx = static_cast<size_t>(q * static_cast<double>(sorted.size() - 1));
    return sorted[idx];
}

Tensor fgsm_masked(const Model& model, const Tensor& image, size_t true_class, double epsilon,
                   const AttributionMap& map, double quantile) {
    if (epsilon < 0.0) throw DomainError("fgsm epsilon must be non-negative");
    if (true_class >= model.spec.num_classes) throw DomainError("true class out of range");
    if (image.rank() != 3 ||
        map.values.shape != std::vector<size_t>{image.shape[1], image.shape[2]}) {
        throw ShapeError("attribution map does not match image dimensions");
    }
    const double threshold = quantile_value(map.values, quantile);
    Tensor grad = input_gradient(model, image, true_class);
    Tensor adv = image;
    const size_t h = image.shape[1], w = image.shape[2];
    for (size_t c = 0; c < image.shape[0]; ++c) {
        for (size_t y = 0; y < h; ++y) {
            for (size_t x = 0; x < w; ++x) {
                if (map.values.at(y, x) > threshold) {
                    const size_t i = (c * h + y) * w + x;
                    adv.data[i] = std::clamp(adv.data[i] + epsilon * sign_of(grad.data[i]), 0.0, 1.0);
                }
            }
        }
    }
    return adv;
}

FidelityResult fidelity_score(const Model& model, const Dataset& dataset, Split split,
                              AttributionMethod method, const FidelityOptions& opts) {
    std::vector<size_t> idx = dataset.indices(split);
    if (idx.empty()) throw ConfigError("fidelity over an empty split");
    const size_t m = dataset.num_classes();

    FidelityResult result;
    result.epsilon = opts.epsilon;
    result.quantile = opts.quantile;
    result.method = method;
    result.normal_class = opts.normal_class;
    result.per_class_mean.assign(m, 0.0);
    result.per_class_count.assign(m, 0);
    std::vector<double> per_class_sum(m, 0.0);

    size_t ordinal = 0;
    for (size_t i : idx) {
        const Sample& s = dataset.samples[i];
        ++ordinal;
        Tensor p = softmax_t(forward(model, s.image, false).logits, 1.0);
        if (argmax(p) != s.label) continue;  // correctly classified samples only
        const double c_orig = p[s.label];

        AttributionMap map;
        switch (method) {
            case AttributionMethod::GradCam:
                map = grad_cam(model, s.image, s.label);
                break;
            case AttributionMethod::AvgFeatureMap: {
                ForwardTrace trace = forward(model, s.image, true);
                map = average_feature_map(model.spec, trace, conv_layer_indices(model.spec).back());
                break;
            }
            case AttributionMethod::ShapleyPatch: {
                PatchGrid grid(opts.shapley_patch_size, s.image.shape[1], s.image.shape[2]);
                map = shapley_patch(model, s.image, s.label, grid, opts.shapley_permutations,
                                    derive_seed(opts.seed, ordinal));
                break;
            }
        }

        Tensor adv = fgsm_masked(model, s.image, s.label, opts.epsilon, map, opts.quantile);
        const double c_adv = softmax_t(forward(model, adv, false).logits, 1.0)[s.label];

        FidelitySample fs;
        fs.id = s.id;
        fs.label = s.label;
        fs.c_orig = c_orig;
        fs.c_adv = c_adv;
        fs.ratio = c_adv / c_orig;
        result.samples.push_back(fs);
        per_class_sum[s.label] += fs.ratio;
        result.per_class_count[s.label] += 1;
    }

    double mean_sum = 0.0;
    size_t mean_classes = 0;
    for (size_t c = 0; c < m; ++c) {
        if (result.per_class_count[c] > 0) {
            result.per_class_mean[c] = per_class_sum[c] / result.per_class_count[c];
        }
        if (opts.normal_class && *opts.normal_class == c) continue;
        if (result.per_class_count[c] > 0) {
            mean_sum += result.per_class_mean[c];
            ++mean_classes;
        }
    }
    result.mean_ratio = mean_classes ? mean_sum / static_cast<double>(mean_classes) : 0.0;
    return result;
}

TimingReport measure_met(const std::string& name, const std::function<void()>& op, size_t warmup,
                         size_t runs) {
    if (runs < 1) throw DomainError("measure_met needs at least one run");
    for (size_t i = 0; i < warmup; ++i) op();

    std::vector<double> seconds(runs);
    for (size_t i = 0; i < runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        op();
        seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    TimingReport report;
    report.name = name;
    report.warmup = warmup;
    report.runs = runs;
    report.mean_seconds = std::accumulate(seconds.begin(), seconds.end(), 0.0) / runs;
    if (runs > 1) {
        double ss = 0.0;
        for (double s : seconds) ss += (s - report.mean_seconds) * (s - report.mean_seconds);
        report.stddev_seconds = std::sqrt(ss / static_cast<double>(runs - 1));
    }
    return report;
}

std::vector<EfficiencyRow> efficiency_report(const Model& teacher, const Model& student,
                                             const Tensor& image, size_t warmup, size_t runs) {
    std::vector<EfficiencyRow> rows;
    for (const auto& [label, model] : {std::pair<const char*, const Model*>{"teacher", &teacher},
                                       {"student", &student}}) {
        const unsigned long long flops = count_flops(model->spec).total;
        const size_t target = argmax(forward(*model, image, false).logits);
        const size_t patch = std::max<size_t>(1, image.shape[1] / 4);
        for (const char* method : {"grad-cam", "shapley-patch", "avg-feature-maps"}) {
            std::function<void()> op;
            if (method == std::string("grad-cam")) {
                op = [&, target] { grad_cam(*model, image, target); };
            } else if (method == std::string("shapley-patch")) {
                op = [&, target, patch] {
                    PatchGrid grid(patch, image.shape[1], image.shape[2]);
                    shapley_patch(*model, image, target, grid, 2, 1);
                };
            } else {
                op = [&] { explain_all_layers(*model, image); };
            }
            TimingReport t = measure_met(std::string(label) + "/" + method, op, warmup, runs);
            rows.push_back({label, method, flops, t.mean_seconds, t.stddev_seconds});
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// CSV emission

std::string metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& reports) {
    std::string out = "model,accuracy,macro_f1,mean_loss\n";
    for (const auto& [name, r] : reports) {
        out += csv_escape(name) + "," + format_double(r.accuracy) + "," +
               format_double(r.macro_f1) + "," + format_double(r.mean_loss) + "\n";
    }
    return out;
}

std::string per_class_metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& reports,
                                  const std::vector<std::string>& class_names) {
    std::string out = "model,class,precision,recall,f1,auc\n";
    for (const auto& [name, r] : reports) {
        for (size_t c = 0; c < class_names.size(); ++c) {
            out += csv_escape(name) + "," + csv_escape(class_names[c]) + "," +
                   format_double(r.precision[c]) + "," + format_double(r.recall[c]) + "," +
                   format_double(r.f1[c]) + "," + format_double(r.auc[c]) + "\n";
        }
    }
    return out;
}

std::string fidelity_csv(const std::vector<FidelityResult>& results,
                         const std::vector<std::string>& class_names) {
    std::string out = "method";
    const size_t normal = results.empty() || !results.front().normal_class
                              ? class_names.size()
                              : *results.front().normal_class;
    for (size_t c = 0; c < class_names.size(); ++c) {
        if (c == normal) continue;
        out += "," + csv_escape(class_names[c]);
    }
    out += ",Avg\n";
    for (const FidelityResult& r : results) {
        out += attribution_method_name(r.method);
        for (size_t c = 0; c < class_names.size(); ++c) {
            if (c == normal) continue;
            out += "," + format_double(r.per_class_mean[c]);
        }
        out += "," + format_double(r.mean_ratio) + "\n";
    }
    return out;
}

std::string efficiency_csv(const std::vector<EfficiencyRow>& rows) {
    std::string out = "model,method,flops,met_seconds,met_stddev\n";
    for (const EfficiencyRow& r : rows) {
        out += r.model + "," + r.method + "," + std::to_string(r.flops) + "," +
               format_double(r.met_seconds) + "," + format_double(r.met_stddev) + "\n";
    }
    return out;
}

std::string decision_curve_csv(const std::vector<NetBenefitRow>& rows) {
    std::string out = "threshold,net_benefit,treat_all,treat_none\n";
    for (const NetBenefitRow& r : rows) {
        out += format_double(r.threshold) + "," + format_double(r.net_benefit) + "," +
               format_double(r.treat_all) + "," + format_double(r.treat_none) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Confusion-matrix rendering

namespace {

// 5x7 digit glyphs, bit 4 = leftmost column.
constexpr uint8_t kDigits[10][7] = {
    {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
    {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
    {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
    {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
    {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}};

void draw_text(Image& img, const std::string& text, size_t cx, size_t cy, size_t scale,
               uint8_t r, uint8_t g, uint8_t b) {
    const size_t glyph_w = 6 * scale;  // 5 columns + 1 gap
    const size_t total_w = text.size() * glyph_w - scale;
    const size_t x0 = cx > total_w / 2 ? cx - total_w / 2 : 0;
    const size_t y0 = cy > (7 * scale) / 2 ? cy - (7 * scale) / 2 : 0;
    for (size_t t = 0; t < text.size(); ++t) {
        if (text[t] < '0' || text[t] > '9') continue;
        const uint8_t* glyph = kDigits[text[t] - '0'];
        for (size_t row = 0; row < 7; ++row) {
            for (size_t col = 0; col < 5; ++col) {
                if (!(glyph[row] & (1 << (4 - col)))) continue;
                for (size_t sy = 0; sy < scale; ++sy) {
                    for (size_t sx = 0; sx < scale; ++sx) {
                        const size_t x = x0 + t * glyph_w + col * scale + sx;
                        const size_t y = y0 + row * scale + sy;
                        if (x < img.width && y < img.height) {
                            img.at(y, x, 0) = r;
                            img.at(y, x, 1) = g;
                            img.at(y, x, 2) = b;
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Image render_confusion_matrix(const std::vector<std::vector<size_t>>& confusion) {
    const size_t m = confusion.size();
    if (m == 0) throw ShapeError("empty confusion matrix");
    constexpr size_t kCell = 48;

    size_t max_count = 1;
    for (const auto& row : confusion) {
        for (size_t v : row) max_count = std::max(max_count, v);
    }

    Image img(m * kCell, m * kCell, 3);
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < m; ++j) {
            const double t = static_cast<double>(confusion[i][j]) / static_cast<double>(max_count);
            const std::array<double, 3> rgb = jet_color(t);
            for (size_t y = i * kCell; y < (i + 1) * kCell; ++y) {
                for (size_t x = j * kCell; x < (j + 1) * kCell; ++x) {
                    img.at(y, x, 0) = static_cast<uint8_t>(std::lround(rgb[0] * 255.0));
                    img.at(y, x, 1) = static_cast<uint8_t>(std::lround(rgb[1] * 255.0));
                    img.at(y, x, 2) = static_cast<uint8_t>(std::lround(rgb[2] * 255.0));
                }
            }
            const double luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            const uint8_t ink = luma > 0.5 ? 0 : 255;
            const std::string text = std::to_string(confusion[i][j]);
            const size_t scale = text.size() <= 3 ? 2 : 1;
            draw_text(img, text, j * kCell + kCell / 2, i * kCell + kCell / 2, scale, ink, ink, ink);
        }
    }
    return img;
}

}  // namespace kdx
