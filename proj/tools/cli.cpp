#include "cli.hpp"

#include <zlib.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdx/csv.hpp"
#include "kdx/data.hpp"
#include "kdx/distill.hpp"
#include "kdx/errors.hpp"
#include "kdx/evaluate.hpp"
#include "kdx/explain.hpp"
#include "kdx/image.hpp"
#include "kdx/model.hpp"
#include "kdx/rng.hpp"

namespace kdxcli {

using json = nlohmann::json;
namespace fs = std::filesystem;
using namespace kdx;

namespace {

constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Run directories and manifests

uint64_t fnv1a(const std::string& text) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Tracks a run's output directory and its artifact list. Run directories are
// never reused: a taken name gets a numeric suffix.
class Run {
public:
    Run(const fs::path& out_root, const std::string& command, const std::string& run_name,
        json config)
        : command_(command), config_(std::move(config)), started_(iso_timestamp()) {
        std::string base = run_name.empty() ? command + "-" + utc_timestamp() : run_name;
        fs::path dir = out_root / base;
        if (!run_name.empty() && fs::exists(dir)) {
            throw ConfigError("run directory " + dir.string() + " already exists");
        }
        for (int suffix = 2; fs::exists(dir); ++suffix) {
            dir = out_root / (base + "-" + std::to_string(suffix));
        }
        fs::create_directories(dir);
        dir_ = dir;
    }

    const fs::path& dir() const { return dir_; }

    fs::path path(const std::string& name) const { return dir_ / name; }

    void add_artifact(const fs::path& file) {
        std::ifstream in(file, std::ios::binary);
        if (!in) throw IoError("artifact " + file.string() + " is missing");
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        json entry;
        entry["path"] = fs::relative(file, dir_).string();
        entry["bytes"] = bytes.size();
        entry["crc32"] = static_cast<uint32_t>(
            ::crc32(0L, reinterpret_cast<const unsigned char*>(bytes.data()),
                    static_cast<uInt>(bytes.size())));
        std::lock_guard<std::mutex> lock(mutex_);
        artifacts_.push_back(std::move(entry));
    }

    void write_text(const std::string& name, const std::string& text) {
        std::ofstream out(path(name), std::ios::binary);
        if (!out) throw IoError("cannot write " + path(name).string());
        out << text;
        out.close();
        add_artifact(path(name));
    }

    void finish(const json& headline) {
        json manifest;
        manifest["command"] = command_;
        manifest["config"] = config_;
        manifest["config_hash"] = hex64(fnv1a(config_.dump()));
        manifest["toolkit_version"] = kVersion;
        manifest["started_at"] = started_;
        manifest["finished_at"] = iso_timestamp();
        manifest["artifacts"] = artifacts_;
        manifest["headline"] = headline;
        std::ofstream out(path("manifest.json"));
        if (!out) throw IoError("cannot write manifest");
        out << manifest.dump(2) << "\n";
        std::cout << dir_.string() << "\n";
    }

private:
    fs::path dir_;
    std::string command_;
    json config_;
    std::string started_;
    json artifacts_ = json::array();
    std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Shared option bundles

struct CommonOptions {
    std::string out_root = "runs";
    std::string run_name;
    uint64_t seed = 0;
};

struct DataOptions {
    bool synth = false;
    size_t synth_size = 32;
    double synth_blob_sigma = 3.0;
    double synth_noise_sigma = 0.1;
    size_t synth_per_class = 500;
    std::string image_dir;
    size_t image_size = 32;
    size_t image_channels = 1;
    std::string idx_images;
    std::string idx_labels;
    std::vector<double> split_ratios{0.7, 0.2, 0.1};
    int64_t split_seed = -1;  // -1: derive from the run seed
};

void add_common_options(CLI::App* cmd, CommonOptions& opts) {
    const char* env_out = std::getenv("KDX_OUT");
    if (env_out && *env_out) opts.out_root = env_out;
    cmd->add_option("--out", opts.out_root, "Output root directory");
    cmd->add_option("--run-name", opts.run_name, "Run directory name (default: timestamped)");
    cmd->add_option("--seed", opts.seed, "Root seed for all randomness");
}

void add_data_options(CLI::App* cmd, DataOptions& opts) {
    cmd->add_flag("--synth", opts.synth, "Generate the synthetic quadrant dataset in memory");
    cmd->add_option("--synth-size", opts.synth_size, "Synthetic image edge length");
    cmd->add_option("--synth-blob-sigma", opts.synth_blob_sigma, "Synthetic blob stddev");
    cmd->add_option("--synth-noise-sigma", opts.synth_noise_sigma, "Synthetic pixel noise stddev");
    cmd->add_option("--synth-per-class", opts.synth_per_class, "Synthetic samples per class");
    cmd->add_option("--image-dir", opts.image_dir, "Directory of class-named PNG folders");
    cmd->add_option("--image-size", opts.image_size, "Loader resize target");
    cmd->add_option("--image-channels", opts.image_channels, "Loader channel count (1 or 3)");
    cmd->add_option("--idx-images", opts.idx_images, "IDX image file");
    cmd->add_option("--idx-labels", opts.idx_labels, "IDX label file");
    cmd->add_option("--split", opts.split_ratios, "Split ratios (train,val[,test])")
        ->delimiter(',');
    cmd->add_option("--split-seed", opts.split_seed, "Split seed (default: derived from --seed)");
}

json data_config_json(const DataOptions& d) {
    json j;
    if (d.synth) {
        j["source"] = "synth";
        j["synth_size"] = d.synth_size;
        j["synth_blob_sigma"] = d.synth_blob_sigma;
        j["synth_noise_sigma"] = d.synth_noise_sigma;
        j["synth_per_class"] = d.synth_per_class;
    } else if (!d.image_dir.empty()) {
        j["source"] = "image-dir";
        j["image_dir"] = d.image_dir;
        j["image_size"] = d.image_size;
        j["image_channels"] = d.image_channels;
    } else {
        j["source"] = "idx";
        j["idx_images"] = d.idx_images;
        j["idx_labels"] = d.idx_labels;
    }
    j["split"] = d.split_ratios;
    j["split_seed"] = d.split_seed;
    return j;
}

Dataset load_dataset(const DataOptions& d, uint64_t run_seed) {
    int sources = (d.synth ? 1 : 0) + (d.image_dir.empty() ? 0 : 1) +
                  (d.idx_images.empty() && d.idx_labels.empty() ? 0 : 1);
    if (sources != 1) {
        throw ConfigError("exactly one dataset source required: --synth, --image-dir, or --idx-*");
    }
    Dataset ds;
    if (d.synth) {
        SynthSpec spec;
        spec.image_size = d.synth_size;
        spec.blob_sigma = d.synth_blob_sigma;
        spec.noise_sigma = d.synth_noise_sigma;
        spec.samples_per_class = d.synth_per_class;
        spec.seed = run_seed;
        ds = make_synthetic(spec);
    } else if (!d.image_dir.empty()) {
        ImageDirOptions opts;
        opts.image_size = d.image_size;
        opts.channels = d.image_channels;
        ds = load_image_dir(d.image_dir, opts);
    } else {
        if (d.idx_images.empty() || d.idx_labels.empty()) {
            throw ConfigError("idx input needs both --idx-images and --idx-labels");
        }
        ds = load_idx(d.idx_images, d.idx_labels);
    }
    const uint64_t split_seed =
        d.split_seed >= 0 ? static_cast<uint64_t>(d.split_seed) : derive_seed(run_seed, 9001);
    return split_dataset(std::move(ds), d.split_ratios, split_seed);
}

std::array<size_t, 3> dataset_input_shape(const Dataset& ds) {
    if (ds.samples.empty()) throw DataError("dataset is empty");
    const auto& s = ds.samples.front().image.shape;
    return {s[0], s[1], s[2]};
}

std::string train_report_csv(const TrainReport& report) {
    std::string out = "epoch,train_loss,val_accuracy,val_loss,best\n";
    for (size_t e = 0; e < report.epochs.size(); ++e) {
        const EpochStats& s = report.epochs[e];
        out += std::to_string(e + 1) + "," + format_double(s.train_loss) + "," +
               format_double(s.val_accuracy) + "," + format_double(s.val_loss) + "," +
               (e == report.best_epoch ? "1" : "0") + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// dataset-synth

struct SynthCmd {
    CommonOptions common;
    DataOptions data;
};

int cmd_dataset_synth(const SynthCmd& cmd) {
    DataOptions data = cmd.data;
    data.synth = true;
    Dataset ds = load_dataset(data, cmd.common.seed);

    json config;
    config["seed"] = cmd.common.seed;
    config["data"] = data_config_json(data);
    Run run(cmd.common.out_root, "dataset-synth", cmd.common.run_name, config);

    for (const std::string& cls : ds.class_names) {
        fs::create_directories(run.path("dataset") / cls);
    }
    for (const Sample& s : ds.samples) {
        const fs::path file = run.path("dataset") / ds.class_names[s.label] / (s.id + ".png");
        write_png(tensor_to_image(s.image), file);
        run.add_artifact(file);
    }
    run.write_text("split.json", split_manifest_json(ds));

    json headline;
    headline["samples"] = ds.samples.size();
    headline["classes"] = ds.class_names;
    run.finish(headline);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train-teacher

struct TrainTeacherCmd {
    CommonOptions common;
    DataOptions data;
    size_t depth = 10;
    size_t epochs = 10;
    size_t batch_size = 16;
    double learning_rate = 1e-4;
};

int cmd_train_teacher(const TrainTeacherCmd& cmd) {
    Dataset ds = load_dataset(cmd.data, cmd.common.seed);
    ModelSpec spec = build_teacher_spec(dataset_input_shape(ds), ds.num_classes(), cmd.depth);

    DistillConfig cfg;
    cfg.epochs = cmd.epochs;
    cfg.batch_size = cmd.batch_size;
    cfg.learning_rate = cmd.learning_rate;
    cfg.seed = cmd.common.seed;

    json config;
    config["seed"] = cmd.common.seed;
    config["data"] = data_config_json(cmd.data);
    config["depth"] = cmd.depth;
    config["epochs"] = cmd.epochs;
    config["batch_size"] = cmd.batch_size;
    config["learning_rate"] = cmd.learning_rate;
    Run run(cmd.common.out_root, "train-teacher", cmd.common.run_name, config);

    TrainResult result = train_teacher(spec, ds, cfg);
    save_model(result.model, run.path("teacher.kdfm"));
    run.add_artifact(run.path("teacher.kdfm"));
    run.write_text("report.csv", train_report_csv(result.report));

    json headline;
    headline["best_epoch"] = result.report.best_epoch + 1;
    headline["val_accuracy"] = result.report.epochs[result.report.best_epoch].val_accuracy;
    headline["wall_seconds"] = result.report.wall_seconds;
    run.finish(headline);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// distill

struct DistillCmd {
    CommonOptions common;
    DataOptions data;
    std::string teacher_path;
    std::string teacher_logits_path;
    std::vector<double> alphas{0.4, 0.7};
    std::vector<double> temperatures{5.0, 10.0, 15.0};
    std::string soft_mode = "teacher-vs-student";
    size_t epochs = 10;
    size_t batch_size = 16;
    double learning_rate = 1e-4;
    size_t jobs = 1;
};

struct GridCell {
    double alpha = 0, temperature = 0;
    double accuracy = 0, loss = 0, macro_f1 = 0;
    std::string model_file;
};

int cmd_distill(const DistillCmd& cmd) {
    if (cmd.teacher_path.empty() == cmd.teacher_logits_path.empty()) {
        throw ConfigError("distill needs exactly one of --teacher or --teacher-logits");
    }
    if (cmd.alphas.empty() || cmd.temperatures.empty()) {
        throw ConfigError("the distillation grid must not be empty");
    }
    Dataset ds = load_dataset(cmd.data, cmd.common.seed);
    ModelSpec student_spec = build_student_spec(dataset_input_shape(ds), ds.num_classes());
    const SoftMode mode = soft_mode_from_name(cmd.soft_mode);

    // Resolve the teacher once; both paths yield a logits table.
    TeacherLogits table;
    if (!cmd.teacher_path.empty()) {
        Model teacher = load_model(cmd.teacher_path);
        for (size_t i : ds.indices(Split::Train)) {
            const Sample& s = ds.samples[i];
            table[s.id] = forward(teacher, s.image, false).logits;
        }
    } else {
        table = load_teacher_logits_csv(cmd.teacher_logits_path);
    }

    json config;
    config["seed"] = cmd.common.seed;
    config["data"] = data_config_json(cmd.data);
    config["teacher"] = cmd.teacher_path;
    config["teacher_logits"] = cmd.teacher_logits_path;
    config["alphas"] = cmd.alphas;
    config["temperatures"] = cmd.temperatures;
    config["soft_mode"] = cmd.soft_mode;
    config["epochs"] = cmd.epochs;
    config["batch_size"] = cmd.batch_size;
    config["learning_rate"] = cmd.learning_rate;
    Run run(cmd.common.out_root, "distill", cmd.common.run_name, config);

    std::vector<GridCell> cells;
    for (double alpha : cmd.alphas) {
        for (double temperature : cmd.temperatures) {
            GridCell cell;
            cell.alpha = alpha;
            cell.temperature = temperature;
            cells.push_back(cell);
        }
    }

    const Split eval_split = ds.indices(Split::Test).empty() ? Split::Val : Split::Test;

    // Grid cells are independent; run them on a small worker pool. Each cell
    // writes only its own files, so results match serial execution.
    std::atomic<size_t> next{0};
    std::vector<std::string> errors(cells.size());
    auto worker = [&] {
        for (size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) {
            GridCell& cell = cells[i];
            try {
                DistillConfig cfg;
                cfg.alpha = cell.alpha;
                cfg.temperature = cell.temperature;
                cfg.soft_mode = mode;
                cfg.epochs = cmd.epochs;
                cfg.batch_size = cmd.batch_size;
                cfg.learning_rate = cmd.learning_rate;
                cfg.seed = cmd.common.seed;

                TrainResult result = distill(table, student_spec, ds, cfg);
                MetricsReport metrics = classification_metrics(result.model, ds, eval_split);
                cell.accuracy = metrics.accuracy;
                cell.loss = metrics.mean_loss;
                cell.macro_f1 = metrics.macro_f1;
                cell.model_file = "student_a" + format_double(cell.alpha) + "_T" +
                                  format_double(cell.temperature) + ".kdfm";
                save_model(result.model, run.path(cell.model_file));
                run.add_artifact(run.path(cell.model_file));
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    const size_t jobs = std::max<size_t>(1, std::min(cmd.jobs, cells.size()));
    for (size_t t = 0; t + 1 < jobs; ++t) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();
    for (const std::string& err : errors) {
        if (!err.empty()) throw Error(err);
    }

    size_t best = 0;
    for (size_t i = 1; i < cells.size(); ++i) {
        if (cells[i].accuracy > cells[best].accuracy ||
            (cells[i].accuracy == cells[best].accuracy && cells[i].loss < cells[best].loss)) {
            best = i;
        }
    }

    std::string grid = "alpha,temperature,accuracy,loss,macro_f1,best,model_file\n";
    for (size_t i = 0; i < cells.size(); ++i) {
        const GridCell& c = cells[i];
        grid += format_double(c.alpha) + "," + format_double(c.temperature) + "," +
                format_double(c.accuracy) + "," + format_double(c.loss) + "," +
                format_double(c.macro_f1) + "," + (i == best ? "1" : "0") + "," + c.model_file +
                "\n";
    }
    run.write_text("grid.csv", grid);

    json headline;
    headline["best_alpha"] = cells[best].alpha;
    headline["best_temperature"] = cells[best].temperature;
    headline["best_accuracy"] = cells[best].accuracy;
    headline["cells"] = cells.size();
    run.finish(headline);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// explain

struct ExplainCmd {
    CommonOptions common;
    DataOptions data;
    std::string model_path;
    std::vector<std::string> images;
    size_t count = 4;
    std::vector<std::string> methods{"avg-feature-maps", "grad-cam", "shapley-patch"};
    int64_t target_class = -1;  // -1: the model's prediction
    size_t patch_size = 8;
    size_t permutations = 20;
    double overlay_alpha = 0.5;
    bool has_data_source = false;
};

int cmd_explain(const ExplainCmd& cmd) {
    if (cmd.model_path.empty()) throw ConfigError("--model is required");
    Model model = load_model(cmd.model_path);
    const auto& in_shape = model.spec.input_shape;

    struct Item {
        std::string id;
        Tensor image;
    };
    std::vector<Item> items;
    if (!cmd.images.empty()) {
        for (const std::string& file : cmd.images) {
            Tensor t = image_to_tensor(read_png(file), in_shape[0]);
            if (t.shape[1] != in_shape[1] || t.shape[2] != in_shape[2]) {
                t = resize_bilinear(t, in_shape[1], in_shape[2]);
            }
            items.push_back({fs::path(file).stem().string(), std::move(t)});
        }
    } else if (cmd.has_data_source) {
        Dataset ds = load_dataset(cmd.data, cmd.common.seed);
        std::vector<size_t> idx = ds.indices(Split::Test);
        if (idx.empty()) idx = ds.indices(Split::Val);
        for (size_t k = 0; k < std::min(cmd.count, idx.size()); ++k) {
            const Sample& s = ds.samples[idx[k]];
            items.push_back({s.id, s.image});
        }
    } else {
        throw ConfigError("explain needs --image files or a dataset source");
    }
    if (items.empty()) throw DataError("nothing to explain");

    json config;
    config["seed"] = cmd.common.seed;
    config["model"] = cmd.model_path;
    config["methods"] = cmd.methods;
    config["target_class"] = cmd.target_class;
    config["patch_size"] = cmd.patch_size;
    config["permutations"] = cmd.permutations;
    config["overlay_alpha"] = cmd.overlay_alpha;
    Run run(cmd.common.out_root, "explain", cmd.common.run_name, config);

    size_t ordinal = 0;
    for (const Item& item : items) {
        ++ordinal;
        size_t target;
        if (cmd.target_class >= 0) {
            target = static_cast<size_t>(cmd.target_class);
        } else {
            Tensor logits = forward(model, item.image, false).logits;
            target = 0;
            for (size_t c = 1; c < logits.numel(); ++c) {
                if (logits[c] > logits[target]) target = c;
            }
        }

        for (const std::string& method : cmd.methods) {
            if (method == "avg-feature-maps") {
                json params;
                params["alpha"] = cmd.overlay_alpha;
                for (const AttributionMap& map : explain_all_layers(model, item.image)) {
                    run.add_artifact(write_attribution(run.dir(), item.id, item.image, map,
                                                       cmd.overlay_alpha, cmd.common.seed,
                                                       params.dump()));
                }
            } else if (method == "grad-cam") {
                json params;
                params["alpha"] = cmd.overlay_alpha;
                params["target_class"] = target;
                AttributionMap map = grad_cam(model, item.image, target);
                run.add_artifact(write_attribution(run.dir(), item.id, item.image, map,
                                                   cmd.overlay_alpha, cmd.common.seed,
                                                   params.dump()));
            } else if (method == "shapley-patch") {
                PatchGrid grid(cmd.patch_size, item.image.shape[1], item.image.shape[2]);
                const uint64_t call_seed = derive_seed(cmd.common.seed, ordinal);
                json params;
                params["alpha"] = cmd.overlay_alpha;
                params["target_class"] = target;
                params["patch_size"] = cmd.patch_size;
                params["permutations"] = cmd.permutations;
                params["call_seed"] = call_seed;
                AttributionMap map =
                    shapley_patch(model, item.image, target, grid, cmd.permutations, call_seed);
                run.add_artifact(write_attribution(run.dir(), item.id, item.image, map,
                                                   cmd.overlay_alpha, cmd.common.seed,
                                                   params.dump()));
            } else {
                throw ConfigError("unknown method '" + method + "'");
            }
        }
    }

    // Sidecars were written next to the overlays; record them too.
    for (const auto& entry : fs::directory_iterator(run.dir())) {
        if (entry.path().extension() == ".json" && entry.path().filename() != "manifest.json") {
            run.add_artifact(entry.path());
        }
    }

    json headline;
    headline["images"] = items.size();
    headline["methods"] = cmd.methods;
    run.finish(headline);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateCmd {
    CommonOptions common;
    DataOptions data;
    std::string teacher_path;
    std::string student_path;
    double fidelity_epsilon = 0.02;
    double fidelity_quantile = 0.8;
    int64_t normal_class = -1;
    int64_t dca_class = -1;
    size_t shapley_patch_size = 8;
    size_t shapley_permutations = 8;
    size_t met_warmup = 1;
    size_t met_runs = 5;
    bool skip_fidelity = false;
    bool skip_efficiency = false;
};

int cmd_evaluate(const EvaluateCmd& cmd) {
    if (cmd.teacher_path.empty() || cmd.student_path.empty()) {
        throw ConfigError("evaluate needs --teacher and --student model files");
    }
    Model teacher = load_model(cmd.teacher_path);
    Model student = load_model(cmd.student_path);
    Dataset ds = load_dataset(cmd.data, cmd.common.seed);
    const Split split = ds.indices(Split::Test).empty() ? Split::Val : Split::Test;

    json config;
    config["seed"] = cmd.common.seed;
    config["data"] = data_config_json(cmd.data);
    config["teacher"] = cmd.teacher_path;
    config["student"] = cmd.student_path;
    config["fidelity_epsilon"] = cmd.fidelity_epsilon;
    config["fidelity_quantile"] = cmd.fidelity_quantile;
    config["normal_class"] = cmd.normal_class;
    config["dca_class"] = cmd.dca_class;
    Run run(cmd.common.out_root, "evaluate", cmd.common.run_name, config);

    std::vector<std::pair<std::string, MetricsReport>> reports;
    reports.push_back({"teacher", classification_metrics(teacher, ds, split)});
    reports.push_back({"student", classification_metrics(student, ds, split)});
    run.write_text("metrics.csv", metrics_csv(reports));
    run.write_text("per_class_metrics.csv", per_class_metrics_csv(reports, ds.class_names));

    for (const auto& [name, report] : reports) {
        const fs::path file = run.path("confusion_" + name + ".png");
        write_png(render_confusion_matrix(report.confusion), file);
        run.add_artifact(file);
    }

    if (!cmd.skip_fidelity) {
        FidelityOptions opts;
        opts.epsilon = cmd.fidelity_epsilon;
        opts.quantile = cmd.fidelity_quantile;
        opts.shapley_patch_size = cmd.shapley_patch_size;
        opts.shapley_permutations = cmd.shapley_permutations;
        opts.seed = cmd.common.seed;
        if (cmd.normal_class >= 0) opts.normal_class = static_cast<size_t>(cmd.normal_class);
        std::vector<FidelityResult> results;
        for (AttributionMethod method :
             {AttributionMethod::AvgFeatureMap, AttributionMethod::GradCam,
              AttributionMethod::ShapleyPatch}) {
            results.push_back(fidelity_score(student, ds, split, method, opts));
        }
        run.write_text("fidelity.csv", fidelity_csv(results, ds.class_names));
    }

    if (!cmd.skip_efficiency) {
        const std::vector<size_t> idx = ds.indices(split);
        const Tensor& image = ds.samples[idx.front()].image;
        run.write_text("efficiency.csv",
                       efficiency_csv(efficiency_report(teacher, student, image, cmd.met_warmup,
                                                        cmd.met_runs)));
    }

    if (cmd.dca_class >= 0) {
        std::vector<double> thresholds;
        for (int i = 1; i <= 19; ++i) thresholds.push_back(i / 20.0);
        auto rows = decision_curve(student, ds, split, thresholds,
                                   static_cast<size_t>(cmd.dca_class));
        run.write_text("dca.csv", decision_curve_csv(rows));
    }

    json headline;
    headline["teacher_accuracy"] = reports[0].second.accuracy;
    headline["student_accuracy"] = reports[1].second.accuracy;
    run.finish(headline);
    return kExitOk;
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"Knowledge-distillation and explainability toolkit for small CNNs"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from an INI/TOML file");

    SynthCmd synth;
    CLI::App* synth_app = app.add_subcommand("dataset-synth",
                                             "Generate the synthetic quadrant dataset as PNG "
                                             "class folders plus a split manifest");
    add_common_options(synth_app, synth.common);
    add_data_options(synth_app, synth.data);

    TrainTeacherCmd train;
    CLI::App* train_app = app.add_subcommand("train-teacher", "Train and save the teacher model");
    add_common_options(train_app, train.common);
    add_data_options(train_app, train.data);
    train_app->add_option("--depth", train.depth, "Teacher conv depth");
    train_app->add_option("--epochs", train.epochs, "Training epochs");
    train_app->add_option("--batch-size", train.batch_size, "Batch size");
    train_app->add_option("--lr", train.learning_rate, "Learning rate");

    DistillCmd dist;
    CLI::App* dist_app = app.add_subcommand("distill",
                                            "Distill the teacher into students over an "
                                            "alpha/temperature grid");
    add_common_options(dist_app, dist.common);
    add_data_options(dist_app, dist.data);
    dist_app->add_option("--teacher", dist.teacher_path, "Teacher model file");
    dist_app->add_option("--teacher-logits", dist.teacher_logits_path,
                         "Imported teacher logits CSV");
    dist_app->add_option("--alphas", dist.alphas, "Alpha grid")->delimiter(',');
    dist_app->add_option("--temperatures", dist.temperatures, "Temperature grid")->delimiter(',');
    dist_app->add_option("--soft-mode", dist.soft_mode,
                         "Soft loss mode: teacher-vs-student or paper-literal");
    dist_app->add_option("--epochs", dist.epochs, "Training epochs");
    dist_app->add_option("--batch-size", dist.batch_size, "Batch size");
    dist_app->add_option("--lr", dist.learning_rate, "Learning rate");
    dist_app->add_option("--jobs", dist.jobs, "Parallel grid cells");

    ExplainCmd explain_cmd;
    CLI::App* explain_app = app.add_subcommand("explain",
                                               "Emit attribution overlays and sidecars for "
                                               "images or dataset samples");
    add_common_options(explain_app, explain_cmd.common);
    add_data_options(explain_app, explain_cmd.data);
    explain_app->add_option("--model", explain_cmd.model_path, "Model file to explain");
    explain_app->add_option("--image", explain_cmd.images, "PNG image (repeatable)");
    explain_app->add_option("--count", explain_cmd.count, "Dataset samples to explain");
    explain_app->add_option("--methods", explain_cmd.methods,
                            "avg-feature-maps, grad-cam, shapley-patch")
        ->delimiter(',');
    explain_app->add_option("--target-class", explain_cmd.target_class,
                            "Attribution target class (default: predicted)");
    explain_app->add_option("--patch-size", explain_cmd.patch_size, "Shapley patch size");
    explain_app->add_option("--permutations", explain_cmd.permutations,
                            "Shapley sampled orderings");
    explain_app->add_option("--overlay-alpha", explain_cmd.overlay_alpha, "Overlay blend factor");

    EvaluateCmd eval;
    CLI::App* eval_app = app.add_subcommand("evaluate",
                                            "Metrics, fidelity, efficiency tables and confusion "
                                            "matrices for a teacher/student pair");
    add_common_options(eval_app, eval.common);
    add_data_options(eval_app, eval.data);
    eval_app->add_option("--teacher", eval.teacher_path, "Teacher model file");
    eval_app->add_option("--student", eval.student_path, "Student model file");
    eval_app->add_option("--fidelity-epsilon", eval.fidelity_epsilon, "FGSM epsilon");
    eval_app->add_option("--fidelity-quantile", eval.fidelity_quantile,
                         "Attribution mask quantile");
    eval_app->add_option("--normal-class", eval.normal_class,
                         "Class excluded from fidelity averages");
    eval_app->add_option("--dca-class", eval.dca_class, "Positive class for decision curves");
    eval_app->add_option("--shapley-patch-size", eval.shapley_patch_size, "Fidelity patch size");
    eval_app->add_option("--shapley-permutations", eval.shapley_permutations,
                         "Fidelity shapley orderings");
    eval_app->add_option("--met-warmup", eval.met_warmup, "Timing warmup runs");
    eval_app->add_option("--met-runs", eval.met_runs, "Timing measured runs");
    eval_app->add_flag("--skip-fidelity", eval.skip_fidelity, "Skip the fidelity table");
    eval_app->add_flag("--skip-efficiency", eval.skip_efficiency, "Skip the efficiency table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (synth_app->parsed()) return cmd_dataset_synth(synth);
        if (train_app->parsed()) return cmd_train_teacher(train);
        if (dist_app->parsed()) return cmd_distill(dist);
        if (explain_app->parsed()) {
            explain_cmd.has_data_source = explain_cmd.data.synth ||
                                          !explain_cmd.data.image_dir.empty() ||
                                          !explain_cmd.data.idx_images.empty();
            return cmd_explain(explain_cmd);
        }
        if (eval_app->parsed()) return cmd_evaluate(eval);
        throw ConfigError("no subcommand given");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DomainError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ParseError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
}

}  // namespace kdxcli
