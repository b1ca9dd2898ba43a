#include "kdx/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "kdx/errors.hpp"
#include "kdx/image.hpp"
#include "kdx/rng.hpp"

namespace kdx {

namespace fs = std::filesystem;

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

std::vector<size_t> Dataset::indices(Split s) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < samples.size(); ++i) {
        auto it = split_assignment.find(samples[i].id);
        if (it != split_assignment.end() && it->second == s) out.push_back(i);
    }
    return out;
}

const Sample& Dataset::by_id(const std::string& id) const {
    for (const Sample& s : samples) {
        if (s.id == id) return s;
    }
    throw DataError("no sample with id '" + id + "'");
}

Tensor one_hot(size_t label, size_t num_classes) {
    if (label >= num_classes) throw DomainError("label out of range");
    Tensor t({num_classes});
    t[label] = 1.0;
    return t;
}

int quadrant_of(size_t row, size_t col, size_t height, size_t width) {
    int q = 0;
    if (row >= height / 2) q += 2;
    if (col >= width / 2) q += 1;
    return q;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<uint8_t> read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
}

uint32_t idx_u32(const std::vector<uint8_t>& b, size_t pos, const std::string& what) {
    if (pos + 4 > b.size()) throw ParseError(ParseFault::Truncated, what + ": header truncated");
    return (static_cast<uint32_t>(b[pos]) << 24) | (static_cast<uint32_t>(b[pos + 1]) << 16) |
           (static_cast<uint32_t>(b[pos + 2]) << 8) | static_cast<uint32_t>(b[pos + 3]);
}

std::string zero_padded(size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06zu", i);
    return buf;
}

}  // namespace

Dataset load_idx(const fs::path& images_path, const fs::path& labels_path) {
    std::vector<uint8_t> ib = read_all(images_path);
    std::vector<uint8_t> lb = read_all(labels_path);

    if (idx_u32(ib, 0, "idx images") != kIdxImagesMagic) {
        throw ParseError(ParseFault::BadMagic, images_path.string() + ": bad idx image magic");
    }
    if (idx_u32(lb, 0, "idx labels") != kIdxLabelsMagic) {
        throw ParseError(ParseFault::BadMagic, labels_path.string() + ": bad idx label magic");
    }
    const size_t n = idx_u32(ib, 4, "idx images");
    const size_t h = idx_u32(ib, 8, "idx images");
    const size_t w = idx_u32(ib, 12, "idx images");
    const size_t n_labels = idx_u32(lb, 4, "idx labels");
    if (n != n_labels) {
        throw ParseError(ParseFault::CountMismatch,
                         "idx image count " + std::to_string(n) + " != label count " +
                             std::to_string(n_labels));
    }
    if (h == 0 || w == 0 || n == 0) {
        throw ParseError(ParseFault::Malformed, "idx has zero dimension");
    }
    if (ib.size() < 16 + n * h * w) {
        throw ParseError(ParseFault::Truncated, images_path.string() + ": pixel payload truncated");
    }
    if (ib.size() > 16 + n * h * w) {
        throw ParseError(ParseFault::TrailingBytes, images_path.string() + ": trailing bytes");
    }
    if (lb.size() < 8 + n) {
        throw ParseError(ParseFault::Truncated, labels_path.string() + ": label payload truncated");
    }
    if (lb.size() > 8 + n) {
        throw ParseError(ParseFault::TrailingBytes, labels_path.string() + ": trailing bytes");
    }

    size_t max_label = 0;
    for (size_t i = 0; i < n; ++i) max_label = std::max<size_t>(max_label, lb[8 + i]);

    Dataset ds;
    ds.name = images_path.stem().string();
    for (size_t c = 0; c <= max_label; ++c) ds.class_names.push_back("class" + std::to_string(c));
    ds.samples.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        Sample s;
        s.id = zero_padded(i);
        s.label = lb[8 + i];
        s.image = Tensor({1, h, w});
        const uint8_t* px = &ib[16 + i * h * w];
        for (size_t p = 0; p < h * w; ++p) s.image.data[p] = px[p] / 255.0;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Image directory

Dataset load_image_dir(const fs::path& root, const ImageDirOptions& opts) {
    if (!fs::is_directory(root)) throw IoError(root.string() + " is not a directory");

    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw DataError(root.string() + " contains no class directories");

    Dataset ds;
    ds.name = root.filename().string();
    for (size_t c = 0; c < class_dirs.size(); ++c) {
        ds.class_names.push_back(class_dirs[c].filename().string());
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
            if (entry.is_regular_file() && entry.path().extension() == ".png") {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        if (files.empty()) {
            throw DataError(class_dirs[c].string() + " contains no png images");
        }
        for (const fs::path& file : files) {
            Sample s;
            s.id = class_dirs[c].filename().string() + "/" + file.filename().string();
            s.label = c;
            Tensor img = image_to_tensor(read_png(file), opts.channels);
            if (img.shape[1] != opts.image_size || img.shape[2] != opts.image_size) {
                img = resize_bilinear(img, opts.image_size, opts.image_size);
                for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
            }
            s.image = std::move(img);
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Splitting

Dataset split_dataset(Dataset dataset, const std::vector<double>& ratios, uint64_t seed,
                      const std::set<std::string>& fixed_test) {
    if (ratios.size() != 2 && ratios.size() != 3) {
        throw ConfigError("split needs 2 or 3 ratios");
    }
    double sum = 0.0;
    for (double r : ratios) {
        if (r < 0.0) throw ConfigError("split ratios must be non-negative");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");

    size_t positive = 0;
    for (double r : ratios) {
        if (r > 0.0) ++positive;
    }

    const std::vector<Split> slots = ratios.size() == 3
                                         ? std::vector<Split>{Split::Train, Split::Val, Split::Test}
                                         : std::vector<Split>{Split::Train, Split::Val};

    dataset.split_assignment.clear();
    dataset.split_ratios = ratios;
    dataset.split_seed = seed;

    for (const std::string& id : fixed_test) {
        dataset.split_assignment[id] = Split::Test;
    }

    // Per class: shuffle ids, then largest-remainder apportionment.
    for (size_t c = 0; c < dataset.num_classes(); ++c) {
        std::vector<std::string> ids;
        for (const Sample& s : dataset.samples) {
            if (s.label == c && !fixed_test.count(s.id)) ids.push_back(s.id);
        }
        if (ids.empty() && !fixed_test.empty()) continue;  // class fully pre-designated
        if (ids.size() < positive) {
            throw ConfigError("class " + dataset.class_names[c] + " has " +
                              std::to_string(ids.size()) + " samples but " +
                              std::to_string(positive) + " splits requested");
        }
        Rng rng(derive_seed(seed, c));
        rng.shuffle(ids);

        const size_t n = ids.size();
        std::vector<size_t> counts(ratios.size());
        std::vector<std::pair<double, size_t>> remainders;
        size_t assigned = 0;
        for (size_t k = 0; k < ratios.size(); ++k) {
            double target = ratios[k] * static_cast<double>(n);
            counts[k] = static_cast<size_t>(target);
            assigned += counts[k];
            remainders.push_back({target - static_cast<double>(counts[k]), k});
        }
        std::stable_sort(remainders.begin(), remainders.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (size_t k = 0; assigned < n; ++k, ++assigned) {
            counts[remainders[k % remainders.size()].second] += 1;
        }

        size_t pos = 0;
        for (size_t k = 0; k < counts.size(); ++k) {
            for (size_t i = 0; i < counts[k]; ++i) {
                dataset.split_assignment[ids[pos++]] = slots[k];
            }
        }
    }
    return dataset;
}

// ---------------------------------------------------------------------------
// Synthetic data

Dataset make_synthetic(const SynthSpec& spec) {
    if (spec.num_classes != 4) throw ConfigError("synthetic dataset is four-class");
    if (spec.blob_sigma <= 0.0 || spec.noise_sigma < 0.0) {
        throw ConfigError("synthetic sigmas must be positive");
    }
    if (spec.image_size < 4) throw ConfigError("synthetic image size too small");

    Dataset ds;
    ds.name = "synthetic";
    ds.class_names = {"quadrant0", "quadrant1", "quadrant2", "quadrant3"};

    const size_t s = spec.image_size;
    const double centers[4][2] = {
        {s / 4.0, s / 4.0},
        {s / 4.0, 3.0 * s / 4.0},
        {3.0 * s / 4.0, s / 4.0},
        {3.0 * s / 4.0, 3.0 * s / 4.0},
    };

    size_t index = 0;
    for (size_t k = 0; k < 4; ++k) {
        for (size_t i = 0; i < spec.samples_per_class; ++i, ++index) {
            Rng rng(derive_seed(spec.seed, index));
            Sample sample;
            char buf[16];
            std::snprintf(buf, sizeof buf, "%06zu", index);
            sample.id = buf;
            sample.label = k;
            sample.truth_region = static_cast<int>(k);
            sample.image = Tensor({1, s, s});
            const double cy = centers[k][0], cx = centers[k][1];
            const double inv2s2 = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
            for (size_t y = 0; y < s; ++y) {
                for (size_t x = 0; x < s; ++x) {
                    const double dy = static_cast<double>(y) - cy;
                    const double dx = static_cast<double>(x) - cx;
                    double v = std::exp(-(dy * dy + dx * dx) * inv2s2);
                    if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
                    sample.image.at(0, y, x) = std::clamp(v, 0.0, 1.0);
                }
            }
            ds.samples.push_back(std::move(sample));
        }
    }
    return ds;
}

std::string split_manifest_json(const Dataset& dataset) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, split] : dataset.split_assignment) {
        j[id] = split_name(split);
    }
    return j.dump(2) + "\n";
}

}  // namespace kdx
