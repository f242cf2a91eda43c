#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffplace/image.hpp"
#include "diffplace/instances.hpp"
#include "diffplace/parallel.hpp"
#include "diffplace/png.hpp"
#include "diffplace/rng.hpp"

namespace diffplace {

enum class DatasetKind { procedural_image, image_dir, synthetic_sequence };

inline const char* dataset_kind_name(DatasetKind k) {
    switch (k) {
        case DatasetKind::procedural_image: return "procedural-image";
        case DatasetKind::image_dir: return "image-dir";
        case DatasetKind::synthetic_sequence: return "synthetic-sequence";
    }
    return "?";
}

inline DatasetKind dataset_kind_from_name(const std::string& s) {
    if (s == "procedural-image") return DatasetKind::procedural_image;
    if (s == "image-dir") return DatasetKind::image_dir;
    if (s == "synthetic-sequence") return DatasetKind::synthetic_sequence;
    throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "'");
}

struct DatasetSpec {
    DatasetKind kind = DatasetKind::procedural_image;
    int count = 0;
    double train_frac = 0.8, val_frac = 0.1, test_frac = 0.1;
    std::uint64_t seed = 1;
    // puzzle parameters
    int image_size = 128;
    std::vector<int> puzzle_sizes{3, 4};
    std::string image_dir;  // source directory for kind = image-dir
    // sequence parameters
    int k_min = 3, k_max = 8;
    int vocab = 512;
    int element_len = 6;
    int head_repeat = 3;

    void validate() const {
        if (kind != DatasetKind::image_dir && count < 1)
            throw std::invalid_argument("DatasetSpec: count must be >= 1");
        const double sum = train_frac + val_frac + test_frac;
        if (train_frac < 0 || val_frac < 0 || test_frac < 0 || std::abs(sum - 1.0) > 1e-9)
            throw std::invalid_argument("DatasetSpec: split fractions must be >= 0 and sum to 1");
        if (kind == DatasetKind::synthetic_sequence) {
            if (k_min < 2 || k_max < k_min)
                throw std::invalid_argument("DatasetSpec: need 2 <= k_min <= k_max");
            if (element_len < 2) throw std::invalid_argument("DatasetSpec: element_len must be >= 2");
            if (head_repeat < 1 || head_repeat >= element_len)
                throw std::invalid_argument("DatasetSpec: need 1 <= head_repeat < element_len");
            if (vocab < k_max + element_len - head_repeat)
                throw std::invalid_argument("DatasetSpec: vocabulary too small for K");
        } else {
            if (image_size < 64) throw std::invalid_argument("DatasetSpec: image_size must be >= 64");
            for (const int n : puzzle_sizes)
                if (n < 1) throw std::invalid_argument("DatasetSpec: puzzle sizes must be >= 1");
        }
    }
};

struct DatasetItem {
    std::uint64_t id = 0;
    Split split = Split::train;
    std::uint64_t seed = 0;
    std::string file;  // relative path for image datasets
};

// Deterministic split assignment: ids are shuffled by the dataset seed and cut
// at round(frac * N) boundaries, so e.g. 10 items at 80/10/10 give 8/1/1.
inline std::vector<Split> assign_splits(int count, double train_frac, double val_frac,
                                        std::uint64_t seed) {
    Rng rng(Rng::mix(seed, 0x51D5));
    const std::vector<int> perm = random_permutation(count, rng);
    long n_train = std::lround(train_frac * count);
    long n_val = std::lround(val_frac * count);
    n_train = std::min<long>(n_train, count);
    n_val = std::min<long>(n_val, count - n_train);
    std::vector<Split> out(std::size_t(count), Split::test);
    for (int pos = 0; pos < count; ++pos) {
        const int id = perm[std::size_t(pos)];
        out[std::size_t(id)] = pos < n_train            ? Split::train
                               : pos < n_train + n_val ? Split::val
                                                        : Split::test;
    }
    return out;
}

// Procedural image: a low-frequency two-axis color gradient whose orientation
// stays within a narrow family across seeds (so the dataset shares a global
// structure), overlaid with seeded shapes that make patches locally distinct.
inline ImageU8 gen_procedural_image(std::uint64_t seed, int size) {
    if (size < 64) throw std::invalid_argument("gen_procedural_image: size must be >= 64");
    Rng rng(seed);
    ImageU8 img(size, size);

    const double angle = (rng.uniform() - 0.5) * 0.3;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double r_lo = rng.uniform(0.02, 0.18), r_hi = rng.uniform(0.78, 0.98);
    const double g_lo = rng.uniform(0.02, 0.18), g_hi = rng.uniform(0.78, 0.98);
    const double fu = rng.uniform(0.6, 1.6), fv = rng.uniform(0.6, 1.6);
    const double phase = rng.uniform(0.0, 6.2831853);

    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double xx = double(x) / double(size - 1) - 0.5;
            const double yy = double(y) / double(size - 1) - 0.5;
            const double u = std::clamp(0.5 + xx * ca - yy * sa, 0.0, 1.0);
            const double v = std::clamp(0.5 + xx * sa + yy * ca, 0.0, 1.0);
            std::uint8_t* px = img.at(x, y);
            px[0] = std::uint8_t(std::clamp(r_lo + (r_hi - r_lo) * u, 0.0, 1.0) * 255.0);
            px[1] = std::uint8_t(std::clamp(g_lo + (g_hi - g_lo) * v, 0.0, 1.0) * 255.0);
            px[2] = std::uint8_t(
                std::clamp(0.5 + 0.35 * std::sin(6.2831853 * (fu * u + fv * v) + phase), 0.0, 1.0) *
                255.0);
        }

    const int shapes = 8 + int(rng.below(6));
    for (int s = 0; s < shapes; ++s) {
        const int cx = int(rng.below(std::uint64_t(size)));
        const int cy = int(rng.below(std::uint64_t(size)));
        const int radius = size / 16 + int(rng.below(std::uint64_t(size / 8)));
        const bool disc = rng.uniform() < 0.5;
        const std::uint8_t color[3] = {std::uint8_t(rng.below(256)), std::uint8_t(rng.below(256)),
                                       std::uint8_t(rng.below(256))};
        const int x0 = std::max(0, cx - radius), x1 = std::min(size - 1, cx + radius);
        const int y0 = std::max(0, cy - radius), y1 = std::min(size - 1, cy + radius);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                if (disc) {
                    const int dx = x - cx, dy = y - cy;
                    if (dx * dx + dy * dy > radius * radius) continue;
                }
                std::uint8_t* px = img.at(x, y);
                for (int c = 0; c < 3; ++c)
                    px[c] = std::uint8_t((11 * int(px[c]) + 9 * int(color[c])) / 20);
            }
    }
    return img;
}

// Ordered token sequence with an overlapping-chain signal. A hidden chain of
// distinct tokens is sampled per instance; element i holds `head_repeat`
// copies of its own chain token followed by the next element_len - head_repeat
// chain tokens in order:
//
//   element i = [c_i, ..., c_i, c_{i+1}, c_{i+2}, ...]
//
// Pairwise overlap grades with rank distance, and each shared token is
// high-multiplicity in exactly one of the two elements, which orients the
// chain: my successor carries my minor tokens as its major token. Token
// values are random per instance, so order is recoverable only from these
// relations; no token encodes an absolute position.
inline SequenceInstance gen_synthetic_sequence(std::uint64_t seed, int K, int vocab,
                                               int element_len = 6, int head_repeat = 3) {
    if (K < 2) throw std::invalid_argument("gen_synthetic_sequence: K must be >= 2");
    if (element_len < 2)
        throw std::invalid_argument("gen_synthetic_sequence: element_len must be >= 2");
    if (head_repeat < 1 || head_repeat >= element_len)
        throw std::invalid_argument("gen_synthetic_sequence: need 1 <= head_repeat < element_len");
    const int reach = element_len - head_repeat;
    const int chain_len = K + reach;
    if (vocab < chain_len)
        throw std::invalid_argument("gen_synthetic_sequence: vocabulary too small for K");
    Rng rng(seed);

    std::vector<int> chain;
    std::vector<char> used(std::size_t(vocab), 0);
    while (int(chain.size()) < chain_len) {
        const int t = int(rng.below(std::uint64_t(vocab)));
        if (used[std::size_t(t)]) continue;
        used[std::size_t(t)] = 1;
        chain.push_back(t);
    }

    SequenceInstance inst;
    inst.source_id = seed;
    inst.chain_links = chain;
    inst.elements.resize(std::size_t(K));
    inst.gt_rank.resize(std::size_t(K));
    inst.shuffle_perm.resize(std::size_t(K));
    for (int i = 0; i < K; ++i) {
        std::vector<int>& el = inst.elements[std::size_t(i)];
        for (int rep = 0; rep < head_repeat; ++rep) el.push_back(chain[std::size_t(i)]);
        for (int j = 1; j <= reach; ++j) el.push_back(chain[std::size_t(i + j)]);
        inst.gt_rank[std::size_t(i)] = i;
        inst.shuffle_perm[std::size_t(i)] = i;
    }
    return inst;
}

// Generator-side oracle: recovers ranks through the hidden chain. Used to gate
// that generated instances are solvable from content alone.
inline std::vector<int> oracle_ranks_from_chain(const SequenceInstance& inst) {
    const int k = inst.element_count();
    std::vector<int> ranks(std::size_t(k), -1);
    for (int q = 0; q < k; ++q) {
        const int head = inst.elements[std::size_t(q)].front();
        for (std::size_t pos = 0; pos < inst.chain_links.size(); ++pos)
            if (inst.chain_links[pos] == head) {
                ranks[std::size_t(q)] = int(pos);
                break;
            }
        if (ranks[std::size_t(q)] < 0)
            throw std::runtime_error("oracle_ranks_from_chain: head token not in chain");
    }
    return ranks;
}

struct PuzzleDataset {
    DatasetSpec spec;
    std::vector<DatasetItem> items;
    std::vector<ImageU8> images;  // aligned with items

    std::vector<int> indices_of(Split s) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < items.size(); ++i)
            if (items[i].split == s) out.push_back(int(i));
        return out;
    }
};

struct SequenceDataset {
    DatasetSpec spec;
    std::vector<DatasetItem> items;
    std::vector<SequenceInstance> instances;  // shuffled presentation, aligned with items

    std::vector<int> indices_of(Split s) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < items.size(); ++i)
            if (items[i].split == s) out.push_back(int(i));
        return out;
    }
};

inline std::vector<DatasetItem> make_items(const DatasetSpec& spec, int count) {
    const std::vector<Split> splits = assign_splits(count, spec.train_frac, spec.val_frac, spec.seed);
    std::vector<DatasetItem> items(std::size_t(count), DatasetItem{});
    for (int i = 0; i < count; ++i) {
        items[std::size_t(i)].id = std::uint64_t(i);
        items[std::size_t(i)].split = splits[std::size_t(i)];
        items[std::size_t(i)].seed = Rng::mix(spec.seed, std::uint64_t(i) + 1000003);
    }
    return items;
}

inline PuzzleDataset build_procedural_dataset(const DatasetSpec& spec) {
    spec.validate();
    if (spec.kind != DatasetKind::procedural_image)
        throw std::invalid_argument("build_procedural_dataset: wrong kind");
    PuzzleDataset ds;
    ds.spec = spec;
    ds.items = make_items(spec, spec.count);
    ds.images.resize(std::size_t(spec.count));
    parallel_for(spec.count, [&](int i) {
        ds.images[std::size_t(i)] = gen_procedural_image(ds.items[std::size_t(i)].seed, spec.image_size);
    });
    return ds;
}

inline SequenceDataset build_sequence_dataset(const DatasetSpec& spec) {
    spec.validate();
    if (spec.kind != DatasetKind::synthetic_sequence)
        throw std::invalid_argument("build_sequence_dataset: wrong kind");
    SequenceDataset ds;
    ds.spec = spec;
    ds.items = make_items(spec, spec.count);
    ds.instances.resize(std::size_t(spec.count));
    parallel_for(spec.count, [&](int i) {
        Rng krng(Rng::mix(ds.items[std::size_t(i)].seed, 1));
        const int K = spec.k_min + int(krng.below(std::uint64_t(spec.k_max - spec.k_min + 1)));
        SequenceInstance inst = gen_synthetic_sequence(Rng::mix(ds.items[std::size_t(i)].seed, 2), K,
                                                       spec.vocab, spec.element_len, spec.head_repeat);
        inst.source_id = ds.items[std::size_t(i)].id;
        ds.instances[std::size_t(i)] =
            shuffle_instance(inst, Rng::mix(ds.items[std::size_t(i)].seed, 3));
    });
    return ds;
}

// Loads a user-supplied directory of PNGs: deterministic alphabetical order,
// unreadable files are skipped with a warning, images are center-cropped to
// squares. An empty directory (or no decodable file) is an error.
inline PuzzleDataset load_image_dir(const std::string& path, DatasetSpec spec) {
    namespace fs = std::filesystem;
    spec.kind = DatasetKind::image_dir;
    spec.image_dir = path;
    if (!fs::is_directory(path)) throw std::runtime_error("load_image_dir: not a directory: " + path);
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(path)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        if (name.size() >= 4 && name.substr(name.size() - 4) == ".png") names.push_back(name);
    }
    std::sort(names.begin(), names.end());

    PuzzleDataset ds;
    for (const std::string& name : names) {
        try {
            ImageU8 img = read_png((fs::path(path) / name).string());
            if (img.w < 64 || img.h < 64) throw std::runtime_error("image smaller than 64 pixels");
            ds.images.push_back(center_crop_square(img));
            DatasetItem item;
            item.file = name;
            ds.items.push_back(item);
        } catch (const std::exception& e) {
            std::cerr << "load_image_dir: skipping " << name << ": " << e.what() << "\n";
        }
    }
    if (ds.items.empty()) throw std::runtime_error("load_image_dir: no decodable PNG in " + path);
    const int count = int(ds.items.size());
    spec.count = count;
    ds.spec = spec;
    const std::vector<Split> splits = assign_splits(count, spec.train_frac, spec.val_frac, spec.seed);
    for (int i = 0; i < count; ++i) {
        ds.items[std::size_t(i)].id = std::uint64_t(i);
        ds.items[std::size_t(i)].split = splits[std::size_t(i)];
        ds.items[std::size_t(i)].seed = Rng::mix(spec.seed, std::uint64_t(i) + 1000003);
    }
    return ds;
}

// ---- On-disk format -------------------------------------------------------

inline nlohmann::json spec_to_json(const DatasetSpec& spec) {
    nlohmann::json j;
    j["kind"] = dataset_kind_name(spec.kind);
    j["count"] = spec.count;
    j["splits"] = {{"train", spec.train_frac}, {"val", spec.val_frac}, {"test", spec.test_frac}};
    j["seed"] = spec.seed;
    if (spec.kind == DatasetKind::synthetic_sequence) {
        j["k_min"] = spec.k_min;
        j["k_max"] = spec.k_max;
        j["vocab"] = spec.vocab;
        j["element_len"] = spec.element_len;
        j["head_repeat"] = spec.head_repeat;
    } else {
        j["image_size"] = spec.image_size;
        j["puzzle_sizes"] = spec.puzzle_sizes;
        if (!spec.image_dir.empty()) j["image_dir"] = spec.image_dir;
    }
    return j;
}

inline DatasetSpec spec_from_json(const nlohmann::json& j) {
    DatasetSpec spec;
    spec.kind = dataset_kind_from_name(j.at("kind").get<std::string>());
    spec.count = j.at("count").get<int>();
    spec.train_frac = j.at("splits").at("train").get<double>();
    spec.val_frac = j.at("splits").at("val").get<double>();
    spec.test_frac = j.at("splits").at("test").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    if (spec.kind == DatasetKind::synthetic_sequence) {
        spec.k_min = j.at("k_min").get<int>();
        spec.k_max = j.at("k_max").get<int>();
        spec.vocab = j.at("vocab").get<int>();
        spec.element_len = j.at("element_len").get<int>();
        spec.head_repeat = j.value("head_repeat", 3);
    } else {
        spec.image_size = j.at("image_size").get<int>();
        spec.puzzle_sizes = j.at("puzzle_sizes").get<std::vector<int>>();
        spec.image_dir = j.value("image_dir", std::string());
    }
    return spec;
}

inline std::string manifest_text(const DatasetSpec& spec, const std::vector<DatasetItem>& items) {
    nlohmann::json j;
    j["spec"] = spec_to_json(spec);
    nlohmann::json arr = nlohmann::json::array();
    for (const DatasetItem& it : items) {
        nlohmann::json e;
        e["id"] = it.id;
        e["split"] = split_name(it.split);
        e["seed"] = it.seed;
        if (!it.file.empty()) e["file"] = it.file;
        arr.push_back(e);
    }
    j["items"] = arr;
    return j.dump(2) + "\n";
}

inline void write_dataset(const std::string& out_dir, const DatasetSpec& spec) {
    namespace fs = std::filesystem;
    spec.validate();
    fs::create_directories(out_dir);
    if (spec.kind == DatasetKind::procedural_image) {
        PuzzleDataset ds = build_procedural_dataset(spec);
        fs::create_directories(fs::path(out_dir) / "images");
        for (std::size_t i = 0; i < ds.items.size(); ++i) {
            char name[64];
            std::snprintf(name, sizeof(name), "images/img_%06llu.png",
                          (unsigned long long)ds.items[i].id);
            ds.items[i].file = name;
            write_png((fs::path(out_dir) / name).string(), ds.images[i]);
        }
        std::ofstream mf(fs::path(out_dir) / "manifest.json");
        mf << manifest_text(ds.spec, ds.items);
    } else if (spec.kind == DatasetKind::synthetic_sequence) {
        SequenceDataset ds = build_sequence_dataset(spec);
        std::ofstream sf(fs::path(out_dir) / "sequences.jsonl");
        for (std::size_t i = 0; i < ds.items.size(); ++i) {
            // Stored in ground-truth order; shuffling happens at load time
            // with the recorded per-item seed.
            const SequenceInstance& inst = ds.instances[i];
            std::vector<std::vector<int>> ordered(std::size_t(inst.element_count()));
            for (int q = 0; q < inst.element_count(); ++q)
                ordered[std::size_t(inst.gt_rank[std::size_t(q)])] = inst.elements[std::size_t(q)];
            nlohmann::json e;
            e["id"] = ds.items[i].id;
            e["elements"] = ordered;
            sf << e.dump() << "\n";
        }
        std::ofstream mf(fs::path(out_dir) / "manifest.json");
        mf << manifest_text(ds.spec, ds.items);
    } else {
        throw std::invalid_argument("write_dataset: only generated kinds can be written");
    }
}

inline nlohmann::json read_manifest(const std::string& dir) {
    std::ifstream f(std::filesystem::path(dir) / "manifest.json");
    if (!f) throw std::runtime_error("read_manifest: no manifest.json in " + dir);
    nlohmann::json j;
    f >> j;
    return j;
}

inline std::vector<DatasetItem> items_from_json(const nlohmann::json& j) {
    std::vector<DatasetItem> items;
    for (const auto& e : j.at("items")) {
        DatasetItem it;
        it.id = e.at("id").get<std::uint64_t>();
        it.split = split_from_name(e.at("split").get<std::string>());
        it.seed = e.at("seed").get<std::uint64_t>();
        it.file = e.value("file", std::string());
        items.push_back(it);
    }
    return items;
}

inline PuzzleDataset load_puzzle_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const nlohmann::json j = read_manifest(dir);
    PuzzleDataset ds;
    ds.spec = spec_from_json(j.at("spec"));
    ds.items = items_from_json(j);
    ds.images.resize(ds.items.size());
    parallel_for(int(ds.items.size()), [&](int i) {
        ds.images[std::size_t(i)] = read_png((fs::path(dir) / ds.items[std::size_t(i)].file).string());
    });
    return ds;
}

inline SequenceDataset load_sequence_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const nlohmann::json j = read_manifest(dir);
    SequenceDataset ds;
    ds.spec = spec_from_json(j.at("spec"));
    ds.items = items_from_json(j);
    std::ifstream sf(fs::path(dir) / "sequences.jsonl");
    if (!sf) throw std::runtime_error("load_sequence_dataset: no sequences.jsonl in " + dir);
    std::string line;
    std::vector<SequenceInstance> ordered(ds.items.size());
    std::size_t count = 0;
    while (std::getline(sf, line)) {
        if (line.empty()) continue;
        const nlohmann::json e = nlohmann::json::parse(line);
        const std::uint64_t id = e.at("id").get<std::uint64_t>();
        if (id >= ordered.size()) throw std::runtime_error("load_sequence_dataset: id out of range");
        SequenceInstance inst;
        inst.source_id = id;
        inst.elements = e.at("elements").get<std::vector<std::vector<int>>>();
        const int k = inst.element_count();
        inst.gt_rank.resize(std::size_t(k));
        inst.shuffle_perm.resize(std::size_t(k));
        for (int q = 0; q < k; ++q) {
            inst.gt_rank[std::size_t(q)] = q;
            inst.shuffle_perm[std::size_t(q)] = q;
        }
        ordered[id] = std::move(inst);
        ++count;
    }
    if (count != ds.items.size())
        throw std::runtime_error("load_sequence_dataset: record count does not match manifest");
    ds.instances.resize(ds.items.size());
    for (std::size_t i = 0; i < ds.items.size(); ++i)
        ds.instances[i] = shuffle_instance(ordered[i], Rng::mix(ds.items[i].seed, 3));
    return ds;
}

}  // namespace diffplace
