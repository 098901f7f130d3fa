#pragma once

// Dataset handling. The synthetic task stamps class-conditional 3x3 texture
// motifs at random positions over a noise background: the label is decided by
// which motif dominates, so local texture detection plus global aggregation
// solves it. Every sample is a pure function of (seed, split, index).

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spvit/errors.hpp"
#include "spvit/rng.hpp"
#include "spvit/tensor.hpp"

namespace spvit {

struct Sample {
    Tensor image;  // [H x W x C]
    std::size_t label = 0;
};

struct Batch {
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    std::size_t size() const { return images.size(); }
};

enum class Split { Train, Val };

struct SyntheticTask {
    std::size_t n_classes = 8;
    std::size_t image_size = 32;
    std::size_t channels = 3;
    std::size_t n_train = 1024;
    std::size_t n_val = 512;
    std::uint64_t seed = 1;
    std::size_t true_stamps = 12;
    std::size_t distractor_stamps = 5;

    // Fixed per-class 3x3 sign motif, a function of the task seed only.
    Tensor motif(std::size_t cls) const {
        Rng rng(derive_seed(seed, "motif", cls));
        Tensor m({3, 3, channels});
        for (double& v : m.data) v = rng.bernoulli(0.5) ? 1.0 : -1.0;
        return m;
    }

    std::size_t split_size(Split s) const { return s == Split::Train ? n_train : n_val; }

    Sample sample(Split split, std::size_t index) const {
        if (index >= split_size(split)) {
            throw ConfigError("synthetic sample index " + std::to_string(index) + " out of range");
        }
        // Train/val draw from disjoint seed partitions.
        Rng rng(derive_seed(seed, split == Split::Train ? "train" : "val", index));
        Sample s;
        s.label = static_cast<std::size_t>(rng.below(n_classes));
        s.image = Tensor({image_size, image_size, channels});
        for (double& v : s.image.data) v = 0.25 * rng.uniform();
        auto stamp = [&](std::size_t cls) {
            const Tensor m = motif(cls);
            const std::size_t i0 = static_cast<std::size_t>(rng.below(image_size - 2));
            const std::size_t j0 = static_cast<std::size_t>(rng.below(image_size - 2));
            for (std::size_t di = 0; di < 3; ++di)
                for (std::size_t dj = 0; dj < 3; ++dj)
                    for (std::size_t c = 0; c < channels; ++c)
                        s.image.at(i0 + di, j0 + dj, c) = 0.5 + 0.45 * m.at(di, dj, c);
        };
        for (std::size_t k = 0; k < true_stamps; ++k) stamp(s.label);
        for (std::size_t k = 0; k < distractor_stamps; ++k) {
            std::size_t other = static_cast<std::size_t>(rng.below(n_classes - 1));
            if (other >= s.label) ++other;
            stamp(other);
        }
        return s;
    }

    Batch batch(Split split, const std::vector<std::size_t>& indices) const {
        Batch b;
        for (std::size_t i : indices) {
            Sample s = sample(split, i);
            b.images.push_back(std::move(s.image));
            b.labels.push_back(s.label);
        }
        return b;
    }
};

// Deterministic per-epoch ordering of a split.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, "order", epoch));
    rng.shuffle(order);
    return order;
}

// ---------------------------------------------------------------------------
// Raw image directory loader: flat binary u8 tensors plus a JSON manifest
// ---------------------------------------------------------------------------
//
// manifest.json: {"image_size": S, "channels": C, "n_classes": K,
//                 "samples": [{"file": "x.bin", "label": 3}, ...]}
// Each file holds image_size*image_size*channels bytes, row-major (H, W, C),
// values scaled to [0, 1] on load.

struct RawDataset {
    std::size_t image_size = 0;
    std::size_t channels = 0;
    std::size_t n_classes = 0;
    std::vector<Sample> samples;
};

inline RawDataset load_raw_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw FormatError("cannot open " + dir + "/manifest.json");
    nlohmann::json j;
    try {
        mf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest parse: " + std::string(e.what()));
    }
    RawDataset d;
    d.image_size = j.at("image_size").get<std::size_t>();
    d.channels = j.at("channels").get<std::size_t>();
    d.n_classes = j.at("n_classes").get<std::size_t>();
    const std::size_t bytes = d.image_size * d.image_size * d.channels;
    for (const auto& js : j.at("samples")) {
        const std::string file = js.at("file").get<std::string>();
        Sample s;
        s.label = js.at("label").get<std::size_t>();
        if (s.label >= d.n_classes) throw FormatError("label out of range in manifest: " + file);
        std::ifstream f(dir + "/" + file, std::ios::binary);
        if (!f) throw FormatError("cannot open sample file " + file);
        std::vector<unsigned char> buf(bytes);
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
        if (static_cast<std::size_t>(f.gcount()) != bytes) {
            throw FormatError("sample file " + file + " truncated at byte " + std::to_string(f.gcount()));
        }
        s.image = Tensor({d.image_size, d.image_size, d.channels});
        for (std::size_t i = 0; i < bytes; ++i) s.image.data[i] = static_cast<double>(buf[i]) / 255.0;
        d.samples.push_back(std::move(s));
    }
    return d;
}

}  // namespace spvit
