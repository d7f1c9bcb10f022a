// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Confounded bag generator.
//
// A hidden context shifts every instance of a bag by context_strength * nu_c
// and, through the split's bias, co-varies with the label. Label-causal
// signal lives only in key instances, shifted by signal_strength * mu_y.
// All mu_y and nu_c are mutually orthonormal, so the context carries no
// class-causal information. Class 0 is the negative class: its bags hold no
// key instances.

#pragma once

#include "dmil/data.hpp"
#include "dmil/io.hpp"
#include "dmil/random.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace dmil {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct GenConfig {
    std::size_t d = 32;
    std::size_t num_classes = 2;
    std::size_t num_contexts = 4;
    double bias_train = 0.95;
    double bias_test = 0.5;
    double key_fraction_min = 0.05;
    double key_fraction_max = 0.20;
    std::size_t bag_size_min = 20;
    std::size_t bag_size_max = 100;
    double context_strength = 1.0;
    double signal_strength = 1.0;
    double noise_sigma = 1.0;
    std::size_t train_bags = 200;
    std::size_t test_bags = 200;
    std::uint64_t seed = 0;

    void validate() const {
        auto prob = [](double p, const char* name) {
            if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
        };
        prob(bias_train, "bias_train");
        prob(bias_test, "bias_test");
        prob(key_fraction_min, "key_fraction_min");
        prob(key_fraction_max, "key_fraction_max");
        if (key_fraction_min > key_fraction_max) throw ConfigError("key_fraction_min > key_fraction_max");
        if (bag_size_min < 1) throw ConfigError("bag_size_min must be >= 1");
        if (bag_size_min > bag_size_max) throw ConfigError("bag_size_min > bag_size_max");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (num_contexts < 2) throw ConfigError("num_contexts must be >= 2");
        if (num_contexts < num_classes) throw ConfigError("num_contexts must be >= num_classes");
        if (num_classes + num_contexts > d) {
            throw ConfigError("d must be at least num_classes + num_contexts for orthogonal directions");
        }
        if (!(context_strength >= 0.0) || !(signal_strength >= 0.0) || !(noise_sigma >= 0.0)) {
            throw ConfigError("context_strength, signal_strength and noise_sigma must be >= 0");
        }
        if (key_fraction_min * static_cast<double>(bag_size_min) < 1.0) {
            throw ConfigError("key_fraction_min * bag_size_min < 1: a positive bag could hold no key instance");
        }
        if (train_bags == 0) throw ConfigError("train_bags must be positive");
    }

    std::map<std::string, std::string> to_key_values() const {
        auto num = [](double x) {
            std::ostringstream o;
            o << std::setprecision(17) << x;
            return o.str();
        };
        return {
            {"d", std::to_string(d)},
            {"num_classes", std::to_string(num_classes)},
            {"num_contexts", std::to_string(num_contexts)},
            {"bias_train", num(bias_train)},
            {"bias_test", num(bias_test)},
            {"key_fraction_min", num(key_fraction_min)},
            {"key_fraction_max", num(key_fraction_max)},
            {"bag_size_min", std::to_string(bag_size_min)},
            {"bag_size_max", std::to_string(bag_size_max)},
            {"context_strength", num(context_strength)},
            {"signal_strength", num(signal_strength)},
            {"noise_sigma", num(noise_sigma)},
            {"train_bags", std::to_string(train_bags)},
            {"test_bags", std::to_string(test_bags)},
            {"seed", std::to_string(seed)},
        };
    }

    /// Applies overrides from a key=value map; unknown keys are an error.
    void apply(const std::map<std::string, std::string>& kv) {
        for (const auto& [k, v] : kv) {
            try {
                if (k == "d") d = std::stoul(v);
                else if (k == "num_classes") num_classes = std::stoul(v);
                else if (k == "num_contexts") num_contexts = std::stoul(v);
                else if (k == "bias_train") bias_train = std::stod(v);
                else if (k == "bias_test") bias_test = std::stod(v);
                else if (k == "key_fraction_min") key_fraction_min = std::stod(v);
                else if (k == "key_fraction_max") key_fraction_max = std::stod(v);
                else if (k == "bag_size_min") bag_size_min = std::stoul(v);
                else if (k == "bag_size_max") bag_size_max = std::stoul(v);
                else if (k == "context_strength") context_strength = std::stod(v);
                else if (k == "signal_strength") signal_strength = std::stod(v);
                else if (k == "noise_sigma") noise_sigma = std::stod(v);
                else if (k == "train_bags") train_bags = std::stoul(v);
                else if (k == "test_bags") test_bags = std::stoul(v);
                else if (k == "seed") seed = std::stoull(v);
                else throw ConfigError("unknown generator key '" + k + "'");
            } catch (const std::logic_error& e) {
                if (dynamic_cast<const ConfigError*>(&e)) throw;
                throw ConfigError("bad value for '" + k + "': " + v);
            }
        }
    }

    std::string fingerprint() const {
        std::string s;
        for (const auto& [k, v] : to_key_values()) s += k + "=" + v + ";";
        return hex64(fnv1a64(s));
    }
};

/// Contexts preferred by class y: those with c mod num_classes == num_classes-1-y.
/// With two classes and two contexts the positive class prefers context 0.
inline bool is_preferred_context(std::size_t context, std::size_t label, std::size_t num_classes) {
    return context % num_classes == num_classes - 1 - label;
}

struct GenerativeDirections {
    Matrix class_means;    // num_classes x d, unit rows (mu_y)
    Matrix context_shift;  // num_contexts x d, unit rows (nu_c)
};

/// Draws num_classes + num_contexts Gaussian vectors and orthonormalises them
/// with modified Gram-Schmidt; a draw whose residual after projection falls
/// below a tenth of its original norm is redrawn.
inline GenerativeDirections draw_directions(const GenConfig& cfg) {
    Rng rng(derive_seed(cfg.seed, {0xD1EC7ull}));
    const std::size_t total = cfg.num_classes + cfg.num_contexts;
    std::vector<std::vector<double>> basis;
    while (basis.size() < total) {
        std::vector<double> v(cfg.d);
        for (auto& x : v) x = rng.normal();
        const double norm0 = std::sqrt(dot(v, v));
        for (const auto& q : basis) {
            const double proj = dot(v, q);
            for (std::size_t j = 0; j < cfg.d; ++j) v[j] -= proj * q[j];
        }
        const double norm = std::sqrt(dot(v, v));
        if (!(norm > 0.1 * norm0)) continue;
        for (auto& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    GenerativeDirections dirs{Matrix(cfg.num_classes, cfg.d), Matrix(cfg.num_contexts, cfg.d)};
    for (std::size_t y = 0; y < cfg.num_classes; ++y)
        for (std::size_t j = 0; j < cfg.d; ++j) dirs.class_means(y, j) = basis[y][j];
    for (std::size_t c = 0; c < cfg.num_contexts; ++c)
        for (std::size_t j = 0; j < cfg.d; ++j) dirs.context_shift(c, j) = basis[cfg.num_classes + c][j];
    return dirs;
}

/// Generated data plus the ground truth the models never see.
struct GeneratedDataset {
    Dataset dataset;
    std::vector<std::size_t> key_counts;  // per bag, aligned with dataset.bags
    GenerativeDirections directions;
};

inline GeneratedDataset generate_with_truth(const GenConfig& cfg) {
    cfg.validate();
    GeneratedDataset out;
    out.directions = draw_directions(cfg);
    out.dataset.d = cfg.d;
    out.dataset.num_classes = cfg.num_classes;
    out.dataset.provenance = "synth:" + cfg.fingerprint();

    const auto& mu = out.directions.class_means;
    const auto& nu = out.directions.context_shift;

    auto make_split = [&](Split split, std::size_t count, double bias) {
        for (std::size_t i = 0; i < count; ++i) {
            Rng rng(derive_seed(cfg.seed, {0xBA6ull, static_cast<std::uint64_t>(split), i}));
            Bag bag;
            char id[32];
            std::snprintf(id, sizeof id, "%s_%05zu", split == Split::train ? "train" : "test", i);
            bag.bag_id = id;
            bag.split = split;
            bag.label = rng.index(cfg.num_classes);

            std::vector<std::size_t> preferred, rest;
            for (std::size_t c = 0; c < cfg.num_contexts; ++c)
                (is_preferred_context(c, bag.label, cfg.num_classes) ? preferred : rest).push_back(c);
            const bool pick_preferred = rng.uniform() < bias;
            const auto& pool = pick_preferred ? preferred : rest;
            bag.context_id = static_cast<int>(pool[rng.index(pool.size())]);

            const auto n = static_cast<std::size_t>(
                rng.uniform_int(static_cast<std::int64_t>(cfg.bag_size_min), static_cast<std::int64_t>(cfg.bag_size_max)));
            const double fraction = rng.uniform(cfg.key_fraction_min, cfg.key_fraction_max);
            const std::size_t keys =
                bag.label == 0 ? 0 : std::min(n, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n))));

            std::vector<std::size_t> order(n);
            for (std::size_t r = 0; r < n; ++r) order[r] = r;
            rng.shuffle(order.begin(), order.end());

            bag.instances = Matrix(n, cfg.d);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < cfg.d; ++j) bag.instances(r, j) = cfg.noise_sigma * rng.normal();
            for (std::size_t t = 0; t < keys; ++t) {
                auto row = bag.instances.row(order[t]);
                for (std::size_t j = 0; j < cfg.d; ++j) row[j] += cfg.signal_strength * mu(bag.label, j);
            }
            for (std::size_t r = 0; r < n; ++r) {
                auto row = bag.instances.row(r);
                for (std::size_t j = 0; j < cfg.d; ++j)
                    row[j] += cfg.context_strength * nu(static_cast<std::size_t>(bag.context_id), j);
            }
            out.dataset.bags.push_back(std::move(bag));
            out.key_counts.push_back(keys);
        }
    };
    make_split(Split::train, cfg.train_bags, cfg.bias_train);
    make_split(Split::test, cfg.test_bags, cfg.bias_test);
    out.dataset.validate();
    return out;
}

inline Dataset generate(const GenConfig& cfg) { return generate_with_truth(cfg).dataset; }

struct DatasetSummary {
    std::size_t num_contexts = 0;
    std::vector<std::vector<std::size_t>> label_context;  // [label][context] counts
    std::vector<std::size_t> bags_per_label;
    std::vector<double> key_instance_rate;  // per label; empty when truth is unavailable
    Matrix context_means;                   // num_contexts x d, mean over all instances
    std::vector<std::size_t> instances_per_context;
    std::size_t total_bags = 0;

    std::string to_text() const {
        std::ostringstream o;
        o << "bags\t" << total_bags << "\n";
        o << "label\\context";
        for (std::size_t c = 0; c < num_contexts; ++c) o << "\t" << c;
        o << "\n";
        for (std::size_t y = 0; y < label_context.size(); ++y) {
            o << y;
            for (auto v : label_context[y]) o << "\t" << v;
            o << "\n";
        }
        for (std::size_t y = 0; y < key_instance_rate.size(); ++y)
            o << "key_rate[" << y << "]\t" << key_instance_rate[y] << "\n";
        return o.str();
    }
};

/// Counts over `bags` of one split (or every bag when `split` is empty).
inline DatasetSummary summarize(const Dataset& ds, std::optional<Split> split = std::nullopt,
                                const std::vector<std::size_t>* key_counts = nullptr) {
    if (ds.bags.empty()) throw FormatError("summarize: empty dataset");
    DatasetSummary s;
    int max_ctx = 0;
    for (const auto& b : ds.bags) max_ctx = std::max(max_ctx, b.context_id);
    s.num_contexts = static_cast<std::size_t>(max_ctx) + 1;
    s.label_context.assign(ds.num_classes, std::vector<std::size_t>(s.num_contexts, 0));
    s.bags_per_label.assign(ds.num_classes, 0);
    s.context_means = Matrix(s.num_contexts, ds.d);
    s.instances_per_context.assign(s.num_contexts, 0);
    std::vector<double> keys(ds.num_classes, 0.0), inst(ds.num_classes, 0.0);

    for (std::size_t i = 0; i < ds.bags.size(); ++i) {
        const Bag& b = ds.bags[i];
        if (split && b.split != *split) continue;
        const auto c = static_cast<std::size_t>(b.context_id);
        ++s.total_bags;
        ++s.label_context[b.label][c];
        ++s.bags_per_label[b.label];
        for (std::size_t r = 0; r < b.size(); ++r)
            for (std::size_t j = 0; j < ds.d; ++j) s.context_means(c, j) += b.instances(r, j);
        s.instances_per_context[c] += b.size();
        if (key_counts) {
            keys[b.label] += static_cast<double>((*key_counts)[i]);
            inst[b.label] += static_cast<double>(b.size());
        }
    }
    for (std::size_t c = 0; c < s.num_contexts; ++c) {
        if (s.instances_per_context[c] == 0) continue;
        const double inv = 1.0 / static_cast<double>(s.instances_per_context[c]);
        for (std::size_t j = 0; j < ds.d; ++j) s.context_means(c, j) *= inv;
    }
    if (key_counts) {
        s.key_instance_rate.resize(ds.num_classes);
        for (std::size_t y = 0; y < ds.num_classes; ++y) s.key_instance_rate[y] = inst[y] > 0 ? keys[y] / inst[y] : 0.0;
    }
    return s;
}

}  // namespace dmil
