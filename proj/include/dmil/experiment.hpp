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

#pragma once

// Full benchmark: baselines, interventional runs and their sweeps over a list
// of seeds. Every (seed, cell) pair is an independent deterministic job; the
// CSV is assembled in a fixed order after all jobs finish.

#include "dmil/confounders.hpp"
#include "dmil/metrics.hpp"
#include "dmil/synth.hpp"
#include "dmil/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace dmil {

struct ExperimentConfig {
    GenConfig gen;
    TrainConfig train;
    std::size_t control_epochs = 100;
    std::size_t k = 8;
    std::size_t l = 128;
    std::vector<std::size_t> k_sweep{2, 4, 8, 16};
    std::vector<std::size_t> l_sweep{8, 16, 32};

    /// Trainer and sweep keys are consumed here; everything else goes to the generator.
    void apply(const std::map<std::string, std::string>& kv) {
        std::map<std::string, std::string> rest;
        auto list = [](const std::string& key, const std::string& v) {
            std::vector<std::size_t> out;
            std::stringstream in(v);
            std::string item;
            while (std::getline(in, item, ',')) {
                try {
                    out.push_back(std::stoul(item));
                } catch (const std::logic_error&) {
                    throw ConfigError("bad list entry for '" + key + "': " + item);
                }
            }
            if (out.empty()) throw ConfigError("'" + key + "' must not be empty");
            return out;
        };
        for (const auto& [key, v] : kv) {
            try {
                if (key == "epochs") train.epochs = std::stoul(v);
                else if (key == "lr") train.lr = std::stod(v);
                else if (key == "hidden") train.hidden = std::stoul(v);
                else if (key == "weight_decay") train.weight_decay = std::stod(v);
                else if (key == "control_epochs") control_epochs = std::stoul(v);
                else if (key == "k") k = std::stoul(v);
                else if (key == "l") l = std::stoul(v);
                else if (key == "k_sweep") k_sweep = list(key, v);
                else if (key == "l_sweep") l_sweep = list(key, v);
                else rest.emplace(key, v);
            } catch (const ConfigError&) {
                throw;
            } catch (const std::logic_error&) {
                throw ConfigError("bad value for '" + key + "': " + v);
            }
        }
        gen.apply(rest);
    }

    void validate() const {
        gen.validate();
        train.validate();
        if (control_epochs < train.epochs) throw ConfigError("control_epochs must be >= epochs");
        if (k == 0 || l == 0) throw ConfigError("k and l must be >= 1");
        for (auto v : k_sweep)
            if (v == 0) throw ConfigError("k_sweep entries must be >= 1");
        for (auto v : l_sweep)
            if (v == 0) throw ConfigError("l_sweep entries must be >= 1");
    }
};

inline ExperimentConfig load_experiment_config(const std::filesystem::path& p) {
    const auto bytes = read_file(p);
    ExperimentConfig cfg;
    cfg.apply(parse_key_values(std::string_view(bytes.data(), bytes.size()), p.string()));
    cfg.validate();
    return cfg;
}

/// "0,1,2" or ranges such as "0-4"; order and duplicates are normalised away.
inline std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::set<std::uint64_t> seeds;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (item.empty()) continue;
        try {
            const auto dash = item.find('-');
            if (dash == std::string::npos) {
                seeds.insert(std::stoull(item));
            } else {
                const auto lo = std::stoull(item.substr(0, dash)), hi = std::stoull(item.substr(dash + 1));
                if (lo > hi) throw std::invalid_argument("range");
                for (auto s = lo; s <= hi; ++s) seeds.insert(s);
            }
        } catch (const std::logic_error&) {
            throw std::invalid_argument("bad seed list entry '" + item + "'");
        }
    }
    if (seeds.empty()) throw std::invalid_argument("seed list is empty");
    return {seeds.begin(), seeds.end()};
}

/// DECONFOUND_MIL_THREADS when set to a positive integer, else all cores.
inline std::size_t thread_cap() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("DECONFOUND_MIL_THREADS")) {
        try {
            const auto v = std::stoul(env);
            if (v > 0) n = v;
        } catch (const std::logic_error&) {
        }
    }
    return n;
}

// ---------------------------------------------------------------------------

namespace method {
inline constexpr const char* baseline = "baseline";
inline constexpr const char* baseline_long = "baseline_long";
inline constexpr const char* baseline_unbiased = "baseline_unbiased";
inline constexpr const char* ibmil = "ibmil";
}  // namespace method

/// One row family of the benchmark. Baselines use tag = pooling and K = l = 0.
struct CellSpec {
    std::string method;
    std::string tag;
    std::size_t k = 0;
    std::size_t l = 0;
    std::string combinator = "none";

    auto key() const { return std::tie(method, tag, k, l, combinator); }
    friend bool operator<(const CellSpec& a, const CellSpec& b) { return a.key() < b.key(); }
    friend bool operator==(const CellSpec& a, const CellSpec& b) { return a.key() == b.key(); }

    std::string run_id(std::uint64_t seed) const {
        return method + "-" + tag + "-K" + std::to_string(k) + "-l" + std::to_string(l) + "-" + combinator + "-s" +
               std::to_string(seed);
    }
};

/// The benchmark's cells, deduplicated and sorted. `l` values are the
/// effective (clamped) joint widths.
inline std::vector<CellSpec> benchmark_cells(const ExperimentConfig& cfg) {
    const std::size_t d = cfg.gen.d;
    const std::size_t l = effective_l(cfg.l, d, false);
    std::set<CellSpec> cells;
    const std::string attn = to_string(Pooling::attention);
    cells.insert({method::baseline, attn});
    cells.insert({method::baseline_long, attn});
    cells.insert({method::baseline_unbiased, attn});
    auto ib = [&](DictionaryMode mode, std::size_t k, std::size_t ll, Combinator c) {
        cells.insert({method::ibmil, to_string(mode), k, ll, to_string(c)});
    };
    ib(DictionaryMode::attention, cfg.k, l, Combinator::concat);
    for (auto k : cfg.k_sweep) ib(DictionaryMode::attention, k, l, Combinator::concat);
    for (auto ll : cfg.l_sweep) ib(DictionaryMode::attention, cfg.k, effective_l(ll, d, false), Combinator::concat);
    ib(DictionaryMode::attention, cfg.k, l, Combinator::add);
    ib(DictionaryMode::attention, cfg.k, l, Combinator::sub);
    for (auto mode : {DictionaryMode::mean, DictionaryMode::max, DictionaryMode::instance})
        ib(mode, cfg.k, l, Combinator::concat);
    return {cells.begin(), cells.end()};
}

struct CellOutcome {
    CellSpec spec;
    std::uint64_t seed = 0;
    MetricsReport report;
    std::vector<EpochRecord> trace;
};

struct RunAllResult {
    std::vector<CellOutcome> completed;  // sorted by (spec, seed)
    std::vector<std::string> errors;
    bool ok() const noexcept { return errors.empty(); }
};

namespace detail {

inline MetricsReport report_for(const CellSpec& spec, std::uint64_t seed, const Evaluation& ev) {
    MetricsReport r;
    r.run_id = spec.run_id(seed);
    r.method = spec.method;
    r.extractor_tag = spec.tag;
    r.k = spec.k;
    r.l = spec.l;
    r.combinator = spec.combinator;
    r.precision = ev.confusion.macro_precision;
    r.recall = ev.confusion.macro_recall;
    r.accuracy = ev.confusion.accuracy;
    r.auc = ev.auc.value_or(std::nan(""));
    r.seed = seed;
    return r;
}

inline void run_parallel(std::vector<std::function<void()>>& jobs, std::size_t threads) {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) jobs[i]();
    };
    const std::size_t n = std::min(std::max<std::size_t>(threads, 1), jobs.size());
    if (n <= 1) {
        worker();
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

inline std::string format_stat(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", x);
    return buf;
}

}  // namespace detail

/// Runs every cell of benchmark_cells(cfg) for every seed. Failures are
/// collected per job; cells that finished are kept.
inline RunAllResult run_all(const ExperimentConfig& cfg, std::span<const std::uint64_t> seeds, std::size_t threads) {
    cfg.validate();
    const auto cells = benchmark_cells(cfg);
    const std::size_t ns = seeds.size();

    struct SeedState {
        Dataset biased, unbiased;
        std::optional<ModelParams> baseline;
    };
    std::vector<SeedState> state(ns);
    std::vector<std::optional<CellOutcome>> slots(ns * cells.size());
    std::vector<std::string> errors(ns * (cells.size() + 1));

    auto train_cfg = [&](std::uint64_t seed) {
        TrainConfig t = cfg.train;
        t.seed = seed;
        t.trace_test_metrics = false;
        return t;
    };

    // Wave 1: data.
    std::vector<std::function<void()>> jobs;
    for (std::size_t s = 0; s < ns; ++s) {
        jobs.push_back([&, s] {
            try {
                GenConfig g = cfg.gen;
                g.seed = seeds[s];
                state[s].biased = generate(g);
                g.bias_train = 0.5;
                state[s].unbiased = generate(g);
            } catch (const std::exception& e) {
                errors[s * (cells.size() + 1)] = "seed " + std::to_string(seeds[s]) + " data: " + e.what();
            }
        });
    }
    detail::run_parallel(jobs, threads);

    auto cell_job = [&](std::size_t s, std::size_t c) {
        return [&, s, c] {
            const CellSpec& spec = cells[c];
            const std::uint64_t seed = seeds[s];
            SeedState& st = state[s];
            try {
                if (!errors[s * (cells.size() + 1)].empty()) throw std::runtime_error("no data");
                CellOutcome out{spec, seed, {}, {}};
                const Dataset* eval_on = &st.biased;
                const ConfounderDictionary* dict_used = nullptr;
                std::optional<ConfounderDictionary> dict;
                ModelParams model;
                TrainConfig t = train_cfg(seed);
                if (spec.method == method::baseline) {
                    model = train_stage2(st.biased, Pooling::attention, t).model;
                    st.baseline = model;
                } else if (spec.method == method::baseline_long) {
                    t.trace_test_metrics = true;
                    auto r = train_longer_control(st.biased, Pooling::attention, t, cfg.control_epochs - t.epochs);
                    model = std::move(r.model);
                    out.trace = std::move(r.trace);
                } else if (spec.method == method::baseline_unbiased) {
                    model = train_stage2(st.unbiased, Pooling::attention, t).model;
                    eval_on = &st.unbiased;
                } else {
                    DictionaryOptions dopt;
                    dopt.mode = parse_dictionary_mode(spec.tag);
                    dopt.k = spec.k;
                    dopt.seed = derive_seed(seed, {0xD1C7ull});
                    const ModelParams* stage2 = nullptr;
                    if (dopt.mode == DictionaryMode::attention) {
                        if (!st.baseline) throw std::runtime_error("baseline aggregator unavailable");
                        stage2 = &*st.baseline;
                    }
                    dict = build_dictionary(st.biased, dopt, stage2);
                    t.k = spec.k;
                    t.l = spec.l;
                    t.combinator = parse_combinator(spec.combinator);
                    model = train_stage3(st.biased, *dict, Pooling::attention, t).model;
                    dict_used = &*dict;
                }
                out.report = detail::report_for(spec, seed, evaluate(model, *eval_on, Split::test, dict_used));
                slots[s * cells.size() + c] = std::move(out);
            } catch (const std::exception& e) {
                errors[s * (cells.size() + 1) + 1 + c] = spec.run_id(seed) + ": " + e.what();
            }
        };
    };

    // Wave 2: everything that does not read the Stage-2 aggregator. Wave 3: the rest.
    auto needs_baseline = [](const CellSpec& c) {
        return c.method == method::ibmil && c.tag == to_string(DictionaryMode::attention);
    };
    for (int wave = 0; wave < 2; ++wave) {
        jobs.clear();
        for (std::size_t s = 0; s < ns; ++s)
            for (std::size_t c = 0; c < cells.size(); ++c)
                if (needs_baseline(cells[c]) == (wave == 1)) jobs.push_back(cell_job(s, c));
        detail::run_parallel(jobs, threads);
    }

    RunAllResult result;
    for (std::size_t c = 0; c < cells.size(); ++c)
        for (std::size_t s = 0; s < ns; ++s)
            if (slots[s * cells.size() + c]) result.completed.push_back(std::move(*slots[s * cells.size() + c]));
    for (auto& e : errors)
        if (!e.empty()) result.errors.push_back(std::move(e));
    return result;
}

/// Per-seed rows in (cell, seed) order, each cell followed by its mean and
/// sample standard deviation rows (seed column "mean" / "std").
inline std::string results_csv(const std::vector<CellOutcome>& completed) {
    std::ostringstream o;
    o << MetricsReport::csv_header() << '\n';
    for (std::size_t i = 0; i < completed.size();) {
        std::size_t j = i;
        while (j < completed.size() && completed[j].spec == completed[i].spec) o << completed[j++].report.csv_row() << '\n';
        const double n = static_cast<double>(j - i);
        auto stats = [&](auto field) {
            double mean = 0.0;
            for (std::size_t t = i; t < j; ++t) mean += field(completed[t].report);
            mean /= n;
            double ss = 0.0;
            for (std::size_t t = i; t < j; ++t) ss += std::pow(field(completed[t].report) - mean, 2);
            return std::pair{mean, n > 1 ? std::sqrt(ss / (n - 1)) : 0.0};
        };
        const auto p = stats([](const MetricsReport& r) { return r.precision; });
        const auto r = stats([](const MetricsReport& r) { return r.recall; });
        const auto a = stats([](const MetricsReport& r) { return r.accuracy; });
        const auto u = stats([](const MetricsReport& r) { return r.auc; });
        const auto& base = completed[i].report;
        const auto& spec = completed[i].spec;
        for (int which = 0; which < 2; ++which) {
            const char* label = which == 0 ? "mean" : "std";
            auto pick = [&](const std::pair<double, double>& s) { return detail::format_stat(which == 0 ? s.first : s.second); };
            o << spec.method << '-' << spec.tag << "-K" << spec.k << "-l" << spec.l << '-' << spec.combinator << '-'
              << label << ',' << base.method << ',' << base.extractor_tag << ',' << base.k << ',' << base.l << ','
              << base.combinator << ',' << pick(p) << ',' << pick(r) << ',' << pick(a) << ',' << pick(u) << ','
              << label << '\n';
        }
        i = j;
    }
    return o.str();
}

/// Mean test accuracy of one cell across the completed seeds, if any ran.
inline std::optional<double> mean_accuracy(const std::vector<CellOutcome>& completed, const CellSpec& spec) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& c : completed) {
        if (c.spec == spec) {
            total += c.report.accuracy;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
}

/// Writes results.csv, and the long-control traces under traces/.
inline void write_run_all(const RunAllResult& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "traces");
    write_text(dir / "results.csv", results_csv(r.completed));
    for (const auto& c : r.completed)
        if (!c.trace.empty()) write_text(dir / "traces" / (c.report.run_id + ".tsv"), trace_tsv(c.trace));
}

}  // namespace dmil
