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

// Stage 2 (aggregator + classifier on pooled bag features) and Stage 3
// (fresh aggregator, projections and widened classifier on backdoor-adjusted
// features). One bag per optimisation step, bag order reshuffled every epoch.

#pragma once

#include "dmil/autodiff.hpp"
#include "dmil/confounders.hpp"
#include "dmil/data.hpp"
#include "dmil/metrics.hpp"
#include "dmil/model.hpp"
#include "dmil/random.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace dmil {

struct TrainingDiverged : NumericError {
    TrainingDiverged(std::size_t epoch, const std::string& what)
        : NumericError("training diverged in epoch " + std::to_string(epoch) + ": " + what), epoch(epoch) {}
    std::size_t epoch;
};

enum class Optimizer { adam, sgd };

struct TrainConfig {
    std::size_t epochs = 50;
    double lr = 1e-4;
    Optimizer optimizer = Optimizer::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::size_t hidden = 128;  // attention width m
    // Stage 3
    bool learnable_confounders = false;
    Combinator combinator = Combinator::concat;
    std::size_t k = 0;  // expected dictionary size; 0 accepts any
    std::size_t l = 128;
    // Evaluate the test split after every epoch for the trace.
    bool trace_test_metrics = true;

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
        if (!(lr > 0.0)) throw std::invalid_argument("train: learning rate must be > 0");
        if (weight_decay < 0.0) throw std::invalid_argument("train: weight decay must be >= 0");
        if (l == 0) throw std::invalid_argument("train: l must be >= 1");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    std::optional<double> test_accuracy;
    std::optional<double> test_auc;
};

struct TrainResult {
    ModelParams model;
    std::vector<EpochRecord> trace;
};

/// epoch, train_loss, test_acc, test_auc; empty cells when not evaluated.
inline std::string trace_tsv(const std::vector<EpochRecord>& trace) {
    std::ostringstream o;
    o << "epoch\ttrain_loss\ttest_acc\ttest_auc\n";
    char buf[64];
    for (const auto& r : trace) {
        std::snprintf(buf, sizeof buf, "%.9g", r.train_loss);
        o << r.epoch << '\t' << buf << '\t';
        if (r.test_accuracy) {
            std::snprintf(buf, sizeof buf, "%.6f", *r.test_accuracy);
            o << buf;
        }
        o << '\t';
        if (r.test_auc) {
            std::snprintf(buf, sizeof buf, "%.6f", *r.test_auc);
            o << buf;
        }
        o << '\n';
    }
    return o.str();
}

/// Mean binary cross-entropy with predictions clamped to [eps, 1 - eps].
inline double bce_loss(std::span<const double> predictions, std::span<const double> labels, double eps = 1e-7) {
    if (predictions.size() != labels.size()) throw std::invalid_argument("bce_loss: length mismatch");
    if (predictions.empty()) throw std::invalid_argument("bce_loss: empty input");
    double total = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double p = std::clamp(predictions[i], eps, 1.0 - eps);
        total -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    }
    return total / static_cast<double>(predictions.size());
}

/// Adam (or plain SGD) state for a fixed list of parameter tensors.
class ParameterOptimizer {
public:
    explicit ParameterOptimizer(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(const std::vector<std::pair<Matrix*, Matrix>>& params_and_grads) {
        if (m_.empty()) {
            for (const auto& [p, g] : params_and_grads) {
                m_.emplace_back(p->rows(), p->cols());
                v_.emplace_back(p->rows(), p->cols());
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_and_grads.size(); ++k) {
            Matrix& p = *params_and_grads[k].first;
            const Matrix& g = params_and_grads[k].second;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i] + cfg_.weight_decay * p[i];
                if (cfg_.optimizer == Optimizer::sgd) {
                    p[i] -= cfg_.lr * gi;
                    continue;
                }
                m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
                v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
                p[i] -= cfg_.lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + cfg_.adam_eps);
            }
        }
    }

private:
    TrainConfig cfg_;
    std::vector<Matrix> m_, v_;
    std::size_t t_ = 0;
};

/// Builds the per-bag training loss on a tape: BCE for two classes,
/// cross-entropy otherwise.
inline ad::Var bag_loss(const ModelParams& model, const BoundModel& bound, ad::Var instances, std::size_t label) {
    ad::Var out = forward(model, bound, instances);
    if (model.num_classes == 2) return ad::binary_cross_entropy(out, {static_cast<double>(label)});
    return ad::categorical_cross_entropy(out, label);
}

struct Evaluation {
    ConfusionMetrics confusion;
    std::optional<double> auc;  // binary problems with both classes present
    std::vector<double> positive_scores;
    std::vector<std::size_t> predicted;
};

/// Scores every bag of `split`; binary decisions threshold P(y=1) at 0.5.
inline Evaluation evaluate(const ModelParams& model, const Dataset& ds, Split split,
                           const ConfounderDictionary* dict = nullptr) {
    const auto bags = ds.split(split);
    if (bags.empty()) throw std::invalid_argument("evaluate: split has no bags");
    Evaluation ev;
    std::vector<std::size_t> truth;
    std::vector<int> binary;
    for (const auto* b : bags) {
        const auto p = predict(model, b->instances, dict);
        std::size_t cls = 0;
        if (p.size() == 2) {
            cls = p[1] >= 0.5 ? 1 : 0;
        } else {
            cls = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
        }
        ev.predicted.push_back(cls);
        ev.positive_scores.push_back(p.size() == 2 ? p[1] : p[cls]);
        truth.push_back(b->label);
        binary.push_back(b->label == 1 ? 1 : 0);
    }
    ev.confusion = confusion_metrics(ev.predicted, truth, ds.num_classes);
    if (ds.num_classes == 2) {
        const bool both = std::any_of(binary.begin(), binary.end(), [](int y) { return y == 1; }) &&
                          std::any_of(binary.begin(), binary.end(), [](int y) { return y == 0; });
        if (both) ev.auc = auc(ev.positive_scores, binary);
    }
    return ev;
}

namespace detail {

inline TrainResult run_training(ModelParams model, const Dataset& ds, const ConfounderDictionary* dict,
                                const TrainConfig& cfg) {
    const auto train = ds.split(Split::train);
    if (train.empty()) throw std::invalid_argument("train: no training bags");
    const bool has_test = !ds.split(Split::test).empty();

    Rng order_rng(derive_seed(cfg.seed, {0x0DE7ull}));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    ParameterOptimizer opt(cfg);
    TrainResult result;
    std::vector<std::pair<Matrix*, Matrix>> updates;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        order_rng.shuffle(order.begin(), order.end());
        double total = 0.0;
        try {
            for (std::size_t idx : order) {
                const Bag& bag = *train[idx];
                ad::Tape tape;
                BoundModel bound = bind(tape, model, dict);
                ad::Var x = tape.constant(bag.instances);
                ad::Var loss = bag_loss(model, bound, x, bag.label);
                const double lv = loss.value()[0];
                if (!std::isfinite(lv)) throw NumericError("non-finite loss");
                total += lv;
                tape.backward(loss);
                updates.clear();
                for (const auto& [ptr, var] : bound.trainables) updates.emplace_back(ptr, tape.grad(var));
                opt.step(updates);
            }
            for (const auto& [ptr, grad] : updates) require_finite(*ptr, "parameters");
        } catch (const NumericError& e) {
            throw TrainingDiverged(epoch, e.what());
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = total / static_cast<double>(train.size());
        if (cfg.trace_test_metrics && has_test) {
            const auto ev = evaluate(model, ds, Split::test, dict);
            rec.test_accuracy = ev.confusion.accuracy;
            rec.test_auc = ev.auc;
        }
        result.trace.push_back(rec);
    }
    result.model = std::move(model);
    return result;
}

}  // namespace detail

/// Baseline MIL training: pooling + classifier, fresh from the seed.
inline TrainResult train_stage2(const Dataset& dataset, Pooling pooling, const TrainConfig& cfg) {
    cfg.validate();
    Rng init_rng(derive_seed(cfg.seed, {0x1A17ull, 2}));
    auto model = init_model(AggregatorKind{pooling, cfg.hidden}, dataset.d, dataset.num_classes, std::nullopt, init_rng);
    return detail::run_training(std::move(model), blinded(dataset), nullptr, cfg);
}

/// l clamped to d, as the joint space cannot usefully exceed the feature width.
inline std::size_t effective_l(std::size_t l, std::size_t d, bool warn = true) {
    if (l > d) {
        if (warn) std::cerr << "warning: joint dimension l=" << l << " clamped to d=" << d << "\n";
        return d;
    }
    return l;
}

/// Interventional training against `dictionary`. A frozen dictionary is read
/// only; with learnable_confounders the model carries its own copy of the strata.
/// `warm_start`, when given, supplies the initial attention weights; everything
/// else starts fresh.
inline TrainResult train_stage3(const Dataset& dataset, const ConfounderDictionary& dictionary, Pooling pooling,
                                const TrainConfig& cfg, const ModelParams* warm_start = nullptr) {
    cfg.validate();
    dictionary.validate();
    if (cfg.k != 0 && cfg.k != dictionary.k()) {
        throw std::invalid_argument("train_stage3: dictionary has K=" + std::to_string(dictionary.k()) +
                                    " but the configuration expects K=" + std::to_string(cfg.k));
    }
    if (dictionary.d() != dataset.d) throw ShapeError("train_stage3: dictionary d differs from data");
    Rng init_rng(derive_seed(cfg.seed, {0x1A17ull, 3}));
    const InterventionShape head{effective_l(cfg.l, dataset.d), cfg.combinator};
    auto model = init_model(AggregatorKind{pooling, cfg.hidden}, dataset.d, dataset.num_classes, head, init_rng);
    if (warm_start) {
        if (warm_start->aggregator.pooling != pooling || warm_start->d != dataset.d ||
            (pooling == Pooling::attention && warm_start->aggregator.hidden != cfg.hidden)) {
            throw std::invalid_argument("train_stage3: warm-start aggregator does not match the configuration");
        }
        model.attention = warm_start->attention;
    }
    if (cfg.learnable_confounders) model.learned_strata = dictionary.strata;
    return detail::run_training(std::move(model), blinded(dataset), &dictionary, cfg);
}

/// Stage-2 training run for epochs + extra_epochs, tracing every epoch. The
/// first `epochs` epochs coincide with train_stage2 under the same seed.
inline TrainResult train_longer_control(const Dataset& dataset, Pooling pooling, TrainConfig cfg,
                                        std::size_t extra_epochs) {
    cfg.epochs += extra_epochs;
    return train_stage2(dataset, pooling, cfg);
}

}  // namespace dmil
