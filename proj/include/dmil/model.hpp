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

#include "dmil/aggregators.hpp"
#include "dmil/autodiff.hpp"
#include "dmil/data.hpp"
#include "dmil/intervention.hpp"
#include "dmil/random.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dmil {

/// Every trainable tensor of one aggregator + classifier, optionally with the
/// interventional head. A learnable dictionary's strata travel with the model.
struct ModelParams {
    AggregatorKind aggregator;
    std::size_t d = 0;
    std::size_t num_classes = 2;
    std::optional<AttentionParams> attention;
    ClassifierParams classifier;
    std::optional<InterventionParams> intervention;
    std::optional<Matrix> learned_strata;

    std::size_t classifier_outputs() const noexcept { return num_classes == 2 ? 1 : num_classes; }

    void validate() const {
        if ((aggregator.pooling == Pooling::attention) != attention.has_value()) {
            throw ShapeError("model: attention parameters present iff pooling is attention");
        }
        if (attention) detail::check_attention_params(*attention, d);
        const std::size_t width = intervention ? combined_width(intervention->combinator, d) : d;
        if (classifier.weight.rows() != width || classifier.weight.cols() != classifier_outputs() ||
            classifier.bias.rows() != 1 || classifier.bias.cols() != classifier_outputs()) {
            throw ShapeError("model: classifier is " + classifier.weight.shape_string() + " but expected " +
                             std::to_string(width) + "x" + std::to_string(classifier_outputs()));
        }
        if (intervention) {
            const auto& ip = *intervention;
            if (ip.w1.cols() != d || ip.w2.cols() != d || ip.w1.rows() != ip.w2.rows() || ip.w1.rows() == 0) {
                throw ShapeError("model: W1/W2 must both be l x d");
            }
        }
        if (learned_strata && (!intervention || learned_strata->cols() != d)) {
            throw ShapeError("model: learned strata require an interventional head of matching d");
        }
    }
};

/// Uniform(+-sqrt(6 / (fan_in + fan_out))).
inline Matrix glorot_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix m(rows, cols);
    for (auto& x : m.values()) x = rng.uniform(-limit, limit);
    return m;
}

struct InterventionShape {
    std::size_t l = 128;
    Combinator combinator = Combinator::concat;
};

/// Fresh parameters. Draw order: attention V, w, then W1, W2, then classifier.
inline ModelParams init_model(const AggregatorKind& kind, std::size_t d, std::size_t num_classes,
                              std::optional<InterventionShape> head, Rng& rng) {
    if (d == 0) throw ShapeError("init_model: d must be positive");
    if (kind.pooling == Pooling::attention && kind.hidden == 0) throw ShapeError("init_model: hidden width must be >= 1");
    ModelParams m;
    m.aggregator = kind;
    m.d = d;
    m.num_classes = num_classes;
    if (kind.pooling == Pooling::attention) {
        AttentionParams a;
        a.v = glorot_uniform(kind.hidden, d, d, kind.hidden, rng);
        a.w = glorot_uniform(kind.hidden, 1, kind.hidden, 1, rng);
        m.attention = std::move(a);
    }
    std::size_t width = d;
    if (head) {
        if (head->l == 0) throw ShapeError("init_model: l must be >= 1");
        InterventionParams ip;
        ip.w1 = glorot_uniform(head->l, d, d, head->l, rng);
        ip.w2 = glorot_uniform(head->l, d, d, head->l, rng);
        ip.combinator = head->combinator;
        width = combined_width(head->combinator, d);
        m.intervention = std::move(ip);
    }
    const std::size_t outs = m.classifier_outputs();
    m.classifier.weight = glorot_uniform(width, outs, width, outs, rng);
    m.classifier.bias = Matrix(1, outs);
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoint mapping

inline Checkpoint to_checkpoint(const ModelParams& m) {
    m.validate();
    Checkpoint ck;
    ck.meta["pooling"] = to_string(m.aggregator.pooling);
    ck.meta["hidden"] = std::to_string(m.aggregator.hidden);
    ck.meta["d"] = std::to_string(m.d);
    ck.meta["num_classes"] = std::to_string(m.num_classes);
    if (m.attention) {
        ck.tensors["attn.V"] = m.attention->v;
        ck.tensors["attn.w"] = m.attention->w;
    }
    ck.tensors["cls.W"] = m.classifier.weight;
    ck.tensors["cls.b"] = m.classifier.bias;
    if (m.intervention) {
        ck.meta["combinator"] = to_string(m.intervention->combinator);
        ck.meta["l"] = std::to_string(m.intervention->l());
        ck.tensors["ibmil.W1"] = m.intervention->w1;
        ck.tensors["ibmil.W2"] = m.intervention->w2;
    }
    if (m.learned_strata) ck.tensors["ibmil.strata"] = *m.learned_strata;
    return ck;
}

inline ModelParams from_checkpoint(const Checkpoint& ck) {
    auto meta = [&](const std::string& k) -> const std::string& {
        auto it = ck.meta.find(k);
        if (it == ck.meta.end()) throw FormatError("checkpoint: missing metadata '" + k + "'");
        return it->second;
    };
    auto tensor = [&](const std::string& k) -> const Matrix& {
        auto it = ck.tensors.find(k);
        if (it == ck.tensors.end()) throw FormatError("checkpoint: missing tensor '" + k + "'");
        return it->second;
    };
    ModelParams m;
    m.aggregator.pooling = parse_pooling(meta("pooling"));
    m.aggregator.hidden = std::stoul(meta("hidden"));
    m.d = std::stoul(meta("d"));
    m.num_classes = std::stoul(meta("num_classes"));
    if (m.aggregator.pooling == Pooling::attention) m.attention = AttentionParams{tensor("attn.V"), tensor("attn.w")};
    m.classifier = ClassifierParams{tensor("cls.W"), tensor("cls.b")};
    if (ck.meta.count("combinator")) {
        m.intervention = InterventionParams{tensor("ibmil.W1"), tensor("ibmil.W2"), parse_combinator(meta("combinator"))};
        if (m.intervention->l() != std::stoul(meta("l"))) throw FormatError("checkpoint: l disagrees with W1");
    }
    if (ck.tensors.count("ibmil.strata")) m.learned_strata = tensor("ibmil.strata");
    try {
        m.validate();
    } catch (const ShapeError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    return m;
}

inline void save_model(const ModelParams& m, const std::filesystem::path& p) { save_checkpoint(to_checkpoint(m), p); }
inline ModelParams load_model(const std::filesystem::path& p) { return from_checkpoint(load_checkpoint(p)); }

// ---------------------------------------------------------------------------
// Inference

/// Dictionary actually used by an interventional model: its learned strata if
/// present, else `dict` (which must then be supplied).
inline ConfounderDictionary effective_dictionary(const ModelParams& m, const ConfounderDictionary* dict) {
    if (m.learned_strata) {
        ConfounderDictionary out;
        out.strata = *m.learned_strata;
        out.prior = dict ? dict->prior : ConfounderDictionary::uniform_prior(m.learned_strata->rows());
        out.frozen = false;
        if (out.prior.size() != out.k()) throw ShapeError("model: dictionary K differs from learned strata");
        return out;
    }
    if (!dict) throw std::invalid_argument("model: an interventional model needs a confounder dictionary");
    if (dict->d() != m.d) throw ShapeError("model: dictionary d differs from model d");
    return *dict;
}

/// Class probabilities for one bag.
inline std::vector<double> predict(const ModelParams& m, const Matrix& instances,
                                   const ConfounderDictionary* dict = nullptr) {
    const AttentionParams* attn = m.attention ? &*m.attention : nullptr;
    if (!m.intervention) {
        return classify(pool(instances, m.aggregator, attn).bag_feature, m.classifier);
    }
    const auto eff = effective_dictionary(m, dict);
    return interventional_forward(instances, m.aggregator, attn, *m.intervention, m.classifier, eff).probabilities;
}

// ---------------------------------------------------------------------------
// Tape binding

/// A model's tensors registered on one tape, with the parameter each trainable
/// variable writes back to.
struct BoundModel {
    std::optional<ad::AttentionVars> attention;
    ad::ClassifierVars classifier;
    std::optional<ad::Var> w1, w2, strata, prior;
    std::vector<std::pair<Matrix*, ad::Var>> trainables;
};

/// Trainable tensors in binding order: V, w, W1, W2, learned strata, classifier W, b.
inline std::vector<Matrix*> trainable_tensors(ModelParams& m) {
    std::vector<Matrix*> out;
    if (m.attention) {
        out.push_back(&m.attention->v);
        out.push_back(&m.attention->w);
    }
    if (m.intervention) {
        out.push_back(&m.intervention->w1);
        out.push_back(&m.intervention->w2);
        if (m.learned_strata) out.push_back(&*m.learned_strata);
    }
    out.push_back(&m.classifier.weight);
    out.push_back(&m.classifier.bias);
    return out;
}

/// Builds the model graph from variables already on `tape`, one per entry of
/// trainable_tensors(m) and in that order. A frozen dictionary enters as a constant.
inline BoundModel assemble(ad::Tape& tape, const ModelParams& m, std::span<const ad::Var> vars,
                           const ConfounderDictionary* dict) {
    BoundModel b;
    std::size_t next = 0;
    auto take = [&] {
        if (next >= vars.size()) throw std::invalid_argument("assemble: too few variables for the model");
        return vars[next++];
    };
    if (m.attention) {
        const ad::Var v = take();
        b.attention = ad::AttentionVars{v, take()};
    }
    if (m.intervention) {
        b.w1 = take();
        b.w2 = take();
        if (m.learned_strata) {
            b.strata = take();
        } else {
            if (!dict) throw std::invalid_argument("bind: interventional model needs a dictionary");
            b.strata = tape.constant(dict->strata);
        }
        const std::size_t k = b.strata->rows();
        const auto prior = dict ? dict->prior : ConfounderDictionary::uniform_prior(k);
        if (prior.size() != k) throw ShapeError("bind: prior length differs from K");
        b.prior = tape.constant(Matrix::row_vector(prior));
    }
    const ad::Var w = take();
    b.classifier = ad::ClassifierVars{w, take()};
    if (next != vars.size()) throw std::invalid_argument("assemble: too many variables for the model");
    return b;
}

/// `dict` is required for interventional models; its strata become a tape
/// parameter only when the model carries learned strata.
inline BoundModel bind(ad::Tape& tape, ModelParams& m, const ConfounderDictionary* dict) {
    const auto tensors = trainable_tensors(m);
    std::vector<ad::Var> vars;
    vars.reserve(tensors.size());
    for (Matrix* t : tensors) vars.push_back(tape.parameter(*t));
    BoundModel b = assemble(tape, m, vars, dict);
    for (std::size_t i = 0; i < tensors.size(); ++i) b.trainables.emplace_back(tensors[i], vars[i]);
    return b;
}

/// Probability output on the tape (see ad::classify for its shape).
inline ad::Var forward(const ModelParams& m, const BoundModel& b, ad::Var instances) {
    ad::Var feature = ad::pool(instances, m.aggregator, b.attention ? &*b.attention : nullptr);
    if (m.intervention) {
        feature = ad::backdoor_feature(feature, *b.strata, *b.prior, *b.w1, *b.w2, m.intervention->combinator);
    }
    return ad::classify(feature, b.classifier);
}

}  // namespace dmil
