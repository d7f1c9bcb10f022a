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

// Backdoor-adjusted bag classification.
//
// Given a bag feature B (1 x d) and confounder strata C (K x d, prior P):
//
//   alpha = softmax( (B W1^T) (C W2^T)^T / sqrt(l) )        attention over strata
//   v     = sum_i alpha_i P(c_i) c_i                         expected confounder
//   P(Y | do(X)) ~= g(B * v),  * in {concat, add, sub}       one forward pass
//
// The single pass moves the expectation over strata inside the classifier.
// explicit_backdoor_forward instead averages g(B * alpha_i c_i) over strata
// weighted by P(c_i), one classifier evaluation per stratum.

#pragma once

#include "dmil/aggregators.hpp"
#include "dmil/autodiff.hpp"
#include "dmil/data.hpp"
#include "dmil/matrix.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace dmil {

enum class Combinator { concat, add, sub };

inline std::string to_string(Combinator c) {
    switch (c) {
        case Combinator::concat: return "concat";
        case Combinator::add: return "add";
        case Combinator::sub: return "sub";
    }
    return "?";
}

inline Combinator parse_combinator(const std::string& s) {
    if (s == "concat") return Combinator::concat;
    if (s == "add") return Combinator::add;
    if (s == "sub") return Combinator::sub;
    throw std::invalid_argument("unknown combinator '" + s + "'");
}

/// Classifier input width for a d-dimensional bag feature.
inline std::size_t combined_width(Combinator c, std::size_t d) { return c == Combinator::concat ? 2 * d : d; }

/// Projections into the joint space; both are l x d.
struct InterventionParams {
    Matrix w1;
    Matrix w2;
    Combinator combinator = Combinator::concat;

    std::size_t l() const noexcept { return w1.rows(); }
};

inline std::vector<double> confounder_attention(const Matrix& bag_feature, const Matrix& strata, const Matrix& w1,
                                                const Matrix& w2) {
    if (bag_feature.rows() != 1 || w1.cols() != bag_feature.cols() || w2.cols() != strata.cols() ||
        w1.rows() != w2.rows() || strata.rows() == 0) {
        throw ShapeError("confounder_attention: B " + bag_feature.shape_string() + ", C " + strata.shape_string() +
                         ", W1 " + w1.shape_string() + ", W2 " + w2.shape_string());
    }
    const Matrix query = matmul_nt(bag_feature, w1);  // 1 x l
    const Matrix keys = matmul_nt(strata, w2);        // K x l
    const Matrix logits = scale(matmul_nt(query, keys), 1.0 / std::sqrt(static_cast<double>(w1.rows())));
    return softmax(logits.values());
}

inline std::vector<double> confounder_attention(const Matrix& bag_feature, const ConfounderDictionary& dict,
                                                const InterventionParams& p) {
    return confounder_attention(bag_feature, dict.strata, p.w1, p.w2);
}

inline Matrix combine(const Matrix& bag_feature, const Matrix& confounder, Combinator c) {
    switch (c) {
        case Combinator::concat: return concat(bag_feature, confounder);
        case Combinator::add: return add(bag_feature, confounder);
        case Combinator::sub: return sub(bag_feature, confounder);
    }
    throw std::logic_error("combine: unknown combinator");
}

/// B * v with v = sum_i alpha_i P(c_i) c_i, summed in stratum order.
inline Matrix backdoor_combine(const Matrix& bag_feature, std::span<const double> alpha, const Matrix& strata,
                               std::span<const double> prior, Combinator c) {
    if (alpha.size() != strata.rows() || prior.size() != strata.rows() || bag_feature.rows() != 1 ||
        bag_feature.cols() != strata.cols()) {
        throw ShapeError("backdoor_combine: inconsistent shapes");
    }
    Matrix v(1, strata.cols());
    for (std::size_t i = 0; i < strata.rows(); ++i) {
        const double w = alpha[i] * prior[i];
        for (std::size_t j = 0; j < strata.cols(); ++j) v[j] += w * strata(i, j);
    }
    return combine(bag_feature, v, c);
}

struct InterventionalOutput {
    std::vector<double> probabilities;
    std::vector<double> alpha;
    Matrix bag_feature;
    std::vector<double> bag_attention;
};

/// pool -> confounder_attention -> backdoor_combine -> classify.
inline InterventionalOutput interventional_forward(const Matrix& instances, const AggregatorKind& kind,
                                                   const AttentionParams* attention, const InterventionParams& ip,
                                                   const ClassifierParams& cls, const ConfounderDictionary& dict) {
    if (cls.in_width() != combined_width(ip.combinator, instances.cols())) {
        throw ShapeError("interventional_forward: classifier width " + std::to_string(cls.in_width()) +
                         " does not match combinator " + to_string(ip.combinator));
    }
    auto pooled = pool(instances, kind, attention);
    InterventionalOutput out;
    out.alpha = confounder_attention(pooled.bag_feature, dict, ip);
    const Matrix input = backdoor_combine(pooled.bag_feature, out.alpha, dict.strata, dict.prior, ip.combinator);
    out.probabilities = classify(input, cls);
    out.bag_feature = std::move(pooled.bag_feature);
    out.bag_attention = std::move(pooled.attention);
    return out;
}

/// Reference form: sum_i P(c_i) g(B * alpha_i c_i), one classifier pass per stratum.
inline std::vector<double> explicit_backdoor_forward(const Matrix& instances, const AggregatorKind& kind,
                                                     const AttentionParams* attention, const InterventionParams& ip,
                                                     const ClassifierParams& cls, const ConfounderDictionary& dict) {
    if (cls.in_width() != combined_width(ip.combinator, instances.cols())) {
        throw ShapeError("explicit_backdoor_forward: classifier width does not match combinator");
    }
    const auto pooled = pool(instances, kind, attention);
    const auto alpha = confounder_attention(pooled.bag_feature, dict, ip);
    std::vector<double> total;
    for (std::size_t i = 0; i < dict.k(); ++i) {
        Matrix h(1, dict.d());
        for (std::size_t j = 0; j < dict.d(); ++j) h[j] = alpha[i] * dict.strata(i, j);
        const auto p = classify(combine(pooled.bag_feature, h, ip.combinator), cls);
        if (total.empty()) total.assign(p.size(), 0.0);
        for (std::size_t c = 0; c < p.size(); ++c) total[c] += dict.prior[i] * p[c];
    }
    return total;
}

namespace ad {

/// Tape form of confounder_attention + backdoor_combine. `strata` may be a
/// constant (frozen dictionary) or a parameter (learnable dictionary).
inline Var backdoor_feature(Var bag_feature, Var strata, Var prior_row, Var w1, Var w2, Combinator c,
                            Var* alpha_out = nullptr) {
    const double inv_sqrt_l = 1.0 / std::sqrt(static_cast<double>(w1.rows()));
    Var query = matmul_nt(bag_feature, w1);
    Var keys = matmul_nt(strata, w2);
    Var alpha = softmax(scale(matmul_nt(query, keys), inv_sqrt_l));
    if (alpha_out) *alpha_out = alpha;
    Var v = matmul(mul(alpha, prior_row), strata);
    switch (c) {
        case Combinator::concat: return concat(bag_feature, v);
        case Combinator::add: return add(bag_feature, v);
        case Combinator::sub: return sub(bag_feature, v);
    }
    throw std::logic_error("backdoor_feature: unknown combinator");
}

}  // namespace ad
}  // namespace dmil
