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

// Bag pooling and the bag classifier, in a plain-value form for inference
// and a tape form for training. Both forms sum instances in ascending index
// order.

#pragma once

#include "dmil/autodiff.hpp"
#include "dmil/matrix.hpp"

#include <optional>
#include <string>
#include <vector>

namespace dmil {

enum class Pooling { mean, max, attention };

inline std::string to_string(Pooling p) {
    switch (p) {
        case Pooling::mean: return "mean";
        case Pooling::max: return "max";
        case Pooling::attention: return "attention";
    }
    return "?";
}

inline Pooling parse_pooling(const std::string& s) {
    if (s == "mean") return Pooling::mean;
    if (s == "max") return Pooling::max;
    if (s == "attention") return Pooling::attention;
    throw std::invalid_argument("unknown aggregator '" + s + "'");
}

struct AggregatorKind {
    Pooling pooling = Pooling::attention;
    std::size_t hidden = 128;  // m, attention only
};

/// a_i = softmax_i(w^T tanh(V b_i)); V is m x d, w is m x 1.
struct AttentionParams {
    Matrix v;
    Matrix w;
};

/// Linear head. Binary problems use one output column and a sigmoid;
/// three or more classes use one column per class and a softmax.
struct ClassifierParams {
    Matrix weight;  // in_width x outputs
    Matrix bias;    // 1 x outputs

    std::size_t in_width() const noexcept { return weight.rows(); }
    std::size_t outputs() const noexcept { return weight.cols(); }
};

struct PoolResult {
    Matrix bag_feature;             // 1 x d
    std::vector<double> attention;  // n weights; empty for mean/max
};

namespace detail {
inline void check_attention_params(const AttentionParams& p, std::size_t d) {
    if (p.v.cols() != d || p.w.rows() != p.v.rows() || p.w.cols() != 1) {
        throw ShapeError("attention params: V is " + p.v.shape_string() + ", w is " + p.w.shape_string() +
                         ", instances have d=" + std::to_string(d));
    }
}

inline Matrix weighted_rows(const Matrix& x, std::span<const double> weights) {
    Matrix b(1, x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) b[j] += weights[i] * x(i, j);
    return b;
}
}  // namespace detail

inline PoolResult pool(const Matrix& instances, const AggregatorKind& kind, const AttentionParams* params = nullptr) {
    if (instances.rows() == 0) throw ShapeError("pool: empty bag");
    if ((kind.pooling == Pooling::attention) != (params != nullptr)) {
        throw std::invalid_argument("pool: attention parameters are required for, and only for, attention pooling");
    }
    const std::size_t n = instances.rows();
    PoolResult out;
    switch (kind.pooling) {
        case Pooling::mean: {
            const std::vector<double> w(n, 1.0 / static_cast<double>(n));
            out.bag_feature = detail::weighted_rows(instances, w);
            break;
        }
        case Pooling::max: {
            out.bag_feature = Matrix::row_vector(instances.row(0));
            for (std::size_t i = 1; i < n; ++i)
                for (std::size_t j = 0; j < instances.cols(); ++j)
                    out.bag_feature[j] = std::max(out.bag_feature[j], instances(i, j));
            break;
        }
        case Pooling::attention: {
            detail::check_attention_params(*params, instances.cols());
            const Matrix scores = matmul(tanh(matmul_nt(instances, params->v)), params->w);
            out.attention = softmax(scores.values());
            out.bag_feature = detail::weighted_rows(instances, out.attention);
            break;
        }
    }
    return out;
}

/// Class probabilities (length num_classes) for a 1 x in_width input.
inline std::vector<double> classify(const Matrix& input, const ClassifierParams& cls) {
    if (input.rows() != 1 || input.cols() != cls.in_width()) {
        throw ShapeError("classify: input " + input.shape_string() + " vs classifier width " +
                         std::to_string(cls.in_width()));
    }
    const Matrix logits = add(matmul(input, cls.weight), cls.bias);
    if (cls.outputs() == 1) {
        const double p = sigmoid(logits[0]);
        return {1.0 - p, p};
    }
    return softmax(logits.values());
}

namespace ad {

struct AttentionVars {
    Var v;
    Var w;
};

struct ClassifierVars {
    Var weight;
    Var bias;
};

inline Var pool(Var instances, const AggregatorKind& kind, const AttentionVars* params = nullptr) {
    if (instances.rows() == 0) throw ShapeError("pool: empty bag");
    switch (kind.pooling) {
        case Pooling::mean: return mean_rows(instances);
        case Pooling::max: return max_rows(instances);
        case Pooling::attention: {
            if (params == nullptr) throw std::invalid_argument("pool: attention parameters required");
            Var scores = matmul(tanh(matmul_nt(instances, params->v)), params->w);  // n x 1
            Var a = softmax(scores);
            return matmul(transpose(a), instances);
        }
    }
    throw std::logic_error("pool: unknown pooling");
}

/// Probability output: 1 x 1 (positive class) for binary heads, 1 x C otherwise.
inline Var classify(Var input, const ClassifierVars& cls) {
    if (input.rows() != 1 || input.cols() != cls.weight.rows()) {
        throw ShapeError("classify: input " + input.value().shape_string() + " vs classifier width " +
                         std::to_string(cls.weight.rows()));
    }
    Var logits = add(matmul(input, cls.weight), cls.bias);
    return cls.weight.cols() == 1 ? sigmoid(logits) : softmax(logits);
}

}  // namespace ad
}  // namespace dmil
