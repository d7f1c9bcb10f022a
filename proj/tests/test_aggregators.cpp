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

#include "dmil/aggregators.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace dmil;
using dmil::testing::gaussian_matrix;
using dmil::testing::permute_rows;

namespace {

AttentionParams random_attention(std::size_t m, std::size_t d, Rng& rng) {
    return {gaussian_matrix(m, d, rng), gaussian_matrix(m, 1, rng)};
}

// Attention pooling written out from its scalar definition.
std::vector<double> attention_oracle(const Matrix& x, const AttentionParams& p) {
    std::vector<double> e(x.rows());
    double z = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (std::size_t h = 0; h < p.v.rows(); ++h) {
            double u = 0.0;
            for (std::size_t j = 0; j < x.cols(); ++j) u += p.v(h, j) * x(i, j);
            s += p.w(h, 0) * std::tanh(u);
        }
        e[i] = std::exp(s);
        z += e[i];
    }
    for (auto& v : e) v /= z;
    return e;
}

std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    rng.shuffle(p.begin(), p.end());
    return p;
}

}  // namespace

TEST(Pool, SingleInstanceIsIdentity) {
    Rng rng(1);
    const Matrix x = gaussian_matrix(1, 5, rng);
    const auto att = random_attention(3, 5, rng);
    EXPECT_EQ(pool(x, {Pooling::mean, 0}).bag_feature, x);
    EXPECT_EQ(pool(x, {Pooling::max, 0}).bag_feature, x);
    const auto r = pool(x, {Pooling::attention, 3}, &att);
    EXPECT_EQ(r.attention, std::vector<double>{1.0});
    EXPECT_EQ(r.bag_feature, x);
}

TEST(Pool, MeanAndMaxOfTwoUnitVectors) {
    const Matrix x{{1, 0}, {0, 1}};
    EXPECT_EQ(pool(x, {Pooling::mean, 0}).bag_feature, (Matrix{{0.5, 0.5}}));
    EXPECT_EQ(pool(x, {Pooling::max, 0}).bag_feature, (Matrix{{1, 1}}));
    EXPECT_TRUE(pool(x, {Pooling::mean, 0}).attention.empty());
}

TEST(Pool, AttentionMatchesScalarDefinition) {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 1 + rng.index(10), d = 1 + rng.index(6), m = 1 + rng.index(5);
        const Matrix x = gaussian_matrix(n, d, rng);
        const auto att = random_attention(m, d, rng);
        const auto r = pool(x, {Pooling::attention, m}, &att);
        const auto a = attention_oracle(x, att);
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(r.attention[i], a[i], 1e-12);
        for (std::size_t j = 0; j < d; ++j) {
            double b = 0.0;
            for (std::size_t i = 0; i < n; ++i) b += a[i] * x(i, j);
            EXPECT_NEAR(r.bag_feature[j], b, 1e-12);
        }
    }
}

TEST(Pool, AttentionWeightsLieOnTheSimplex) {
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.index(30);
        const Matrix x = gaussian_matrix(n, 4, rng, 3.0);
        const auto att = random_attention(6, 4, rng);
        const auto a = pool(x, {Pooling::attention, 6}, &att).attention;
        double total = 0.0;
        for (double v : a) {
            EXPECT_GE(v, 0.0);
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Pool, AllEqualInstancesReduceAttentionToMean) {
    Rng rng(4);
    const Matrix row = gaussian_matrix(1, 5, rng);
    Matrix x(7, 5);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 5; ++j) x(i, j) = row[j];
    const auto att = random_attention(4, 5, rng);
    const auto r = pool(x, {Pooling::attention, 4}, &att);
    for (double a : r.attention) EXPECT_EQ(a, 1.0 / 7.0);
    EXPECT_EQ(r.bag_feature, pool(x, {Pooling::mean, 0}).bag_feature);
}

TEST(Pool, PermutationInvariance) {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.index(20), d = 1 + rng.index(8);
        const Matrix x = gaussian_matrix(n, d, rng);
        const Matrix y = permute_rows(x, random_permutation(n, rng));
        const auto att = random_attention(5, d, rng);
        EXPECT_LE(max_abs_diff(pool(x, {Pooling::mean, 0}).bag_feature, pool(y, {Pooling::mean, 0}).bag_feature), 1e-9);
        EXPECT_EQ(pool(x, {Pooling::max, 0}).bag_feature, pool(y, {Pooling::max, 0}).bag_feature);
        EXPECT_LE(max_abs_diff(pool(x, {Pooling::attention, 5}, &att).bag_feature,
                               pool(y, {Pooling::attention, 5}, &att).bag_feature),
                  1e-9);
    }
}

TEST(Pool, TapeFormAgreesWithValueForm) {
    Rng rng(6);
    for (Pooling p : {Pooling::mean, Pooling::max, Pooling::attention}) {
        const Matrix x = gaussian_matrix(6, 4, rng);
        const auto att = random_attention(3, 4, rng);
        ad::Tape tape;
        ad::AttentionVars av{tape.constant(att.v), tape.constant(att.w)};
        const AggregatorKind kind{p, 3};
        const ad::Var b = ad::pool(tape.constant(x), kind, p == Pooling::attention ? &av : nullptr);
        const auto ref = pool(x, kind, p == Pooling::attention ? &att : nullptr).bag_feature;
        EXPECT_LE(max_abs_diff(b.value(), ref), 1e-12) << to_string(p);
    }
}

TEST(Pool, Errors) {
    Rng rng(7);
    const auto att = random_attention(3, 4, rng);
    EXPECT_THROW(pool(Matrix(0, 4), {Pooling::mean, 0}), ShapeError);
    EXPECT_THROW(pool(Matrix(2, 4), {Pooling::attention, 3}), std::invalid_argument);
    EXPECT_THROW(pool(Matrix(2, 4), {Pooling::mean, 0}, &att), std::invalid_argument);
    EXPECT_THROW(pool(Matrix(2, 5), {Pooling::attention, 3}, &att), ShapeError);
    EXPECT_THROW(parse_pooling("median"), std::invalid_argument);
}

TEST(Classify, ZeroWeightsGiveOneHalf) {
    const ClassifierParams cls{Matrix(3, 1), Matrix(1, 1)};
    const auto p = classify(Matrix{{1, 2, 3}}, cls);
    EXPECT_EQ(p[1], 0.5);
    EXPECT_EQ(p[0], 0.5);
}

TEST(Classify, LogitLnThreeGivesThreeQuarters) {
    const ClassifierParams cls{Matrix{{1.0}}, Matrix{{0.0}}};
    const auto p = classify(Matrix{{std::log(3.0)}}, cls);
    EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(Classify, MultiClassEqualLogitsAreUniform) {
    const ClassifierParams cls{Matrix(2, 4), Matrix(1, 4, 0.3)};
    for (double p : classify(Matrix{{5, -1}}, cls)) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Classify, ProbabilitiesSumToOne) {
    Rng rng(8);
    for (int t = 0; t < 50; ++t) {
        const ClassifierParams cls{gaussian_matrix(3, 3, rng), gaussian_matrix(1, 3, rng)};
        const auto p = classify(gaussian_matrix(1, 3, rng), cls);
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
        for (double v : p) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
    }
}

TEST(Classify, WidthMismatchIsAnError) {
    const ClassifierParams cls{Matrix(3, 1), Matrix(1, 1)};
    EXPECT_THROW(classify(Matrix(1, 2), cls), ShapeError);
    EXPECT_THROW(classify(Matrix(2, 3), cls), ShapeError);
}
