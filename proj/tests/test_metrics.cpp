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

#include "dmil/metrics.hpp"
#include "dmil/random.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace dmil;

namespace {

double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[i] != 1 || y[j] != 0) continue;
            pairs += 1.0;
            if (s[i] > s[j]) wins += 1.0;
            else if (s[i] == s[j]) wins += 0.5;
        }
    return wins / pairs;
}

struct Scored {
    std::vector<double> scores;
    std::vector<int> labels;
};

Scored random_scored(Rng& rng) {
    Scored out;
    const std::size_t n = 2 + rng.index(60);
    // Coarse scores so ties are common.
    const bool coarse = rng.index(2) == 0;
    for (std::size_t i = 0; i < n; ++i) {
        out.labels.push_back(static_cast<int>(rng.index(2)));
        out.scores.push_back(coarse ? static_cast<double>(rng.index(5)) / 4.0 : rng.uniform());
    }
    out.labels[0] = 0;
    out.labels[1] = 1;
    return out;
}

}  // namespace

TEST(Confusion, HandTalliedExample) {
    const std::vector<std::size_t> pred{1, 0, 1, 1}, truth{1, 0, 0, 1};
    const auto m = confusion_metrics(pred, truth, 2);
    EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
    EXPECT_DOUBLE_EQ(m.precision[1], 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(m.recall[1], 1.0);
    EXPECT_DOUBLE_EQ(m.precision[0], 1.0);
    EXPECT_DOUBLE_EQ(m.recall[0], 0.5);
    EXPECT_DOUBLE_EQ(m.macro_precision, (1.0 + 2.0 / 3.0) / 2.0);
    EXPECT_DOUBLE_EQ(m.macro_recall, 0.75);
    EXPECT_EQ(m.matrix, (std::vector<std::vector<std::size_t>>{{1, 1}, {0, 2}}));
}

TEST(Confusion, PerfectPredictions) {
    const std::vector<std::size_t> y{0, 1, 2, 2, 1, 0};
    const auto m = confusion_metrics(y, y, 3);
    EXPECT_EQ(m.accuracy, 1.0);
    EXPECT_EQ(m.macro_precision, 1.0);
    EXPECT_EQ(m.macro_recall, 1.0);
}

TEST(Confusion, SingleClassPredictionsOnBalancedData) {
    const std::vector<std::size_t> pred{1, 1, 1, 1}, truth{0, 1, 0, 1};
    const auto m = confusion_metrics(pred, truth, 2);
    EXPECT_EQ(m.accuracy, 0.5);
    EXPECT_EQ(m.macro_recall, 0.5);
    EXPECT_EQ(m.precision[0], 0.0);  // 0/0
}

TEST(Confusion, MetricsStayInUnitInterval) {
    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
        const std::size_t k = 2 + rng.index(3), n = 1 + rng.index(30);
        std::vector<std::size_t> p(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = rng.index(k);
            y[i] = rng.index(k);
        }
        const auto m = confusion_metrics(p, y, k);
        for (double v : {m.accuracy, m.macro_precision, m.macro_recall}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Confusion, Errors) {
    const std::vector<std::size_t> a{0, 1}, b{0}, bad{0, 2};
    EXPECT_THROW(confusion_metrics(a, b, 2), std::invalid_argument);
    EXPECT_THROW(confusion_metrics(a, bad, 2), std::out_of_range);
    EXPECT_THROW(confusion_metrics(std::vector<std::size_t>{}, std::vector<std::size_t>{}, 2), std::invalid_argument);
}

// ---------------------------------------------------------------------------

TEST(Auc, Examples) {
    EXPECT_EQ(auc(std::vector<double>{0.9, 0.8, 0.7, 0.1}, std::vector<int>{1, 1, 0, 0}), 1.0);
    EXPECT_EQ(auc(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}), 0.5);
    EXPECT_EQ(auc(std::vector<double>{0.8, 0.3, 0.5, 0.1}, std::vector<int>{1, 1, 0, 0}), 0.75);
    EXPECT_EQ(pair_count_auc({0.8, 0.3, 0.5, 0.1}, {1, 1, 0, 0}), 0.75);
}

TEST(Auc, MatchesPairCountingOnRandomSets) {
    Rng rng(2);
    for (int t = 0; t < 1000; ++t) {
        const auto s = random_scored(rng);
        EXPECT_NEAR(auc(s.scores, s.labels), pair_count_auc(s.scores, s.labels), 1e-12) << "set " << t;
    }
}

TEST(Auc, InvariantUnderIncreasingTransforms) {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
        const auto s = random_scored(rng);
        const double base = auc(s.scores, s.labels);
        std::vector<double> ex, aff;
        for (double x : s.scores) {
            ex.push_back(std::exp(3.0 * x));
            aff.push_back(2.5 * x - 7.0);
        }
        EXPECT_EQ(auc(ex, s.labels), base);
        EXPECT_EQ(auc(aff, s.labels), base);
        EXPECT_GE(base, 0.0);
        EXPECT_LE(base, 1.0);
    }
}

TEST(Auc, Errors) {
    EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), std::invalid_argument);
    EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), std::invalid_argument);
    EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 2}), std::invalid_argument);
}

TEST(Report, CsvRow) {
    MetricsReport r;
    r.run_id = "ibmil-attention-K8-l32-concat-s3";
    r.method = "ibmil";
    r.extractor_tag = "attention";
    r.k = 8;
    r.l = 32;
    r.combinator = "concat";
    r.precision = 0.5;
    r.recall = 0.25;
    r.accuracy = 2.0 / 3.0;
    r.auc = 1.0;
    r.seed = 3;
    EXPECT_EQ(MetricsReport::csv_header(), "run_id,method,extractor_tag,K,l,combinator,precision,recall,accuracy,auc,seed");
    EXPECT_EQ(r.csv_row(), "ibmil-attention-K8-l32-concat-s3,ibmil,attention,8,32,concat,0.500000,0.250000,0.666667,1.000000,3");
}
