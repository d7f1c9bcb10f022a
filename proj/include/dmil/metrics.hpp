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

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmil {

struct ConfusionMetrics {
    std::vector<double> precision;  // per class
    std::vector<double> recall;     // per class
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double accuracy = 0.0;
    std::vector<std::vector<std::size_t>> matrix;  // [true][predicted]
};

/// Per-class precision/recall with 0/0 read as 0, their unweighted means, and accuracy.
inline ConfusionMetrics confusion_metrics(std::span<const std::size_t> predicted, std::span<const std::size_t> truth,
                                          std::size_t num_classes) {
    if (predicted.size() != truth.size() || predicted.empty()) {
        throw std::invalid_argument("confusion_metrics: need equal, non-zero lengths");
    }
    ConfusionMetrics m;
    m.matrix.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] >= num_classes || truth[i] >= num_classes) {
            throw std::out_of_range("confusion_metrics: label out of range");
        }
        ++m.matrix[truth[i]][predicted[i]];
        if (predicted[i] == truth[i]) ++correct;
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::size_t tp = m.matrix[c][c], fp = 0, fn = 0;
        for (std::size_t o = 0; o < num_classes; ++o) {
            if (o == c) continue;
            fp += m.matrix[o][c];
            fn += m.matrix[c][o];
        }
        m.precision.push_back(tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp));
        m.recall.push_back(tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn));
    }
    const double k = static_cast<double>(num_classes);
    m.macro_precision = std::accumulate(m.precision.begin(), m.precision.end(), 0.0) / k;
    m.macro_recall = std::accumulate(m.recall.begin(), m.recall.end(), 0.0) / k;
    m.accuracy = static_cast<double>(correct) / static_cast<double>(predicted.size());
    return m;
}

/// Mann-Whitney AUC: (#{pos > neg} + 0.5 #{pos == neg}) / (P N), by sorting.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auc: length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double pos = 0, neg = 0;
    for (int y : labels) {
        if (y == 1) ++pos;
        else if (y == 0) ++neg;
        else throw std::invalid_argument("auc: labels must be 0 or 1");
    }
    if (pos == 0 || neg == 0) throw std::invalid_argument("auc: both classes must be present");

    // Walk groups of tied scores; each positive beats every negative seen in
    // earlier groups and ties with the negatives of its own group.
    double wins = 0.0, negatives_below = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        double group_pos = 0, group_neg = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? group_pos : group_neg) += 1;
            ++j;
        }
        wins += group_pos * negatives_below + 0.5 * group_pos * group_neg;
        negatives_below += group_neg;
        i = j;
    }
    return wins / (pos * neg);
}

/// One evaluation run, serialised as a single CSV row.
struct MetricsReport {
    std::string run_id;
    std::string method;
    std::string extractor_tag;
    std::size_t k = 0;
    std::size_t l = 0;
    std::string combinator;
    double precision = 0.0;  // macro
    double recall = 0.0;     // macro
    double accuracy = 0.0;
    double auc = 0.0;
    std::uint64_t seed = 0;

    static std::string csv_header() {
        return "run_id,method,extractor_tag,K,l,combinator,precision,recall,accuracy,auc,seed";
    }

    std::string csv_row() const {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f", precision, recall, accuracy, auc);
        return run_id + "," + method + "," + extractor_tag + "," + std::to_string(k) + "," + std::to_string(l) + "," +
               combinator + "," + buf + "," + std::to_string(seed);
    }
};

}  // namespace dmil
