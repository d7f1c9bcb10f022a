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

// Confounder dictionaries: k-means over bag (or instance) features of the
// training bags, cluster means as strata, uniform prior.

#pragma once

#include "dmil/aggregators.hpp"
#include "dmil/data.hpp"
#include "dmil/io.hpp"
#include "dmil/matrix.hpp"
#include "dmil/model.hpp"
#include "dmil/random.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace dmil {

struct KMeansOptions {
    std::size_t max_iter = 300;
    double tol = 1e-6;     // on the largest centroid displacement
    std::size_t n_init = 20;  // k-means++ restarts; the lowest inertia wins
};

struct KMeansResult {
    Matrix centroids;  // K x d
    std::vector<std::size_t> assignments;
    double inertia = 0.0;
    std::size_t iterations = 0;
    std::vector<double> inertia_trace;  // after each assignment step of the winning run
};

namespace detail {

inline std::size_t nearest(const Matrix& centroids, std::span<const double> p, double* dist2 = nullptr) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const double d = squared_distance(centroids.row(c), p);
        if (d < bd) {
            bd = d;
            best = c;
        }
    }
    if (dist2) *dist2 = bd;
    return best;
}

inline Matrix kmeanspp_init(const Matrix& points, std::size_t k, Rng& rng) {
    const std::size_t n = points.rows();
    Matrix centers(k, points.cols());
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t pick = rng.index(n);
    for (std::size_t c = 0; c < k; ++c) {
        if (c > 0) {
            double total = 0.0;
            for (double v : d2) total += v;
            if (total > 0.0) {
                double target = rng.uniform() * total;
                pick = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    target -= d2[i];
                    if (target < 0.0 && d2[i] > 0.0) {
                        pick = i;
                        break;
                    }
                }
                while (d2[pick] == 0.0 && pick > 0) --pick;
            } else {
                pick = rng.index(n);
            }
        }
        auto row = centers.row(c);
        std::copy(points.row(pick).begin(), points.row(pick).end(), row.begin());
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points.row(i), row));
    }
    return centers;
}

/// Assigns every point to its nearest centroid (lowest index on ties), then
/// re-seeds each empty cluster at the point farthest from its centroid, taken
/// only from clusters that keep at least one member. Returns the inertia.
inline double assign(const Matrix& points, Matrix& centroids, std::vector<std::size_t>& assignments) {
    const std::size_t n = points.rows(), k = centroids.rows();
    std::vector<double> dist(n);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
        assignments[i] = nearest(centroids, points.row(i), &dist[i]);
        ++counts[assignments[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] != 0) continue;
        std::size_t far = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (counts[assignments[i]] < 2) continue;
            if (far == n || dist[i] > dist[far]) far = i;
        }
        if (far == n) break;  // fewer distinct members than clusters
        --counts[assignments[far]];
        assignments[far] = c;
        counts[c] = 1;
        dist[far] = 0.0;
        std::copy(points.row(far).begin(), points.row(far).end(), centroids.row(c).begin());
    }
    double inertia = 0.0;
    for (double d : dist) inertia += d;
    return inertia;
}

inline KMeansResult lloyd(const Matrix& points, std::size_t k, Rng& rng, const KMeansOptions& opt) {
    const std::size_t n = points.rows(), d = points.cols();
    KMeansResult r;
    r.centroids = kmeanspp_init(points, k, rng);
    r.assignments.assign(n, 0);
    for (std::size_t iter = 0; iter < opt.max_iter; ++iter) {
        r.inertia_trace.push_back(assign(points, r.centroids, r.assignments));
        Matrix next(k, d);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = r.assignments[i];
            ++counts[c];
            for (std::size_t j = 0; j < d; ++j) next(c, j) += points(i, j);
        }
        double shift = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                std::copy(r.centroids.row(c).begin(), r.centroids.row(c).end(), next.row(c).begin());
                continue;
            }
            const double inv = 1.0 / static_cast<double>(counts[c]);
            for (std::size_t j = 0; j < d; ++j) next(c, j) *= inv;
            shift = std::max(shift, std::sqrt(squared_distance(next.row(c), r.centroids.row(c))));
        }
        r.centroids = std::move(next);
        r.iterations = iter + 1;
        if (shift < opt.tol) break;
    }
    r.inertia = assign(points, r.centroids, r.assignments);
    return r;
}

inline Matrix cluster_means(const Matrix& points, const std::vector<std::size_t>& assignments, std::size_t k) {
    Matrix means(k, points.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < points.rows(); ++i) {
        ++counts[assignments[i]];
        for (std::size_t j = 0; j < points.cols(); ++j) means(assignments[i], j) += points(i, j);
    }
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t j = 0; j < points.cols(); ++j) means(c, j) /= static_cast<double>(counts[c]);
    return means;
}

/// Hartigan single-point transfers on a converged Lloyd partition: moves a
/// point from A to B whenever n_B/(n_B+1)|x-c_B|^2 < n_A/(n_A-1)|x-c_A|^2,
/// which strictly lowers the inertia. Lloyd fixed points that are not
/// transfer-stable are escaped this way.
inline void transfer_refine(const Matrix& points, KMeansResult& r, std::size_t max_passes) {
    const std::size_t n = points.rows(), k = r.centroids.rows();
    std::vector<std::size_t> counts(k, 0);
    for (auto a : r.assignments) ++counts[a];
    Matrix means = cluster_means(points, r.assignments, k);
    bool moved = true;
    for (std::size_t pass = 0; pass < max_passes && moved; ++pass) {
        moved = false;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t a = r.assignments[i];
            if (counts[a] < 2) continue;
            const auto x = points.row(i);
            const double na = static_cast<double>(counts[a]);
            const double remove = na / (na - 1.0) * squared_distance(x, means.row(a));
            std::size_t best = a;
            double add_best = remove;
            for (std::size_t b = 0; b < k; ++b) {
                if (b == a) continue;
                const double nb = static_cast<double>(counts[b]);
                const double add = nb / (nb + 1.0) * squared_distance(x, means.row(b));
                if (add < add_best) {
                    add_best = add;
                    best = b;
                }
            }
            if (best == a || !(add_best < remove * (1.0 - 1e-12))) continue;
            for (std::size_t j = 0; j < points.cols(); ++j) {
                means(a, j) = (means(a, j) * na - x[j]) / (na - 1.0);
                const double nb = static_cast<double>(counts[best]);
                means(best, j) = (means(best, j) * nb + x[j]) / (nb + 1.0);
            }
            --counts[a];
            ++counts[best];
            r.assignments[i] = best;
            moved = true;
        }
    }
    r.centroids = cluster_means(points, r.assignments, k);
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += squared_distance(points.row(i), r.centroids.row(r.assignments[i]));
    r.inertia = inertia;
    r.inertia_trace.push_back(inertia);
}

}  // namespace detail

/// Lloyd's algorithm from k-means++ seeds followed by single-point transfer
/// refinement, best of `n_init` restarts.
inline KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opt = {}) {
    if (k == 0) throw std::invalid_argument("kmeans: K must be >= 1");
    if (points.rows() < k) {
        throw std::invalid_argument("kmeans: " + std::to_string(points.rows()) + " points for " + std::to_string(k) +
                                    " clusters");
    }
    require_finite(points, "kmeans");
    std::optional<KMeansResult> best;
    for (std::size_t run = 0; run < std::max<std::size_t>(1, opt.n_init); ++run) {
        Rng rng(derive_seed(seed, {0x4B4Dull, run}));
        auto r = detail::lloyd(points, k, rng, opt);
        detail::transfer_refine(points, r, opt.max_iter);
        if (!best || r.inertia < best->inertia) best = std::move(r);
    }
    return std::move(*best);
}

// ---------------------------------------------------------------------------

struct DictionaryOptions {
    DictionaryMode mode = DictionaryMode::attention;
    std::size_t k = 8;
    std::uint64_t seed = 0;
    KMeansOptions kmeans;
};

/// Bag feature used for clustering: the Stage-2 aggregator when one is
/// given, else the non-parametric pooling named by `fallback`.
inline Matrix bag_feature(const Bag& bag, const ModelParams* stage2, Pooling fallback) {
    if (stage2) {
        const AttentionParams* attn = stage2->attention ? &*stage2->attention : nullptr;
        return pool(bag.instances, stage2->aggregator, attn).bag_feature;
    }
    return pool(bag.instances, AggregatorKind{fallback, 0}).bag_feature;
}

namespace detail {
inline Matrix stack_rows(const std::vector<Matrix>& rows, std::size_t d) {
    Matrix m(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].values().begin(), rows[i].values().end(), m.row(i).begin());
    return m;
}
}  // namespace detail

/// Clusters the training bags of every dataset in `datasets` (their union).
/// attention mode needs `stage2`; class_specific uses `stage2` when given and
/// mean pooling otherwise, with K / num_classes clusters per class.
inline ConfounderDictionary build_dictionary(const std::vector<const Dataset*>& datasets, const DictionaryOptions& opt,
                                             const ModelParams* stage2 = nullptr) {
    if (datasets.empty()) throw std::invalid_argument("build_dictionary: no datasets");
    if (opt.k == 0) throw std::invalid_argument("build_dictionary: K must be >= 1");
    const std::size_t d = datasets.front()->d;
    const std::size_t num_classes = datasets.front()->num_classes;
    std::vector<const Bag*> bags;
    std::string provenance;
    for (const auto* ds : datasets) {
        if (ds->d != d) throw ShapeError("build_dictionary: datasets disagree on d");
        for (const auto* b : ds->split(Split::train)) bags.push_back(b);
        provenance += ds->provenance + ";";
    }
    if (bags.empty()) throw std::invalid_argument("build_dictionary: no training bags");
    if (stage2 && stage2->d != d) throw ShapeError("build_dictionary: aggregator d differs from data");

    ConfounderDictionary dict;
    dict.build_mode = opt.mode;
    dict.frozen = true;
    dict.source_hash = hex64(fnv1a64(provenance + to_string(opt.mode) + ":" + std::to_string(opt.k) + ":" +
                                     std::to_string(opt.seed) + (stage2 ? ":stage2" : "")));

    switch (opt.mode) {
        case DictionaryMode::attention:
        case DictionaryMode::mean:
        case DictionaryMode::max: {
            const ModelParams* model = nullptr;
            Pooling fallback = opt.mode == DictionaryMode::max ? Pooling::max : Pooling::mean;
            if (opt.mode == DictionaryMode::attention) {
                if (!stage2) throw std::invalid_argument("build_dictionary: attention mode needs a Stage-2 aggregator");
                model = stage2;
            }
            std::vector<Matrix> feats;
            for (const auto* b : bags) feats.push_back(bag_feature(*b, model, fallback));
            if (feats.size() < opt.k) {
                throw std::invalid_argument("build_dictionary: " + std::to_string(feats.size()) + " bags for K=" +
                                            std::to_string(opt.k));
            }
            dict.strata = kmeans(detail::stack_rows(feats, d), opt.k, opt.seed, opt.kmeans).centroids;
            break;
        }
        case DictionaryMode::instance: {
            std::size_t total = 0;
            for (const auto* b : bags) total += b->size();
            if (total < opt.k) {
                throw std::invalid_argument("build_dictionary: " + std::to_string(total) + " instances for K=" +
                                            std::to_string(opt.k));
            }
            Matrix points(total, d);
            std::size_t r = 0;
            for (const auto* b : bags)
                for (std::size_t i = 0; i < b->size(); ++i, ++r)
                    std::copy(b->instances.row(i).begin(), b->instances.row(i).end(), points.row(r).begin());
            dict.strata = kmeans(points, opt.k, opt.seed, opt.kmeans).centroids;
            break;
        }
        case DictionaryMode::class_specific: {
            if (opt.k % num_classes != 0) {
                throw std::invalid_argument("build_dictionary: K=" + std::to_string(opt.k) +
                                            " is not divisible by num_classes=" + std::to_string(num_classes));
            }
            const std::size_t per_class = opt.k / num_classes;
            dict.strata = Matrix(opt.k, d);
            for (std::size_t c = 0; c < num_classes; ++c) {
                std::vector<Matrix> feats;
                for (const auto* b : bags)
                    if (b->label == c) feats.push_back(bag_feature(*b, stage2, Pooling::mean));
                if (feats.empty()) {
                    throw std::invalid_argument("build_dictionary: class " + std::to_string(c) + " has no bags");
                }
                if (feats.size() < per_class) {
                    throw std::invalid_argument("build_dictionary: class " + std::to_string(c) + " has " +
                                                std::to_string(feats.size()) + " bags for " +
                                                std::to_string(per_class) + " clusters");
                }
                const auto res = kmeans(detail::stack_rows(feats, d), per_class, derive_seed(opt.seed, {c}), opt.kmeans);
                for (std::size_t i = 0; i < per_class; ++i) {
                    std::copy(res.centroids.row(i).begin(), res.centroids.row(i).end(),
                              dict.strata.row(c * per_class + i).begin());
                    dict.strata_class.push_back(c);
                }
            }
            break;
        }
    }
    dict.prior = ConfounderDictionary::uniform_prior(dict.k());
    dict.validate();
    return dict;
}

inline ConfounderDictionary build_dictionary(const Dataset& dataset, const DictionaryOptions& opt,
                                             const ModelParams* stage2 = nullptr) {
    return build_dictionary(std::vector<const Dataset*>{&dataset}, opt, stage2);
}

/// Class of the nearest stratum (Euclidean); equidistant strata resolve to
/// the lowest class index.
inline std::size_t knn_classify(const Matrix& bag_feature, const ConfounderDictionary& dict) {
    if (dict.strata_class.empty()) throw std::invalid_argument("knn_classify: dictionary is not class-specific");
    if (bag_feature.size() != dict.d()) throw ShapeError("knn_classify: feature width differs from dictionary");
    double best = std::numeric_limits<double>::infinity();
    std::size_t cls = 0;
    for (std::size_t i = 0; i < dict.k(); ++i) {
        const double dd = squared_distance(bag_feature.values(), dict.strata.row(i));
        if (dd < best || (dd == best && dict.strata_class[i] < cls)) {
            best = dd;
            cls = dict.strata_class[i];
        }
    }
    return cls;
}

}  // namespace dmil
