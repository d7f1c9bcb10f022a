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

#include "dmil/gradcheck.hpp"
#include "dmil/model.hpp"
#include "dmil/trainer.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace dmil {

/// One small random training graph for a finite-difference check.
struct GradCheckCase {
    std::size_t d = 4;
    std::size_t k = 2;
    std::size_t l = 3;
    std::size_t n = 3;
    std::size_t num_classes = 2;
    std::size_t hidden = 3;
    Pooling pooling = Pooling::attention;
    Combinator combinator = Combinator::concat;
    bool interventional = true;
    bool learnable = false;

    std::string describe() const {
        std::string s = to_string(pooling) + " d=" + std::to_string(d) + " n=" + std::to_string(n) +
                        " classes=" + std::to_string(num_classes);
        if (interventional) {
            s += " K=" + std::to_string(k) + " l=" + std::to_string(l) + " " + to_string(combinator) +
                 (learnable ? " learnable" : " frozen");
        }
        return s;
    }
};

/// Case `index` of a suite: combinators cycle fastest, then frozen/learnable.
inline GradCheckCase random_gradcheck_case(Rng& rng, std::size_t index) {
    GradCheckCase c;
    c.d = 2 + rng.index(7);  // 2..8
    c.k = 1 + rng.index(4);
    c.l = 1 + rng.index(4);
    c.n = 1 + rng.index(5);
    c.hidden = 1 + rng.index(4);
    c.num_classes = rng.index(3) == 0 ? 3 : 2;
    c.pooling = static_cast<Pooling>(rng.index(3));
    c.combinator = static_cast<Combinator>(index % 3);
    c.learnable = (index / 3) % 2 == 1;
    return c;
}

/// Checks every trainable tensor of one case's per-bag loss.
inline GradCheckReport check_gradient_case(const GradCheckCase& c, Rng& rng) {
    std::optional<InterventionShape> head;
    if (c.interventional) head = InterventionShape{c.l, c.combinator};
    ModelParams model = init_model(AggregatorKind{c.pooling, c.hidden}, c.d, c.num_classes, head, rng);
    // Non-zero bias so its gradient is exercised away from the symmetric point.
    for (auto& b : model.classifier.bias.values()) b = rng.uniform(-0.5, 0.5);

    ConfounderDictionary dict;
    if (c.interventional) {
        dict.strata = Matrix(c.k, c.d);
        for (auto& x : dict.strata.values()) x = rng.normal();
        double total = 0.0;
        for (std::size_t i = 0; i < c.k; ++i) total += dict.prior.emplace_back(rng.uniform(0.2, 1.0));
        for (auto& p : dict.prior) p /= total;
        if (c.learnable) model.learned_strata = dict.strata;
    }
    Matrix bag(c.n, c.d);
    for (auto& x : bag.values()) x = rng.normal();
    const std::size_t label = rng.index(c.num_classes);

    std::vector<Matrix> params;
    for (Matrix* t : trainable_tensors(model)) params.push_back(*t);
    const ConfounderDictionary* dp = c.interventional ? &dict : nullptr;
    auto build = [&](ad::Tape& tape, std::span<const ad::Var> vars) {
        const BoundModel bound = assemble(tape, model, vars, dp);
        return bag_loss(model, bound, tape.constant(bag), label);
    };
    // K = 1 makes alpha constant, so W1 and W2 get exactly zero gradient and the
    // reported error there is stencil roundoff over the 1e-8 floor.
    return finite_diff_check(build, std::move(params), 1e-3, Stencil::five_point);
}

struct GradCheckSuiteReport {
    std::vector<std::pair<GradCheckCase, GradCheckReport>> cases;
    double max_relative_error = 0.0;
};

/// `count` random interventional cases drawn from `seed`.
inline GradCheckSuiteReport run_gradcheck_suite(std::uint64_t seed, std::size_t count = 20) {
    GradCheckSuiteReport out;
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, {0x6C4Eull, i}));
        const auto c = random_gradcheck_case(rng, i);
        const auto r = check_gradient_case(c, rng);
        out.max_relative_error = std::max(out.max_relative_error, r.max_relative_error);
        out.cases.emplace_back(c, r);
    }
    return out;
}

}  // namespace dmil
