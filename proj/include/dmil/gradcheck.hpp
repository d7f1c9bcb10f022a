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

#include "dmil/autodiff.hpp"

#include <cmath>
#include <concepts>
#include <span>
#include <vector>

namespace dmil {

template <class F>
concept LossBuilder = requires(F f, ad::Tape& t, std::span<const ad::Var> p) {
    { f(t, p) } -> std::same_as<ad::Var>;
};

/// three_point: (f(x+h) - f(x-h)) / 2h. five_point: the fourth-order symmetric
/// stencil (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h.
enum class Stencil { three_point, five_point };

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;
};

namespace detail {
template <LossBuilder F>
double evaluate_loss(F& build, const std::vector<Matrix>& params) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.parameter(p));
    const double v = build(tape, std::span<const ad::Var>(vars)).value()[0];
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss");
    return v;
}
}  // namespace detail

/// Compares tape gradients of a scalar loss against central differences.
/// Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
template <LossBuilder F>
GradCheckReport finite_diff_check(F build, std::vector<Matrix> params, double h = 1e-5,
                                  Stencil stencil = Stencil::three_point) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");

    std::vector<Matrix> analytic;
    {
        ad::Tape tape;
        std::vector<ad::Var> vars;
        for (const auto& p : params) vars.push_back(tape.parameter(p));
        ad::Var loss = build(tape, std::span<const ad::Var>(vars));
        if (!std::isfinite(loss.value()[0])) throw NumericError("finite_diff_check: non-finite loss");
        tape.backward(loss);
        for (auto v : vars) analytic.push_back(tape.grad(v));
    }

    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double saved = params[p][i];
            auto at = [&](double offset) {
                params[p][i] = saved + offset;
                const double v = detail::evaluate_loss(build, params);
                params[p][i] = saved;
                return v;
            };
            const double numeric = stencil == Stencil::three_point
                                       ? (at(h) - at(-h)) / (2.0 * h)
                                       : (-at(2 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2 * h)) / (12.0 * h);
            const double a = analytic[p][i];
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            ++report.coordinates;
            if (rel > report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst_param = p;
                report.worst_index = i;
            }
        }
    }
    return report;
}

}  // namespace dmil
