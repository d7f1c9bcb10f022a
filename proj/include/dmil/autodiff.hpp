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

// Reverse-mode differentiation over whole matrices. Each op appends one node
// holding its value and a closure that pushes the node's adjoint into its
// inputs. Node ids grow monotonically, so sweeping ids downwards from the
// loss visits every consumer before its producers.

#pragma once

#include "dmil/matrix.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace dmil::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

class Tape {
public:
    using Backprop = std::function<void(Tape&, const Matrix& upstream)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable input. Gradients are collected for every leaf.
    Var parameter(Matrix value) { return push(std::move(value), true, {}); }

    /// Untracked input; receives no gradient.
    Var constant(Matrix value) { return push(std::move(value), false, {}); }

    Var record(Matrix value, bool tracked, Backprop back) {
        require_finite(value, "tape");
        return push(std::move(value), tracked, tracked ? std::move(back) : Backprop{});
    }

    bool tracked(Var v) const { return nodes_[check(v)].tracked; }
    const Matrix& value(Var v) const { return nodes_[check(v)].value; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
    void backward(Var loss) {
        const std::size_t root = check(loss);
        const Matrix& lv = nodes_[root].value;
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw ShapeError("backward: loss must be 1x1, got " + lv.shape_string());
        }
        for (auto& n : nodes_) n.grad = Matrix{};
        nodes_[root].grad = Matrix(1, 1, 1.0);
        for (std::size_t i = root + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.tracked || n.grad.empty() || !n.back) continue;
            n.back(*this, n.grad);
        }
    }

    /// Gradient of the last backward() root with respect to `v`; zeros if untouched.
    Matrix grad(Var v) const {
        const Node& n = nodes_[check(v)];
        if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    /// Adds `g` into the adjoint of `v`. Used by op closures.
    void accumulate(Var v, const Matrix& g) {
        Node& n = nodes_[v.id];
        if (!n.tracked) return;
        if (n.grad.empty()) {
            n.grad = g;
            return;
        }
        require_same_shape(n.grad, g, "accumulate");
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool tracked = false;
        Backprop back;
    };

    Var push(Matrix value, bool tracked, Backprop back) {
        nodes_.push_back(Node{std::move(value), Matrix{}, tracked, std::move(back)});
        return Var{this, nodes_.size() - 1};
    }

    std::size_t check(Var v) const {
        if (v.tape != this || v.id >= nodes_.size()) {
            throw std::invalid_argument("tape: value is not recorded on this tape");
        }
        return v.id;
    }

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

namespace detail {
inline Tape& same_tape(Var a, Var b, const char* where) {
    if (a.tape == nullptr || a.tape != b.tape) {
        throw std::invalid_argument(std::string(where) + ": operands on different tapes");
    }
    return *a.tape;
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "matmul");
    return t.record(dmil::matmul(a.value(), b.value()), t.tracked(a) || t.tracked(b),
                    [a, b](Tape& tp, const Matrix& g) {
                        if (tp.tracked(a)) tp.accumulate(a, matmul_nt(g, b.value()));
                        if (tp.tracked(b)) tp.accumulate(b, matmul_tn(a.value(), g));
                    });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "matmul_nt");
    return t.record(dmil::matmul_nt(a.value(), b.value()), t.tracked(a) || t.tracked(b),
                    [a, b](Tape& tp, const Matrix& g) {
                        if (tp.tracked(a)) tp.accumulate(a, dmil::matmul(g, b.value()));
                        if (tp.tracked(b)) tp.accumulate(b, matmul_tn(g, a.value()));
                    });
}

inline Var transpose(Var a) {
    Tape& t = *a.tape;
    return t.record(dmil::transpose(a.value()), t.tracked(a),
                    [a](Tape& tp, const Matrix& g) { tp.accumulate(a, dmil::transpose(g)); });
}

inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "add");
    return t.record(dmil::add(a.value(), b.value()), t.tracked(a) || t.tracked(b),
                    [a, b](Tape& tp, const Matrix& g) {
                        tp.accumulate(a, g);
                        tp.accumulate(b, g);
                    });
}

inline Var sub(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "sub");
    return t.record(dmil::sub(a.value(), b.value()), t.tracked(a) || t.tracked(b),
                    [a, b](Tape& tp, const Matrix& g) {
                        tp.accumulate(a, g);
                        if (tp.tracked(b)) tp.accumulate(b, dmil::scale(g, -1.0));
                    });
}

inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "mul");
    return t.record(hadamard(a.value(), b.value()), t.tracked(a) || t.tracked(b),
                    [a, b](Tape& tp, const Matrix& g) {
                        if (tp.tracked(a)) tp.accumulate(a, hadamard(g, b.value()));
                        if (tp.tracked(b)) tp.accumulate(b, hadamard(g, a.value()));
                    });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    return t.record(dmil::scale(a.value(), s), t.tracked(a),
                    [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, dmil::scale(g, s)); });
}

inline Var tanh(Var a) {
    Tape& t = *a.tape;
    Matrix y = dmil::tanh(a.value());
    const std::size_t out = t.size();
    return t.record(std::move(y), t.tracked(a), [a, out](Tape& tp, const Matrix& g) {
        const Matrix& yv = tp.value(Var{&tp, out});
        Matrix d(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * (1.0 - yv[i] * yv[i]);
        tp.accumulate(a, d);
    });
}

inline Var sigmoid(Var a) {
    Tape& t = *a.tape;
    Matrix y = dmil::sigmoid(a.value());
    const std::size_t out = t.size();
    return t.record(std::move(y), t.tracked(a), [a, out](Tape& tp, const Matrix& g) {
        const Matrix& yv = tp.value(Var{&tp, out});
        Matrix d(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * yv[i] * (1.0 - yv[i]);
        tp.accumulate(a, d);
    });
}

/// Softmax over all entries of a row or column vector.
inline Var softmax(Var a) {
    Tape& t = *a.tape;
    if (a.rows() != 1 && a.cols() != 1) throw ShapeError("softmax: expects a vector");
    Matrix p = dmil::softmax(a.value());
    const std::size_t out = t.size();
    return t.record(std::move(p), t.tracked(a), [a, out](Tape& tp, const Matrix& g) {
        const Matrix& pv = tp.value(Var{&tp, out});
        const double gp = dot(g.values(), pv.values());
        Matrix d(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) d[i] = pv[i] * (g[i] - gp);
        tp.accumulate(a, d);
    });
}

/// Horizontal concatenation of two row vectors.
inline Var concat(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "concat");
    return t.record(dmil::concat(a.value(), b.value()), t.tracked(a) || t.tracked(b),
                    [a, b](Tape& tp, const Matrix& g) {
                        const std::size_t na = a.cols();
                        const auto gv = g.values();
                        if (tp.tracked(a)) tp.accumulate(a, Matrix::row_vector(gv.subspan(0, na)));
                        if (tp.tracked(b)) tp.accumulate(b, Matrix::row_vector(gv.subspan(na)));
                    });
}

inline Var sum(Var a) {
    Tape& t = *a.tape;
    double s = 0.0;
    for (double x : a.value().values()) s += x;
    return t.record(Matrix(1, 1, s), t.tracked(a), [a](Tape& tp, const Matrix& g) {
        tp.accumulate(a, Matrix(a.rows(), a.cols(), g[0]));
    });
}

/// Column-wise mean of an n x d matrix, as a 1 x d row.
inline Var mean_rows(Var a) {
    Tape& t = *a.tape;
    const Matrix& x = a.value();
    if (x.rows() == 0) throw ShapeError("mean_rows: empty input");
    Matrix m(1, x.cols());
    const double inv = 1.0 / static_cast<double>(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) m[j] += inv * x(i, j);
    return t.record(std::move(m), t.tracked(a), [a, inv](Tape& tp, const Matrix& g) {
        Matrix d(a.rows(), a.cols());
        for (std::size_t i = 0; i < d.rows(); ++i)
            for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) = g[j] * inv;
        tp.accumulate(a, d);
    });
}

/// Column-wise maximum of an n x d matrix. The adjoint goes to the first
/// row attaining the maximum in each column.
inline Var max_rows(Var a) {
    Tape& t = *a.tape;
    const Matrix& x = a.value();
    if (x.rows() == 0) throw ShapeError("max_rows: empty input");
    Matrix m(1, x.cols());
    std::vector<std::size_t> arg(x.cols(), 0);
    for (std::size_t j = 0; j < x.cols(); ++j) m[j] = x(0, j);
    for (std::size_t i = 1; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j)
            if (x(i, j) > m[j]) {
                m[j] = x(i, j);
                arg[j] = i;
            }
    return t.record(std::move(m), t.tracked(a),
                    [a, arg = std::move(arg)](Tape& tp, const Matrix& g) {
                        Matrix d(a.rows(), a.cols());
                        for (std::size_t j = 0; j < d.cols(); ++j) d(arg[j], j) = g[j];
                        tp.accumulate(a, d);
                    });
}

/// Mean binary cross-entropy of probabilities `p` against 0/1 targets, with
/// p clamped to [eps, 1 - eps]. Clamped entries pass no gradient.
inline Var binary_cross_entropy(Var p, const std::vector<double>& targets, double eps = 1e-7) {
    Tape& t = *p.tape;
    const Matrix& pv = p.value();
    if (pv.size() != targets.size()) throw ShapeError("binary_cross_entropy: length mismatch");
    const double n = static_cast<double>(targets.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double q = std::clamp(pv[i], eps, 1.0 - eps);
        loss -= targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q);
    }
    return t.record(Matrix(1, 1, loss / n), t.tracked(p),
                    [p, targets, eps, n](Tape& tp, const Matrix& g) {
                        const Matrix& v = p.value();
                        Matrix d(v.rows(), v.cols());
                        for (std::size_t i = 0; i < v.size(); ++i) {
                            if (v[i] < eps || v[i] > 1.0 - eps) continue;
                            d[i] = g[0] * (-targets[i] / v[i] + (1.0 - targets[i]) / (1.0 - v[i])) / n;
                        }
                        tp.accumulate(p, d);
                    });
}

/// -log p[label] for a probability vector, clamped like binary_cross_entropy.
inline Var categorical_cross_entropy(Var p, std::size_t label, double eps = 1e-7) {
    Tape& t = *p.tape;
    const Matrix& pv = p.value();
    if (label >= pv.size()) throw ShapeError("categorical_cross_entropy: label out of range");
    const double q = std::clamp(pv[label], eps, 1.0 - eps);
    return t.record(Matrix(1, 1, -std::log(q)), t.tracked(p),
                    [p, label, eps](Tape& tp, const Matrix& g) {
                        const Matrix& v = p.value();
                        Matrix d(v.rows(), v.cols());
                        if (v[label] >= eps && v[label] <= 1.0 - eps) d[label] = -g[0] / v[label];
                        tp.accumulate(p, d);
                    });
}

}  // namespace dmil::ad
