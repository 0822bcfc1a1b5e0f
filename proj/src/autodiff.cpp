// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "flowlab/autodiff.hpp"

#include <cmath>
#include <memory>
#include <numbers>

namespace flowlab::autodiff {

const Matrix& Var::value() const {
    return tape->value(id);
}

Tape::Tape(const ParameterStore* params, bool record) : params_(params), record_(record) {}

Var Tape::constant(Matrix value) {
    Node node;
    node.owned = std::move(value);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
}

Var Tape::param(const std::string& name) {
    if (auto it = param_ids_.find(name); it != param_ids_.end()) return {this, it->second};
    if (params_ == nullptr) throw Error("tape has no parameter store");
    auto it = params_->find(name);
    if (it == params_->end()) throw Error("unknown parameter '" + name + "'");
    Node node;
    node.external = &it->second;
    node.needs_grad = record_;
    nodes_.push_back(std::move(node));
    param_ids_.emplace(name, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
}

Var Tape::push(Matrix value, bool needs_grad, Backward backward) {
    Node node;
    node.owned = std::move(value);
    node.needs_grad = record_ && needs_grad;
    if (node.needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
}

const Matrix& Tape::value(std::size_t id) const {
    const Node& node = nodes_[id];
    return node.external != nullptr ? *node.external : node.owned;
}

Matrix& Tape::grad(std::size_t id) {
    Node& node = nodes_[id];
    if (node.grad.size() == 0) {
        const Matrix& v = value(id);
        node.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return node.grad;
}

void Tape::backward(Var out, const Matrix& seed) {
    if (!record_) throw Error("backward on a non-recording tape");
    const Matrix& v = value(out.id);
    if (seed.rows() != v.rows() || seed.cols() != v.cols()) throw ShapeError("backward seed shape mismatch");
    if (!nodes_[out.id].needs_grad) return;
    grad(out.id) += seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (node.backward && node.grad.size() != 0) node.backward(*this, i);
    }
}

void Tape::backward(Var out) {
    backward(out, Matrix::Ones(1, 1));
}

Gradients Tape::parameter_gradients() {
    Gradients grads;
    for (const auto& [name, id] : param_ids_) {
        const Matrix& v = value(id);
        grads[name] = has_grad(id) ? nodes_[id].grad : Matrix::Zero(v.rows(), v.cols());
    }
    return grads;
}

namespace {

bool any_grad(std::initializer_list<Var> vars) {
    for (const Var& v : vars) {
        if (v.tape->needs_grad(v.id)) return true;
    }
    return false;
}

template <typename Expr>
void accumulate(Tape& tape, Var target, const Expr& g) {
    if (tape.needs_grad(target.id)) tape.grad(target.id) += g;
}

void require_same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw Error("operands live on different tapes");
}

std::string shape_of(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Var matmul(Var a, Var b) {
    require_same_tape(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.cols() != bv.rows()) throw ShapeError("matmul " + shape_of(av) + " by " + shape_of(bv));
    Matrix out;
    out.noalias() = av * bv;
    return a.tape->push(std::move(out), any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(a.id)) t.grad(a.id).noalias() += g * t.value(b.id).transpose();
        if (t.needs_grad(b.id)) t.grad(b.id).noalias() += t.value(a.id).transpose() * g;
    });
}

Var add(Var a, Var b) {
    require_same_tape(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw ShapeError("add " + shape_of(av) + " and " + shape_of(bv));
    return a.tape->push(av + bv, any_grad({a, b}), [a, b](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        accumulate(t, a, g);
        accumulate(t, b, g);
    });
}

Var add_row(Var a, Var row) {
    require_same_tape(a, row);
    const Matrix& av = a.value();
    const Matrix& rv = row.value();
    if (rv.rows() != 1 || rv.cols() != av.cols()) throw ShapeError("add_row " + shape_of(av) + " and " + shape_of(rv));
    Matrix out = av.rowwise() + rv.row(0);
    return a.tape->push(std::move(out), any_grad({a, row}), [a, row](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        accumulate(t, a, g);
        accumulate(t, row, g.colwise().sum());
    });
}

Var scale(Var a, double c) {
    return a.tape->push(a.value() * c, any_grad({a}), [a, c](Tape& t, std::size_t self) {
        accumulate(t, a, t.grad(self) * c);
    });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    const Matrix& av = a.value();
    if (start < 0 || count < 0 || start + count > av.cols()) throw ShapeError("slice_cols out of range");
    return a.tape->push(av.middleCols(start, count), any_grad({a}), [a, start, count](Tape& t, std::size_t self) {
        if (t.needs_grad(a.id)) t.grad(a.id).middleCols(start, count) += t.grad(self);
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    Tape* tape = parts.front().tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    bool grad = false;
    for (const Var& p : parts) {
        if (p.tape != tape) throw Error("operands live on different tapes");
        if (p.cols() != cols) throw ShapeError("concat_rows column mismatch");
        rows += p.rows();
        grad = grad || tape->needs_grad(p.id);
    }
    Matrix out(rows, cols);
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return tape->push(std::move(out), grad, [parts](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Eigen::Index r0 = 0;
        for (const Var& p : parts) {
            const Eigen::Index n = t.value(p.id).rows();
            if (t.needs_grad(p.id)) t.grad(p.id) += g.middleRows(r0, n);
            r0 += n;
        }
    });
}

Var gather_rows(Var a, std::vector<Eigen::Index> index) {
    const Matrix& av = a.value();
    Matrix out(static_cast<Eigen::Index>(index.size()), av.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= av.rows()) throw ShapeError("gather_rows index out of range");
        out.row(static_cast<Eigen::Index>(i)) = av.row(index[i]);
    }
    return a.tape->push(std::move(out), any_grad({a}), [a, index = std::move(index)](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const Matrix& g = t.grad(self);
        Matrix& ga = t.grad(a.id);
        for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

Var embedding(Var table, const std::vector<int>& ids) {
    const Matrix& tv = table.value();
    Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tv.rows()) {
            throw VocabError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                             std::to_string(tv.rows()));
        }
        out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
    }
    return table.tape->push(std::move(out), any_grad({table}), [table, ids](Tape& t, std::size_t self) {
        if (!t.needs_grad(table.id)) return;
        const Matrix& g = t.grad(self);
        Matrix& gt = t.grad(table.id);
        for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

Var silu(Var a) {
    const auto x = a.value().array();
    const Array sig = 1.0 / (1.0 + (-x).exp());
    Matrix out = (x * sig).matrix();
    return a.tape->push(std::move(out), any_grad({a}), [a, sig](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const auto x = t.value(a.id).array();
        t.grad(a.id).array() += t.grad(self).array() * (sig * (1.0 + x * (1.0 - sig)));
    });
}

Var gelu(Var a) {
    constexpr double kC = 0.044715;
    const double k = std::sqrt(2.0 / std::numbers::pi);
    const auto x = a.value().array();
    // tanh through exp, which Eigen vectorizes for doubles.
    const Array th = 1.0 - 2.0 / ((2.0 * k * (x + kC * x.cube())).exp() + 1.0);
    Matrix out = (0.5 * x * (1.0 + th)).matrix();
    return a.tape->push(std::move(out), any_grad({a}), [a, th, k](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const auto x = t.value(a.id).array();
        const auto d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th.square()) * k * (1.0 + 3.0 * kC * x.square());
        t.grad(a.id).array() += t.grad(self).array() * d;
    });
}

Var layer_norm(Var a, double eps) {
    const Matrix& x = a.value();
    const Eigen::Index n = x.cols();
    Eigen::VectorXd inv_std(x.rows());
    Matrix y(x.rows(), n);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        y.row(r) = (x.row(r).array() - mean) * inv_std[r];
    }
    auto y_shared = std::make_shared<Matrix>(y);
    return a.tape->push(std::move(y), any_grad({a}), [a, inv_std, y_shared](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        const Matrix& g = t.grad(self);
        const Matrix& yv = *y_shared;
        Matrix& ga = t.grad(a.id);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const double gm = g.row(r).mean();
            const double gy = g.row(r).dot(yv.row(r)) / static_cast<double>(g.cols());
            ga.row(r).array() += inv_std[r] * (g.row(r).array() - gm - yv.row(r).array() * gy);
        }
    });
}

Var head_rms_norm(Var a, Var gamma, int head_dim, double eps) {
    require_same_tape(a, gamma);
    const Matrix& x = a.value();
    const Matrix& gv = gamma.value();
    if (gv.rows() != 1 || gv.cols() != head_dim || x.cols() % head_dim != 0) {
        throw ShapeError("head_rms_norm: input " + shape_of(x) + ", gamma " + shape_of(gv));
    }
    const Eigen::Index heads = x.cols() / head_dim;
    auto normed = std::make_shared<Matrix>(x.rows(), x.cols());
    Matrix inv_rms(x.rows(), heads);
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (Eigen::Index h = 0; h < heads; ++h) {
            auto seg = x.row(r).segment(h * head_dim, head_dim);
            const double ir = 1.0 / std::sqrt(seg.squaredNorm() / head_dim + eps);
            inv_rms(r, h) = ir;
            normed->row(r).segment(h * head_dim, head_dim) = seg * ir;
            out.row(r).segment(h * head_dim, head_dim) =
                normed->row(r).segment(h * head_dim, head_dim).cwiseProduct(gv.row(0));
        }
    }
    return a.tape->push(std::move(out), any_grad({a, gamma}),
                        [a, gamma, head_dim, heads, normed, inv_rms](Tape& t, std::size_t self) {
                            const Matrix& g = t.grad(self);
                            const Matrix& gv = t.value(gamma.id);
                            const bool ga = t.needs_grad(a.id);
                            const bool gg = t.needs_grad(gamma.id);
                            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                                for (Eigen::Index h = 0; h < heads; ++h) {
                                    auto gseg = g.row(r).segment(h * head_dim, head_dim);
                                    auto nseg = normed->row(r).segment(h * head_dim, head_dim);
                                    if (gg) t.grad(gamma.id).row(0) += gseg.cwiseProduct(nseg);
                                    if (ga) {
                                        const Eigen::RowVectorXd dn = gseg.cwiseProduct(gv.row(0));
                                        const double proj = dn.dot(nseg) / head_dim;
                                        t.grad(a.id).row(r).segment(h * head_dim, head_dim) +=
                                            inv_rms(r, h) * (dn - proj * nseg);
                                    }
                                }
                            }
                        });
}

Var modulate(Var x, Var shift, Var scale_, Eigen::Index group_rows) {
    require_same_tape(x, shift);
    require_same_tape(x, scale_);
    const Matrix& xv = x.value();
    const Matrix& sh = shift.value();
    const Matrix& sc = scale_.value();
    if (group_rows <= 0 || xv.rows() != sh.rows() * group_rows || sh.rows() != sc.rows() ||
        sh.cols() != xv.cols() || sc.cols() != xv.cols()) {
        throw ShapeError("modulate: input " + shape_of(xv) + ", shift " + shape_of(sh) + ", scale " + shape_of(sc));
    }
    Matrix out(xv.rows(), xv.cols());
    for (Eigen::Index g = 0; g < sh.rows(); ++g) {
        const Eigen::RowVectorXd factor = sc.row(g).array() + 1.0;
        out.middleRows(g * group_rows, group_rows) =
            (xv.middleRows(g * group_rows, group_rows).array().rowwise() * factor.array()).rowwise() +
            sh.row(g).array();
    }
    return x.tape->push(std::move(out), any_grad({x, shift, scale_}),
                        [x, shift, scale_, group_rows](Tape& t, std::size_t self) {
                            const Matrix& g = t.grad(self);
                            const Matrix& sc = t.value(scale_.id);
                            for (Eigen::Index grp = 0; grp < sc.rows(); ++grp) {
                                auto gblock = g.middleRows(grp * group_rows, group_rows);
                                if (t.needs_grad(x.id)) {
                                    const Eigen::RowVectorXd factor = sc.row(grp).array() + 1.0;
                                    t.grad(x.id).middleRows(grp * group_rows, group_rows).array() +=
                                        gblock.array().rowwise() * factor.array();
                                }
                                if (t.needs_grad(shift.id)) t.grad(shift.id).row(grp) += gblock.colwise().sum();
                                if (t.needs_grad(scale_.id)) {
                                    t.grad(scale_.id).row(grp) +=
                                        gblock.cwiseProduct(t.value(x.id).middleRows(grp * group_rows, group_rows))
                                            .colwise()
                                            .sum();
                                }
                            }
                        });
}

Var rotary(Var a, std::shared_ptr<const positional::RotationTable> table, int head_dim) {
    Matrix out = a.value();
    positional::rotate_rows(out, *table, head_dim);
    return a.tape->push(std::move(out), any_grad({a}), [a, table, head_dim](Tape& t, std::size_t self) {
        if (!t.needs_grad(a.id)) return;
        Matrix g = t.grad(self);
        positional::rotate_rows(g, *table, head_dim, /*inverse=*/true);
        t.grad(a.id) += g;
    });
}

Var attention(Var q, Var k, Var v, int heads, int head_dim, Eigen::Index seq_len) {
    require_same_tape(q, k);
    require_same_tape(q, v);
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    const Eigen::Index width = static_cast<Eigen::Index>(heads) * head_dim;
    if (qv.cols() != width || kv.cols() != width || vv.cols() != width || kv.rows() != qv.rows() ||
        vv.rows() != qv.rows() || seq_len <= 0 || qv.rows() % seq_len != 0) {
        throw ShapeError("attention: q " + shape_of(qv) + ", k " + shape_of(kv) + ", v " + shape_of(vv));
    }
    const Eigen::Index batch = qv.rows() / seq_len;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(head_dim));
    // Probabilities are kept transposed, [keys x queries], so each query's
    // softmax runs over a contiguous column.
    auto probs = std::make_shared<std::vector<Eigen::MatrixXd>>(static_cast<std::size_t>(batch * heads));
    Matrix out(qv.rows(), width);
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const Eigen::Index r0 = b * seq_len;
            const Eigen::Index c0 = static_cast<Eigen::Index>(h) * head_dim;
            Eigen::MatrixXd p;
            p.noalias() = kv.block(r0, c0, seq_len, head_dim) * qv.block(r0, c0, seq_len, head_dim).transpose();
            p *= scale_factor;
            const Eigen::RowVectorXd col_max = p.colwise().maxCoeff();
            p = (p.rowwise() - col_max).array().exp().matrix();
            const Eigen::RowVectorXd inv_sum = p.colwise().sum().cwiseInverse();
            p = p.array().rowwise() * inv_sum.array();
            out.block(r0, c0, seq_len, head_dim).noalias() = p.transpose() * vv.block(r0, c0, seq_len, head_dim);
            (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(p);
        }
    }
    return q.tape->push(
        std::move(out), any_grad({q, k, v}),
        [q, k, v, heads, head_dim, seq_len, batch, scale_factor, probs](Tape& t, std::size_t self) {
            const Matrix& g = t.grad(self);
            const Matrix& qv = t.value(q.id);
            const Matrix& kv = t.value(k.id);
            const Matrix& vv = t.value(v.id);
            const bool gq = t.needs_grad(q.id);
            const bool gk = t.needs_grad(k.id);
            const bool gv = t.needs_grad(v.id);
            for (Eigen::Index b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const Eigen::Index r0 = b * seq_len;
                    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * head_dim;
                    const Eigen::MatrixXd& p = (*probs)[static_cast<std::size_t>(b * heads + h)];
                    auto go = g.block(r0, c0, seq_len, head_dim);
                    if (gv) t.grad(v.id).block(r0, c0, seq_len, head_dim).noalias() += p * go;
                    if (!gq && !gk) continue;
                    Eigen::MatrixXd dp;
                    dp.noalias() = vv.block(r0, c0, seq_len, head_dim) * go.transpose();
                    const Eigen::RowVectorXd col_dot = dp.cwiseProduct(p).colwise().sum();
                    const Eigen::MatrixXd ds = p.cwiseProduct(dp.rowwise() - col_dot) * scale_factor;
                    if (gq) {
                        t.grad(q.id).block(r0, c0, seq_len, head_dim).noalias() +=
                            ds.transpose() * kv.block(r0, c0, seq_len, head_dim);
                    }
                    if (gk) t.grad(k.id).block(r0, c0, seq_len, head_dim).noalias() += ds * qv.block(r0, c0, seq_len, head_dim);
                }
            }
        });
}

Var half_sum_squares(Var a) {
    Matrix out(1, 1);
    out(0, 0) = 0.5 * a.value().squaredNorm();
    return a.tape->push(std::move(out), any_grad({a}), [a](Tape& t, std::size_t self) {
        accumulate(t, a, t.grad(self)(0, 0) * t.value(a.id));
    });
}

Var scalar_loss(Var input, double value, Matrix grad_wrt_input) {
    const Matrix& iv = input.value();
    if (grad_wrt_input.rows() != iv.rows() || grad_wrt_input.cols() != iv.cols()) {
        throw ShapeError("scalar_loss gradient " + shape_of(grad_wrt_input) + " for input " + shape_of(iv));
    }
    Matrix out(1, 1);
    out(0, 0) = value;
    return input.tape->push(std::move(out), any_grad({input}),
                            [input, g = std::move(grad_wrt_input)](Tape& t, std::size_t self) {
                                accumulate(t, input, t.grad(self)(0, 0) * g);
                            });
}

}  // namespace flowlab::autodiff
