#include "cellpilot/autograd.hpp"

#include "cellpilot/errors.hpp"

#include <cmath>
#include <numbers>

namespace cellpilot::ag {

Var Tape::constant(Matrix value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
    Node n;
    n.external = &p.value;
    n.param = &p;
    n.requires_grad = record_ && p.trainable;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Matrix value, bool needs_grad, Backward backward) {
    Node n;
    n.owned = std::move(value);
    if (record_ && needs_grad) {
        n.requires_grad = true;
        n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

const Matrix& Tape::value(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
}

Matrix& Tape::grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
        const Matrix& v = value(id);
        n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
}

void Tape::backward(const Var& root) {
    if (root.tape() != this) throw Error("backward on a Var from another tape");
    const Matrix& rv = value(root.id());
    if (rv.rows() != 1 || rv.cols() != 1) throw ShapeError("backward root must be a scalar");
    if (!nodes_[root.id()].requires_grad) return;
    grad(root.id())(0, 0) += 1.0;
    for (int i = root.id(); i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.backward && n.grad.size() != 0) n.backward(*this);
    }
    for (auto& n : nodes_) {
        if (n.param && n.param->trainable && n.grad.size() != 0) {
            if (n.param->grad.rows() != n.grad.rows() || n.param->grad.cols() != n.grad.cols())
                n.param->grad = Matrix::Zero(n.grad.rows(), n.grad.cols());
            n.param->grad += n.grad;
        }
    }
}

namespace {

Tape& tape_of(const Var& a, const Var& b) {
    if (a.tape() != b.tape() || a.tape() == nullptr) throw Error("operands belong to different tapes");
    return *a.tape();
}

void require_same(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

} // namespace

Var matmul(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.cols() != bv.rows()) throw ShapeError("matmul: inner dimension mismatch");
    const bool ng = t.requires_grad(a) || t.requires_grad(b);
    Matrix out = av * bv;
    const int ia = a.id(), ib = b.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), ng, [ia, ib, self](Tape& tp) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.grad(ia).noalias() += g * tp.value(ib).transpose();
        if (tp.requires_grad(ib)) tp.grad(ib).noalias() += tp.value(ia).transpose() * g;
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.cols() != bv.cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
    const bool ng = t.requires_grad(a) || t.requires_grad(b);
    Matrix out = av * bv.transpose();
    const int ia = a.id(), ib = b.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), ng, [ia, ib, self](Tape& tp) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.grad(ia).noalias() += g * tp.value(ib);
        if (tp.requires_grad(ib)) tp.grad(ib).noalias() += g.transpose() * tp.value(ia);
    });
}

Var add(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    require_same(a.value(), b.value(), "add");
    const int ia = a.id(), ib = b.id(), self = static_cast<int>(t.size());
    return t.record(a.value() + b.value(), t.requires_grad(a) || t.requires_grad(b), [ia, ib, self](Tape& tp) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.grad(ia) += g;
        if (tp.requires_grad(ib)) tp.grad(ib) += g;
    });
}

Var sub(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    require_same(a.value(), b.value(), "sub");
    const int ia = a.id(), ib = b.id(), self = static_cast<int>(t.size());
    return t.record(a.value() - b.value(), t.requires_grad(a) || t.requires_grad(b), [ia, ib, self](Tape& tp) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.grad(ia) += g;
        if (tp.requires_grad(ib)) tp.grad(ib) -= g;
    });
}

Var mul(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    require_same(a.value(), b.value(), "mul");
    const int ia = a.id(), ib = b.id(), self = static_cast<int>(t.size());
    return t.record(a.value().cwiseProduct(b.value()), t.requires_grad(a) || t.requires_grad(b),
                    [ia, ib, self](Tape& tp) {
                        const Matrix& g = tp.grad(self);
                        if (tp.requires_grad(ia)) tp.grad(ia) += g.cwiseProduct(tp.value(ib));
                        if (tp.requires_grad(ib)) tp.grad(ib) += g.cwiseProduct(tp.value(ia));
                    });
}

Var add_row(const Var& a, const Var& row) {
    Tape& t = tape_of(a, row);
    const Matrix& rv = row.value();
    if (rv.rows() != 1 || rv.cols() != a.cols()) throw ShapeError("add_row: row shape mismatch");
    Matrix out = a.value();
    out.rowwise() += rv.row(0);
    const int ia = a.id(), ir = row.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(row), [ia, ir, self](Tape& tp) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ia)) tp.grad(ia) += g;
        if (tp.requires_grad(ir)) tp.grad(ir) += g.colwise().sum();
    });
}

Var scale(const Var& a, double s) {
    Tape& t = *a.tape();
    const int ia = a.id(), self = static_cast<int>(t.size());
    return t.record(a.value() * s, t.requires_grad(a), [ia, self, s](Tape& tp) {
        tp.grad(ia) += tp.grad(self) * s;
    });
}

Var gelu(const Var& a) {
    Tape& t = *a.tape();
    const Matrix& x = a.value();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    Matrix out = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
    const int ia = a.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), t.requires_grad(a), [ia, self](Tape& tp) {
        constexpr double inv_sqrt_2pi = 0.39894228040143267794;
        const Matrix d = tp.value(ia).unaryExpr([](double v) {
            return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
        });
        tp.grad(ia) += tp.grad(self).cwiseProduct(d);
    });
}

Var relu(const Var& a) {
    Tape& t = *a.tape();
    Matrix out = a.value().cwiseMax(0.0);
    const int ia = a.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), t.requires_grad(a), [ia, self](Tape& tp) {
        const Matrix& x = tp.value(ia);
        tp.grad(ia) += tp.grad(self).cwiseProduct(x.unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; }));
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    Tape& t = tape_of(x, gamma);
    const Matrix& xv = x.value();
    const Eigen::Index n = xv.rows(), d = xv.cols();
    if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d)
        throw ShapeError("layer_norm: affine parameter shape mismatch");
    Matrix xhat(n, d);
    Eigen::VectorXd inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = xv.row(i).mean();
        const double var = (xv.row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
    }
    Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    const bool ng = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
    const int ix = x.id(), ig = gamma.id(), ib = beta.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), ng, [ix, ig, ib, self, xhat = std::move(xhat), inv_std](Tape& tp) {
        const Matrix& g = tp.grad(self);
        if (tp.requires_grad(ig)) tp.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
        if (tp.requires_grad(ib)) tp.grad(ib) += g.colwise().sum();
        if (tp.requires_grad(ix)) {
            const Matrix dxhat = g.array().rowwise() * tp.value(ig).row(0).array();
            Matrix& gx = tp.grad(ix);
            const double dd = static_cast<double>(dxhat.cols());
            for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                const double m1 = dxhat.row(i).sum() / dd;
                const double m2 = dxhat.row(i).dot(xhat.row(i)) / dd;
                gx.row(i).array() += inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
            }
        }
    });
}

Var rows(const Var& a, Eigen::Index begin, Eigen::Index count) {
    Tape& t = *a.tape();
    if (begin < 0 || count < 0 || begin + count > a.rows()) throw RangeError("rows: slice out of range");
    Matrix out = a.value().middleRows(begin, count);
    const int ia = a.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), t.requires_grad(a), [ia, self, begin, count](Tape& tp) {
        tp.grad(ia).middleRows(begin, count) += tp.grad(self);
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Tape& t = *parts.front().tape();
    const Eigen::Index cols = parts.front().cols();
    Eigen::Index total = 0;
    bool ng = false;
    for (const auto& p : parts) {
        if (p.tape() != &t) throw Error("concat_rows: operands belong to different tapes");
        if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
        total += p.rows();
        ng = ng || t.requires_grad(p);
    }
    Matrix out(total, cols);
    std::vector<std::pair<int, Eigen::Index>> spans;
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleRows(off, p.rows()) = p.value();
        spans.emplace_back(p.id(), off);
        off += p.rows();
    }
    const int self = static_cast<int>(t.size());
    return t.record(std::move(out), ng, [spans, self](Tape& tp) {
        const Matrix& g = tp.grad(self);
        for (const auto& [id, o] : spans) {
            if (tp.requires_grad(id)) tp.grad(id) += g.middleRows(o, tp.value(id).rows());
        }
    });
}

Var reshape(const Var& a, Eigen::Index r, Eigen::Index c) {
    Tape& t = *a.tape();
    if (r * c != a.value().size()) throw ShapeError("reshape: element count mismatch");
    Matrix out = Eigen::Map<const Matrix>(a.value().data(), r, c);
    const int ia = a.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), t.requires_grad(a), [ia, self](Tape& tp) {
        Matrix& ga = tp.grad(ia);
        const Matrix& g = tp.grad(self);
        Eigen::Map<Matrix>(ga.data(), g.rows(), g.cols()) += g;
    });
}

Var sum(const Var& a) {
    Tape& t = *a.tape();
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    const int ia = a.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), t.requires_grad(a), [ia, self](Tape& tp) {
        tp.grad(ia).array() += tp.grad(self)(0, 0);
    });
}

Var mean(const Var& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
    Tape& t = tape_of(q, k);
    if (v.tape() != &t) throw Error("attention: operands belong to different tapes");
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    const Eigen::Index d = qv.cols();
    if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows())
        throw ShapeError("attention: q/k/v shape mismatch");
    if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
    const Eigen::Index dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix out(qv.rows(), d);
    std::vector<Matrix> probs(heads);
    for (int h = 0; h < heads; ++h) {
        Matrix s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * sc;
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
            const double mx = s.row(i).maxCoeff();
            s.row(i) = (s.row(i).array() - mx).exp();
            s.row(i) /= s.row(i).sum();
        }
        out.middleCols(h * dh, dh).noalias() = s * vv.middleCols(h * dh, dh);
        probs[h] = std::move(s);
    }
    const bool ng = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
    if (!ng || !t.recording()) probs.clear();
    const int iq = q.id(), ik = k.id(), iv = v.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), ng, [iq, ik, iv, self, heads, dh, sc, probs = std::move(probs)](Tape& tp) {
        const Matrix& g = tp.grad(self);
        const Matrix& qv = tp.value(iq);
        const Matrix& kv = tp.value(ik);
        const Matrix& vv = tp.value(iv);
        const bool gq = tp.requires_grad(iq), gk = tp.requires_grad(ik), gv = tp.requires_grad(iv);
        for (int h = 0; h < heads; ++h) {
            const Matrix& p = probs[h];
            const auto gh = g.middleCols(h * dh, dh);
            if (gv) tp.grad(iv).middleCols(h * dh, dh).noalias() += p.transpose() * gh;
            if (!gq && !gk) continue;
            Matrix dp = gh * vv.middleCols(h * dh, dh).transpose();
            const Eigen::VectorXd rs = (dp.cwiseProduct(p)).rowwise().sum();
            Matrix ds = p.cwiseProduct(dp.colwise() - rs) * sc;
            if (gq) tp.grad(iq).middleCols(h * dh, dh).noalias() += ds * kv.middleCols(h * dh, dh);
            if (gk) tp.grad(ik).middleCols(h * dh, dh).noalias() += ds.transpose() * qv.middleCols(h * dh, dh);
        }
    });
}

Var pixel_shuffle(const Var& a, int grid_h, int grid_w, int patch) {
    Tape& t = *a.tape();
    const Matrix& av = a.value();
    if (av.rows() != static_cast<Eigen::Index>(grid_h) * grid_w || av.cols() != static_cast<Eigen::Index>(patch) * patch)
        throw ShapeError("pixel_shuffle: input shape mismatch");
    Matrix out(grid_h * patch, grid_w * patch);
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx)
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    out(gy * patch + py, gx * patch + px) = av(gy * grid_w + gx, py * patch + px);
    const int ia = a.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), t.requires_grad(a), [ia, self, grid_h, grid_w, patch](Tape& tp) {
        const Matrix& g = tp.grad(self);
        Matrix& ga = tp.grad(ia);
        for (int gy = 0; gy < grid_h; ++gy)
            for (int gx = 0; gx < grid_w; ++gx)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        ga(gy * grid_w + gx, py * patch + px) += g(gy * patch + py, gx * patch + px);
    });
}

} // namespace cellpilot::ag
