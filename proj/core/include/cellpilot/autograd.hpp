#pragma once

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <string>
#include <vector>

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records one forward pass; Var is a handle into it.
// Parameters live outside the tape and receive gradients on backward().
namespace cellpilot::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Matrix v, bool t = true)
        : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())),
          trainable(t) {}

    std::size_t size() const noexcept { return static_cast<std::size_t>(value.size()); }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
  public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }

    Tape* tape() const noexcept { return tape_; }
    int id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

  private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
  public:
    using Backward = std::function<void(Tape&)>;

    // A non-recording tape computes values only (inference mode).
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return record_; }

    Var constant(Matrix value);
    // Leaf referencing the parameter's storage; no copy is made.
    Var param(Parameter& p);

    // Record the result of an op. `needs_grad` should be true when any input
    // requires a gradient; `backward` reads grad(result) and accumulates into
    // the inputs' gradients.
    Var record(Matrix value, bool needs_grad, Backward backward);

    const Matrix& value(int id) const;
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }
    Matrix& grad(int id);

    // Seed d(root)/d(root) = 1 (root must be 1x1) and propagate to parameters.
    void backward(const Var& root);

    std::size_t size() const noexcept { return nodes_.size(); }

  private:
    struct Node {
        Matrix owned;
        const Matrix* external = nullptr;
        Matrix grad;
        Backward backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };

    bool record_;
    std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

// ---- ops -------------------------------------------------------------------

Var matmul(const Var& a, const Var& b);    // a * b
Var matmul_nt(const Var& a, const Var& b); // a * b^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b); // elementwise
Var add_row(const Var& a, const Var& row); // broadcast a 1 x n row over a
Var scale(const Var& a, double s);
Var gelu(const Var& a);
Var relu(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var rows(const Var& a, Eigen::Index begin, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols); // row-major reinterpretation
Var sum(const Var& a);
Var mean(const Var& a);

// Multi-head scaled dot-product attention; q is n x d, k and v are m x d.
Var attention(const Var& q, const Var& k, const Var& v, int heads);

// Rearrange a (gh*gw) x (p*p) matrix of per-token sub-pixel values into a
// (gh*p) x (gw*p) image.
Var pixel_shuffle(const Var& a, int grid_h, int grid_w, int patch);

} // namespace cellpilot::ag
