#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace empcause::t5 {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A trainable tensor with its gradient accumulator and Adam moments.
struct Parameter {
    Parameter(std::string name, Matrix value);

    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;

    void zero_grad() { grad.setZero(); }
    std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
    Tape *tape = nullptr;
    std::size_t id = 0;

    const Matrix &value() const;
    std::size_t rows() const { return static_cast<std::size_t>(value().rows()); }
    std::size_t cols() const { return static_cast<std::size_t>(value().cols()); }
};

/// Reverse-mode differentiation over dense row-major matrices. Nodes live in a
/// deque so references to values stay valid while the graph grows. With
/// recording off the tape only evaluates values (inference).
class Tape {
  public:
    using Backward = std::function<void(const Matrix &grad, Tape &tape)>;

    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    Var constant(Matrix value);
    Var param(Parameter &parameter);
    /// Read-only view of a parameter; never receives a gradient.
    Var param(const Parameter &parameter);

    const Matrix &value(std::size_t id) const {
        const Node &n = nodes_[id];
        return n.external ? *n.external : n.value;
    }
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    /// Records an op result. `backward` receives d(loss)/d(result) and must call
    /// accumulate() for each input that needs a gradient.
    Var push(Matrix value, std::initializer_list<Var> inputs, Backward backward);
    Var push(Matrix value, std::span<const Var> inputs, Backward backward);

    void accumulate(std::size_t id, const Matrix &grad);

    /// Back-propagates from a 1x1 node, adding into each Parameter::grad.
    void backward(Var loss);

  private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool needs_grad = false;
        bool has_grad = false;
        Parameter *parameter = nullptr;
        Backward backward;
        const Matrix *external = nullptr; // parameter values are referenced, not copied
    };

    bool recording_;
    std::deque<Node> nodes_;
};

// Ops. Shapes are (rows, cols); sequences are rows.

Var matmul(Var a, Var b);    // a * b
Var matmul_nt(Var a, Var b); // a * b^T
Var add(Var a, Var b);
Var add_row(Var a, Var row); // broadcast a 1xN row over every row of a
Var scale(Var a, double s);
Var add_constant(Var a, const Matrix &c); // c carries no gradient (masks, biases)
Var relu(Var a);
Var softmax_rows(Var a);
Var rms_norm(Var x, Var gain, double eps = 1e-6); // gain is 1xN
Var embed(Var table, std::span<const int> ids);   // rows of table
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var mean_rows(Var a); // 1xN
Var detach(Var a);
Var sum_scalars(std::span<const Var> scalars); // 1x1 inputs, summed left to right

/// Sum over rows of -log softmax(logits)[target]; rows whose target equals
/// `ignore` contribute nothing. Returns 1x1.
Var cross_entropy_sum(Var logits, std::span<const int> targets, int ignore = -1);

/// Bucketed relative-position bias for one head: out(i, j) = table(bucket(j - i), head).
Var relative_bias(Var table, std::size_t head, std::size_t query_len, std::size_t key_len, bool bidirectional,
                  std::size_t max_distance);

/// Bucket of a relative position (key - query), logarithmic beyond num_buckets/2.
std::size_t relative_position_bucket(long relative_position, bool bidirectional, std::size_t num_buckets, std::size_t max_distance);

/// Row-wise numerically stable softmax on plain values.
Matrix softmax_rows(const Matrix &logits);

} // namespace empcause::t5
