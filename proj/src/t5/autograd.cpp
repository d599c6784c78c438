#include "empcause/t5/autograd.hpp"

#include <cmath>

#include <fmt/format.h>

#include "empcause/common/error.hpp"

namespace empcause::t5 {

Parameter::Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix::Zero(value.rows(), value.cols());
    adam_m = Matrix::Zero(value.rows(), value.cols());
    adam_v = Matrix::Zero(value.rows(), value.cols());
}

const Matrix &Var::value() const { return tape->value(id); }

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, {}, nullptr});
    return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter &parameter) {
    nodes_.push_back(Node{Matrix{}, {}, recording_, false, recording_ ? &parameter : nullptr, {}, &parameter.value});
    return {this, nodes_.size() - 1};
}

Var Tape::param(const Parameter &parameter) {
    nodes_.push_back(Node{Matrix{}, {}, false, false, nullptr, {}, &parameter.value});
    return {this, nodes_.size() - 1};
}

Var Tape::push(Matrix value, std::initializer_list<Var> inputs, Backward backward) {
    return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::push(Matrix value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    if (recording_)
        for (const auto &in : inputs)
            needs = needs || nodes_[in.id].needs_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, false, nullptr, needs ? std::move(backward) : Backward{}, nullptr});
    return {this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Matrix &grad) {
    Node &n = nodes_[id];
    if (!n.needs_grad)
        return;
    if (!n.has_grad) {
        n.grad = grad;
        n.has_grad = true;
    } else {
        n.grad += grad;
    }
}

void Tape::backward(Var loss) {
    if (!recording_)
        throw PreconditionError("backward on a tape that is not recording");
    if (loss.value().rows() != 1 || loss.value().cols() != 1)
        throw PreconditionError("backward needs a scalar loss");
    accumulate(loss.id, Matrix::Ones(1, 1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node &n = nodes_[i];
        if (!n.has_grad)
            continue;
        if (n.parameter)
            n.parameter->grad += n.grad;
        else if (n.backward)
            n.backward(n.grad, *this);
    }
}

namespace {

void check(bool ok, const char *op, const Matrix &a, const Matrix &b) {
    if (!ok)
        throw PreconditionError(fmt::format("{}: shape mismatch ({}x{} vs {}x{})", op, a.rows(), a.cols(), b.rows(), b.cols()));
}

} // namespace

Var matmul(Var a, Var b) {
    const Matrix &av = a.value(), &bv = b.value();
    check(av.cols() == bv.rows(), "matmul", av, bv);
    return a.tape->push(av * bv, {a, b}, [a, b](const Matrix &g, Tape &t) {
        if (t.needs_grad(a.id))
            t.accumulate(a.id, g * t.value(b.id).transpose());
        if (t.needs_grad(b.id))
            t.accumulate(b.id, t.value(a.id).transpose() * g);
    });
}

Var matmul_nt(Var a, Var b) {
    const Matrix &av = a.value(), &bv = b.value();
    check(av.cols() == bv.cols(), "matmul_nt", av, bv);
    return a.tape->push(av * bv.transpose(), {a, b}, [a, b](const Matrix &g, Tape &t) {
        if (t.needs_grad(a.id))
            t.accumulate(a.id, g * t.value(b.id));
        if (t.needs_grad(b.id))
            t.accumulate(b.id, g.transpose() * t.value(a.id));
    });
}

Var add(Var a, Var b) {
    const Matrix &av = a.value(), &bv = b.value();
    check(av.rows() == bv.rows() && av.cols() == bv.cols(), "add", av, bv);
    return a.tape->push(av + bv, {a, b}, [a, b](const Matrix &g, Tape &t) {
        t.accumulate(a.id, g);
        t.accumulate(b.id, g);
    });
}

Var add_row(Var a, Var row) {
    const Matrix &av = a.value(), &rv = row.value();
    check(rv.rows() == 1 && rv.cols() == av.cols(), "add_row", av, rv);
    Matrix out = av.rowwise() + rv.row(0);
    return a.tape->push(std::move(out), {a, row}, [a, row](const Matrix &g, Tape &t) {
        t.accumulate(a.id, g);
        if (t.needs_grad(row.id))
            t.accumulate(row.id, g.colwise().sum());
    });
}

Var scale(Var a, double s) {
    return a.tape->push(a.value() * s, {a}, [a, s](const Matrix &g, Tape &t) { t.accumulate(a.id, g * s); });
}

Var add_constant(Var a, const Matrix &c) {
    check(a.value().rows() == c.rows() && a.value().cols() == c.cols(), "add_constant", a.value(), c);
    return a.tape->push(a.value() + c, {a}, [a](const Matrix &g, Tape &t) { t.accumulate(a.id, g); });
}

Var relu(Var a) {
    Matrix out = a.value().cwiseMax(0.0);
    return a.tape->push(std::move(out), {a}, [a](const Matrix &g, Tape &t) {
        Matrix mask = (t.value(a.id).array() > 0.0).cast<double>();
        t.accumulate(a.id, g.cwiseProduct(mask));
    });
}

Matrix softmax_rows(const Matrix &logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        double m = logits.row(r).maxCoeff();
        auto e = (logits.row(r).array() - m).exp();
        out.row(r) = e / e.sum();
    }
    return out;
}

Var softmax_rows(Var a) {
    Matrix p = softmax_rows(a.value());
    Matrix s = p;
    return a.tape->push(std::move(p), {a}, [a, s = std::move(s)](const Matrix &g, Tape &t) {
        Matrix dot = (g.cwiseProduct(s)).rowwise().sum();
        t.accumulate(a.id, s.cwiseProduct(g - dot.replicate(1, g.cols())));
    });
}

Var rms_norm(Var x, Var gain, double eps) {
    const Matrix &xv = x.value(), &gv = gain.value();
    check(gv.rows() == 1 && gv.cols() == xv.cols(), "rms_norm", xv, gv);
    const double d = static_cast<double>(xv.cols());
    Matrix inv(xv.rows(), 1);
    for (Eigen::Index r = 0; r < xv.rows(); ++r)
        inv(r, 0) = 1.0 / std::sqrt(xv.row(r).squaredNorm() / d + eps);
    Matrix out = (xv.array().colwise() * inv.col(0).array()).rowwise() * gv.row(0).array();
    return x.tape->push(std::move(out), {x, gain}, [x, gain, inv, d](const Matrix &g, Tape &t) {
        const Matrix &xv = t.value(x.id), &gv = t.value(gain.id);
        Matrix normed = xv.array().colwise() * inv.col(0).array();
        if (t.needs_grad(gain.id))
            t.accumulate(gain.id, (g.cwiseProduct(normed)).colwise().sum());
        if (t.needs_grad(x.id)) {
            Matrix gg = g.array().rowwise() * gv.row(0).array(); // dL/d(normed)
            Matrix dx(xv.rows(), xv.cols());
            for (Eigen::Index r = 0; r < xv.rows(); ++r) {
                double s = inv(r, 0);
                double proj = gg.row(r).dot(xv.row(r));
                dx.row(r) = s * gg.row(r) - (s * s * s / d) * proj * xv.row(r);
            }
            t.accumulate(x.id, dx);
        }
    });
}

Var embed(Var table, std::span<const int> ids) {
    const Matrix &tv = table.value();
    Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tv.rows())
            throw PreconditionError(fmt::format("token id {} outside the embedding table ({} rows)", ids[i], tv.rows()));
        out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
    }
    std::vector<int> copy(ids.begin(), ids.end());
    return table.tape->push(std::move(out), {table}, [table, copy](const Matrix &g, Tape &t) {
        const Matrix &tv = t.value(table.id);
        Matrix grad = Matrix::Zero(tv.rows(), tv.cols());
        for (std::size_t i = 0; i < copy.size(); ++i)
            grad.row(copy[i]) += g.row(static_cast<Eigen::Index>(i));
        t.accumulate(table.id, grad);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty())
        throw PreconditionError("concat_rows of nothing");
    Eigen::Index rows = 0, cols = parts[0].value().cols();
    for (const auto &p : parts) {
        check(p.value().cols() == cols, "concat_rows", parts[0].value(), p.value());
        rows += p.value().rows();
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    std::vector<std::pair<std::size_t, Eigen::Index>> spans;
    for (const auto &p : parts) {
        out.middleRows(at, p.value().rows()) = p.value();
        spans.emplace_back(p.id, at);
        at += p.value().rows();
    }
    return parts[0].tape->push(std::move(out), parts, [spans](const Matrix &g, Tape &t) {
        for (const auto &[id, start] : spans)
            if (t.needs_grad(id))
                t.accumulate(id, g.middleRows(start, t.value(id).rows()));
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty())
        throw PreconditionError("concat_cols of nothing");
    Eigen::Index rows = parts[0].value().rows(), cols = 0;
    for (const auto &p : parts) {
        check(p.value().rows() == rows, "concat_cols", parts[0].value(), p.value());
        cols += p.value().cols();
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    std::vector<std::pair<std::size_t, Eigen::Index>> spans;
    for (const auto &p : parts) {
        out.middleCols(at, p.value().cols()) = p.value();
        spans.emplace_back(p.id, at);
        at += p.value().cols();
    }
    return parts[0].tape->push(std::move(out), parts, [spans](const Matrix &g, Tape &t) {
        for (const auto &[id, start] : spans)
            if (t.needs_grad(id))
                t.accumulate(id, g.middleCols(start, t.value(id).cols()));
    });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
    const Matrix &av = a.value();
    if (start + count > static_cast<std::size_t>(av.cols()))
        throw PreconditionError("slice_cols out of range");
    auto s = static_cast<Eigen::Index>(start), n = static_cast<Eigen::Index>(count);
    Matrix out = av.middleCols(s, n);
    return a.tape->push(std::move(out), {a}, [a, s, n](const Matrix &g, Tape &t) {
        const Matrix &av = t.value(a.id);
        Matrix grad = Matrix::Zero(av.rows(), av.cols());
        grad.middleCols(s, n) = g;
        t.accumulate(a.id, grad);
    });
}

Var mean_rows(Var a) {
    const Matrix &av = a.value();
    if (av.rows() == 0)
        throw PreconditionError("mean over an empty sequence");
    const double n = static_cast<double>(av.rows());
    Matrix out = av.colwise().sum() / n;
    return a.tape->push(std::move(out), {a}, [a, n](const Matrix &g, Tape &t) {
        t.accumulate(a.id, g.replicate(t.value(a.id).rows(), 1) / n);
    });
}

Var detach(Var a) { return a.tape->constant(a.value()); }

Var sum_scalars(std::span<const Var> scalars) {
    if (scalars.empty())
        throw PreconditionError("sum of no scalars");
    double total = 0.0;
    for (const auto &s : scalars) {
        if (s.value().size() != 1)
            throw PreconditionError("sum_scalars expects 1x1 inputs");
        total += s.value()(0, 0);
    }
    Matrix out(1, 1);
    out(0, 0) = total;
    std::vector<std::size_t> ids;
    for (const auto &s : scalars)
        ids.push_back(s.id);
    return scalars[0].tape->push(std::move(out), scalars, [ids](const Matrix &g, Tape &t) {
        for (auto id : ids)
            t.accumulate(id, g);
    });
}

Var cross_entropy_sum(Var logits, std::span<const int> targets, int ignore) {
    const Matrix &lv = logits.value();
    if (static_cast<std::size_t>(lv.rows()) != targets.size())
        throw PreconditionError(fmt::format("cross entropy: {} logit rows for {} targets", lv.rows(), targets.size()));
    Matrix p = softmax_rows(lv);
    double loss = 0.0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        int y = targets[r];
        if (y == ignore)
            continue;
        if (y < 0 || y >= lv.cols())
            throw PreconditionError(fmt::format("target {} outside {} classes", y, lv.cols()));
        auto row = static_cast<Eigen::Index>(r);
        double m = lv.row(row).maxCoeff();
        double lse = m + std::log((lv.row(row).array() - m).exp().sum());
        loss += lse - lv(row, y);
    }
    Matrix out(1, 1);
    out(0, 0) = loss;
    std::vector<int> ys(targets.begin(), targets.end());
    return logits.tape->push(std::move(out), {logits}, [logits, ys, ignore, p = std::move(p)](const Matrix &g, Tape &t) {
        Matrix grad = p;
        for (std::size_t r = 0; r < ys.size(); ++r) {
            auto row = static_cast<Eigen::Index>(r);
            if (ys[r] == ignore)
                grad.row(row).setZero();
            else
                grad(row, ys[r]) -= 1.0;
        }
        t.accumulate(logits.id, grad * g(0, 0));
    });
}

std::size_t relative_position_bucket(long relative_position, bool bidirectional, std::size_t num_buckets, std::size_t max_distance) {
    std::size_t bucket = 0;
    long n = static_cast<long>(num_buckets);
    long rp = relative_position;
    if (bidirectional) {
        n /= 2;
        if (rp > 0)
            bucket += static_cast<std::size_t>(n);
        rp = std::labs(rp);
    } else {
        rp = -std::min(rp, 0L);
    }
    long max_exact = n / 2;
    if (rp < max_exact)
        return bucket + static_cast<std::size_t>(rp);
    long large = max_exact + static_cast<long>(std::log(static_cast<double>(rp) / static_cast<double>(max_exact)) /
                                               std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact)) *
                                               static_cast<double>(n - max_exact));
    return bucket + static_cast<std::size_t>(std::min(large, n - 1));
}

Var relative_bias(Var table, std::size_t head, std::size_t query_len, std::size_t key_len, bool bidirectional,
                  std::size_t max_distance) {
    const Matrix &tv = table.value();
    if (head >= static_cast<std::size_t>(tv.cols()))
        throw PreconditionError("relative_bias head out of range");
    auto buckets = static_cast<std::size_t>(tv.rows());
    std::vector<std::size_t> index(query_len * key_len);
    Matrix out(static_cast<Eigen::Index>(query_len), static_cast<Eigen::Index>(key_len));
    for (std::size_t i = 0; i < query_len; ++i)
        for (std::size_t j = 0; j < key_len; ++j) {
            auto b = relative_position_bucket(static_cast<long>(j) - static_cast<long>(i), bidirectional, buckets, max_distance);
            index[i * key_len + j] = b;
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = tv(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(head));
        }
    return table.tape->push(std::move(out), {table}, [table, head, index, key_len](const Matrix &g, Tape &t) {
        const Matrix &tv = t.value(table.id);
        Matrix grad = Matrix::Zero(tv.rows(), tv.cols());
        for (std::size_t k = 0; k < index.size(); ++k)
            grad(static_cast<Eigen::Index>(index[k]), static_cast<Eigen::Index>(head)) +=
                g(static_cast<Eigen::Index>(k / key_len), static_cast<Eigen::Index>(k % key_len));
        t.accumulate(table.id, grad);
    });
}

} // namespace empcause::t5
