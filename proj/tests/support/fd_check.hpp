#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "empcause/t5/model.hpp"

namespace empcause::testing {

struct GradientCheck {
    double max_relative_error = 0.0;
    std::size_t checked = 0; // entries where either gradient is non-negligible
};

/// Central differences of the total loss against back-prop for every entry of one
/// parameter. Entries where both gradients are below 1e-6 are skipped.
inline GradientCheck check_gradient(t5::T5Model &model, const std::string &name, std::span<const t5::TokenizedExample> batch) {
    for (auto *p : model.parameters())
        p->zero_grad();
    {
        t5::Tape tape;
        auto l = model.loss(tape, batch);
        tape.backward(l.total);
    }
    t5::Parameter &p = model.parameter(name);
    const t5::Matrix analytic = p.grad;
    const double h = 1e-5;
    GradientCheck out;
    for (Eigen::Index i = 0; i < p.value.rows(); ++i)
        for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
            const double saved = p.value(i, j);
            p.value(i, j) = saved + h;
            const double up = model.evaluate(batch).total;
            p.value(i, j) = saved - h;
            const double down = model.evaluate(batch).total;
            p.value(i, j) = saved;
            const double fd = (up - down) / (2 * h);
            const double scale = std::max(std::abs(fd), std::abs(analytic(i, j)));
            if (scale < 1e-6)
                continue;
            out.max_relative_error = std::max(out.max_relative_error, std::abs(fd - analytic(i, j)) / scale);
            ++out.checked;
        }
    return out;
}

} // namespace empcause::testing
