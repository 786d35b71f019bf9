#pragma once

// Central finite-difference gradient checker over a ParamStore. Rebuilds the
// loss on a fresh tape per probe; returns the max relative error across all
// parameter entries (optionally subsampled for large stores).

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "mudi/autodiff.hpp"
#include "mudi/params.hpp"
#include "mudi/rng.hpp"

namespace mudi_test {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    long worst_row = -1, worst_col = -1;
    double analytic = 0.0, numeric = 0.0;
    double max_abs_analytic = 0.0; // proves gradient flow is not vacuous
    std::size_t probes = 0;
};

inline GradCheckResult finite_difference_check(
    mudi::ParamStore& store, const std::function<mudi::ad::Node*(mudi::ad::Tape&)>& build,
    double eps = 1e-5, std::size_t max_probes_per_param = 0 /* 0 = all */,
    std::uint64_t probe_seed = 17) {
    store.zero_grad();
    std::map<std::string, mudi::Mat> analytic;
    {
        mudi::ad::Tape tape;
        mudi::ad::Node* loss = build(tape);
        tape.backward(loss);
        for (auto& [name, e] : store) analytic[name] = e.grad;
    }

    auto eval = [&]() {
        mudi::ad::Tape tape;
        return build(tape)->value(0, 0);
    };

    GradCheckResult res;
    mudi::Rng rng(probe_seed);
    for (auto& [name, e] : store) {
        std::size_t total = static_cast<std::size_t>(e.value.size());
        std::size_t probes = (max_probes_per_param == 0)
                                 ? total
                                 : std::min(total, max_probes_per_param);
        for (std::size_t p = 0; p < probes; ++p) {
            std::size_t flat = (max_probes_per_param == 0)
                                   ? p
                                   : static_cast<std::size_t>(rng.uniform_int(total));
            long r = static_cast<long>(flat) % e.value.rows();
            long c = static_cast<long>(flat) / e.value.rows();
            double orig = e.value(r, c);
            e.value(r, c) = orig + eps;
            double lp = eval();
            e.value(r, c) = orig - eps;
            double lm = eval();
            e.value(r, c) = orig;
            double numeric = (lp - lm) / (2.0 * eps);
            double a = analytic[name](r, c);
            res.max_abs_analytic = std::max(res.max_abs_analytic, std::abs(a));
            // Differences below central-difference noise (~1e-16 * |loss| /
            // eps) count as exact; the denominator floor keeps near-zero
            // gradients sane.
            double diff = std::abs(numeric - a);
            if (diff < 1e-9) {
                ++res.probes;
                continue;
            }
            double denom = std::max(std::abs(numeric) + std::abs(a), 1e-6);
            double rel = diff / denom;
            ++res.probes;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = name;
                res.worst_row = r;
                res.worst_col = c;
                res.analytic = a;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

} // namespace mudi_test
