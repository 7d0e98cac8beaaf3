#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vig/autograd.hpp"
#include "vig/core.hpp"

namespace vig {

template <class Real>
struct GradCheckReport {
    bool pass = false;
    Real max_rel_error = 0;
    std::string worst_input;   // which input tensor held the worst element
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

template <class Real>
inline Real gradcheck_default_step() {
    return sizeof(Real) == 8 ? Real(1e-5) : Real(1e-3);
}

/// Central-difference check of reverse-mode gradients.
///
/// `f` maps (tape, vars) to a scalar Var; it is evaluated once analytically
/// and twice per perturbed element. The relative error metric is
/// |g_a - g_n| / max(1, |g_a|, |g_n|). `max_per_tensor` = 0 checks every
/// element; a positive value checks a deterministic random subset per input.
template <class Real, class Fn>
GradCheckReport<Real> grad_check(Fn&& f, const std::vector<Tensor<Real>>& inputs, Real tol,
                                 Real step = gradcheck_default_step<Real>(),
                                 std::size_t max_per_tensor = 0, std::uint64_t sample_seed = 7) {
    // Analytic pass
    std::vector<Tensor<Real>> analytic;
    {
        Tape<Real> tape;
        std::vector<Var<Real>> vars;
        vars.reserve(inputs.size());
        for (const Tensor<Real>& in : inputs) vars.push_back(tape.input(in));
        Var<Real> loss = f(tape, vars);
        if (tape.val(loss).size() != 1)
            throw ConfigError("grad_check requires a scalar-valued function");
        tape.backward(loss);
        for (Var<Real> v : vars) analytic.push_back(tape.grad(v));
    }

    auto eval = [&](const std::vector<Tensor<Real>>& pts) {
        Tape<Real> tape;
        std::vector<Var<Real>> vars;
        vars.reserve(pts.size());
        for (const Tensor<Real>& in : pts) vars.push_back(tape.value(in));
        return tape.val(f(tape, vars)).data[0];
    };

    GradCheckReport<Real> rep;
    rep.pass = true;
    std::vector<Tensor<Real>> work = inputs;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        const std::size_t n = inputs[ti].size();
        std::vector<std::size_t> elems;
        if (max_per_tensor == 0 || n <= max_per_tensor) {
            elems.resize(n);
            for (std::size_t i = 0; i < n; ++i) elems[i] = i;
        } else {
            Rng rng(mix_seed(sample_seed, ti));
            for (std::size_t i = 0; i < max_per_tensor; ++i) elems.push_back(rng.index(n));
        }
        for (std::size_t idx : elems) {
            const Real orig = work[ti].data[idx];
            work[ti].data[idx] = orig + step;
            const Real fp = eval(work);
            work[ti].data[idx] = orig - step;
            const Real fm = eval(work);
            work[ti].data[idx] = orig;
            const Real numeric = (fp - fm) / (2 * step);
            const Real an = analytic[ti].data[idx];
            const Real rel = std::abs(an - numeric) /
                             std::max(Real(1), std::max(std::abs(an), std::abs(numeric)));
            ++rep.checked;
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_input = "input" + std::to_string(ti);
                rep.worst_index = idx;
            }
        }
    }
    rep.pass = rep.max_rel_error <= tol;
    return rep;
}

}  // namespace vig
