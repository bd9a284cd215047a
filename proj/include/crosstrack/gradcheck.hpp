#pragma once

// Central-difference gradient verification for tape-recorded functions.

#include <functional>
#include <string>
#include <vector>

#include "crosstrack/tensor.hpp"

namespace crosstrack {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int worst_input = -1;
  long worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

// f builds a scalar loss on the given tape from the given leaves. It must be
// a pure function of the leaf values (re-evaluated many times at perturbed
// points) and twice differentiable at `points`.
template <typename S>
using TapeFn =
    std::function<Tensor<S>(Tape<S>&, const std::vector<Tensor<S>>&)>;

template <typename S>
GradCheckReport gradcheck(const TapeFn<S>& f, const std::vector<Tensor<S>>& points,
                          double eps = 1e-5, double tol = 1e-6) {
  auto eval = [&](const std::vector<Tensor<S>>& pts) {
    Tape<S> tape;
    std::vector<Tensor<S>> leaves;
    leaves.reserve(pts.size());
    for (const auto& p : pts) leaves.push_back(tape.leaf(p, false));
    return double(f(tape, leaves).item());
  };

  // analytic gradients
  std::vector<FlatArray<double>> analytic;
  {
    Tape<S> tape;
    std::vector<Tensor<S>> leaves;
    for (const auto& p : points) leaves.push_back(tape.leaf(p, true));
    Tensor<S> loss = f(tape, leaves);
    tape.backward(loss);
    for (const auto& l : leaves) analytic.push_back(l.grad().template cast<double>());
  }

  GradCheckReport rep;
  std::vector<Tensor<S>> work = points;
  for (size_t pi = 0; pi < points.size(); ++pi) {
    const FlatArray<S>& base = points[pi].values();
    for (long i = 0; i < base.size(); ++i) {
      FlatArray<S> lo = base, hi = base;
      lo[i] -= S(eps);
      hi[i] += S(eps);
      work[pi] = Tensor<S>(points[pi].shape(), std::move(hi));
      const double f_hi = eval(work);
      work[pi] = Tensor<S>(points[pi].shape(), std::move(lo));
      const double f_lo = eval(work);
      work[pi] = points[pi];
      const double num = (f_hi - f_lo) / (2.0 * eps);
      const double ana = analytic[pi][i];
      const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
      const double rel = std::abs(ana - num) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = int(pi);
        rep.worst_index = i;
        rep.analytic_at_worst = ana;
        rep.numeric_at_worst = num;
      }
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

// Evaluates f once and reports the smallest distance to a relu/min/max/clamp
// tie seen on the tape; generators use it to enforce the differentiability
// precondition before running a finite-difference comparison.
template <typename S>
double kink_margin(const TapeFn<S>& f, const std::vector<Tensor<S>>& points) {
  Tape<S> tape;
  std::vector<Tensor<S>> leaves;
  for (const auto& p : points) leaves.push_back(tape.leaf(p, false));
  (void)f(tape, leaves);
  return tape.min_kink_margin();
}

}  // namespace crosstrack
