#pragma once

// Central finite-difference verification of analytic gradients (64-bit).

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "icmlm/autograd.hpp"

namespace icmlm::testing {

struct GroupError {
  std::string name;
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double analytic_norm = 0.0;
};

inline constexpr double kVanishing = 1e-6;

using LossFn = std::function<ag::Var<double>(ag::Graph<double>&)>;

inline double loss_value(const LossFn& fn) {
  ag::Graph<double> g(false);
  return fn(g).value()[0];
}

// Compares d(loss)/d(param) for every element of every parameter.
inline std::vector<GroupError> check_gradients(const std::vector<Parameter<double>*>& params,
                                               const LossFn& fn, double step = 1e-5) {
  for (auto* p : params) p->zero_grad();
  {
    ag::Graph<double> g(true);
    g.backward(fn(g));
  }
  const double base = loss_value(fn);
  std::vector<GroupError> out;
  for (auto* p : params) {
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      double numeric = 0.0;
      // A ReLU kink inside [orig - h, orig + h] shows up as disagreeing
      // one-sided slopes; shrink h until they agree.
      for (double h = step; h >= step * 1e-2; h /= 10.0) {
        p->value[i] = orig + h;
        const double up = loss_value(fn);
        p->value[i] = orig - h;
        const double down = loss_value(fn);
        p->value[i] = orig;
        numeric = (up - down) / (2.0 * h);
        const double fwd = (up - base) / h, bwd = (base - down) / h;
        if (std::abs(fwd - bwd) <= 1e-3 * std::max({std::abs(fwd), std::abs(bwd), 1e-4})) break;
      }
      const double analytic = p->grad[i];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    // Gradients that vanish analytically (e.g. a key bias under softmax shift
    // invariance) leave only finite-difference noise; compare those absolutely.
    const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
    const double err = scale < kVanishing ? std::sqrt(diff2) / kVanishing * 1e-4
                                          : std::sqrt(diff2) / scale;
    out.push_back({p->name, err, std::sqrt(a2)});
  }
  return out;
}

inline double worst(const std::vector<GroupError>& errs) {
  double w = 0.0;
  for (const auto& e : errs) w = std::max(w, e.rel_error);
  return w;
}

}  // namespace icmlm::testing
