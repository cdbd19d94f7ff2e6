#include "icmlm/objectives.hpp"

#include <cmath>
#include <string>

namespace icmlm::objectives {

template <class T>
ag::Var<T> tp_loss(ag::Var<T> logits, const Tensor<T>& labels) {
  ICMLM_REQUIRE(labels.rank() == 2 && labels.shape() == logits.shape(), "labels must match logits [B, K]");
  for (int r = 0; r < labels.dim(0); ++r) {
    double s = 0.0;
    for (T v : labels.row(r)) {
      ICMLM_REQUIRE(v >= T(0), "label entries must be nonnegative");
      s += v;
    }
    ICMLM_REQUIRE(std::abs(s - 1.0) <= 1e-6, "label row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
  return ag::soft_cross_entropy(logits, labels);
}

template <class T>
ag::Var<T> mlm_loss(ag::Var<T> logits, std::span<const int> targets) {
  const int v = logits.dim(-1);
  for (int t : targets) ICMLM_REQUIRE(t >= 0 && t < v, "target id " + std::to_string(t) + " out of range");
  return ag::sparse_cross_entropy(logits, targets);
}

template <class T>
ag::Var<T> combined_loss(ag::Var<T> l_mlm, ag::Var<T> l_tp, T lambda) {
  ICMLM_REQUIRE(lambda >= T(0), "lambda must be >= 0");
  return ag::add_scaled(l_mlm, l_tp, lambda);
}

double mlm_loss_from_probs(const Tensor<double>& probs, std::span<const int> targets) {
  ICMLM_REQUIRE(probs.rank() == 2 && probs.dim(0) == static_cast<int>(targets.size()), "one target per row");
  double total = 0.0;
  for (int r = 0; r < probs.dim(0); ++r) {
    ICMLM_REQUIRE(targets[r] >= 0 && targets[r] < probs.dim(1), "target id out of range");
    double s = 0.0;
    for (double p : probs.row(r)) s += p;
    ICMLM_REQUIRE(std::abs(s - 1.0) <= 1e-6, "probability row does not sum to 1");
    total -= std::log(probs.at(r, targets[r]));
  }
  return total / probs.dim(0);
}

template ag::Var<float> tp_loss<float>(ag::Var<float>, const Tensor<float>&);
template ag::Var<double> tp_loss<double>(ag::Var<double>, const Tensor<double>&);
template ag::Var<float> mlm_loss<float>(ag::Var<float>, std::span<const int>);
template ag::Var<double> mlm_loss<double>(ag::Var<double>, std::span<const int>);
template ag::Var<float> combined_loss<float>(ag::Var<float>, ag::Var<float>, float);
template ag::Var<double> combined_loss<double>(ag::Var<double>, ag::Var<double>, double);

}  // namespace icmlm::objectives
