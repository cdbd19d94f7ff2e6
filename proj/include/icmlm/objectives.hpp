#pragma once

#include <span>
#include <vector>

#include "icmlm/ops.hpp"

namespace icmlm::objectives {

struct LossReport {
  long step = 0;
  double l_tp = 0.0;
  double l_mlm = 0.0;
  double l_total = 0.0;
  double lambda = 0.0;
  int batch_size = 0;
  bool tp_active = false;
  double lr = 0.0;
};

// Mean over rows of -sum_k y_k log softmax(logits)_k; every label row must sum to 1.
template <class T>
ag::Var<T> tp_loss(ag::Var<T> logits, const Tensor<T>& labels);

// Mean over rows of -log softmax(logits)[target], computed in log-softmax form.
template <class T>
ag::Var<T> mlm_loss(ag::Var<T> logits, std::span<const int> targets);

// l_mlm + lambda * l_tp.
template <class T>
ag::Var<T> combined_loss(ag::Var<T> l_mlm, ag::Var<T> l_tp, T lambda);

inline double combined_loss(double l_mlm, double l_tp, double lambda) { return l_mlm + lambda * l_tp; }

// Value-level forms over explicit probability rows [n, |V|].
double mlm_loss_from_probs(const Tensor<double>& probs, std::span<const int> targets);

}  // namespace icmlm::objectives
