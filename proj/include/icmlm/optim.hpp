#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "icmlm/autograd.hpp"

namespace icmlm::optim {

enum class Kind { sgd, adam };

struct Options {
  Kind kind = Kind::sgd;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;  // L2 added to the gradient (SGD) / decoupled (Adam)
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

enum class Schedule { constant, cosine, step };

// Learning-rate multiplier at `step` of a `total`-step schedule.
inline double schedule_factor(Schedule s, long step, long total, long step_every = 0, double gamma = 0.1) {
  if (total <= 0) return 1.0;
  switch (s) {
    case Schedule::constant: return 1.0;
    case Schedule::cosine: {
      const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
      return 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
    }
    case Schedule::step:
      return step_every > 0 ? std::pow(gamma, static_cast<double>(step / step_every)) : 1.0;
  }
  return 1.0;
}

// First/second moment buffers keyed by parameter name, so state survives
// checkpointing independently of parameter order.
template <class T>
class Optimizer {
 public:
  explicit Optimizer(Options opt = {}) : opt_(opt) {}

  const Options& options() const { return opt_; }
  long steps_taken() const { return t_; }
  void set_steps_taken(long t) { t_ = t; }

  // Applies one update with learning rate lr to every trainable parameter.
  void step(const std::vector<Parameter<T>*>& params, double lr) {
    ++t_;
    for (Parameter<T>* p : params) {
      if (!p->trainable) continue;
      if (p->grad.shape() != p->value.shape()) continue;  // never touched by a graph
      auto& m = slot(first_, *p);
      if (opt_.kind == Kind::sgd) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
          const double g = p->grad[i] + opt_.weight_decay * p->value[i];
          m[i] = static_cast<T>(opt_.momentum * m[i] + g);
          p->value[i] = static_cast<T>(p->value[i] - lr * m[i]);
        }
      } else {
        auto& v = slot(second_, *p);
        const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < p->value.size(); ++i) {
          const double g = p->grad[i];
          m[i] = static_cast<T>(opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g);
          v[i] = static_cast<T>(opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g);
          const double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
          p->value[i] = static_cast<T>(p->value[i] - lr * (upd + opt_.weight_decay * p->value[i]));
        }
      }
    }
  }

  std::map<std::string, Tensor<T>>& first_moments() { return first_; }
  std::map<std::string, Tensor<T>>& second_moments() { return second_; }
  const std::map<std::string, Tensor<T>>& first_moments() const { return first_; }
  const std::map<std::string, Tensor<T>>& second_moments() const { return second_; }

 private:
  static Tensor<T>& slot(std::map<std::string, Tensor<T>>& bank, const Parameter<T>& p) {
    auto it = bank.find(p.name);
    if (it == bank.end() || it->second.shape() != p.value.shape()) {
      it = bank.insert_or_assign(p.name, Tensor<T>(p.value.shape())).first;
    }
    return it->second;
  }

  Options opt_;
  long t_ = 0;
  std::map<std::string, Tensor<T>> first_;
  std::map<std::string, Tensor<T>> second_;
};

inline void zero_grads(const auto& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace icmlm::optim
