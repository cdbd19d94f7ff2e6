#include <cmath>

#include "doctest.h"
#include "icmlm/objectives.hpp"
#include "icmlm/ops.hpp"

using namespace icmlm;
using namespace icmlm::objectives;

TEST_CASE("tp loss") {
  ag::Graph<double> g(false);
  auto uniform = g.constant(Tensor<double>({1, 4}));
  CHECK(tp_loss(uniform, Tensor<double>({1, 4}, std::vector<double>{1, 0, 0, 0})).value()[0] ==
        doctest::Approx(std::log(4.0)));
  CHECK(tp_loss(uniform, Tensor<double>({1, 4}, std::vector<double>{0.5, 0, 0.5, 0})).value()[0] ==
        doctest::Approx(std::log(4.0)));

  // Label equal to softmax(logits): the loss is the entropy.
  Tensor<double> z({1, 3}, std::vector<double>{0.3, -1.2, 2.0});
  std::vector<double> p(z.values().begin(), z.values().end());
  ag::softmax_inplace(std::span<double>(p));
  double entropy = 0;
  for (double v : p) entropy -= v * std::log(v);
  CHECK(tp_loss(g.constant(z), Tensor<double>({1, 3}, p)).value()[0] == doctest::Approx(entropy).epsilon(1e-12));

  CHECK_THROWS_AS(tp_loss(uniform, Tensor<double>({1, 4}, std::vector<double>{0.5, 0, 0, 0})), ContractViolation);
}

TEST_CASE("mlm loss") {
  ag::Graph<double> g(false);
  std::vector<int> t = {7};
  CHECK(mlm_loss(g.constant(Tensor<double>({1, 100})), std::span<const int>(t)).value()[0] ==
        doctest::Approx(std::log(100.0)));

  Tensor<double> probs({2, 3}, std::vector<double>{0, 1, 0, 0.2, 0.3, 0.5});
  std::vector<int> targets = {1, 2};
  CHECK(mlm_loss_from_probs(probs, targets) == doctest::Approx(-std::log(0.5) / 2));

  Tensor<double> z({2, 3}, std::vector<double>{0.1, 0.5, -0.3, 1.0, 0.0, 2.0});
  const double both = mlm_loss(g.constant(z), std::span<const int>(targets)).value()[0];
  std::vector<int> a = {1}, b = {2};
  const double la = mlm_loss(g.constant(Tensor<double>({1, 3}, std::vector<double>{0.1, 0.5, -0.3})),
                             std::span<const int>(a)).value()[0];
  const double lb = mlm_loss(g.constant(Tensor<double>({1, 3}, std::vector<double>{1.0, 0.0, 2.0})),
                             std::span<const int>(b)).value()[0];
  CHECK(both == doctest::Approx((la + lb) / 2).epsilon(1e-14));

  std::vector<int> bad = {5};
  CHECK_THROWS_AS(mlm_loss(g.constant(Tensor<double>({1, 3})), std::span<const int>(bad)), ContractViolation);
}

TEST_CASE("combined loss") {
  CHECK(combined_loss(2.0, 1.0, 1.0) == 3.0);
  CHECK(combined_loss(2.0, 1.0, 0.0) == 2.0);

  Parameter<double> tp("tp", Tensor<double>({1, 4}, std::vector<double>{0.2, -0.1, 0.4, 0.0}));
  Parameter<double> mlm("mlm", Tensor<double>({1, 5}, std::vector<double>{0.3, 0.1, -0.2, 0.0, 0.5}));
  tp.zero_grad();
  mlm.zero_grad();
  ag::Graph<double> g(true);
  std::vector<int> t = {2};
  auto l = combined_loss(mlm_loss(g.param(mlm), std::span<const int>(t)),
                         tp_loss(g.param(tp), Tensor<double>({1, 4}, std::vector<double>{0.5, 0.5, 0, 0})), 0.0);
  g.backward(l);
  for (double v : tp.grad.values()) CHECK(v == 0.0);
  bool any = false;
  for (double v : mlm.grad.values()) any |= v != 0.0;
  CHECK(any);
}
