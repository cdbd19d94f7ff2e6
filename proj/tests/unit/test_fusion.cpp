#include <cmath>

#include "doctest.h"
#include "icmlm/fusion.hpp"
#include "icmlm/objectives.hpp"
#include "icmlm/ops.hpp"

using namespace icmlm;
using namespace icmlm::fusion;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

double row_sum(const Tensor<double>& t, int r) {
  double s = 0;
  for (double v : t.row(r)) s += v;
  return s;
}

AttFcConfig small_att(int heads = 2, int d_z = 4) {
  AttFcConfig c;
  c.d_x = 6;
  c.d_w = 5;
  c.d_z = d_z;
  c.heads = heads;
  c.fc_hidden_layers = 1;
  c.fc_hidden_dim = 7;
  return c;
}

}  // namespace

TEST_CASE("tp head output and loss") {
  Rng rng(1);
  TpHead<double> tp({8, 4, 2, 6}, rng);
  ag::Graph<double> g(false);
  auto logits = tp.forward(g, g.constant(random_tensor({3, 8, 4, 4}, 2, 0.0, 1.0)));
  REQUIRE(logits.shape() == Shape{3, 4});
  auto p = ag::softmax(logits);
  for (int r = 0; r < 3; ++r) CHECK(row_sum(p.value(), r) == doctest::Approx(1.0).epsilon(1e-6));

  Tensor<double> uniform({3, 4}, 0.25);
  const double l0 = objectives::tp_loss(logits, uniform).value()[0];
  CHECK(std::abs(l0 - std::log(4.0)) < 0.1);
  Tensor<double> shift({3, 4}, 5.0);
  const double l1 = objectives::tp_loss(ag::add(logits, g.constant(shift)), uniform).value()[0];
  CHECK(l1 == doctest::Approx(l0).epsilon(1e-12));
}

TEST_CASE("att scores") {
  Rng rng(3);
  AttFcHead<double> head(small_att(1, 2), rng);
  ag::Graph<double> g(false);
  SUBCASE("hand-computed 2 cells x 2 tokens") {
    auto xt = g.constant(Tensor<double>({2, 2}, std::vector<double>{1, 2, 0, 3}));
    auto wt = g.constant(Tensor<double>({2, 2}, std::vector<double>{4, 0, 1, 1}));
    const auto& s = head.scores(xt, wt).value();
    REQUIRE(s.shape() == Shape{1, 2, 2});
    const double r = 1.0 / std::sqrt(2.0);
    CHECK(s[0] == doctest::Approx(4 * r));
    CHECK(s[1] == doctest::Approx(3 * r));
    CHECK(s[2] == doctest::Approx(0.0));
    CHECK(s[3] == doctest::Approx(3 * r));
  }
  SUBCASE("zero projections give zero scores") {
    auto xt = g.constant(Tensor<double>({3, 2}));
    auto wt = g.constant(random_tensor({4, 2}, 5, 0.0, 1.0));
    for (double v : head.scores(xt, wt).value().values()) CHECK(v == 0.0);
  }
  SUBCASE("d_z scaling") {
    Rng r2(3);
    AttFcHead<double> wide(small_att(1, 4), r2);
    auto xt2 = g.constant(Tensor<double>({1, 2}, std::vector<double>{1, 2}));
    auto wt2 = g.constant(Tensor<double>({1, 2}, std::vector<double>{3, 1}));
    auto xt4 = g.constant(Tensor<double>({1, 4}, std::vector<double>{1, 2, 0, 0}));
    auto wt4 = g.constant(Tensor<double>({1, 4}, std::vector<double>{3, 1, 0, 0}));
    const double a = head.scores(xt2, wt2).value()[0], b = wide.scores(xt4, wt4).value()[0];
    CHECK(b / a == doctest::Approx(std::sqrt(0.5)));
  }
  SUBCASE("projected features are nonnegative") {
    auto xt = head.project_visual(g, g.constant(random_tensor({5, 6}, 7)));
    auto wt = head.project_text(g, g.constant(random_tensor({3, 5}, 8)));
    for (double v : xt.value().values()) CHECK(v >= 0.0);
    for (double v : head.scores(xt, wt).value().values()) CHECK(v >= 0.0);
  }
}

TEST_CASE("att pool") {
  Rng rng(4);
  AttFcHead<double> head(small_att(1, 4), rng);
  ag::Graph<double> g(false);
  SUBCASE("single token") {
    auto s = g.constant(random_tensor({1, 5, 1}, 9));
    const auto& si = single_head_scores(s).value();
    for (int i = 0; i < 5; ++i) CHECK(si[i] == s.value()[i]);
  }
  SUBCASE("zero row gives ln 2") {
    auto s = g.constant(Tensor<double>({1, 3, 2}));
    for (double v : single_head_scores(s).value().values()) CHECK(v == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("uniform scores pool to the spatial mean") {
    auto x = g.constant(random_tensor({4, 6}, 10));
    auto pooled = head.pool(g, g.constant(Tensor<double>({1, 4, 3}, 0.7)), x);
    for (double v : pooled.p_att.value().values()) CHECK(v == doctest::Approx(0.25));
    for (int j = 0; j < 6; ++j) {
      double mean = 0;
      for (int i = 0; i < 4; ++i) mean += x.value().at(i, j) / 4;
      CHECK(pooled.x_hat.value()[j] == doctest::Approx(mean));
    }
  }
  SUBCASE("one head with unit averaging equals the single-head path") {
    head.sigma_h.value.fill(1.0);
    head.b_h.value.fill(0.0);
    auto s = g.constant(random_tensor({1, 6, 3}, 11, -3, 3));
    auto pooled = head.pool(g, s, g.constant(random_tensor({6, 6}, 12)));
    CHECK(pooled.cell_scores.value().storage() == single_head_scores(s).value().storage());
  }
  SUBCASE("p_att is a distribution and x_hat is in the convex hull") {
    Rng r2(5);
    AttFcHead<double> multi(small_att(3, 4), r2);
    for (int trial = 0; trial < 20; ++trial) {
      auto x = g.constant(random_tensor({9, 6}, 100 + trial));
      auto out = multi.forward(g, x, {}, g.constant(random_tensor({4, 5}, 200 + trial)),
                               g.constant(random_tensor({11, 5}, 300)));
      double sum = 0;
      for (double v : out.pool.p_att.value().values()) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
      for (int j = 0; j < 6; ++j) {
        double lo = 1e9, hi = -1e9;
        for (int i = 0; i < 9; ++i) {
          lo = std::min(lo, x.value().at(i, j));
          hi = std::max(hi, x.value().at(i, j));
        }
        CHECK(out.pool.x_hat.value()[j] >= lo - 1e-12);
        CHECK(out.pool.x_hat.value()[j] <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("fc classify") {
  Rng rng(6);
  AttFcHead<double> head(small_att(), rng);
  ag::Graph<double> g(false);
  auto table = g.constant(random_tensor({9, 5}, 13));
  auto logits = head.classify(g, g.constant(random_tensor({1, 6}, 14)), table);
  REQUIRE(logits.shape() == Shape{1, 9});
  CHECK(row_sum(ag::softmax(logits).value(), 0) == doctest::Approx(1.0).epsilon(1e-6));

  head.fc_out.weight.value.fill(0.0);
  head.fc_out.bias.value.fill(0.0);
  auto p = ag::softmax(head.classify(g, g.constant(random_tensor({1, 6}, 15)), table)).value();
  for (double v : p.values()) CHECK(v == doctest::Approx(1.0 / 9));

  // fc output equal to V_k against a near-orthogonal table.
  Tensor<double> eye({5, 5});
  for (int i = 0; i < 5; ++i) eye.at(i, i) = 1.0;
  head.fc_out.bias.value = Tensor<double>({5}, std::vector<double>{0, 0, 3, 0, 0});
  auto scores = head.classify(g, g.constant(random_tensor({1, 6}, 16)), g.constant(eye)).value();
  int best = 0;
  for (int k = 1; k < 5; ++k)
    if (scores[k] > scores[best]) best = k;
  CHECK(best == 2);
}

TEST_CASE("tfm head") {
  TfmConfig cfg;
  cfg.d_x = 6;
  cfg.d_w = 8;
  cfg.grid_cells = 64;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.ff_dim = 16;
  Rng rng(7);
  TfmHead<double> head(cfg, rng);
  ag::Graph<double> g(false);
  auto table = g.constant(random_tensor({12, 8}, 17));
  auto w = g.constant(random_tensor({7, 8}, 18));

  auto vis = head.encode_visual(g, g.constant(random_tensor({64, 6}, 19)));
  auto out = head.forward(g, &vis, w, 3, table, false, nullptr);
  CHECK(out.attention.shape() == Shape{2, 1, 71});
  CHECK(row_sum(ag::softmax(out.logits).value(), 0) == doctest::Approx(1.0).epsilon(1e-6));
  const auto cells = tfm_attention_cells(Tensor<float>(Shape{2, 1, 71}, std::vector<float>(
                                             out.attention.value().storage().begin(),
                                             out.attention.value().storage().end())),
                                         64);
  double sum = 0;
  for (double v : cells) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

  auto zero = head.encode_visual(g, g.constant(Tensor<double>({64, 6})));
  const auto with_zero = head.forward(g, &zero, w, 3, table, false, nullptr).logits.value();
  const auto text_only = head.forward(g, nullptr, w, 3, table, false, nullptr).logits.value();
  for (std::size_t i = 0; i < text_only.size(); ++i) CHECK(with_zero[i] == doctest::Approx(text_only[i]).epsilon(1e-12));

  CHECK_THROWS_AS(head.forward(g, &vis, w, 7, table, false, nullptr), ContractViolation);
}
