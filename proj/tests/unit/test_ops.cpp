#include <cmath>
#include <limits>
#include <vector>

#include "../support/gradcheck.hpp"
#include "doctest.h"
#include "icmlm/nn.hpp"
#include "icmlm/ops.hpp"

using namespace icmlm;
using icmlm::testing::check_gradients;
using icmlm::testing::worst;
using P = Parameter<double>;

namespace {

P rand_param(const char* name, Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-scale, scale);
  return P(name, std::move(t));
}

// Random fixed weights so a non-scalar output becomes a scalar loss with
// non-uniform upstream gradients.
ag::Var<double> weighted_sum(ag::Graph<double>& g, ag::Var<double> y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor<double> w(y.shape());
  for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
  return ag::sum(ag::mul(y, g.constant(std::move(w))));
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("gradient: matmul with every transpose combination") {
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      P a = rand_param("a", ta ? Shape{4, 3} : Shape{3, 4}, 1);
      P b = rand_param("b", tb ? Shape{5, 4} : Shape{4, 5}, 2);
      auto errs = check_gradients({&a, &b}, [&](ag::Graph<double>& g) {
        return weighted_sum(g, ag::matmul(g.param(a), g.param(b), ta != 0, tb != 0));
      });
      CHECK(worst(errs) < kTol);
    }
  }
}

TEST_CASE("gradient: elementwise ops") {
  P a = rand_param("a", {3, 4}, 3);
  P b = rand_param("b", {3, 4}, 4);
  auto errs = check_gradients({&a, &b}, [&](ag::Graph<double>& g) {
    auto x = g.param(a), y = g.param(b);
    auto t = ag::add(ag::mul(x, y), ag::sub(x, ag::scale(y, 0.3)));
    t = ag::add_scaled(t, ag::relu(x), -1.7);
    return weighted_sum(g, t);
  });
  CHECK(worst(errs) < kTol);
}

TEST_CASE("gradient: add_bias with full and scalar bias") {
  P x = rand_param("x", {4, 6}, 5);
  P b = rand_param("b", {6}, 6);
  P s = rand_param("s", {1}, 7);
  auto errs = check_gradients({&x, &b, &s}, [&](ag::Graph<double>& g) {
    return weighted_sum(g, ag::add_bias(ag::add_bias(g.param(x), g.param(b)), g.param(s)));
  });
  CHECK(worst(errs) < kTol);
}

TEST_CASE("gradient: grouped layer norm") {
  P x = rand_param("x", {5, 12}, 8, 2.0);
  P gamma = rand_param("gamma", {12}, 9);
  P beta = rand_param("beta", {12}, 10);
  for (int groups : {1, 3}) {
    auto errs = check_gradients({&x, &gamma, &beta}, [&](ag::Graph<double>& g) {
      return weighted_sum(g, ag::layer_norm(g.param(x), g.param(gamma), g.param(beta), groups));
    });
    CHECK(worst(errs) < kTol);
  }
}

TEST_CASE("gradient: conv3x3 + sample norm at both strides") {
  for (int stride : {1, 2}) {
    P x = rand_param("x", {2, 3, 6, 6}, 11);
    P w = rand_param("w", {4, 27}, 12, 0.5);
    P b = rand_param("b", {4}, 13);
    P gamma = rand_param("gamma", {4}, 14);
    P beta = rand_param("beta", {4}, 15);
    auto errs = check_gradients({&x, &w, &b, &gamma, &beta}, [&](ag::Graph<double>& g) {
      auto y = ag::conv3x3(g.param(x), g.param(w), g.param(b), stride);
      y = ag::sample_norm(y, g.param(gamma), g.param(beta));
      return weighted_sum(g, y);
    });
    CHECK(worst(errs) < kTol);
  }
}

TEST_CASE("gradient: pooling and grid rows") {
  P x = rand_param("x", {2, 3, 4, 4}, 16);
  auto errs = check_gradients({&x}, [&](ag::Graph<double>& g) {
    auto v = g.param(x);
    return ag::add(weighted_sum(g, ag::global_avg_pool(v), 1), weighted_sum(g, ag::grid_rows(v), 2));
  });
  CHECK(worst(errs) < kTol);
}

TEST_CASE("gradient: slice, concat, gather, transpose, reshape") {
  P x = rand_param("x", {5, 4}, 17);
  P t = rand_param("t", {7, 4}, 18);
  const std::vector<int> ids = {3, 0, 3, 6};
  auto errs = check_gradients({&x, &t}, [&](ag::Graph<double>& g) {
    auto v = g.param(x);
    auto parts = ag::concat_rows<double>({ag::slice_rows(v, 1, 4), ag::gather_rows(g.param(t), ids)});
    auto y = ag::reshape(ag::transpose(parts), {2, 14});
    return weighted_sum(g, y);
  });
  CHECK(worst(errs) < kTol);
}

TEST_CASE("gradient: grouped attention products") {
  P q = rand_param("q", {3, 8}, 19);
  P k = rand_param("k", {5, 8}, 20);
  P v = rand_param("v", {5, 8}, 21);
  auto errs = check_gradients({&q, &k, &v}, [&](ag::Graph<double>& g) {
    auto s = ag::softmax(ag::grouped_matmul_nt(g.param(q), g.param(k), 2, 0.5));
    return weighted_sum(g, ag::grouped_matmul(s, g.param(v), 2));
  });
  CHECK(worst(errs) < kTol);
}

TEST_CASE("gradient: softmax family") {
  P x = rand_param("x", {4, 6}, 22, 3.0);
  auto errs = check_gradients({&x}, [&](ag::Graph<double>& g) {
    auto v = g.param(x);
    auto a = weighted_sum(g, ag::softmax(v), 1);
    auto b = weighted_sum(g, ag::log_softmax(v), 2);
    auto c = weighted_sum(g, ag::logsumexp(v), 3);
    return ag::add(ag::add(a, b), ag::mean(ag::reshape(c, {1})));
  });
  CHECK(worst(errs) < kTol);
}

TEST_CASE("gradient: cross-entropy losses") {
  P x = rand_param("x", {3, 5}, 23, 2.0);
  const std::vector<int> targets = {4, 0, 2};
  Tensor<double> labels({3, 5});
  labels.at(0, 1) = 0.5;
  labels.at(0, 3) = 0.5;
  labels.at(1, 0) = 1.0;
  labels.at(2, 2) = 0.25;
  labels.at(2, 4) = 0.75;
  auto errs = check_gradients({&x}, [&](ag::Graph<double>& g) {
    auto v = g.param(x);
    return ag::add(ag::sparse_cross_entropy(v, targets), ag::soft_cross_entropy(v, labels));
  });
  CHECK(worst(errs) < kTol);
}

TEST_CASE("gradient: encoder layer in both attention orders") {
  for (auto order : {nn::AttentionOrder::query_key, nn::AttentionOrder::key_query}) {
    Rng rng(24);
    nn::EncoderLayerConfig cfg{8, 2, 4, 16, 0.0, order};
    nn::EncoderLayer<double> layer("enc", cfg, rng);
    nn::ParamRefs<double> params;
    layer.collect(params);
    P z = rand_param("z", {6, 8}, 25);
    params.push_back(&z);
    auto errs = check_gradients(params, [&](ag::Graph<double>& g) {
      auto out = layer.forward(g, g.param(z), 2, 3, false, nullptr);
      return weighted_sum(g, out.rows);
    });
    for (const auto& e : errs) CHECK_MESSAGE(e.rel_error < kTol, e.name);
  }
}

TEST_CASE("encoder layer computes a query subset exactly as the full pass") {
  Rng rng(26);
  nn::EncoderLayerConfig cfg{8, 2, 4, 16, 0.0, nn::AttentionOrder::query_key};
  nn::EncoderLayer<double> layer("enc", cfg, rng);
  P z = rand_param("z", {6, 8}, 27);
  ag::Graph<double> g(false);
  auto full = layer.forward(g, g.param(z), false, nullptr);
  auto part = layer.forward(g, g.param(z), 4, 5, false, nullptr);
  for (int c = 0; c < 8; ++c) CHECK(part.rows.value().at(0, c) == doctest::Approx(full.rows.value().at(4, c)));
  CHECK(part.attention.value().shape() == Shape{2, 1, 6});
}

TEST_CASE("logsumexp is stable for large magnitudes") {
  const std::vector<double> row = {1000.0, 1000.0, -1000.0};
  const double v = ag::logsumexp_value<double>(row);
  CHECK(v == doctest::Approx(1000.0 + std::log(2.0)));
  std::vector<float> f = {-1e4f, -1e4f};
  CHECK(std::isfinite(ag::logsumexp_value<float>(f)));
  std::vector<float> s = {88.0f, 89.0f, 90.0f};
  ag::softmax_inplace<float>(s);
  CHECK(s[0] + s[1] + s[2] == doctest::Approx(1.0f));
}

TEST_CASE("dropout is the identity at p = 0 and rescales kept units otherwise") {
  Rng rng(1);
  ag::Graph<double> g(true);
  Tensor<double> ones({1000}, 1.0);
  auto x = g.constant(ones);
  CHECK(ag::dropout(x, 0.0, rng).value() == ones);
  const auto& d = ag::dropout(x, 0.25, rng).value();
  int kept = 0;
  for (double v : d.values()) {
    if (v != 0.0) {
      CHECK(v == doctest::Approx(1.0 / 0.75));
      ++kept;
    }
  }
  CHECK(kept > 650);
  CHECK(kept < 850);
}
