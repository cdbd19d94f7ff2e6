#include "icmlm/nn.hpp"

#include <cmath>
#include <limits>

namespace icmlm::nn {

template <class T>
Tensor<T> uniform_fan_in(Shape shape, int fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (T& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Tensor<T> he_normal(Shape shape, int fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (T& v : t.values()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <class T>
Linear<T>::Linear(const std::string& name, int in, int out, bool bias, Rng& rng)
    : weight(name + ".weight", uniform_fan_in<T>({in, out}, in, rng)), has_bias(bias) {
  if (has_bias) this->bias = Parameter<T>(name + ".bias", uniform_fan_in<T>({out}, in, rng));
}

template <class T>
ag::Var<T> Linear<T>::operator()(ag::Graph<T>& g, ag::Var<T> x) {
  ag::Var<T> y = ag::matmul(x, g.param(weight));
  return has_bias ? ag::add_bias(y, g.param(bias)) : y;
}

template <class T>
void Linear<T>::collect(ParamRefs<T>& out) {
  out.push_back(&weight);
  if (has_bias) out.push_back(&bias);
}

template <class T>
LayerNorm<T>::LayerNorm(const std::string& name, int width, int groups_)
    : gamma(name + ".gamma", Tensor<T>({width}, T(1))),
      beta(name + ".beta", Tensor<T>({width}, T(0))),
      groups(groups_) {}

template <class T>
ag::Var<T> LayerNorm<T>::operator()(ag::Graph<T>& g, ag::Var<T> x) {
  return ag::layer_norm(x, g.param(gamma), g.param(beta), groups);
}

template <class T>
void LayerNorm<T>::collect(ParamRefs<T>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

template <class T>
ConvBlock<T>::ConvBlock(const std::string& name, int in_channels, int out_channels, int stride_,
                        Rng& rng)
    : stride(stride_),
      weight(name + ".conv.weight",
             he_normal<T>({out_channels, in_channels * 9}, in_channels * 9, rng)),
      bias(name + ".conv.bias", Tensor<T>({out_channels}, T(0))),
      gamma(name + ".norm.gamma", Tensor<T>({out_channels}, T(1))),
      beta(name + ".norm.beta", Tensor<T>({out_channels}, T(0))) {}

template <class T>
ag::Var<T> ConvBlock<T>::operator()(ag::Graph<T>& g, ag::Var<T> x) {
  ag::Var<T> y = ag::conv3x3(x, g.param(weight), g.param(bias), stride);
  y = ag::sample_norm(y, g.param(gamma), g.param(beta));
  return ag::relu(y);
}

template <class T>
void ConvBlock<T>::collect(ParamRefs<T>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
  out.push_back(&gamma);
  out.push_back(&beta);
}

template <class T>
EncoderLayer<T>::EncoderLayer(const std::string& name, const EncoderLayerConfig& cfg, Rng& rng)
    : cfg_(cfg),
      q_(name + ".attn.query", cfg.d_model, cfg.n_heads * cfg.head_dim, true, rng),
      k_(name + ".attn.key", cfg.d_model, cfg.n_heads * cfg.head_dim, true, rng),
      v_(name + ".attn.value", cfg.d_model, cfg.n_heads * cfg.head_dim, true, rng),
      o_(name + ".attn.out", cfg.n_heads * cfg.head_dim, cfg.d_model, true, rng),
      ln1_(name + ".ln1", cfg.d_model),
      ff1_(name + ".ff1", cfg.d_model, cfg.ff_dim, true, rng),
      ff2_(name + ".ff2", cfg.ff_dim, cfg.d_model, true, rng),
      ln2_(name + ".ln2", cfg.d_model) {}

template <class T>
typename EncoderLayer<T>::Output EncoderLayer<T>::forward(ag::Graph<T>& g, ag::Var<T> z,
                                                          int query_begin, int query_end,
                                                          bool training, Rng* rng,
                                                          std::span<const std::uint8_t> key_mask) {
  const int seq = z.dim(0);
  ICMLM_REQUIRE(z.shape().size() == 2 && z.dim(1) == cfg_.d_model,
                "encoder input must be [S, d_model]");
  const bool all_rows = query_begin == 0 && query_end == seq;
  ag::Var<T> zq = all_rows ? z : ag::slice_rows(z, query_begin, query_end);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(cfg_.head_dim));

  ag::Var<T> row_side;
  ag::Var<T> all_side;
  if (cfg_.order == AttentionOrder::query_key) {
    row_side = q_(g, zq);
    all_side = k_(g, z);
  } else {
    row_side = k_(g, zq);
    all_side = q_(g, z);
  }
  ag::Var<T> values = v_(g, z);
  ag::Var<T> logits = ag::grouped_matmul_nt(row_side, all_side, cfg_.n_heads, inv_sqrt);
  if (!key_mask.empty()) {
    ICMLM_REQUIRE(static_cast<int>(key_mask.size()) == seq, "key mask must have one entry per row");
    const int rows = query_end - query_begin;
    Tensor<T> bias({cfg_.n_heads, rows, seq});
    for (int h = 0; h < cfg_.n_heads * rows; ++h) {
      for (int j = 0; j < seq; ++j) {
        if (key_mask[static_cast<std::size_t>(j)]) bias[static_cast<std::size_t>(h) * seq + j] = -std::numeric_limits<T>::infinity();
      }
    }
    logits = ag::add(logits, g.constant(std::move(bias)));
  }
  ag::Var<T> probs = ag::softmax(logits);
  ag::Var<T> heads = ag::grouped_matmul(probs, values, cfg_.n_heads);
  ag::Var<T> attn = o_(g, heads);

  const T p = static_cast<T>(training ? cfg_.dropout : 0.0);
  if (p > T(0)) ICMLM_REQUIRE(rng != nullptr, "training-mode dropout needs an rng");
  if (p > T(0)) attn = ag::dropout(attn, p, *rng);
  ag::Var<T> h = ln1_(g, ag::add(zq, attn));
  ag::Var<T> f = ff2_(g, ag::relu(ff1_(g, h)));
  if (p > T(0)) f = ag::dropout(f, p, *rng);
  ag::Var<T> out = ln2_(g, ag::add(h, f));
  return {out, probs};
}

template <class T>
void EncoderLayer<T>::collect(ParamRefs<T>& out) {
  q_.collect(out);
  k_.collect(out);
  v_.collect(out);
  o_.collect(out);
  ln1_.collect(out);
  ff1_.collect(out);
  ff2_.collect(out);
  ln2_.collect(out);
}

template Tensor<float> uniform_fan_in<float>(Shape, int, Rng&);
template Tensor<double> uniform_fan_in<double>(Shape, int, Rng&);
template Tensor<float> he_normal<float>(Shape, int, Rng&);
template Tensor<double> he_normal<double>(Shape, int, Rng&);
template class Linear<float>;
template class Linear<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class ConvBlock<float>;
template class ConvBlock<double>;
template class EncoderLayer<float>;
template class EncoderLayer<double>;

}  // namespace icmlm::nn
