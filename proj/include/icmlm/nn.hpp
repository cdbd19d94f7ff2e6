#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "icmlm/autograd.hpp"
#include "icmlm/ops.hpp"
#include "icmlm/rng.hpp"

namespace icmlm::nn {

template <class T>
using ParamRefs = std::vector<Parameter<T>*>;

// PyTorch-style default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Tensor<T> uniform_fan_in(Shape shape, int fan_in, Rng& rng);
// He-normal for ReLU stacks.
template <class T>
Tensor<T> he_normal(Shape shape, int fan_in, Rng& rng);

// y = x W + b with W stored [in, out].
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, bool bias, Rng& rng);

  ag::Var<T> operator()(ag::Graph<T>& g, ag::Var<T> x);
  void collect(ParamRefs<T>& out);

  int in_features() const { return weight.value.dim(0); }
  int out_features() const { return weight.value.dim(1); }

  Parameter<T> weight;
  Parameter<T> bias;
  bool has_bias = false;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, int width, int groups = 1);

  ag::Var<T> operator()(ag::Graph<T>& g, ag::Var<T> x);
  void collect(ParamRefs<T>& out);

  Parameter<T> gamma;
  Parameter<T> beta;
  int groups = 1;
};

// 3x3 conv (padding 1) -> per-sample norm -> ReLU.
template <class T>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(const std::string& name, int in_channels, int out_channels, int stride, Rng& rng);

  ag::Var<T> operator()(ag::Graph<T>& g, ag::Var<T> x);
  void collect(ParamRefs<T>& out);

  int out_channels() const { return weight.value.dim(0); }
  int stride = 1;

  Parameter<T> weight;
  Parameter<T> bias;
  Parameter<T> gamma;
  Parameter<T> beta;
};

// Which product feeds the attention softmax. query_key is softmax(Q K^T)V;
// key_query is the transposed-role variant softmax(K Q^T)V.
enum class AttentionOrder { query_key, key_query };

struct EncoderLayerConfig {
  int d_model = 64;
  int n_heads = 4;
  int head_dim = 16;
  int ff_dim = 256;
  double dropout = 0.1;
  AttentionOrder order = AttentionOrder::query_key;
};

// Post-norm transformer encoder layer: multi-head attention, residual,
// dropout, LayerNorm, then a ReLU feed-forward block with the same wrapping.
template <class T>
class EncoderLayer {
 public:
  struct Output {
    ag::Var<T> rows;       // [query_end - query_begin, d_model]
    ag::Var<T> attention;  // [n_heads, query rows, S]
  };

  EncoderLayer() = default;
  EncoderLayer(const std::string& name, const EncoderLayerConfig& cfg, Rng& rng);

  // Computes outputs only for rows [query_begin, query_end) of z[S, d_model];
  // keys and values always span all S rows. Keys with a nonzero key_mask entry
  // receive no attention. rng may be null when not training.
  Output forward(ag::Graph<T>& g, ag::Var<T> z, int query_begin, int query_end, bool training,
                 Rng* rng, std::span<const std::uint8_t> key_mask = {});
  Output forward(ag::Graph<T>& g, ag::Var<T> z, bool training, Rng* rng) {
    return forward(g, z, 0, z.dim(0), training, rng);
  }
  void collect(ParamRefs<T>& out);

  const EncoderLayerConfig& config() const { return cfg_; }

 private:
  EncoderLayerConfig cfg_;
  Linear<T> q_, k_, v_, o_;
  LayerNorm<T> ln1_;
  Linear<T> ff1_, ff2_;
  LayerNorm<T> ln2_;
};

}  // namespace icmlm::nn
