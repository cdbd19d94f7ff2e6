#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "icmlm/corpus.hpp"
#include "icmlm/nn.hpp"

namespace icmlm::fusion {

// ---------------------------------------------------------------- tag prediction

struct TpConfig {
  int d_x = 128;
  int k = 0;        // number of concepts
  int layers = 4;   // conv blocks in the trunk
  int width = 64;
};

// Conv trunk over X, global average pooling, linear layer to K logits.
template <class T>
class TpHead {
 public:
  TpHead() = default;
  TpHead(const TpConfig& cfg, Rng& rng);

  // x: [B, d_x, H, W] -> [B, K]
  ag::Var<T> forward(ag::Graph<T>& g, ag::Var<T> x);
  nn::ParamRefs<T> parameters();
  const TpConfig& config() const { return cfg_; }

 private:
  TpConfig cfg_;
  std::vector<nn::ConvBlock<T>> trunk_;
  nn::Linear<T> out_;
};

// ---------------------------------------------------------------- attention + fc

struct AttFcConfig {
  int d_x = 128;
  int d_w = 64;
  int d_z = 64;
  int heads = 12;
  int fc_hidden_layers = 1;
  int fc_hidden_dim = 128;
};

template <class T>
struct AttPool {
  ag::Var<T> x_hat;   // [1, d_x]
  ag::Var<T> p_att;   // [1, N]
  ag::Var<T> cell_scores;  // [1, N], pre-softmax combined scores
};

template <class T>
struct AttFcOutput {
  ag::Var<T> logits;  // [1, |V|]
  AttPool<T> pool;
};

template <class T>
class AttFcHead {
 public:
  AttFcHead() = default;
  AttFcHead(const AttFcConfig& cfg, Rng& rng);

  // X~ = ReLU(norm(X Sigma_x)), grouped per head: [N, heads * d_z].
  ag::Var<T> project_visual(ag::Graph<T>& g, ag::Var<T> x);
  // W~ = ReLU(norm(W Sigma_w)): [T, heads * d_z].
  ag::Var<T> project_text(ag::Graph<T>& g, ag::Var<T> w);
  // S = X~ W~^T / sqrt(d_z) per head: [heads, N, T].
  ag::Var<T> scores(ag::Var<T> xt, ag::Var<T> wt);
  // Log-sum-exp over tokens, weighted head average, softmax over cells, pooling.
  AttPool<T> pool(ag::Graph<T>& g, ag::Var<T> s, ag::Var<T> x);
  // fc stack followed by dot products with the vocabulary table [|V|, d_w].
  ag::Var<T> classify(ag::Graph<T>& g, ag::Var<T> x_hat, ag::Var<T> vocab_table);

  // xt may be a cached project_visual(x).
  AttFcOutput<T> forward(ag::Graph<T>& g, ag::Var<T> x, ag::Var<T> xt, ag::Var<T> w, ag::Var<T> vocab_table);

  nn::ParamRefs<T> parameters();
  nn::ParamRefs<T> attention_parameters();  // Sigma_x, Sigma_w, their norms, Sigma_h, b_h
  nn::ParamRefs<T> fc_parameters();
  const AttFcConfig& config() const { return cfg_; }

  nn::Linear<T> sigma_x, sigma_w;
  nn::LayerNorm<T> norm_x, norm_w;
  Parameter<T> sigma_h;  // [heads, 1]
  Parameter<T> b_h;      // [1]
  std::vector<nn::Linear<T>> fc_hidden;
  std::vector<nn::LayerNorm<T>> fc_norms;
  nn::Linear<T> fc_out;

 private:
  AttFcConfig cfg_;
};

// Single-head path without the head-averaging layer: log-sum-exp scores s_i
// of S[1, N, T] as a [1, N] row.
template <class T>
ag::Var<T> single_head_scores(ag::Var<T> s);

// ---------------------------------------------------------------- transformer fusion

struct TfmConfig {
  int d_x = 128;
  int d_w = 64;
  int grid_cells = 64;
  int heads = 12;
  int head_dim = 0;  // 0: d_w
  int ff_dim = 256;
  double dropout = 0.1;
  bool positional = true;
  nn::AttentionOrder order = nn::AttentionOrder::query_key;
};

template <class T>
struct VisualTokens {
  ag::Var<T> rows;                 // [N, d_w]
  std::vector<std::uint8_t> padding;  // 1 where the input cell was all zeros
};

template <class T>
struct TfmOutput {
  ag::Var<T> logits;     // [1, |V|]
  ag::Var<T> hidden;     // [1, d_w], the transformed masked token
  ag::Var<T> attention;  // [heads, 1, S]
};

template <class T>
class TfmHead {
 public:
  TfmHead() = default;
  TfmHead(const TfmConfig& cfg, Rng& rng);

  // Projects X [N, d_x] to d_w and adds the learned cell embedding.
  VisualTokens<T> encode_visual(ag::Graph<T>& g, ag::Var<T> x);
  // Encodes Z = [visual; W] and scores the masked row against the vocabulary.
  // Visual rows flagged as padding are excluded from attention; with no
  // visual rows the head reduces to a text-only encoder.
  TfmOutput<T> forward(ag::Graph<T>& g, const VisualTokens<T>* visual, ag::Var<T> w, int mask_index,
                       ag::Var<T> vocab_table, bool training, Rng* rng);

  nn::ParamRefs<T> parameters();
  nn::ParamRefs<T> attention_parameters();
  const TfmConfig& config() const { return cfg_; }

 private:
  TfmConfig cfg_;
  nn::Linear<T> proj_;
  Parameter<T> pos_;
  nn::EncoderLayer<T> layer_;
};

// ---------------------------------------------------------------- attention maps

struct AttentionMap {
  std::string image_id;
  std::string caption_id;
  int mask_index = 0;
  int h = 0;
  int w = 0;
  std::vector<double> p;  // h * w, row-major

  double sum() const;
};

// Head-averaged masked-token attention over the first n_cells keys, renormalized.
std::vector<double> tfm_attention_cells(const Tensor<float>& attention, int n_cells);

// PNG overlay (grid upsampled to the image, blended with a white-to-dark-red
// ramp) and the raw probabilities as a JSON sidecar.
void save_attention(const AttentionMap& map, const corpus::ImageRecord& image, const std::filesystem::path& png,
                    const std::filesystem::path& json_path);

}  // namespace icmlm::fusion
