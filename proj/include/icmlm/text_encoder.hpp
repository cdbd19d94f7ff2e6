#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icmlm/nn.hpp"
#include "icmlm/vocab.hpp"

namespace icmlm::text {

struct LmConfig {
  int d_w = 64;
  int layers = 2;
  int heads = 4;
  int head_dim = 16;
  int ff_dim = 256;
  int max_len = 32;  // including [CLS]
  double dropout = 0.1;
};

struct PretrainConfig {
  int steps = 1500;
  int batch_size = 32;
  double lr = 2e-3;
  double mask_prob = 0.15;
  std::uint64_t seed = 0;
};

struct TextFeatures {
  Tensor<float> W;        // [T, d_w], [CLS] excluded
  std::vector<float> cls;  // d_w
  std::optional<int> mask_index;
};

struct PretrainReport {
  std::vector<double> loss;  // per step
};

// Small transformer encoder standing in for a pretrained language model:
// token + position embeddings, embedding LayerNorm, post-norm encoder layers.
// Masked-token scores are dot products with the token embedding table.
class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(Vocabulary vocab, const LmConfig& cfg, std::uint64_t seed);

  const Vocabulary& vocab() const { return vocab_; }
  const LmConfig& config() const { return cfg_; }
  int d_w() const { return cfg_.d_w; }

  // ids include the leading [CLS]; returns [ids.size(), d_w].
  ag::Var<float> forward(ag::Graph<float>& g, std::span<const int> ids, bool training, Rng* rng);

  // Inference-mode encoding; the token at mask_index is replaced by [MASK].
  TextFeatures encode(const std::vector<std::string>& tokens, std::optional<int> mask_index = std::nullopt);
  TextFeatures encode_ids(std::vector<int> ids, std::optional<int> mask_index = std::nullopt);

  // Scores of a d_w feature against every vocabulary embedding.
  std::vector<float> vocab_logits(std::span<const float> feature) const;

  Parameter<float>& embedding_table() { return token_emb_; }
  const Parameter<float>& embedding_table() const { return token_emb_; }

  nn::ParamRefs<float> parameters();
  void freeze();
  bool frozen() const { return frozen_; }
  std::uint32_t checksum();

 private:
  Vocabulary vocab_;
  LmConfig cfg_;
  Parameter<float> token_emb_;
  Parameter<float> pos_emb_;
  nn::LayerNorm<float> emb_ln_;
  std::vector<nn::EncoderLayer<float>> layers_;
  bool frozen_ = false;
};

// Plain masked-language-model pretraining with Adam on tokenized sentences,
// then freezes the model.
PretrainReport pretrain_reference_lm(LanguageModel& lm, const std::vector<std::vector<std::string>>& sentences,
                                     const PretrainConfig& cfg);

// Checksum over the raw bytes of a parameter list, in order.
std::uint32_t parameter_checksum(const nn::ParamRefs<float>& params);

}  // namespace icmlm::text
