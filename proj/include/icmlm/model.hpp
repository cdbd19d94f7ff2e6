#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "icmlm/captions.hpp"
#include "icmlm/fusion.hpp"
#include "icmlm/text_encoder.hpp"
#include "icmlm/vision.hpp"

namespace icmlm::model {

enum class Flavor { tp_postag, tp_cluster, icmlm_tfm, icmlm_attfc };
std::string_view to_string(Flavor f);
Flavor parse_flavor(std::string_view s);
inline bool is_icmlm(Flavor f) { return f == Flavor::icmlm_tfm || f == Flavor::icmlm_attfc; }

struct ModelConfig {
  Flavor flavor = Flavor::icmlm_attfc;
  vision::VisionConfig vision;
  int k = 0;  // tag-prediction concepts; 0 leaves out the tp head (icmlm flavors only)
  int tp_layers = 4;
  int tp_width = 64;
  int heads = 12;
  int d_z = 64;
  int fc_hidden_layers = 1;
  int fc_hidden_dim = 128;
  int tfm_head_dim = 0;  // 0: d_w
  int tfm_ff_dim = 256;
  double tfm_dropout = 0.1;
  bool tfm_positional = true;
};

// Backbone phi plus the heads a flavor needs. Each component draws its
// initial weights from its own seeded stream.
template <class T>
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, int d_w, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  int d_w() const { return d_w_; }
  int grid_cells() const;

  vision::VisionEncoder<T> vision;
  std::optional<fusion::TpHead<T>> tp;
  std::optional<fusion::AttFcHead<T>> attfc;
  std::optional<fusion::TfmHead<T>> tfm;

  nn::ParamRefs<T> parameters();
  nn::ParamRefs<T> backbone_parameters() { return vision.parameters(); }
  nn::ParamRefs<T> tp_parameters();
  nn::ParamRefs<T> fusion_parameters();

 private:
  ModelConfig cfg_;
  int d_w_ = 0;
};

template <class T>
struct BatchItem {
  int image_slot = 0;           // row of the image batch
  const Tensor<T>* W = nullptr;  // [T, d_w] frozen text features, masked token included
  int mask_index = 0;
};

template <class T>
struct BatchOutput {
  ag::Var<T> logits;     // [items, |V|]; invalid when there are no items
  ag::Var<T> tp_logits;  // [images, K]; invalid unless requested
  // Per item: p_att [1, N] (att-fc) or masked-row attention [heads, 1, S] (tfm).
  std::vector<ag::Var<T>> attention;
  int grid_h = 0;
  int grid_w = 0;
};

// One backbone pass over images [B, 3, S, S]; fusion heads reuse each
// image's grid for all of its items.
template <class T>
BatchOutput<T> forward_batch(ag::Graph<T>& g, Model<T>& m, ag::Var<T> images, const std::vector<BatchItem<T>>& items,
                             ag::Var<T> vocab_table, bool want_tp, bool training, Rng* rng);

template <class T>
struct LossTerms {
  ag::Var<T> total;
  ag::Var<T> mlm;
  ag::Var<T> tp;
  bool mlm_active = false;
  bool tp_active = false;
};

// l_mlm over items and l_tp over the image rows listed in tp_rows (labels in
// the same order), combined as l_mlm + lambda * l_tp. A flavor without items
// trains on l_tp alone.
template <class T>
LossTerms<T> batch_loss(ag::Graph<T>& g, const BatchOutput<T>& out, std::span<const int> targets,
                        const std::vector<int>& tp_rows, const Tensor<T>& tp_labels, T lambda);

// Frozen-LM features for (caption, mask position), computed once per key.
class TextCache {
 public:
  TextCache(text::LanguageModel& lm, const std::vector<captions::TokenSequence>& seqs);

  const Tensor<float>& features(const std::string& caption_id, int mask_index);
  const std::vector<std::string>& tokens(const std::string& caption_id) const;
  text::LanguageModel& lm() { return *lm_; }

 private:
  text::LanguageModel* lm_;
  std::map<std::string, std::vector<std::string>> tokens_;
  std::map<std::pair<std::string, int>, Tensor<float>> cache_;
};

// Inference-mode vocabulary logits for each triplet, [n, |V|].
Tensor<float> predict_triplets(Model<float>& m, TextCache& text, const corpus::Dataset& ds,
                               const std::vector<captions::MaskTriplet>& triplets, int images_per_chunk = 16);

// Text-only logits of the frozen LM for each triplet, [n, |V|].
Tensor<float> predict_text_only(TextCache& text, const std::vector<captions::MaskTriplet>& triplets);

// Attention over the final grid for one masked caption token.
fusion::AttentionMap extract_attention(Model<float>& m, text::LanguageModel& lm, const corpus::ImageRecord& image,
                                       const std::vector<std::string>& tokens, int mask_index,
                                       const std::string& caption_id = "");

}  // namespace icmlm::model
