#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "icmlm/model.hpp"
#include "json.hpp"

namespace icmlm::evaluator {

// ---------------------------------------------------------------- masked-token prediction

struct MtpResult {
  double top1 = 0.0;
  double top5 = 0.0;
  int n = 0;
};

// Rank of the target counts entries scoring strictly higher, plus equal
// scores at lower ids.
MtpResult mtp_from_logits(const Tensor<float>& logits, const std::vector<int>& targets);
MtpResult eval_mtp(model::Model<float>& m, model::TextCache& text, const corpus::Dataset& ds,
                   const std::vector<captions::MaskTriplet>& triplets);
MtpResult eval_mtp_text_only(model::TextCache& text, const std::vector<captions::MaskTriplet>& triplets);

// ---------------------------------------------------------------- probes

enum class Metric { top1, top5, mAP };
std::string_view to_string(Metric m);

struct ProbeResult {
  std::string layer_tag;
  std::string task;
  Metric metric = Metric::top1;
  double value = 0.0;  // fraction in [0, 1]
  int n_eval = 0;
  std::vector<int> skipped_classes;  // multilabel classes without train positives
};

struct ProbeConfig {
  int epochs = 100;
  double lr = 0.1;  // cosine-decayed over all updates
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int batch_size = 64;
  std::uint64_t seed = 0;
  bool standardize = true;
};

// Rows are samples; features are standardized with train statistics.
struct FeatureSet {
  Tensor<double> X;  // [n, d]
  std::vector<int> labels;   // multiclass targets
  Tensor<double> Y;          // [n, C] 0/1 targets for multilabel
};

ProbeResult linear_probe_multiclass(const FeatureSet& train, const FeatureSet& test, int n_classes,
                                    const ProbeConfig& cfg, const std::string& layer_tag = "");
ProbeResult linear_probe_multilabel(const FeatureSet& train, const FeatureSet& test, const ProbeConfig& cfg,
                                    const std::string& layer_tag = "");

// Continuous average precision: mean precision at the rank of every positive,
// ranking by descending score with ties to the lower index. NaN without positives.
double average_precision(const std::vector<double>& scores, const std::vector<int>& positive);
// Mean AP over classes with at least one positive in `Y`; others are listed in skipped.
double mean_average_precision(const Tensor<double>& scores, const Tensor<double>& Y, std::vector<int>* skipped);

// ---------------------------------------------------------------- zero-shot

struct AttributeMatrix {
  Tensor<double> A;  // [n_classes, n_attr]
  std::vector<int> seen;
  std::vector<int> unseen;

  int n_classes() const { return A.dim(0); }
  int n_attr() const { return A.dim(1); }
  void validate() const;
};

AttributeMatrix identity_attributes(int n_classes);

struct ZeroShotResult {
  double top1 = 0.0;  // over all test samples, argmax over all classes
  double top1_seen = 0.0;
  double top1_unseen = 0.0;
  int n_eval = 0;
};

// Learns Sigma [n_attr, d] and b [n_attr] on train samples of seen classes by
// softmax cross-entropy over f(x, A_c) = A_c^T (Sigma x + b), seen classes only.
ZeroShotResult zero_shot_eval(const FeatureSet& train, const FeatureSet& test, const AttributeMatrix& attrs,
                              const ProbeConfig& cfg);

// ---------------------------------------------------------------- attention localization

// Shape referenced by the masked token of a synthetic caption.
const corpus::SceneShape& masked_shape(const corpus::SyntheticSceneSpec& spec, const std::string& caption_id,
                                       int mask_index);

// Attention mass inside the cells a shape overlaps.
double in_box_mass(const fusion::AttentionMap& map, const std::vector<int>& cells);

double attention_localization_score(const std::vector<fusion::AttentionMap>& maps, const corpus::Dataset& ds);

// ---------------------------------------------------------------- features and results

// Pooled features of the trailing `layers` backbone blocks, one FeatureSet row per image.
struct LayerFeatures {
  std::string layer_tag;
  Tensor<double> X;
};
std::vector<LayerFeatures> extract_features(vision::VisionEncoder<float>& enc,
                                            const std::vector<const corpus::ImageRecord*>& images, int layers,
                                            vision::PoolMode mode);

nlohmann::json to_json(const ProbeResult& r);
void append_results(const std::vector<ProbeResult>& results, const std::filesystem::path& path);
std::string render_table(const std::vector<ProbeResult>& results);

}  // namespace icmlm::evaluator
