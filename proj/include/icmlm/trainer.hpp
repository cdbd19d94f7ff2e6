#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "icmlm/captions.hpp"
#include "icmlm/model.hpp"
#include "icmlm/objectives.hpp"
#include "icmlm/optim.hpp"
#include "json.hpp"

namespace icmlm::trainer {

inline constexpr int kCheckpointVersion = 1;

struct TrainConfig {
  model::ModelConfig model;
  double lambda = 1.0;
  long steps = 20000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  optim::Kind optimizer = optim::Kind::adam;
  optim::Schedule schedule = optim::Schedule::cosine;
  long lr_schedule_steps = 0;  // cosine/step horizon; 0 means `steps`
  long lr_step_every = 0;
  double lr_gamma = 0.1;
  long warmup_steps = 1000;
  bool warmup_freeze_backbone = true;
  std::uint64_t seed = 0;
  long log_every = 50;
  long checkpoint_every = 0;

  // Throws ConfigError naming the offending key.
  void validate() const;
};

// Flat key/value view; every key can be set from a config file or a CLI flag.
nlohmann::json to_json(const TrainConfig& cfg);
// Applies every key of a flat JSON object; unknown keys are rejected.
void apply_json(TrainConfig& cfg, const nlohmann::json& j);
// Sets one key from its textual form.
void apply_value(TrainConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();
TrainConfig load_config(const std::filesystem::path& path);

struct TrainingData {
  const corpus::Dataset* dataset = nullptr;
  std::vector<captions::TokenSequence> sequences;
  std::vector<captions::MaskTriplet> triplets;
  std::map<std::string, captions::LabelVector> labels;  // by image id
  int k = 0;                                            // label dimension, 0 without labels
  std::vector<std::string> tp_units;                    // images with a usable label vector
};

TrainingData make_training_data(const corpus::Dataset& ds, std::vector<captions::MaskTriplet> triplets,
                                const std::vector<captions::LabelVector>& labels);

struct TrainState {
  TrainConfig config;
  std::shared_ptr<text::LanguageModel> lm;
  model::Model<float> model;
  optim::Optimizer<float> optimizer;
  long step = 0;
  std::vector<objectives::LossReport> history;
};

struct Hooks {
  std::function<void(const objectives::LossReport&)> on_log;
  // When set, a checkpoint is written here every checkpoint_every steps and at the end.
  std::filesystem::path checkpoint_dir;
};

// Fresh model and optimizer. k is the label dimension (0: no tp head).
TrainState init_training(const TrainConfig& cfg, std::shared_ptr<text::LanguageModel> lm, int k);

// Runs optimizer updates until state.step == state.config.steps.
void run(TrainState& state, const TrainingData& data, model::TextCache& text, const Hooks& hooks = {});

TrainState train(const TrainingData& data, const TrainConfig& cfg, std::shared_ptr<text::LanguageModel> lm,
                 const Hooks& hooks = {});

// Extends the run by extra_steps; refuses data whose K or vocabulary differ.
void resume(TrainState& state, const TrainingData& data, long extra_steps, const Hooks& hooks = {});

// Refuses changes to flavor, K, |V| or model shape.
void check_resume_compatible(const TrainState& state, const TrainConfig& requested, int k, int vocab_size);

// Checkpoint directory: weights.bin, meta.json, log.jsonl, vocab.tsv.
void save_checkpoint(TrainState& state, const std::filesystem::path& dir);
TrainState load_checkpoint(const std::filesystem::path& dir);

// Frozen LM directory: weights.bin, vocab.tsv, meta.json.
void save_language_model(text::LanguageModel& lm, const std::filesystem::path& dir);
std::shared_ptr<text::LanguageModel> load_language_model(const std::filesystem::path& dir);

// Parameter checksums, in model order.
std::uint32_t model_checksum(model::Model<float>& m);
std::uint32_t checksum(nn::ParamRefs<float> params);

nlohmann::json to_json(const objectives::LossReport& r);

}  // namespace icmlm::trainer
