#pragma once

// Small end-to-end fixture: a synthetic corpus, a briefly pretrained LM and a
// narrow model, sized so that a training step takes milliseconds.

#include <memory>
#include <string>
#include <vector>

#include "icmlm/trainer.hpp"

namespace icmlm::testing {

struct TinySetup {
  corpus::Dataset dataset;
  std::vector<captions::TokenSequence> sequences;
  captions::ConceptSet concepts;
  std::shared_ptr<text::LanguageModel> lm;
  trainer::TrainingData data;
  trainer::TrainConfig config;
};

inline std::set<std::string> shape_color_tokens() {
  std::set<std::string> out;
  for (auto s : corpus::kShapeKinds) out.insert(std::string(corpus::to_string(s)));
  for (auto c : corpus::kColors) out.insert(std::string(corpus::to_string(c)));
  return out;
}

inline text::LmConfig tiny_lm_config() {
  text::LmConfig c;
  c.d_w = 16;
  c.layers = 1;
  c.heads = 2;
  c.head_dim = 8;
  c.ff_dim = 32;
  return c;
}

inline TinySetup make_tiny(model::Flavor flavor = model::Flavor::icmlm_attfc, int n_images = 24,
                           std::uint64_t seed = 1) {
  TinySetup t;
  t.dataset = corpus::generate_synthetic(n_images, seed);
  t.sequences = captions::tokenize_dataset(t.dataset);
  std::vector<std::vector<std::string>> sents;
  for (const auto& s : captions::retained(t.sequences)) sents.push_back(s.tokens);
  t.lm = std::make_shared<text::LanguageModel>(text::Vocabulary::build(sents), tiny_lm_config(), 5);
  text::PretrainConfig pc;
  pc.steps = 20;
  pc.batch_size = 8;
  text::pretrain_reference_lm(*t.lm, sents, pc);

  captions::PostagOptions po;
  po.pos_filter = {captions::PosTag::NN, captions::PosTag::ADJ};
  po.k = 100;
  po.restrict_to = shape_color_tokens();
  t.concepts = captions::build_postag_concepts(t.sequences, po);
  auto triplets = captions::build_triplets(t.sequences, t.concepts, t.lm->vocab()).triplets;
  auto labels = captions::postag_presence(t.dataset, t.sequences, t.concepts);
  captions::normalize_labels(labels);
  t.data = trainer::make_training_data(t.dataset, std::move(triplets), labels);

  auto& c = t.config;
  c.model.flavor = flavor;
  c.model.vision.widths = {4, 8, 8, 8};
  c.model.tp_layers = 1;
  c.model.tp_width = 8;
  c.model.heads = 2;
  c.model.d_z = 8;
  c.model.fc_hidden_dim = 16;
  c.model.tfm_head_dim = 8;
  c.model.tfm_ff_dim = 16;
  c.steps = 10;
  c.batch_size = 4;
  c.warmup_steps = 2;
  c.log_every = 1;
  c.seed = 9;
  return t;
}

}  // namespace icmlm::testing
