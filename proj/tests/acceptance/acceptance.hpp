#pragma once

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "icmlm/evaluator.hpp"
#include "icmlm/trainer.hpp"

namespace icmlm::acceptance {

struct Outcome {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;
};

// Step budgets for the trained runs; overridable from the command line.
struct Budget {
  long attfc_steps = 3000;
  long tfm_steps = 1500;
  long probe_steps = 1000;
};

// 2,000 training scenes, a held-out split and the frozen reference LM.
struct World {
  corpus::Dataset train;
  corpus::Dataset heldout;
  std::shared_ptr<text::LanguageModel> lm;
  captions::ConceptSet concepts;
  trainer::TrainingData data;
  std::vector<captions::TokenSequence> heldout_seqs;
  std::vector<captions::MaskTriplet> heldout_triplets;
};

const World& world();
trainer::TrainConfig experiment_config(model::Flavor flavor, long steps, std::uint64_t seed);

Outcome criterion_mtp_gain(const Budget& b);
Outcome criterion_transfer(const Budget& b);
Outcome criterion_localization(const Budget& b);
Outcome criterion_oracles();
Outcome criterion_gradients();
Outcome criterion_reductions();
Outcome criterion_determinism();

std::string fmt(const char* format, ...);

}  // namespace icmlm::acceptance
