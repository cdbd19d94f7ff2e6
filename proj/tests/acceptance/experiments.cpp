#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <optional>
#include <set>

#include "acceptance.hpp"

namespace icmlm::acceptance {

namespace {

using clk = std::chrono::steady_clock;

double minutes_since(clk::time_point t0) {
  return std::chrono::duration<double>(clk::now() - t0).count() / 60.0;
}

std::set<std::string> concept_tokens() {
  std::set<std::string> out;
  for (auto s : corpus::kShapeKinds) out.insert(std::string(corpus::to_string(s)));
  for (auto c : corpus::kColors) out.insert(std::string(corpus::to_string(c)));
  return out;
}

World build_world() {
  World w;
  w.train = corpus::generate_synthetic(2000, 1);
  corpus::SyntheticOptions val;
  val.split = corpus::Split::val;
  w.heldout = corpus::generate_synthetic(500, 2, val);

  const auto seqs = captions::tokenize_dataset(w.train);
  std::vector<std::vector<std::string>> sents;
  for (const auto& s : captions::retained(seqs)) sents.push_back(s.tokens);
  w.lm = std::make_shared<text::LanguageModel>(text::Vocabulary::build(sents), text::LmConfig{}, 7);
  text::PretrainConfig pc;
  pc.steps = 600;
  text::pretrain_reference_lm(*w.lm, sents, pc);

  captions::PostagOptions po;
  po.pos_filter = {captions::PosTag::NN, captions::PosTag::ADJ};
  po.k = 100;
  po.restrict_to = concept_tokens();
  w.concepts = captions::build_postag_concepts(seqs, po);
  auto labels = captions::postag_presence(w.train, seqs, w.concepts);
  captions::normalize_labels(labels);
  w.data = trainer::make_training_data(w.train, captions::build_triplets(seqs, w.concepts, w.lm->vocab()).triplets,
                                       labels);
  w.heldout_seqs = captions::tokenize_dataset(w.heldout);
  w.heldout_triplets = captions::build_triplets(w.heldout_seqs, w.concepts, w.lm->vocab()).triplets;
  return w;
}

struct Run {
  trainer::TrainState state;
  double minutes = 0.0;
};

Run train_run(model::Flavor flavor, long steps, std::uint64_t seed) {
  const auto t0 = clk::now();
  auto st = trainer::train(world().data, experiment_config(flavor, steps, seed), world().lm);
  return {std::move(st), minutes_since(t0)};
}

// Shared by the masked-token and localization criteria.
Run& attfc_run(const Budget& b) {
  static std::optional<Run> run;
  if (!run) run = train_run(model::Flavor::icmlm_attfc, b.attfc_steps, 3);
  return *run;
}

double heldout_top1(trainer::TrainState& st) {
  model::TextCache text(*world().lm, world().heldout_seqs);
  return evaluator::eval_mtp(st.model, text, world().heldout, world().heldout_triplets).top1;
}

// Single-shape scenes with the shape or color label of their only shape.
struct ProbeSplit {
  std::vector<const corpus::ImageRecord*> images;
  std::vector<int> shape, color;
};

ProbeSplit probe_split(const corpus::Dataset& ds) {
  ProbeSplit p;
  for (const auto& img : ds.images) {
    const auto& s = ds.scenes.at(img.image_id).shapes.at(0);
    p.images.push_back(&img);
    p.shape.push_back(static_cast<int>(s.shape));
    p.color.push_back(static_cast<int>(s.color));
  }
  return p;
}

// Final-block GAP features; returns {shape top-1, color top-1}.
std::pair<double, double> probe_backbone(vision::VisionEncoder<float>& enc, const ProbeSplit& tr, const ProbeSplit& te) {
  const auto ftr = evaluator::extract_features(enc, tr.images, 1, vision::PoolMode::global_average);
  const auto fte = evaluator::extract_features(enc, te.images, 1, vision::PoolMode::global_average);
  evaluator::ProbeConfig pc;
  const auto shape = evaluator::linear_probe_multiclass({ftr[0].X, tr.shape, {}}, {fte[0].X, te.shape, {}},
                                                        static_cast<int>(corpus::kShapeKinds.size()), pc);
  const auto color = evaluator::linear_probe_multiclass({ftr[0].X, tr.color, {}}, {fte[0].X, te.color, {}},
                                                        static_cast<int>(corpus::kColors.size()), pc);
  return {shape.value, color.value};
}

double localization(model::Model<float>& m, const corpus::Dataset& scenes) {
  const auto tokens = concept_tokens();
  std::vector<fusion::AttentionMap> maps;
  for (const auto& s : captions::retained(captions::tokenize_dataset(scenes))) {
    for (int i = 0; i < static_cast<int>(s.tokens.size()); ++i) {
      if (!tokens.count(s.tokens[i])) continue;
      maps.push_back(model::extract_attention(m, *world().lm, scenes.image(s.image_id), s.tokens, i, s.caption_id));
    }
  }
  return evaluator::attention_localization_score(maps, scenes);
}

}  // namespace

std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof buf, format, args);
  va_end(args);
  return buf;
}

const World& world() {
  static const World w = build_world();
  return w;
}

trainer::TrainConfig experiment_config(model::Flavor flavor, long steps, std::uint64_t seed) {
  trainer::TrainConfig cfg;
  cfg.model.flavor = flavor;
  cfg.model.vision.widths = {16, 32, 64, 64};
  cfg.model.d_z = 16;
  cfg.lambda = 0.1;
  cfg.steps = steps;
  cfg.batch_size = 32;
  cfg.warmup_steps = steps / 10;
  cfg.log_every = 100;
  cfg.seed = seed;
  return cfg;
}

Outcome criterion_mtp_gain(const Budget& b) {
  Outcome o{1, "visual cues help masked-token prediction"};
  model::TextCache text(*world().lm, world().heldout_seqs);
  const double text_only = evaluator::eval_mtp_text_only(text, world().heldout_triplets).top1;
  Run& att = attfc_run(b);
  Run tfm = train_run(model::Flavor::icmlm_tfm, b.tfm_steps, 3);
  const double a = heldout_top1(att.state);
  const double t = heldout_top1(tfm.state);
  const bool fast = att.minutes <= 30.0 && tfm.minutes <= 30.0;
  o.pass = a - text_only >= 0.20 && t - text_only >= 0.20 && fast;
  o.detail = fmt("held-out top-1 text-only %.1f%%, att-fc %.1f%% (+%.1f, %ld steps, %.1f min), tfm %.1f%% (+%.1f, "
                 "%ld steps, %.1f min); need +20.0 points and <= 30 min each",
                 100 * text_only, 100 * a, 100 * (a - text_only), b.attfc_steps, att.minutes, 100 * t,
                 100 * (t - text_only), b.tfm_steps, tfm.minutes);
  return o;
}

Outcome criterion_transfer(const Budget& b) {
  Outcome o{2, "trained backbone transfers to attribute probes"};
  corpus::SyntheticOptions single;
  single.min_shapes = single.max_shapes = 1;
  const auto probe_train = corpus::generate_synthetic(1000, 11, single);
  single.split = corpus::Split::val;
  const auto probe_test = corpus::generate_synthetic(500, 12, single);
  const auto tr = probe_split(probe_train);
  const auto te = probe_split(probe_test);

  bool all = true;
  std::string parts;
  for (std::uint64_t seed : {21, 22, 23}) {
    Run run = train_run(model::Flavor::icmlm_attfc, b.probe_steps, seed);
    model::Model<float> fresh(run.state.config.model, world().lm->d_w(), seed + 1000);
    const auto [ts, tc] = probe_backbone(run.state.model.vision, tr, te);
    const auto [rs, rc] = probe_backbone(fresh.vision, tr, te);
    const bool ok = ts - rs >= 0.15 && tc - rc >= 0.15;
    all = all && ok;
    parts += fmt("%sseed %llu shape %.1f vs %.1f, color %.1f vs %.1f", parts.empty() ? "" : "; ",
                 static_cast<unsigned long long>(seed), 100 * ts, 100 * rs, 100 * tc, 100 * rc);
  }
  o.pass = all;
  o.detail = "probe top-1 trained vs random init: " + parts + "; need +15.0 points on both tasks for 3 of 3 seeds";
  return o;
}

Outcome criterion_localization(const Budget& b) {
  Outcome o{3, "attention localizes the masked concept"};
  corpus::SyntheticOptions single;
  single.min_shapes = single.max_shapes = 1;
  single.split = corpus::Split::val;
  const auto scenes = corpus::generate_synthetic(200, 6, single);
  Run& att = attfc_run(b);
  const double trained = localization(att.state.model, scenes);
  // Same trained backbone under a freshly initialized attention head.
  model::Model<float> untrained(att.state.config.model, world().lm->d_w(), 99);
  untrained.vision = att.state.model.vision;
  const double fresh = localization(untrained, scenes);
  o.pass = trained >= 0.70 && fresh <= 0.15;
  o.detail = fmt("mean in-box mass trained %.3f (need >= 0.70), untrained head %.3f (need <= 0.15), uniform %.4f",
                 trained, fresh, 4.0 / 64.0);
  return o;
}

}  // namespace icmlm::acceptance
