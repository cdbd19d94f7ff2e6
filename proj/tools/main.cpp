#include <algorithm>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "icmlm/evaluator.hpp"
#include "icmlm/image_io.hpp"
#include "icmlm/trainer.hpp"
#include "json.hpp"
#include "run_record.hpp"

namespace {

namespace fs = std::filesystem;
using namespace icmlm;
using nlohmann::json;
using cli::RunRecord;

// Bad invocation detected after parsing; exits 1 like a parse error.
class UsageError : public Error {
 public:
  using Error::Error;
};

void require_input(const fs::path& p, const std::string& what) {
  if (p.empty()) throw UsageError(what + " not given");
  if (!fs::exists(p)) throw IngestionError(what + " not found: " + p.string());
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

corpus::Dataset load_data(const fs::path& p, RunRecord& rec, const std::string& role = "data") {
  require_input(p, "dataset");
  rec.add_input(role, p);
  return fs::is_directory(p) ? corpus::load_dataset(p) : corpus::load_manifest(p);
}

void write_json(const fs::path& path, const json& j, RunRecord& rec) {
  io::write_text_file(path, j.dump(2) + "\n");
  rec.add_artifact(path);
}

void write_results(const std::vector<evaluator::ProbeResult>& results, const fs::path& out, RunRecord& rec) {
  fs::create_directories(out);
  const fs::path path = out / "results.jsonl";
  fs::remove(path);
  evaluator::append_results(results, path);
  rec.add_artifact(path);
  std::cout << evaluator::render_table(results);
}

// ---------------------------------------------------------------- commands

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  fs::path out;
  std::uint64_t seed = 0;
  std::function<void(Command&, RunRecord&)> run;
};

void add_common(Command& c, bool seed = true) {
  if (seed) c.app->add_option("--seed", c.seed, "Random seed");
  c.app->add_option("--config", "Flat JSON file of flag values; flags on the command line win");
}

struct SynthOpts {
  int n = 0;
  corpus::SyntheticOptions synth;
  std::string split = "train";
};

void setup_synth(Command& c, SynthOpts& o) {
  auto* a = c.app;
  a->add_option("--n", o.n, "Number of images")->required()->check(CLI::PositiveNumber);
  a->add_option("--out", c.out, "Dataset directory")->required();
  a->add_option("--image-size", o.synth.image_size, "Image side in pixels");
  a->add_option("--min-shapes", o.synth.min_shapes, "Fewest shapes per scene");
  a->add_option("--max-shapes", o.synth.max_shapes, "Most shapes per scene");
  a->add_option("--split", o.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  a->add_option("--noise", o.synth.noise, "Background noise amplitude (0-255)");
  add_common(c);
  c.run = [&o](Command& c, RunRecord& rec) {
    o.synth.split = corpus::parse_split(o.split);
    const auto ds = corpus::generate_synthetic(o.n, c.seed, o.synth);
    corpus::save_dataset(ds, c.out);
    rec.add_artifact(c.out);
    std::cout << "wrote " << ds.images.size() << " images and " << ds.captions.size() << " captions to "
              << c.out.string() << "\n";
  };
}

struct PretrainOpts {
  fs::path data;
  text::LmConfig lm;
  text::PretrainConfig pre;
  int min_count = 1;
};

void setup_pretrain(Command& c, PretrainOpts& o) {
  auto* a = c.app;
  a->add_option("--data", o.data, "Dataset directory or manifest")->required();
  a->add_option("--out", c.out, "Language model directory")->required();
  a->add_option("--steps", o.pre.steps, "Pretraining steps");
  a->add_option("--batch-size", o.pre.batch_size, "Sentences per step");
  a->add_option("--lr", o.pre.lr, "Adam learning rate");
  a->add_option("--mask-prob", o.pre.mask_prob, "Masking probability");
  a->add_option("--d-w", o.lm.d_w, "Hidden size");
  a->add_option("--layers", o.lm.layers, "Encoder layers");
  a->add_option("--heads", o.lm.heads, "Attention heads");
  a->add_option("--head-dim", o.lm.head_dim, "Per-head size");
  a->add_option("--ff-dim", o.lm.ff_dim, "Feed-forward size");
  a->add_option("--max-len", o.lm.max_len, "Longest input including [CLS]");
  a->add_option("--dropout", o.lm.dropout, "Dropout while pretraining");
  a->add_option("--min-count", o.min_count, "Vocabulary frequency cutoff");
  add_common(c);
  c.run = [&o](Command& c, RunRecord& rec) {
    const auto ds = load_data(o.data, rec);
    std::vector<std::vector<std::string>> sents;
    for (const auto& s : captions::retained(captions::tokenize_dataset(ds))) sents.push_back(s.tokens);
    text::LanguageModel lm(text::Vocabulary::build(sents, o.min_count), o.lm, c.seed);
    o.pre.seed = c.seed;
    const auto report = text::pretrain_reference_lm(lm, sents, o.pre);
    trainer::save_language_model(lm, c.out);
    rec.add_artifact(c.out);
    std::cout << "vocabulary " << lm.vocab().size() << ", final loss "
              << (report.loss.empty() ? 0.0 : report.loss.back()) << "\n";
  };
}

struct ConceptOpts {
  fs::path data;
  fs::path lm;
  std::string mode = "postag";
  std::string pos = "NN";
  std::string restrict_to;
  int k = 1000;
  int kmeans_iter = 100;
};

void setup_concepts(Command& c, ConceptOpts& o) {
  auto* a = c.app;
  a->add_option("--data", o.data, "Dataset directory or manifest")->required();
  a->add_option("--out", c.out, "Output directory (concepts.tsv, labels.jsonl)")->required();
  a->add_option("--mode", o.mode, "postag or cluster")->check(CLI::IsMember({"postag", "cluster"}));
  a->add_option("--pos", o.pos, "Comma-separated tags kept in postag mode (NN, ADJ, VB)");
  a->add_option("--k", o.k, "Number of concepts");
  a->add_option("--restrict", o.restrict_to, "Comma-separated tokens allowed as concepts");
  a->add_option("--lm", o.lm, "Language model directory (cluster mode)");
  a->add_option("--kmeans-iter", o.kmeans_iter, "Lloyd iterations");
  add_common(c);
  c.run = [&o](Command& c, RunRecord& rec) {
    const auto ds = load_data(o.data, rec);
    const auto seqs = captions::tokenize_dataset(ds);
    captions::ConceptSet cs;
    std::vector<captions::LabelVector> labels;
    if (o.mode == "postag") {
      captions::PostagOptions po;
      po.k = o.k;
      po.pos_filter.clear();
      for (const auto& t : split_list(o.pos)) po.pos_filter.insert(captions::parse_pos(t));
      for (const auto& t : split_list(o.restrict_to)) po.restrict_to.insert(t);
      cs = captions::build_postag_concepts(seqs, po);
      labels = captions::postag_presence(ds, seqs, cs);
    } else {
      require_input(o.lm, "language model");
      rec.add_input("lm", o.lm);
      auto lm = trainer::load_language_model(o.lm);
      const auto kept = captions::retained(seqs);
      if (kept.empty()) throw IngestionError("no usable captions in " + o.data.string());
      Tensor<double> points({static_cast<int>(kept.size()), lm->d_w()});
      std::vector<std::string> ids;
      for (std::size_t i = 0; i < kept.size(); ++i) {
        const auto f = lm->encode(kept[i].tokens);
        std::copy(f.cls.begin(), f.cls.end(), points.row(static_cast<int>(i)).begin());
        ids.push_back(kept[i].caption_id);
      }
      const auto km = captions::kmeans(points, o.k, c.seed, o.kmeans_iter);
      cs = captions::cluster_concept_set(km);
      labels = captions::cluster_presence(ds, ids, km.assignments, o.k);
    }
    captions::normalize_labels(labels);
    fs::create_directories(c.out);
    captions::save_concepts(cs, c.out / "concepts.tsv");
    captions::save_labels(labels, c.out / "labels.jsonl");
    rec.add_artifact(c.out / "concepts.tsv");
    rec.add_artifact(c.out / "labels.jsonl");
    const auto excluded = std::count_if(labels.begin(), labels.end(), [](const auto& l) { return l.excluded; });
    std::cout << cs.size() << " concepts" << (cs.exhausted ? " (fewer than requested)" : "") << ", "
              << labels.size() - excluded << " labelled images, " << excluded << " without labels\n";
  };
}

struct TripletOpts {
  fs::path data;
  fs::path concepts;
  fs::path lm;
};

void setup_triplets(Command& c, TripletOpts& o) {
  auto* a = c.app;
  a->add_option("--data", o.data, "Dataset directory or manifest")->required();
  a->add_option("--concepts", o.concepts, "concepts.tsv")->required();
  a->add_option("--lm", o.lm, "Language model directory (vocabulary)")->required();
  a->add_option("--out", c.out, "Output directory (triplets.jsonl)")->required();
  add_common(c);
  c.run = [&o](Command& c, RunRecord& rec) {
    const auto ds = load_data(o.data, rec);
    require_input(o.concepts, "concepts file");
    require_input(o.lm, "language model");
    rec.add_input("concepts", o.concepts);
    rec.add_input("lm", o.lm);
    const auto cs = captions::load_concepts(o.concepts);
    const auto vocab = text::Vocabulary::load(o.lm / "vocab.tsv");
    const auto build = captions::build_triplets(captions::tokenize_dataset(ds), cs, vocab);
    fs::create_directories(c.out);
    captions::save_triplets(build.triplets, c.out / "triplets.jsonl");
    rec.add_artifact(c.out / "triplets.jsonl");
    std::cout << build.triplets.size() << " triplets, " << build.skipped << " concept tokens missing from the vocabulary\n";
  };
}

struct TrainOpts {
  fs::path data, lm, triplets, labels, resume;
  long extra_steps = 0;
  std::map<std::string, std::string> values;
};

trainer::TrainingData load_training_data(const corpus::Dataset& ds, const TrainOpts& o, bool need_triplets) {
  std::vector<captions::MaskTriplet> triplets;
  std::vector<captions::LabelVector> labels;
  if (need_triplets) triplets = captions::load_triplets(o.triplets);
  if (!o.labels.empty()) labels = captions::load_labels(o.labels);
  return trainer::make_training_data(ds, std::move(triplets), labels);
}

void setup_train(Command& c, TrainOpts& o) {
  auto* a = c.app;
  a->add_option("--data", o.data, "Training dataset directory or manifest")->required();
  a->add_option("--lm", o.lm, "Frozen language model directory (ignored with --resume)");
  a->add_option("--triplets", o.triplets, "triplets.jsonl (icmlm flavors)");
  a->add_option("--labels", o.labels, "labels.jsonl (tag prediction)");
  a->add_option("--out", c.out, "Checkpoint directory")->required();
  a->add_option("--resume", o.resume, "Checkpoint to continue from");
  a->add_option("--extra-steps", o.extra_steps, "Steps added to a resumed run");
  const json defaults = trainer::to_json(trainer::TrainConfig{});
  for (const auto& key : trainer::config_keys()) {
    std::string names = "--" + key;
    if (key == "model_flavor") names += ",--flavor";
    auto* opt = a->add_option(names, o.values[key], "Training config key");
    const json& d = defaults.at(key);
    opt->default_str(d.is_string() ? d.get<std::string>() : d.dump());
  }
  a->add_option("--config", "Flat JSON file of flag values; flags on the command line win");
  c.run = [&o](Command& c, RunRecord& rec) {
    trainer::TrainConfig cfg;
    for (const auto& [key, value] : o.values) {
      if (c.app->get_option("--" + key)->count() > 0) trainer::apply_value(cfg, key, value);
    }
    c.seed = cfg.seed;
    rec.set_seed(cfg.seed);
    const bool icmlm_flavor = model::is_icmlm(cfg.model.flavor);
    if (icmlm_flavor) {
      if (o.triplets.empty()) throw UsageError("--triplets is required for " + std::string(model::to_string(cfg.model.flavor)));
      require_input(o.triplets, "triplets file");
    }
    if (!icmlm_flavor && o.labels.empty()) throw UsageError("--labels is required for tag-prediction flavors");
    if (!o.labels.empty()) require_input(o.labels, "labels file");
    if (o.resume.empty()) require_input(o.lm, "language model");
    else require_input(o.resume, "checkpoint");
    cfg.validate();

    const auto ds = load_data(o.data, rec);
    if (icmlm_flavor) rec.add_input("triplets", o.triplets);
    if (!o.labels.empty()) rec.add_input("labels", o.labels);
    const auto data = load_training_data(ds, o, icmlm_flavor);

    trainer::Hooks hooks;
    hooks.on_log = [](const objectives::LossReport& r) {
      std::cerr << "step " << r.step << " l_total " << r.l_total << " l_mlm " << r.l_mlm << " l_tp " << r.l_tp
                << " lr " << r.lr << "\n";
    };
    if (cfg.checkpoint_every > 0) hooks.checkpoint_dir = c.out;

    if (!o.resume.empty()) {
      rec.add_input("resume", o.resume);
      auto st = trainer::load_checkpoint(o.resume);
      trainer::check_resume_compatible(st, cfg, data.k, st.lm->vocab().size());
      trainer::resume(st, data, o.extra_steps, hooks);
      trainer::save_checkpoint(st, c.out);
    } else {
      rec.add_input("lm", o.lm);
      auto lm = trainer::load_language_model(o.lm);
      auto st = trainer::train(data, cfg, lm, hooks);
      trainer::save_checkpoint(st, c.out);
    }
    rec.add_artifact(c.out);
    std::cout << "checkpoint written to " << c.out.string() << "\n";
  };
}

evaluator::ProbeResult mtp_row(const std::string& tag, evaluator::Metric m, double v, int n) {
  evaluator::ProbeResult r;
  r.layer_tag = tag;
  r.task = "mtp";
  r.metric = m;
  r.value = v;
  r.n_eval = n;
  return r;
}

struct EvalMtpOpts {
  fs::path ckpt, data, triplets;
};

void setup_eval_mtp(Command& c, EvalMtpOpts& o) {
  auto* a = c.app;
  a->add_option("--ckpt", o.ckpt, "Checkpoint directory")->required();
  a->add_option("--data", o.data, "Held-out dataset directory or manifest")->required();
  a->add_option("--triplets", o.triplets, "Held-out triplets.jsonl")->required();
  a->add_option("--out", c.out, "Results directory");
  c.out = "results";
  add_common(c);
  c.run = [&o](Command& c, RunRecord& rec) {
    require_input(o.ckpt, "checkpoint");
    require_input(o.triplets, "triplets file");
    const auto ds = load_data(o.data, rec);
    rec.add_input("ckpt", o.ckpt);
    rec.add_input("triplets", o.triplets);
    auto st = trainer::load_checkpoint(o.ckpt);
    if (!model::is_icmlm(st.config.model.flavor)) throw UsageError("eval-mtp needs an icmlm checkpoint");
    const auto triplets = captions::load_triplets(o.triplets);
    model::TextCache text(*st.lm, captions::tokenize_dataset(ds));
    const auto m = evaluator::eval_mtp(st.model, text, ds, triplets);
    const auto t = evaluator::eval_mtp_text_only(text, triplets);
    const std::string tag(model::to_string(st.config.model.flavor));
    write_results({mtp_row(tag, evaluator::Metric::top1, m.top1, m.n), mtp_row(tag, evaluator::Metric::top5, m.top5, m.n),
                   mtp_row("text_only", evaluator::Metric::top1, t.top1, t.n),
                   mtp_row("text_only", evaluator::Metric::top5, t.top5, t.n)},
                  c.out, rec);
  };
}

// Backbone from a checkpoint, or the same architecture freshly initialized.
vision::VisionEncoder<float> probe_backbone(const fs::path& ckpt, bool random_init, std::uint64_t seed,
                                            RunRecord& rec) {
  require_input(ckpt, "checkpoint");
  rec.add_input("ckpt", ckpt);
  auto st = trainer::load_checkpoint(ckpt);
  if (!random_init) return std::move(st.model.vision);
  model::Model<float> fresh(st.config.model, st.lm->d_w(), seed);
  return std::move(fresh.vision);
}

vision::PoolMode parse_pool(const std::string& s) {
  if (s == "gap") return vision::PoolMode::global_average;
  if (s == "2x2") return vision::PoolMode::spatial_2x2;
  throw UsageError("unknown pooling '" + s + "'");
}

const corpus::SyntheticSceneSpec& scene_of(const corpus::Dataset& ds, const std::string& id) {
  const auto it = ds.scenes.find(id);
  if (it == ds.scenes.end()) throw IngestionError("image " + id + " has no synthetic scene description");
  return it->second;
}

// Images and targets for one probe task.
struct TaskData {
  std::vector<const corpus::ImageRecord*> images;
  std::vector<int> labels;
  std::vector<std::vector<double>> targets;
  int n_classes = 0;
  bool multilabel = false;
};

TaskData task_data(const corpus::Dataset& ds, const std::string& task, const fs::path& labels_path) {
  TaskData t;
  if (task == "shape" || task == "color") {
    t.n_classes = task == "shape" ? static_cast<int>(corpus::kShapeKinds.size()) : static_cast<int>(corpus::kColors.size());
    for (const auto& img : ds.images) {
      const auto& spec = scene_of(ds, img.image_id);
      if (spec.shapes.size() != 1) continue;
      t.images.push_back(&img);
      t.labels.push_back(task == "shape" ? static_cast<int>(spec.shapes[0].shape) : static_cast<int>(spec.shapes[0].color));
    }
    if (t.images.empty()) throw IngestionError("no single-shape scenes for the " + task + " task");
  } else if (task == "shape-presence" || task == "color-presence") {
    t.multilabel = true;
    const bool shape = task == "shape-presence";
    t.n_classes = shape ? static_cast<int>(corpus::kShapeKinds.size()) : static_cast<int>(corpus::kColors.size());
    for (const auto& img : ds.images) {
      std::vector<double> y(t.n_classes, 0.0);
      for (const auto& s : scene_of(ds, img.image_id).shapes) y[shape ? static_cast<int>(s.shape) : static_cast<int>(s.color)] = 1.0;
      t.images.push_back(&img);
      t.targets.push_back(std::move(y));
    }
  } else if (task == "labels") {
    t.multilabel = true;
    if (labels_path.empty()) throw UsageError("the labels task needs --train-labels and --test-labels");
    require_input(labels_path, "labels file");
    std::map<std::string, captions::LabelVector> by_id;
    for (auto& l : captions::load_labels(labels_path)) by_id[l.image_id] = std::move(l);
    for (const auto& img : ds.images) {
      const auto it = by_id.find(img.image_id);
      if (it == by_id.end()) continue;
      std::vector<double> y(it->second.y.size());
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = it->second.y[i] > 0 ? 1.0 : 0.0;
      t.n_classes = static_cast<int>(y.size());
      t.images.push_back(&img);
      t.targets.push_back(std::move(y));
    }
    if (t.images.empty()) throw IngestionError("no labelled images in " + labels_path.string());
  } else {
    throw UsageError("unknown probe task '" + task + "'");
  }
  return t;
}

evaluator::FeatureSet feature_set(const Tensor<double>& X, const TaskData& t) {
  evaluator::FeatureSet f;
  f.X = X;
  f.labels = t.labels;
  if (t.multilabel) {
    f.Y = Tensor<double>({static_cast<int>(t.targets.size()), t.n_classes});
    for (std::size_t i = 0; i < t.targets.size(); ++i) {
      std::copy(t.targets[i].begin(), t.targets[i].end(), f.Y.row(static_cast<int>(i)).begin());
    }
  }
  return f;
}

struct ProbeOpts {
  fs::path ckpt, train_data, test_data, train_labels, test_labels;
  bool random_init = false;
  std::string task = "shape";
  std::string pool = "gap";
  int layers = 3;
  evaluator::ProbeConfig probe;
};

void add_probe_options(CLI::App* a, ProbeOpts& o) {
  a->add_option("--ckpt", o.ckpt, "Checkpoint directory")->required();
  a->add_flag("--random-init", o.random_init, "Probe a freshly initialized backbone of the same shape");
  a->add_option("--train-data", o.train_data, "Probe training dataset")->required();
  a->add_option("--test-data", o.test_data, "Probe test dataset")->required();
  a->add_option("--pool", o.pool, "gap or 2x2")->check(CLI::IsMember({"gap", "2x2"}));
  a->add_option("--epochs", o.probe.epochs, "Probe epochs");
  a->add_option("--lr", o.probe.lr, "Initial probe learning rate");
  a->add_option("--weight-decay", o.probe.weight_decay, "Probe weight decay");
  a->add_option("--batch-size", o.probe.batch_size, "Probe minibatch size");
}

void setup_probe(Command& c, ProbeOpts& o) {
  auto* a = c.app;
  add_probe_options(a, o);
  a->add_option("--task", o.task, "shape, color, shape-presence, color-presence or labels")
      ->check(CLI::IsMember({"shape", "color", "shape-presence", "color-presence", "labels"}));
  a->add_option("--layers", o.layers, "Trailing backbone blocks probed");
  a->add_option("--train-labels", o.train_labels, "labels.jsonl for the train split (labels task)");
  a->add_option("--test-labels", o.test_labels, "labels.jsonl for the test split (labels task)");
  a->add_option("--out", c.out, "Results directory");
  c.out = "results";
  add_common(c);
  c.run = [&o](Command& c, RunRecord& rec) {
    const auto train_ds = load_data(o.train_data, rec, "train_data");
    const auto test_ds = load_data(o.test_data, rec, "test_data");
    auto enc = probe_backbone(o.ckpt, o.random_init, c.seed, rec);
    const auto tr = task_data(train_ds, o.task, o.train_labels);
    const auto te = task_data(test_ds, o.task, o.test_labels);
    if (tr.n_classes != te.n_classes) throw IngestionError("train and test label dimensions differ");
    const auto mode = parse_pool(o.pool);
    const auto ftr = evaluator::extract_features(enc, tr.images, o.layers, mode);
    const auto fte = evaluator::extract_features(enc, te.images, o.layers, mode);
    o.probe.seed = c.seed;
    std::vector<evaluator::ProbeResult> results;
    for (std::size_t l = 0; l < ftr.size(); ++l) {
      const auto a = feature_set(ftr[l].X, tr);
      const auto b = feature_set(fte[l].X, te);
      auto r = tr.multilabel ? evaluator::linear_probe_multilabel(a, b, o.probe, ftr[l].layer_tag)
                             : evaluator::linear_probe_multiclass(a, b, tr.n_classes, o.probe, ftr[l].layer_tag);
      r.task = o.task + (o.random_init ? " (random init)" : "");
      results.push_back(std::move(r));
    }
    write_results(results, c.out, rec);
  };
}

// Class c = color * |shapes| + shape; attributes are a color one-hot then a shape one-hot.
evaluator::AttributeMatrix shape_color_attributes(const std::string& unseen) {
  const int ns = static_cast<int>(corpus::kShapeKinds.size());
  const int nc = static_cast<int>(corpus::kColors.size());
  evaluator::AttributeMatrix m;
  m.A = Tensor<double>({nc * ns, nc + ns});
  std::set<int> held;
  for (const auto& pair : split_list(unseen)) {
    const auto parts = split_list(pair, ':');
    if (parts.size() != 2) throw UsageError("--unseen entries look like color:shape, got '" + pair + "'");
    held.insert(static_cast<int>(corpus::parse_color(parts[0])) * ns + static_cast<int>(corpus::parse_shape(parts[1])));
  }
  for (int col = 0; col < nc; ++col) {
    for (int s = 0; s < ns; ++s) {
      const int cls = col * ns + s;
      m.A.at(cls, col) = 1.0;
      m.A.at(cls, nc + s) = 1.0;
      (held.count(cls) ? m.unseen : m.seen).push_back(cls);
    }
  }
  return m;
}

TaskData combo_data(const corpus::Dataset& ds) {
  TaskData t;
  const int ns = static_cast<int>(corpus::kShapeKinds.size());
  for (const auto& img : ds.images) {
    const auto& spec = scene_of(ds, img.image_id);
    if (spec.shapes.size() != 1) continue;
    t.images.push_back(&img);
    t.labels.push_back(static_cast<int>(spec.shapes[0].color) * ns + static_cast<int>(spec.shapes[0].shape));
  }
  if (t.images.empty()) throw IngestionError("no single-shape scenes for zero-shot evaluation");
  return t;
}

struct ZeroShotOpts {
  ProbeOpts p;
  std::string unseen = "red:circle,green:square,blue:triangle,yellow:star,purple:circle,cyan:square";
};

void setup_zero_shot(Command& c, ZeroShotOpts& o) {
  auto* a = c.app;
  add_probe_options(a, o.p);
  a->add_option("--unseen", o.unseen, "Comma-separated color:shape classes held out of training");
  a->add_option("--out", c.out, "Results directory");
  c.out = "results";
  add_common(c);
  c.run = [&o](Command& c, RunRecord& rec) {
    const auto attrs = shape_color_attributes(o.unseen);
    const auto train_ds = load_data(o.p.train_data, rec, "train_data");
    const auto test_ds = load_data(o.p.test_data, rec, "test_data");
    auto enc = probe_backbone(o.p.ckpt, o.p.random_init, c.seed, rec);
    auto tr = combo_data(train_ds);
    const auto te = combo_data(test_ds);
    TaskData seen_only;
    for (std::size_t i = 0; i < tr.images.size(); ++i) {
      if (std::find(attrs.seen.begin(), attrs.seen.end(), tr.labels[i]) == attrs.seen.end()) continue;
      seen_only.images.push_back(tr.images[i]);
      seen_only.labels.push_back(tr.labels[i]);
    }
    if (seen_only.images.empty()) throw IngestionError("no training scenes of seen classes");
    tr = std::move(seen_only);
    const auto mode = parse_pool(o.p.pool);
    const auto ftr = evaluator::extract_features(enc, tr.images, 1, mode);
    const auto fte = evaluator::extract_features(enc, te.images, 1, mode);
    o.p.probe.seed = c.seed;
    const auto z = evaluator::zero_shot_eval(feature_set(ftr[0].X, tr), feature_set(fte[0].X, te), attrs, o.p.probe);
    fs::create_directories(c.out);
    write_json(c.out / "zero_shot.json",
               {{"layer_tag", ftr[0].layer_tag},
                {"random_init", o.p.random_init},
                {"top1", z.top1},
                {"top1_seen", z.top1_seen},
                {"top1_unseen", z.top1_unseen},
                {"n_eval", z.n_eval}},
               rec);
    std::cout << "zero-shot top-1 " << z.top1 * 100 << "% (seen " << z.top1_seen * 100 << "%, unseen "
              << z.top1_unseen * 100 << "%, n=" << z.n_eval << ")\n";
  };
}

struct AttendOpts {
  fs::path ckpt, data;
  std::string image_id, caption, mask_token;
};

void setup_attend(Command& c, AttendOpts& o) {
  auto* a = c.app;
  a->add_option("--ckpt", o.ckpt, "Checkpoint directory")->required();
  a->add_option("--data", o.data, "Dataset holding the image")->required();
  a->add_option("--image-id", o.image_id, "Image id")->required();
  a->add_option("--caption", o.caption, "Caption text")->required();
  a->add_option("--mask-token", o.mask_token, "Caption token to mask")->required();
  a->add_option("--out", c.out, "Output directory");
  c.out = "attention";
  add_common(c);
  c.run = [&o](Command& c, RunRecord& rec) {
    require_input(o.ckpt, "checkpoint");
    const auto ds = load_data(o.data, rec);
    rec.add_input("ckpt", o.ckpt);
    auto st = trainer::load_checkpoint(o.ckpt);
    if (!model::is_icmlm(st.config.model.flavor)) throw UsageError("attend needs an icmlm checkpoint");
    const auto tokens = captions::split_tokens(o.caption);
    const auto it = std::find(tokens.begin(), tokens.end(), o.mask_token);
    if (it == tokens.end()) throw UsageError("mask token '" + o.mask_token + "' is not in the caption");
    const auto& image = ds.image(o.image_id);
    const auto map = model::extract_attention(st.model, *st.lm, image, tokens, static_cast<int>(it - tokens.begin()),
                                              "cli");
    fs::create_directories(c.out);
    const std::string stem = o.image_id + "_" + o.mask_token;
    fusion::save_attention(map, image, c.out / (stem + ".png"), c.out / (stem + ".json"));
    rec.add_artifact(c.out / (stem + ".png"));
    rec.add_artifact(c.out / (stem + ".json"));
    std::cout << "wrote " << (c.out / (stem + ".png")).string() << "\n";
  };
}

// ---------------------------------------------------------------- config files

std::string config_value(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    for (const auto& e : v) s += (s.empty() ? "" : ",") + config_value(e);
    return s;
  }
  return v.dump();
}

bool given(const std::vector<std::string>& args, const CLI::Option* opt) {
  for (const auto& name : opt->get_lnames()) {
    const std::string flag = "--" + name;
    for (const auto& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
  }
  return false;
}

// Appends the values of a --config file for flags absent from args.
std::vector<std::string> inject_config(CLI::App& app, std::vector<std::string> args) {
  auto sub_it = std::find_if(args.begin(), args.end(), [&](const std::string& a) {
    return app.get_subcommand_no_throw(a) != nullptr;
  });
  if (sub_it == args.end()) return args;
  CLI::App* sub = app.get_subcommand(*sub_it);
  fs::path path;
  for (auto it = sub_it + 1; it != args.end(); ++it) {
    if (*it == "--config" && it + 1 != args.end()) path = *(it + 1);
    if (it->rfind("--config=", 0) == 0) path = it->substr(9);
  }
  if (path.empty()) return args;
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(io::read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": expected a flat JSON object");
  const std::vector<std::string> original = args;
  for (const auto& [key, value] : j.items()) {
    const CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config") throw ConfigError("unknown config key '" + key + "' in " + path.string());
    if (given(original, opt)) continue;
    if (opt->get_type_size() == 0) {
      if (value.is_boolean() && value.get<bool>()) args.push_back("--" + key);
      continue;
    }
    args.push_back("--" + key);
    args.push_back(config_value(value));
  }
  return args;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ContractViolation*>(&e) != nullptr) return 2;
  if (dynamic_cast<const Error*>(&e) != nullptr) return 1;
  return 2;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image-conditioned masked language modeling on synthetic scenes"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  std::vector<Command> commands(9);
  SynthOpts synth;
  PretrainOpts pretrain;
  ConceptOpts concepts;
  TripletOpts triplets;
  TrainOpts train;
  EvalMtpOpts eval_mtp;
  ProbeOpts probe;
  ZeroShotOpts zero_shot;
  AttendOpts attend;
  const std::vector<std::pair<std::string, std::string>> names = {
      {"synth-gen", "Render a synthetic image-caption dataset"},
      {"pretrain-lm", "Pretrain and freeze the reference language model"},
      {"build-concepts", "Select concepts and write per-image label vectors"},
      {"build-triplets", "Write (image, caption, masked position) triplets"},
      {"train", "Train a tag-prediction or ICMLM model"},
      {"eval-mtp", "Masked-token prediction accuracy against the text-only model"},
      {"probe", "Linear probes on frozen backbone features"},
      {"zero-shot", "Attribute-based zero-shot classification of color-shape classes"},
      {"attend", "Attention heatmap for one masked caption token"},
  };
  for (std::size_t i = 0; i < names.size(); ++i) {
    commands[i].name = names[i].first;
    commands[i].app = app.add_subcommand(names[i].first, names[i].second);
  }
  setup_synth(commands[0], synth);
  setup_pretrain(commands[1], pretrain);
  setup_concepts(commands[2], concepts);
  setup_triplets(commands[3], triplets);
  setup_train(commands[4], train);
  setup_eval_mtp(commands[5], eval_mtp);
  setup_probe(commands[6], probe);
  setup_zero_shot(commands[7], zero_shot);
  setup_attend(commands[8], attend);

  RunRecord rec(argc, argv);
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_error;
  int config_exit = 0;
  try {
    args = inject_config(app, args);
  } catch (const std::exception& e) {
    config_error = one_line(e.what());
    config_exit = exit_code_for(e);
  }

  Command* active = nullptr;
  auto locate = [&] {
    for (auto& c : commands) {
      if (c.app->parsed()) active = &c;
    }
    if (active != nullptr) {
      rec.set_subcommand(active->name);
      rec.set_out(active->out);
      rec.set_seed(active->seed);
    }
  };

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    locate();
    const std::string msg = one_line(e.what());
    std::cerr << "error: " << msg << "\n";
    std::cout << (active != nullptr ? active->app->help() : app.help());
    rec.write(1, msg);
    return 1;
  }
  locate();
  if (!config_error.empty()) {
    std::cerr << "error: " << config_error << "\n";
    rec.write(config_exit, config_error);
    return config_exit;
  }

  try {
    active->run(*active, rec);
  } catch (const UsageError& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    std::cout << active->app->help();
    rec.write(1, one_line(e.what()));
    return 1;
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    std::cerr << "error: " << one_line(e.what()) << "\n";
    rec.set_seed(active->seed);
    rec.write(code, one_line(e.what()));
    return code;
  }
  rec.set_seed(active->seed);
  rec.write(0, "");
  return 0;
}
