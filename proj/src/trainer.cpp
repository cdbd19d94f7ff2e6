#include "icmlm/trainer.hpp"

#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include "icmlm/image_io.hpp"
#include "icmlm/serialize.hpp"

namespace icmlm::trainer {

using nlohmann::json;

namespace {

enum class Kind { integer, real, boolean, text };

struct Key {
  const char* name;
  Kind kind;
  std::function<json(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const json&)> set;
};

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& key, const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    int v = 0;
    auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
    if (ec != std::errc() || p != part.data() + part.size()) {
      throw ConfigError("config key '" + key + "' expects comma-separated integers, got '" + s + "'");
    }
    out.push_back(v);
  }
  return out;
}

std::string_view kind_name(optim::Kind k) { return k == optim::Kind::sgd ? "sgd" : "adam"; }
optim::Kind parse_kind(const std::string& s) {
  if (s == "sgd") return optim::Kind::sgd;
  if (s == "adam") return optim::Kind::adam;
  throw ConfigError("optimizer must be sgd or adam, got '" + s + "'");
}
std::string_view schedule_name(optim::Schedule s) {
  switch (s) {
    case optim::Schedule::constant: return "constant";
    case optim::Schedule::cosine: return "cosine";
    case optim::Schedule::step: return "step";
  }
  return "?";
}
optim::Schedule parse_schedule(const std::string& s) {
  if (s == "constant") return optim::Schedule::constant;
  if (s == "cosine") return optim::Schedule::cosine;
  if (s == "step") return optim::Schedule::step;
  throw ConfigError("schedule must be constant, cosine or step, got '" + s + "'");
}

#define ICMLM_INT_KEY(NAME, FIELD)                                                     \
  Key {                                                                                \
    NAME, Kind::integer, [](const TrainConfig& c) { return json(c.FIELD); },           \
        [](TrainConfig& c, const json& v) { c.FIELD = v.get<decltype(c.FIELD)>(); } \
  }
#define ICMLM_REAL_KEY(NAME, FIELD)                                          \
  Key {                                                                      \
    NAME, Kind::real, [](const TrainConfig& c) { return json(c.FIELD); },    \
        [](TrainConfig& c, const json& v) { c.FIELD = v.get<double>(); } \
  }
#define ICMLM_BOOL_KEY(NAME, FIELD)                                         \
  Key {                                                                     \
    NAME, Kind::boolean, [](const TrainConfig& c) { return json(c.FIELD); }, \
        [](TrainConfig& c, const json& v) { c.FIELD = v.get<bool>(); }    \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      {"model_flavor", Kind::text, [](const TrainConfig& c) { return json(model::to_string(c.model.flavor)); },
       [](TrainConfig& c, const json& v) { c.model.flavor = model::parse_flavor(v.get<std::string>()); }},
      ICMLM_REAL_KEY("lambda", lambda),
      ICMLM_INT_KEY("steps", steps),
      ICMLM_INT_KEY("batch_size", batch_size),
      ICMLM_REAL_KEY("learning_rate", learning_rate),
      ICMLM_REAL_KEY("weight_decay", weight_decay),
      ICMLM_REAL_KEY("momentum", momentum),
      {"optimizer", Kind::text, [](const TrainConfig& c) { return json(kind_name(c.optimizer)); },
       [](TrainConfig& c, const json& v) { c.optimizer = parse_kind(v.get<std::string>()); }},
      {"schedule", Kind::text, [](const TrainConfig& c) { return json(schedule_name(c.schedule)); },
       [](TrainConfig& c, const json& v) { c.schedule = parse_schedule(v.get<std::string>()); }},
      ICMLM_INT_KEY("lr_schedule_steps", lr_schedule_steps),
      ICMLM_INT_KEY("lr_step_every", lr_step_every),
      ICMLM_REAL_KEY("lr_gamma", lr_gamma),
      ICMLM_INT_KEY("warmup_steps", warmup_steps),
      ICMLM_BOOL_KEY("warmup_freeze_backbone", warmup_freeze_backbone),
      ICMLM_INT_KEY("seed", seed),
      ICMLM_INT_KEY("log_every", log_every),
      ICMLM_INT_KEY("checkpoint_every", checkpoint_every),
      ICMLM_INT_KEY("image_size", model.vision.image_size),
      {"widths", Kind::text, [](const TrainConfig& c) { return json(join_ints(c.model.vision.widths)); },
       [](TrainConfig& c, const json& v) { c.model.vision.widths = split_ints("widths", v.get<std::string>()); }},
      {"strides", Kind::text, [](const TrainConfig& c) { return json(join_ints(c.model.vision.strides)); },
       [](TrainConfig& c, const json& v) { c.model.vision.strides = split_ints("strides", v.get<std::string>()); }},
      ICMLM_INT_KEY("tp_layers", model.tp_layers),
      ICMLM_INT_KEY("tp_width", model.tp_width),
      ICMLM_INT_KEY("heads", model.heads),
      ICMLM_INT_KEY("d_z", model.d_z),
      ICMLM_INT_KEY("fc_hidden_layers", model.fc_hidden_layers),
      ICMLM_INT_KEY("fc_hidden_dim", model.fc_hidden_dim),
      ICMLM_INT_KEY("tfm_head_dim", model.tfm_head_dim),
      ICMLM_INT_KEY("tfm_ff_dim", model.tfm_ff_dim),
      ICMLM_REAL_KEY("tfm_dropout", model.tfm_dropout),
      ICMLM_BOOL_KEY("tfm_positional", model.tfm_positional),
  };
  return table;
}

#undef ICMLM_INT_KEY
#undef ICMLM_REAL_KEY
#undef ICMLM_BOOL_KEY

const Key& find_key(const std::string& name) {
  for (const auto& k : keys()) {
    if (name == k.name) return k;
  }
  throw ConfigError("unknown config key '" + name + "'");
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("config key '" + key + "' " + what);
}

std::vector<int> epoch_permutation(std::uint64_t seed, long epoch, int n) {
  return Rng::derive(seed, 0x45504F43, static_cast<std::uint64_t>(epoch)).permutation(n);
}

}  // namespace

void TrainConfig::validate() const {
  require(steps >= 0, "steps", "must be >= 0");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate", "must be > 0");
  require(weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(momentum >= 0.0 && momentum < 1.0, "momentum", "must be in [0, 1)");
  require(lambda >= 0.0 && std::isfinite(lambda), "lambda", "must be >= 0");
  require(warmup_steps >= 0, "warmup_steps", "must be >= 0");
  require(steps == 0 || warmup_steps < steps, "warmup_steps", "must be < steps");
  require(lr_schedule_steps >= 0, "lr_schedule_steps", "must be >= 0");
  require(lr_gamma > 0.0, "lr_gamma", "must be > 0");
  require(log_every >= 1, "log_every", "must be >= 1");
  require(checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
  require(!model.vision.widths.empty() && model.vision.widths.size() == model.vision.strides.size(), "strides",
          "needs one entry per width");
  for (int w : model.vision.widths) require(w >= 1, "widths", "entries must be >= 1");
  for (int s : model.vision.strides) require(s >= 1, "strides", "entries must be >= 1");
  require(model.vision.image_size >= 4, "image_size", "must be >= 4");
  require(model.heads >= 1, "heads", "must be >= 1");
  require(model.d_z >= 1, "d_z", "must be >= 1");
  require(model.fc_hidden_layers >= 0, "fc_hidden_layers", "must be >= 0");
  require(model.tfm_dropout >= 0.0 && model.tfm_dropout < 1.0, "tfm_dropout", "must be in [0, 1)");
}

json to_json(const TrainConfig& cfg) {
  json j = json::object();
  for (const auto& k : keys()) j[k.name] = k.get(cfg);
  return j;
}

void apply_json(TrainConfig& cfg, const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a flat JSON object");
  for (const auto& [name, value] : j.items()) {
    const Key& k = find_key(name);
    try {
      if (k.kind == Kind::text && !value.is_string()) throw ConfigError("");
      if (k.kind == Kind::boolean && !value.is_boolean()) throw ConfigError("");
      if ((k.kind == Kind::integer || k.kind == Kind::real) && !value.is_number()) throw ConfigError("");
      if (k.kind == Kind::integer && !value.is_number_integer()) throw ConfigError("");
      k.set(cfg, value);
    } catch (const ConfigError& e) {
      if (std::string(e.what()).empty()) throw ConfigError("config key '" + name + "' has the wrong type");
      throw;
    } catch (const json::exception&) {
      throw ConfigError("config key '" + name + "' has the wrong type");
    }
  }
}

void apply_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const Key& k = find_key(key);
  json v;
  switch (k.kind) {
    case Kind::text: v = value; break;
    case Kind::boolean:
      if (value == "true" || value == "1") {
        v = true;
      } else if (value == "false" || value == "0") {
        v = false;
      } else {
        throw ConfigError("config key '" + key + "' expects true or false, got '" + value + "'");
      }
      break;
    case Kind::integer: {
      long long x = 0;
      auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), x);
      if (ec != std::errc() || p != value.data() + value.size()) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + value + "'");
      }
      v = x;
      break;
    }
    case Kind::real: {
      try {
        std::size_t used = 0;
        v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
      } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
      }
      break;
    }
  }
  k.set(cfg, v);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.emplace_back(k.name);
  return out;
}

TrainConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(io::read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  TrainConfig cfg;
  apply_json(cfg, j);
  return cfg;
}

// ---------------------------------------------------------------- data

TrainingData make_training_data(const corpus::Dataset& ds, std::vector<captions::MaskTriplet> triplets,
                                const std::vector<captions::LabelVector>& labels) {
  TrainingData d;
  d.dataset = &ds;
  d.sequences = captions::tokenize_dataset(ds);
  d.triplets = std::move(triplets);
  std::set<std::string> known;
  for (const auto& s : d.sequences) {
    if (!s.excluded) known.insert(s.caption_id);
  }
  for (const auto& t : d.triplets) {
    ds.image(t.image_id);
    if (!known.count(t.caption_id)) {
      throw ContractViolation("triplet refers to unknown or excluded caption '" + t.caption_id + "'");
    }
  }
  for (const auto& l : labels) {
    ds.image(l.image_id);
    if (d.k == 0) d.k = static_cast<int>(l.y.size());
    if (static_cast<int>(l.y.size()) != d.k) throw ContractViolation("label vectors have inconsistent K");
    d.labels[l.image_id] = l;
  }
  for (const auto& img : ds.images) {
    auto it = d.labels.find(img.image_id);
    if (it != d.labels.end() && !it->second.excluded) d.tp_units.push_back(img.image_id);
  }
  return d;
}

// ---------------------------------------------------------------- training

TrainState init_training(const TrainConfig& cfg_in, std::shared_ptr<text::LanguageModel> lm, int k) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  ICMLM_REQUIRE(lm != nullptr, "training needs the frozen language model");
  cfg.model.k = k;
  if (!model::is_icmlm(cfg.model.flavor) && k < 1) {
    throw ConfigError("flavor " + std::string(model::to_string(cfg.model.flavor)) + " needs tag labels");
  }
  if (model::is_icmlm(cfg.model.flavor) && cfg.lambda > 0.0 && k < 1) {
    throw ConfigError("lambda > 0 needs tag labels");
  }
  lm->freeze();
  TrainState st{cfg, lm, model::Model<float>(cfg.model, lm->d_w(), cfg.seed),
                optim::Optimizer<float>(optim::Options{cfg.optimizer, cfg.learning_rate, cfg.momentum,
                                                      cfg.weight_decay, 0.9, 0.999, 1e-8}),
                0,
                {}};
  return st;
}

void run(TrainState& st, const TrainingData& data, model::TextCache& text, const Hooks& hooks) {
  const TrainConfig& cfg = st.config;
  cfg.validate();
  const bool icmlm = model::is_icmlm(cfg.model.flavor);
  const bool want_tp = st.model.tp.has_value() && (!icmlm || cfg.lambda > 0.0);
  const int n_units = static_cast<int>(icmlm ? data.triplets.size() : data.tp_units.size());
  if (st.step < cfg.steps && n_units == 0) {
    throw ContractViolation(icmlm ? "no triplets to train on" : "no labelled images to train on");
  }
  if (want_tp && data.k != cfg.model.k) {
    throw ConfigError("label dimension " + std::to_string(data.k) + " does not match K=" +
                      std::to_string(cfg.model.k));
  }
  const Tensor<float>& vocab = st.lm->embedding_table().value;
  const int vocab_size = vocab.dim(0);
  const long horizon = cfg.lr_schedule_steps > 0 ? cfg.lr_schedule_steps : cfg.steps;
  std::map<long, std::vector<int>> perms;

  while (st.step < cfg.steps) {
    const long s = st.step;
    const auto base = static_cast<std::int64_t>(s) * cfg.batch_size;
    std::vector<int> units;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::int64_t i = base + b;
      const long epoch = static_cast<long>(i / n_units);
      auto it = perms.find(epoch);
      if (it == perms.end()) {
        perms.clear();
        it = perms.emplace(epoch, epoch_permutation(cfg.seed, epoch, n_units)).first;
      }
      units.push_back(it->second[static_cast<std::size_t>(i % n_units)]);
    }

    std::map<std::string, int> slot_of;
    std::vector<const corpus::ImageRecord*> imgs;
    std::vector<std::string> batch_ids;
    auto slot = [&](const std::string& id) {
      auto [it, fresh] = slot_of.emplace(id, static_cast<int>(imgs.size()));
      if (fresh) imgs.push_back(&data.dataset->image(id));
      return it->second;
    };
    std::vector<model::BatchItem<float>> items;
    std::vector<int> targets;
    for (int u : units) {
      if (icmlm) {
        const auto& t = data.triplets[static_cast<std::size_t>(u)];
        ICMLM_REQUIRE(t.target_vocab_id >= 0 && t.target_vocab_id < vocab_size,
                      "triplet target id outside the vocabulary");
        items.push_back({slot(t.image_id), &text.features(t.caption_id, t.mask_index), t.mask_index});
        targets.push_back(t.target_vocab_id);
        batch_ids.push_back(t.image_id + "/" + t.caption_id + "#" + std::to_string(t.mask_index));
      } else {
        slot(data.tp_units[static_cast<std::size_t>(u)]);
        batch_ids.push_back(data.tp_units[static_cast<std::size_t>(u)]);
      }
    }
    std::vector<int> tp_rows;
    Tensor<float> tp_labels;
    if (want_tp) {
      std::vector<float> flat;
      if (icmlm) {
        for (std::size_t r = 0; r < imgs.size(); ++r) {
          auto it = data.labels.find(imgs[r]->image_id);
          if (it == data.labels.end() || it->second.excluded) continue;
          tp_rows.push_back(static_cast<int>(r));
          flat.insert(flat.end(), it->second.y.begin(), it->second.y.end());
        }
      } else {
        // Every unit is a labelled image; repeated draws count once per draw.
        for (int u : units) {
          const auto& id = data.tp_units[static_cast<std::size_t>(u)];
          tp_rows.push_back(slot_of.at(id));
          const auto& y = data.labels.at(id).y;
          flat.insert(flat.end(), y.begin(), y.end());
        }
      }
      if (!tp_rows.empty()) {
        tp_labels = Tensor<float>({static_cast<int>(tp_rows.size()), data.k}, std::move(flat));
      }
    }

    const bool freeze = cfg.warmup_freeze_backbone && s < cfg.warmup_steps;
    st.model.vision.set_trainable(!freeze);
    ag::Graph<float> g(true);
    Rng rng = Rng::derive(cfg.seed, 0x5452, static_cast<std::uint64_t>(s));
    auto out = model::forward_batch(g, st.model, g.constant(vision::batch_tensor(imgs, cfg.model.vision.image_size)),
                                    items, g.constant_ref(vocab), want_tp && !tp_rows.empty(), true, &rng);
    auto terms = model::batch_loss(g, out, targets, tp_rows, tp_labels, static_cast<float>(cfg.lambda));

    const double l_total = terms.total.value()[0];
    if (!std::isfinite(l_total)) {
      std::string ids;
      for (const auto& b : batch_ids) ids += (ids.empty() ? "" : ", ") + b;
      throw TrainingError("non-finite loss at step " + std::to_string(s) + "; batch: " + ids);
    }

    nn::ParamRefs<float> active;
    if (!freeze) active = st.model.backbone_parameters();
    for (auto* p : st.model.fusion_parameters()) active.push_back(p);
    if (terms.tp_active) {
      for (auto* p : st.model.tp_parameters()) active.push_back(p);
    }
    optim::zero_grads(active);
    g.backward(terms.total);
    const double lr = cfg.learning_rate * optim::schedule_factor(cfg.schedule, s, horizon, cfg.lr_step_every,
                                                                 cfg.lr_gamma);
    st.optimizer.step(active, lr);
    st.model.vision.set_trainable(true);
    ++st.step;

    if (s % cfg.log_every == 0 || st.step == cfg.steps) {
      objectives::LossReport r;
      r.step = s;
      r.lambda = cfg.lambda;
      r.batch_size = cfg.batch_size;
      r.tp_active = terms.tp_active;
      r.l_mlm = terms.mlm_active ? terms.mlm.value()[0] : 0.0;
      r.l_tp = terms.tp_active ? terms.tp.value()[0] : 0.0;
      r.l_total = terms.mlm_active ? objectives::combined_loss(r.l_mlm, terms.tp_active ? r.l_tp : 0.0, cfg.lambda)
                                   : r.l_tp;
      r.lr = lr;
      st.history.push_back(r);
      if (hooks.on_log) hooks.on_log(r);
    }
    if (!hooks.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) {
      save_checkpoint(st, hooks.checkpoint_dir);
    }
  }
  if (!hooks.checkpoint_dir.empty()) save_checkpoint(st, hooks.checkpoint_dir);
}

TrainState train(const TrainingData& data, const TrainConfig& cfg, std::shared_ptr<text::LanguageModel> lm,
                 const Hooks& hooks) {
  TrainState st = init_training(cfg, std::move(lm), data.k);
  model::TextCache text(*st.lm, data.sequences);
  run(st, data, text, hooks);
  return st;
}

void check_resume_compatible(const TrainState& st, const TrainConfig& requested, int k, int vocab_size) {
  const auto& a = st.config.model;
  const auto& b = requested.model;
  auto refuse = [](const std::string& what) { throw ConfigError("cannot resume: " + what); };
  if (a.flavor != b.flavor) {
    refuse("flavor changed from " + std::string(model::to_string(a.flavor)) + " to " +
           std::string(model::to_string(b.flavor)));
  }
  if (a.k != k) refuse("K changed from " + std::to_string(a.k) + " to " + std::to_string(k));
  if (st.lm->vocab().size() != vocab_size) {
    refuse("|V| changed from " + std::to_string(st.lm->vocab().size()) + " to " + std::to_string(vocab_size));
  }
  if (a.vision.widths != b.vision.widths || a.vision.strides != b.vision.strides ||
      a.vision.image_size != b.vision.image_size || a.tp_layers != b.tp_layers || a.tp_width != b.tp_width ||
      a.heads != b.heads || a.d_z != b.d_z || a.fc_hidden_layers != b.fc_hidden_layers ||
      a.fc_hidden_dim != b.fc_hidden_dim || a.tfm_head_dim != b.tfm_head_dim || a.tfm_ff_dim != b.tfm_ff_dim ||
      a.tfm_positional != b.tfm_positional) {
    refuse("model shape changed");
  }
}

void resume(TrainState& st, const TrainingData& data, long extra_steps, const Hooks& hooks) {
  ICMLM_REQUIRE(extra_steps >= 0, "extra_steps must be >= 0");
  const bool needs_labels = st.model.tp.has_value() && (!model::is_icmlm(st.config.model.flavor) ||
                                                        st.config.lambda > 0.0);
  if (needs_labels || data.k != 0) check_resume_compatible(st, st.config, data.k, st.lm->vocab().size());
  for (const auto& t : data.triplets) {
    if (t.target_vocab_id >= st.lm->vocab().size()) throw ConfigError("cannot resume: |V| changed");
  }
  if (extra_steps == 0) return;
  st.config.steps = st.step + extra_steps;
  model::TextCache text(*st.lm, data.sequences);
  run(st, data, text, hooks);
}

// ---------------------------------------------------------------- checkpoints

std::uint32_t checksum(nn::ParamRefs<float> params) { return text::parameter_checksum(params); }
std::uint32_t model_checksum(model::Model<float>& m) { return checksum(m.parameters()); }

json to_json(const objectives::LossReport& r) {
  return {{"step", r.step},     {"l_tp", r.l_tp},       {"l_mlm", r.l_mlm},
          {"l_total", r.l_total}, {"lambda", r.lambda}, {"batch_size", r.batch_size},
          {"tp_active", r.tp_active}, {"lr", r.lr}};
}

namespace {

objectives::LossReport report_from_json(const json& j) {
  objectives::LossReport r;
  r.step = j.at("step").get<long>();
  r.l_tp = j.at("l_tp").get<double>();
  r.l_mlm = j.at("l_mlm").get<double>();
  r.l_total = j.at("l_total").get<double>();
  r.lambda = j.at("lambda").get<double>();
  r.batch_size = j.at("batch_size").get<int>();
  r.tp_active = j.at("tp_active").get<bool>();
  r.lr = j.at("lr").get<double>();
  return r;
}

json lm_config_json(const text::LmConfig& c) {
  return {{"d_w", c.d_w},       {"layers", c.layers}, {"heads", c.heads},     {"head_dim", c.head_dim},
          {"ff_dim", c.ff_dim}, {"max_len", c.max_len}, {"dropout", c.dropout}};
}

text::LmConfig lm_config_from_json(const json& j) {
  text::LmConfig c;
  c.d_w = j.at("d_w").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

void restore(const nn::ParamRefs<float>& params, std::map<std::string, Tensor<float>>& tensors,
             const std::filesystem::path& path) {
  for (auto* p : params) {
    auto it = tensors.find(p->name);
    if (it == tensors.end()) throw ParseError(path.string() + ": missing tensor " + p->name);
    if (it->second.shape() != p->value.shape()) {
      throw ParseError(path.string() + ": tensor " + p->name + " has shape " + shape_str(it->second.shape()) +
                       ", expected " + shape_str(p->value.shape()));
    }
    p->value = std::move(it->second);
    tensors.erase(it);
  }
}

}  // namespace

void save_checkpoint(TrainState& st, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::TensorList list;
  std::set<std::string> names;
  auto add = [&](const std::string& name, const Tensor<float>* t) {
    ICMLM_REQUIRE(names.insert(name).second, "duplicate tensor name " + name);
    list.emplace_back(name, t);
  };
  for (auto* p : st.model.parameters()) add(p->name, &p->value);
  for (auto* p : st.lm->parameters()) add(p->name, &p->value);
  for (const auto& [name, t] : st.optimizer.first_moments()) add("opt.m:" + name, &t);
  for (const auto& [name, t] : st.optimizer.second_moments()) add("opt.v:" + name, &t);
  io::write_tensors(dir / "weights.bin", list);
  st.lm->vocab().save(dir / "vocab.tsv");

  json hist = json::array();
  std::string log;
  for (const auto& r : st.history) {
    hist.push_back(to_json(r));
    log += to_json(r).dump() + "\n";
  }
  json meta = {{"format", "icmlm-checkpoint"},
               {"version", kCheckpointVersion},
               {"step", st.step},
               {"optimizer_steps", st.optimizer.steps_taken()},
               {"k", st.config.model.k},
               {"vocab_size", st.lm->vocab().size()},
               {"lm_config", lm_config_json(st.lm->config())},
               {"config", to_json(st.config)},
               {"model_checksum", model_checksum(st.model)},
               {"lm_checksum", st.lm->checksum()},
               {"history", hist}};
  io::write_text_file(dir / "meta.json", meta.dump(2) + "\n");
  io::write_text_file(dir / "log.jsonl", log);
}

TrainState load_checkpoint(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  if (!std::filesystem::exists(meta_path)) throw IngestionError("checkpoint not found: " + dir.string());
  json meta;
  try {
    meta = json::parse(io::read_text_file(meta_path));
  } catch (const json::parse_error& e) {
    throw ParseError(meta_path.string() + ": " + e.what());
  }
  if (meta.value("format", "") != "icmlm-checkpoint") throw ParseError(dir.string() + " is not a checkpoint");
  const int version = meta.at("version").get<int>();
  if (version != kCheckpointVersion) {
    throw IncompatibleVersion("checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  }
  TrainConfig cfg;
  apply_json(cfg, meta.at("config"));
  const int k = meta.at("k").get<int>();
  auto lm = std::make_shared<text::LanguageModel>(text::Vocabulary::load(dir / "vocab.tsv"),
                                                  lm_config_from_json(meta.at("lm_config")), 0);
  if (lm->vocab().size() != meta.at("vocab_size").get<int>()) throw ParseError("vocabulary size mismatch");

  TrainState st = init_training(cfg, lm, k);
  auto tensors = io::read_tensors(dir / "weights.bin");
  restore(st.model.parameters(), tensors, dir / "weights.bin");
  restore(lm->parameters(), tensors, dir / "weights.bin");
  lm->freeze();
  for (auto& [name, t] : tensors) {
    if (name.rfind("opt.m:", 0) == 0) {
      st.optimizer.first_moments()[name.substr(6)] = std::move(t);
    } else if (name.rfind("opt.v:", 0) == 0) {
      st.optimizer.second_moments()[name.substr(6)] = std::move(t);
    } else {
      throw ParseError((dir / "weights.bin").string() + ": unexpected tensor " + name);
    }
  }
  st.optimizer.set_steps_taken(meta.at("optimizer_steps").get<long>());
  st.step = meta.at("step").get<long>();
  for (const auto& r : meta.at("history")) st.history.push_back(report_from_json(r));
  if (meta.at("model_checksum").get<std::uint32_t>() != model_checksum(st.model)) {
    throw ParseError(dir.string() + ": checksum mismatch in weights.bin");
  }
  return st;
}

void save_language_model(text::LanguageModel& lm, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::TensorList list;
  for (auto* p : lm.parameters()) list.emplace_back(p->name, &p->value);
  io::write_tensors(dir / "weights.bin", list);
  lm.vocab().save(dir / "vocab.tsv");
  const json meta = {{"format", "icmlm-lm"},
                     {"version", kCheckpointVersion},
                     {"vocab_size", lm.vocab().size()},
                     {"lm_config", lm_config_json(lm.config())},
                     {"checksum", lm.checksum()}};
  io::write_text_file(dir / "meta.json", meta.dump(2) + "\n");
}

std::shared_ptr<text::LanguageModel> load_language_model(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.json";
  if (!std::filesystem::exists(meta_path)) throw IngestionError("language model not found: " + dir.string());
  json meta;
  try {
    meta = json::parse(io::read_text_file(meta_path));
  } catch (const json::parse_error& e) {
    throw ParseError(meta_path.string() + ": " + e.what());
  }
  if (meta.value("format", "") != "icmlm-lm") throw ParseError(dir.string() + " is not a language model");
  const int version = meta.at("version").get<int>();
  if (version != kCheckpointVersion) {
    throw IncompatibleVersion("language model version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  }
  auto lm = std::make_shared<text::LanguageModel>(text::Vocabulary::load(dir / "vocab.tsv"),
                                                  lm_config_from_json(meta.at("lm_config")), 0);
  if (lm->vocab().size() != meta.at("vocab_size").get<int>()) throw ParseError("vocabulary size mismatch");
  auto tensors = io::read_tensors(dir / "weights.bin");
  restore(lm->parameters(), tensors, dir / "weights.bin");
  if (!tensors.empty()) throw ParseError((dir / "weights.bin").string() + ": unexpected tensor " + tensors.begin()->first);
  lm->freeze();
  if (lm->checksum() != meta.at("checksum").get<std::uint32_t>()) {
    throw ParseError(dir.string() + ": checksum mismatch in weights.bin");
  }
  return lm;
}

}  // namespace icmlm::trainer
