#include <quadmath.h>

#include <cmath>
#include <limits>
#include <map>

#include "../support/gradcheck.hpp"
#include "../support/tiny.hpp"
#include "../support/tmpdir.hpp"
#include "acceptance.hpp"
#include "icmlm/image_io.hpp"

namespace icmlm::acceptance {

namespace {

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(scale * rng.normal());
  return t;
}

// ---------------------------------------------------------------- k-means

int brute_nearest(const Tensor<double>& c, std::span<const double> x) {
  int best = 0;
  long double best_d = std::numeric_limits<long double>::infinity();
  for (int k = 0; k < c.dim(0); ++k) {
    long double d = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const long double diff = static_cast<long double>(x[j]) - c.at(k, static_cast<int>(j));
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

// Returns {all monotone, all assignments match}.
std::pair<bool, bool> kmeans_checks(int instances) {
  bool monotone = true, match = true;
  for (int inst = 0; inst < instances; ++inst) {
    Rng rng(1000 + inst);
    const int d = 2 + inst % 4, k = 3 + inst % 5;
    const auto centers = random_tensor<double>({k, d}, rng, 4.0);
    Tensor<double> pts({200, d});
    for (int i = 0; i < 200; ++i) {
      const int c = static_cast<int>(rng.below(k));
      for (int j = 0; j < d; ++j) pts.at(i, j) = centers.at(c, j) + rng.normal();
    }
    const auto km = captions::kmeans(pts, k, inst);
    for (std::size_t i = 1; i < km.objective.size(); ++i) monotone = monotone && km.objective[i] <= km.objective[i - 1];
    for (int i = 0; i < 200; ++i) match = match && brute_nearest(km.centroids, pts.row(i)) == km.assignments[i];
  }
  return {monotone, match};
}

// ---------------------------------------------------------------- log-sum-exp

double lse_oracle(std::span<const double> x) {
  __float128 mx = x[0];
  for (double v : x) mx = std::max<__float128>(mx, v);
  __float128 total = 0;
  for (double v : x) total += expq(static_cast<__float128>(v) - mx);
  return static_cast<double>(mx + logq(total));
}

double worst_lse_error() {
  double worst = 0.0;
  Rng rng(77);
  for (int n : {1, 2, 10, 100, 1000, 10000}) {
    for (double scale : {0.1, 1.0, 30.0}) {
      for (double offset : {-500.0, 0.0, 3.0, 700.0}) {
        Tensor<double> s({1, n});
        for (double& v : s.values()) v = offset + scale * rng.normal();
        ag::Graph<double> g(false);
        const double got = ag::logsumexp(g.constant_ref(s)).value()[0];
        const double want = lse_oracle(s.row(0));
        const double err = got == want ? 0.0 : std::abs(got - want) / std::abs(want);
        worst = std::max(worst, err);
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------- attention distribution

double worst_p_att_error(int trials) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(5, 0x41545450, t);
    fusion::AttFcConfig c;
    c.heads = 1 + static_cast<int>(rng.below(4));
    c.d_z = 1 + static_cast<int>(rng.below(8));
    c.d_x = 1 + static_cast<int>(rng.below(12));
    c.d_w = 1 + static_cast<int>(rng.below(12));
    c.fc_hidden_dim = 8;
    const int n = 1 + static_cast<int>(rng.below(64));
    const int tokens = 1 + static_cast<int>(rng.below(25));
    fusion::AttFcHead<float> head(c, rng);
    for (float& v : head.sigma_h.value.values()) v = static_cast<float>(2.0 * rng.normal());
    head.b_h.value[0] = static_cast<float>(rng.normal());
    const double scale = std::exp(rng.uniform(-2.0, 3.0));
    ag::Graph<float> g(false);
    auto out = head.forward(g, g.constant(random_tensor<float>({n, c.d_x}, rng, scale)), {},
                            g.constant(random_tensor<float>({tokens, c.d_w}, rng, scale)),
                            g.constant(random_tensor<float>({7, c.d_w}, rng)));
    double sum = 0.0;
    for (float v : out.pool.p_att.value().values()) sum += v;
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  return worst;
}

// ---------------------------------------------------------------- miniature model

model::ModelConfig mini_config(model::Flavor flavor) {
  model::ModelConfig c;
  c.flavor = flavor;
  c.vision.image_size = 16;
  c.vision.widths = {4, 8, 8, 8};
  c.k = 5;
  c.tp_layers = 1;
  c.tp_width = 8;
  c.heads = 2;
  c.d_z = 8;
  c.fc_hidden_dim = 8;
  c.tfm_head_dim = 8;
  c.tfm_ff_dim = 16;
  c.tfm_dropout = 0.0;
  return c;
}

// Two 16x16 images (a 2x2 grid), three masked captions of T = 4 tokens.
struct MiniBatch {
  Tensor<double> images;
  std::vector<Tensor<double>> text;
  std::vector<int> mask_index{1, 2, 0};
  std::vector<int> slots{0, 1, 1};
  std::vector<int> targets{3, 7, 1};
  Tensor<double> table;
  Tensor<double> labels;
  std::vector<int> tp_rows{0, 1};

  explicit MiniBatch(std::uint64_t seed) {
    Rng rng(seed);
    images = Tensor<double>({2, 3, 16, 16});
    for (double& v : images.values()) v = rng.uniform();
    for (int i = 0; i < 3; ++i) text.push_back(random_tensor<double>({4, 8}, rng));
    table = random_tensor<double>({10, 8}, rng);
    labels = Tensor<double>({2, 5});
    for (int r = 0; r < 2; ++r) {
      double s = 0;
      for (int k = 0; k < 5; ++k) s += (labels.at(r, k) = rng.uniform(0.1, 1.0));
      for (int k = 0; k < 5; ++k) labels.at(r, k) /= s;
    }
  }

  model::BatchOutput<double> forward(ag::Graph<double>& g, model::Model<double>& m) const {
    std::vector<model::BatchItem<double>> items;
    for (int i = 0; i < 3; ++i) items.push_back({slots[i], &text[i], mask_index[i]});
    return model::forward_batch(g, m, g.constant_ref(images), items, g.constant_ref(table), true, false, nullptr);
  }
};

std::string group_of(const std::string& name) {
  if (name.rfind("vision.", 0) == 0) return "backbone";
  if (name.rfind("attfc.sigma_x", 0) == 0 || name.rfind("attfc.norm_x", 0) == 0) return "sigma_x";
  if (name.rfind("attfc.sigma_w", 0) == 0 || name.rfind("attfc.norm_w", 0) == 0) return "sigma_w";
  if (name == "attfc.sigma_h") return "sigma_h";
  if (name == "attfc.b_h") return "b_h";
  if (name.rfind("attfc.fc", 0) == 0) return "fc";
  if (name.rfind("tfm.", 0) == 0) return "tfm";
  if (name.rfind("tp.", 0) == 0) return "tp";
  return "other";
}

long double cross_entropy(std::span<const double> logits, std::span<const double> y) {
  long double mx = -std::numeric_limits<long double>::infinity();
  for (double v : logits) mx = std::max<long double>(mx, v);
  long double z = 0;
  for (double v : logits) z += std::exp(static_cast<long double>(v) - mx);
  const long double lse = mx + std::log(z);
  long double loss = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) loss -= y[k] * (logits[k] - lse);
  return loss;
}

std::uint32_t dir_crc(const std::filesystem::path& dir) {
  std::uint32_t crc = 0;
  for (const char* f : {"weights.bin", "meta.json", "log.jsonl", "vocab.tsv"}) {
    const std::uint32_t c = io::file_crc32(dir / f);
    crc = io::crc32(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(&c), sizeof c), crc);
  }
  return crc;
}

}  // namespace

Outcome criterion_oracles() {
  Outcome o{4, "closed-form oracles"};
  const auto [monotone, match] = kmeans_checks(20);
  const double lse = worst_lse_error();
  const double patt = worst_p_att_error(1000);

  double lin = 0.0;
  {
    MiniBatch mb(4);
    model::Model<double> m(mini_config(model::Flavor::icmlm_attfc), 8, 4);
    ag::Graph<double> g(false);
    const auto out = mb.forward(g, m);
    long double mlm = 0, tp = 0;
    for (int i = 0; i < 3; ++i) {
      std::vector<double> onehot(10, 0.0);
      onehot[mb.targets[i]] = 1.0;
      mlm += cross_entropy(out.logits.value().row(i), onehot) / 3;
    }
    for (int r = 0; r < 2; ++r) tp += cross_entropy(out.tp_logits.value().row(r), mb.labels.row(r)) / 2;
    for (double lambda : {0.0, 0.1, 1.0}) {
      const auto terms = model::batch_loss(g, out, mb.targets, mb.tp_rows, mb.labels, lambda);
      lin = std::max(lin, static_cast<double>(std::abs(terms.total.value()[0] - (mlm + lambda * tp))));
    }
  }

  o.pass = monotone && match && lse <= 1e-10 && patt <= 1e-6 && lin <= 1e-9;
  o.detail = fmt("k-means objective monotone %s, assignments match brute force %s (20 x 200 points); "
                 "log-sum-exp rel err %.2e (need <= 1e-10, |S| <= 1e4); p_att |sum-1| %.2e (need <= 1e-6, 1000 inputs); "
                 "|l_icmlm - (l_mlm + lambda l_tp)| %.2e (need <= 1e-9, lambda 0/0.1/1)",
                 monotone ? "yes" : "NO", match ? "yes" : "NO", lse, patt, lin);
  return o;
}

Outcome criterion_gradients() {
  Outcome o{5, "analytic gradients match finite differences"};
  std::map<std::string, double> worst;
  for (auto flavor : {model::Flavor::icmlm_attfc, model::Flavor::icmlm_tfm}) {
    MiniBatch mb(5);
    model::Model<double> m(mini_config(flavor), 8, 6);
    std::map<std::string, std::vector<Parameter<double>*>> groups;
    for (auto* p : m.parameters()) groups[group_of(p->name)].push_back(p);
    for (auto& [name, params] : groups) {
      const auto errs = testing::check_gradients(params, [&](ag::Graph<double>& g) {
        const auto out = mb.forward(g, m);
        return model::batch_loss(g, out, mb.targets, mb.tp_rows, mb.labels, 1.0).total;
      });
      worst[name] = std::max(worst[name], testing::worst(errs));
    }
  }
  bool ok = true;
  std::string parts;
  for (const char* g : {"backbone", "sigma_x", "sigma_w", "sigma_h", "b_h", "fc", "tfm", "tp"}) {
    const auto it = worst.find(g);
    const bool present = it != worst.end();
    ok = ok && present && it->second <= 1e-4;
    parts += fmt("%s%s %s", parts.empty() ? "" : ", ", g, present ? fmt("%.1e", it->second).c_str() : "missing");
  }
  ok = ok && !worst.count("other");
  o.pass = ok;
  o.detail = "worst relative error per group: " + parts + " (need <= 1e-4; d_x=d_w=d_z=8, 2x2 grid, T=4, 64-bit)";
  return o;
}

Outcome criterion_reductions() {
  Outcome o{6, "reductions to simpler models"};

  // Identity attributes turn the zero-shot scorer into the multiclass probe.
  double probe_top1 = 0, zs_top1 = 0;
  {
    corpus::SyntheticOptions single;
    single.min_shapes = single.max_shapes = 1;
    const auto ds = corpus::generate_synthetic(300, 31, single);
    Rng init(8);
    vision::VisionConfig vc;
    vc.widths = {8, 16, 16, 16};
    vision::VisionEncoder<float> enc(vc, init);
    std::vector<const corpus::ImageRecord*> imgs;
    std::vector<int> y;
    for (const auto& img : ds.images) {
      imgs.push_back(&img);
      y.push_back(static_cast<int>(ds.scenes.at(img.image_id).shapes[0].color));
    }
    const auto X = evaluator::extract_features(enc, imgs, 1, vision::PoolMode::global_average)[0].X;
    const int half = X.dim(0) / 2, d = X.dim(1);
    evaluator::FeatureSet tr, te;
    tr.X = Tensor<double>({half, d});
    te.X = Tensor<double>({X.dim(0) - half, d});
    for (int i = 0; i < X.dim(0); ++i) {
      auto& dst = i < half ? tr : te;
      std::copy(X.row(i).begin(), X.row(i).end(), dst.X.row(i < half ? i : i - half).begin());
      dst.labels.push_back(y[i]);
    }
    evaluator::ProbeConfig pc;
    pc.epochs = 30;
    pc.seed = 5;
    probe_top1 = evaluator::linear_probe_multiclass(tr, te, 6, pc).value;
    zs_top1 = evaluator::zero_shot_eval(tr, te, evaluator::identity_attributes(6), pc).top1;
  }

  // One head with unit averaging weights is the single-head path.
  bool bitwise = true;
  for (int t = 0; t < 100; ++t) {
    Rng rng = Rng::derive(6, 0x48454144, t);
    fusion::AttFcConfig c;
    c.heads = 1;
    c.d_x = 6;
    c.d_w = 5;
    c.d_z = 4;
    fusion::AttFcHead<double> head(c, rng);
    head.sigma_h.value.fill(1.0);
    head.b_h.value.fill(0.0);
    ag::Graph<double> g(false);
    const int n = 1 + static_cast<int>(rng.below(64));
    auto x = g.constant(random_tensor<double>({n, 6}, rng));
    auto s = head.scores(head.project_visual(g, x), head.project_text(g, g.constant(random_tensor<double>({7, 5}, rng))));
    const auto pooled = head.pool(g, s, x);
    const auto single = fusion::single_head_scores(s);
    bitwise = bitwise && pooled.cell_scores.value().storage() == single.value().storage() &&
              pooled.p_att.value().storage() == ag::softmax(single).value().storage();
  }

  // lambda = 0 leaves the tp head where it started.
  bool frozen_tp = false, backbone_moved = false;
  {
    auto t = testing::make_tiny(model::Flavor::icmlm_attfc, 24);
    t.config.lambda = 0.0;
    t.config.steps = 20;
    auto init = trainer::init_training(t.config, t.lm, t.data.k);
    auto trained = trainer::train(t.data, t.config, t.lm);
    frozen_tp = trainer::checksum(init.model.tp_parameters()) == trainer::checksum(trained.model.tp_parameters());
    backbone_moved =
        trainer::checksum(init.model.backbone_parameters()) != trainer::checksum(trained.model.backbone_parameters());
  }

  o.pass = probe_top1 == zs_top1 && bitwise && frozen_tp && backbone_moved;
  o.detail = fmt("identity-attribute zero-shot top-1 %.4f vs probe %.4f (%s); single-head path bit-exact %s (100 inputs); "
                 "lambda=0 tp checksum unchanged %s, backbone updated %s",
                 zs_top1, probe_top1, probe_top1 == zs_top1 ? "equal" : "DIFFER", bitwise ? "yes" : "NO",
                 frozen_tp ? "yes" : "NO", backbone_moved ? "yes" : "NO");
  return o;
}

Outcome criterion_determinism() {
  Outcome o{7, "determinism and persistence"};
  auto t = testing::make_tiny(model::Flavor::icmlm_attfc, 32);
  t.config.log_every = 50;
  testing::TempDir tmp("acceptance");

  t.config.steps = 40;
  auto a = trainer::train(t.data, t.config, t.lm);
  auto b = trainer::train(t.data, t.config, t.lm);
  trainer::save_checkpoint(a, tmp / "a");
  trainer::save_checkpoint(b, tmp / "b");
  const bool same_ckpt = dir_crc(tmp / "a") == dir_crc(tmp / "b");

  auto loaded = trainer::load_checkpoint(tmp / "a");
  trainer::save_checkpoint(loaded, tmp / "a2");
  const bool round_trip = dir_crc(tmp / "a") == dir_crc(tmp / "a2") &&
                          trainer::model_checksum(loaded.model) == trainer::model_checksum(a.model);

  t.config.steps = 200;
  t.config.lr_schedule_steps = 200;
  auto full = trainer::train(t.data, t.config, t.lm);
  t.config.steps = 100;
  auto half = trainer::train(t.data, t.config, t.lm);
  trainer::save_checkpoint(half, tmp / "half");
  auto resumed = trainer::load_checkpoint(tmp / "half");
  trainer::resume(resumed, t.data, 100);
  trainer::save_checkpoint(full, tmp / "full");
  trainer::save_checkpoint(resumed, tmp / "resumed");
  const bool resume_ok = trainer::model_checksum(full.model) == trainer::model_checksum(resumed.model) &&
                         io::file_crc32(tmp / "full" / "weights.bin") == io::file_crc32(tmp / "resumed" / "weights.bin");

  o.pass = same_ckpt && round_trip && resume_ok;
  o.detail = fmt("identical checkpoints for equal config+seed %s; save/load bit-exact %s; resume(100)+100 == train(200) %s",
                 same_ckpt ? "yes" : "NO", round_trip ? "yes" : "NO", resume_ok ? "yes" : "NO");
  return o;
}

}  // namespace icmlm::acceptance
