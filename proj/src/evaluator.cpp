#include "icmlm/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include "icmlm/ops.hpp"

namespace icmlm::evaluator {

namespace {

// Zero-based rank of target among scores; equal scores at lower ids rank first.
template <class S>
int rank_of(std::span<const S> scores, int target) {
  const S t = scores[target];
  int rank = 0;
  for (int v = 0; v < static_cast<int>(scores.size()); ++v) {
    if (scores[v] > t || (scores[v] == t && v < target)) ++rank;
  }
  return rank;
}

int argmax(std::span<const double> s) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(s.size()); ++i)
    if (s[i] > s[best]) best = i;
  return best;
}

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Tensor<double>& X, bool enabled) {
    const int n = X.dim(0), d = X.dim(1);
    Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 1.0)};
    if (!enabled || n == 0) return s;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) s.mean[j] += X.at(i, j);
    for (double& m : s.mean) m /= n;
    std::vector<double> var(d, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        const double c = X.at(i, j) - s.mean[j];
        var[j] += c * c;
      }
    for (int j = 0; j < d; ++j) {
      const double sd = std::sqrt(var[j] / n);
      s.scale[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
    }
    return s;
  }

  Tensor<double> apply(const Tensor<double>& X) const {
    Tensor<double> out(X.shape());
    for (int i = 0; i < X.dim(0); ++i)
      for (int j = 0; j < X.dim(1); ++j) out.at(i, j) = (X.at(i, j) - mean[j]) * scale[j];
    return out;
  }
};

void check_features(const FeatureSet& train, const FeatureSet& test) {
  ICMLM_REQUIRE(train.X.rank() == 2 && test.X.rank() == 2, "features must be [n, d]");
  ICMLM_REQUIRE(train.X.dim(1) == test.X.dim(1), "train and test feature dimensions differ");
  ICMLM_REQUIRE(train.X.dim(0) > 0, "empty train features");
  ICMLM_REQUIRE(test.X.dim(0) > 0, "empty test features");
}

// Softmax cross-entropy over compatibility scores s = A (W x + b), trained
// with momentum SGD under a cosine schedule. With A = identity this is plain
// softmax regression: products with 1 and sums with 0 are exact.
struct Compat {
  Tensor<double> W;  // [a, d]
  std::vector<double> b;
};

void scores_for(const Compat& m, const Tensor<double>* A, std::span<const double> x, std::vector<double>& z,
                std::vector<double>& s) {
  const int a = m.W.dim(0), d = m.W.dim(1);
  for (int r = 0; r < a; ++r) {
    double acc = m.b[r];
    const auto w = m.W.row(r);
    for (int j = 0; j < d; ++j) acc += w[j] * x[j];
    z[r] = acc;
  }
  if (A == nullptr) {
    s = z;
    return;
  }
  const int C = A->dim(0);
  s.assign(C, 0.0);
  for (int c = 0; c < C; ++c) {
    double acc = 0.0;
    for (int r = 0; r < a; ++r) acc += A->at(c, r) * z[r];
    s[c] = acc;
  }
}

double cosine_lr(double base, long t, long total) {
  if (total <= 1) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

// classes: candidate classes for the softmax (row ids of A, or output ids).
Compat fit_softmax(const Tensor<double>& X, const std::vector<int>& y, int n_out, const Tensor<double>* A,
                   const std::vector<int>& classes, const ProbeConfig& cfg) {
  const int n = X.dim(0), d = X.dim(1);
  Compat m{Tensor<double>({n_out, d}), std::vector<double>(n_out, 0.0)};
  Tensor<double> vW({n_out, d});
  std::vector<double> vb(n_out, 0.0);
  Tensor<double> gW({n_out, d});
  std::vector<double> gb(n_out, 0.0);

  const int bs = std::max(1, std::min(cfg.batch_size, n));
  const long per_epoch = (n + bs - 1) / bs;
  const long total = per_epoch * cfg.epochs;
  const int C = A ? A->dim(0) : n_out;
  std::vector<double> z(n_out), s(C), gs(C), gz(n_out);
  long t = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = Rng::derive(cfg.seed, 0x50524F42, static_cast<std::uint64_t>(epoch));
    const std::vector<int> order = rng.permutation(n);
    for (int start = 0; start < n; start += bs) {
      const int end = std::min(n, start + bs);
      gW.fill(0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (int ii = start; ii < end; ++ii) {
        const int i = order[ii];
        const auto x = X.row(i);
        scores_for(m, A, x, z, s);
        double mx = -std::numeric_limits<double>::infinity();
        for (int c : classes) mx = std::max(mx, s[c]);
        double sum = 0.0;
        for (int c : classes) sum += std::exp(s[c] - mx);
        std::fill(gs.begin(), gs.end(), 0.0);
        for (int c : classes) gs[c] = std::exp(s[c] - mx) / sum;
        gs[y[i]] -= 1.0;
        if (A == nullptr) {
          gz = gs;
        } else {
          for (int r = 0; r < n_out; ++r) {
            double acc = 0.0;
            for (int c = 0; c < C; ++c) acc += A->at(c, r) * gs[c];
            gz[r] = acc;
          }
        }
        for (int r = 0; r < n_out; ++r) {
          const double g = gz[r];
          if (g == 0.0) continue;
          auto gw = gW.row(r);
          for (int j = 0; j < d; ++j) gw[j] += g * x[j];
          gb[r] += g;
        }
      }
      const double inv = 1.0 / (end - start);
      const double lr = cosine_lr(cfg.lr, t, total);
      for (int r = 0; r < n_out; ++r) {
        auto w = m.W.row(r);
        auto gw = gW.row(r);
        auto vw = vW.row(r);
        for (int j = 0; j < d; ++j) {
          const double g = gw[j] * inv + cfg.weight_decay * w[j];
          vw[j] = cfg.momentum * vw[j] + g;
          w[j] -= lr * vw[j];
        }
        vb[r] = cfg.momentum * vb[r] + gb[r] * inv;
        m.b[r] -= lr * vb[r];
      }
      ++t;
    }
  }
  return m;
}

// Independent logistic regressions on each column of Y, same schedule.
Compat fit_one_vs_all(const Tensor<double>& X, const Tensor<double>& Y, const ProbeConfig& cfg) {
  const int n = X.dim(0), d = X.dim(1), C = Y.dim(1);
  Compat m{Tensor<double>({C, d}), std::vector<double>(C, 0.0)};
  Tensor<double> vW({C, d}), gW({C, d});
  std::vector<double> vb(C, 0.0), gb(C, 0.0), z(C), s(C);
  const int bs = std::max(1, std::min(cfg.batch_size, n));
  const long total = static_cast<long>((n + bs - 1) / bs) * cfg.epochs;
  long t = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = Rng::derive(cfg.seed, 0x4F564121, static_cast<std::uint64_t>(epoch));
    const std::vector<int> order = rng.permutation(n);
    for (int start = 0; start < n; start += bs) {
      const int end = std::min(n, start + bs);
      gW.fill(0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (int ii = start; ii < end; ++ii) {
        const int i = order[ii];
        const auto x = X.row(i);
        scores_for(m, nullptr, x, z, s);
        for (int c = 0; c < C; ++c) {
          const double g = 1.0 / (1.0 + std::exp(-s[c])) - Y.at(i, c);
          auto gw = gW.row(c);
          for (int j = 0; j < d; ++j) gw[j] += g * x[j];
          gb[c] += g;
        }
      }
      const double inv = 1.0 / (end - start);
      const double lr = cosine_lr(cfg.lr, t, total);
      for (int c = 0; c < C; ++c) {
        auto w = m.W.row(c);
        auto gw = gW.row(c);
        auto vw = vW.row(c);
        for (int j = 0; j < d; ++j) {
          const double g = gw[j] * inv + cfg.weight_decay * w[j];
          vw[j] = cfg.momentum * vw[j] + g;
          w[j] -= lr * vw[j];
        }
        vb[c] = cfg.momentum * vb[c] + gb[c] * inv;
        m.b[c] -= lr * vb[c];
      }
      ++t;
    }
  }
  return m;
}

}  // namespace

// ---------------------------------------------------------------- masked-token prediction

MtpResult mtp_from_logits(const Tensor<float>& logits, const std::vector<int>& targets) {
  if (targets.empty()) throw ContractViolation("eval_mtp: empty triplet set");
  ICMLM_REQUIRE(logits.rank() == 2 && logits.dim(0) == static_cast<int>(targets.size()),
                "logits rows must match targets");
  const int V = logits.dim(1);
  long top1 = 0, top5 = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    ICMLM_REQUIRE(targets[i] >= 0 && targets[i] < V, "target id out of range");
    const int r = rank_of<float>(logits.row(static_cast<int>(i)), targets[i]);
    top1 += r == 0;
    top5 += r < 5;
  }
  const double n = static_cast<double>(targets.size());
  return {top1 / n, top5 / n, static_cast<int>(targets.size())};
}

namespace {
std::vector<int> targets_of(const std::vector<captions::MaskTriplet>& triplets) {
  std::vector<int> t;
  t.reserve(triplets.size());
  for (const auto& tr : triplets) t.push_back(tr.target_vocab_id);
  return t;
}
}  // namespace

MtpResult eval_mtp(model::Model<float>& m, model::TextCache& text, const corpus::Dataset& ds,
                   const std::vector<captions::MaskTriplet>& triplets) {
  if (triplets.empty()) throw ContractViolation("eval_mtp: empty triplet set");
  return mtp_from_logits(model::predict_triplets(m, text, ds, triplets), targets_of(triplets));
}

MtpResult eval_mtp_text_only(model::TextCache& text, const std::vector<captions::MaskTriplet>& triplets) {
  if (triplets.empty()) throw ContractViolation("eval_mtp: empty triplet set");
  return mtp_from_logits(model::predict_text_only(text, triplets), targets_of(triplets));
}

// ---------------------------------------------------------------- probes

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::top1: return "top1";
    case Metric::top5: return "top5";
    case Metric::mAP: return "mAP";
  }
  return "?";
}

ProbeResult linear_probe_multiclass(const FeatureSet& train, const FeatureSet& test, int n_classes,
                                    const ProbeConfig& cfg, const std::string& layer_tag) {
  check_features(train, test);
  ICMLM_REQUIRE(n_classes >= 1, "n_classes must be positive");
  ICMLM_REQUIRE(static_cast<int>(train.labels.size()) == train.X.dim(0), "train labels do not match features");
  ICMLM_REQUIRE(static_cast<int>(test.labels.size()) == test.X.dim(0), "test labels do not match features");
  for (int y : train.labels) ICMLM_REQUIRE(y >= 0 && y < n_classes, "train label out of range");
  for (int y : test.labels) ICMLM_REQUIRE(y >= 0 && y < n_classes, "test label out of range");

  const Standardizer st = Standardizer::fit(train.X, cfg.standardize);
  const Tensor<double> Xtr = st.apply(train.X), Xte = st.apply(test.X);
  std::vector<int> classes(n_classes);
  std::iota(classes.begin(), classes.end(), 0);
  const Compat m = fit_softmax(Xtr, train.labels, n_classes, nullptr, classes, cfg);

  std::vector<double> z(n_classes), s(n_classes);
  long correct = 0;
  for (int i = 0; i < Xte.dim(0); ++i) {
    scores_for(m, nullptr, Xte.row(i), z, s);
    correct += argmax(s) == test.labels[i];
  }
  ProbeResult r;
  r.layer_tag = layer_tag;
  r.task = "multiclass";
  r.metric = Metric::top1;
  r.n_eval = Xte.dim(0);
  r.value = static_cast<double>(correct) / r.n_eval;
  return r;
}

ProbeResult linear_probe_multilabel(const FeatureSet& train, const FeatureSet& test, const ProbeConfig& cfg,
                                    const std::string& layer_tag) {
  check_features(train, test);
  ICMLM_REQUIRE(train.Y.rank() == 2 && train.Y.dim(0) == train.X.dim(0), "train targets do not match features");
  ICMLM_REQUIRE(test.Y.rank() == 2 && test.Y.dim(0) == test.X.dim(0), "test targets do not match features");
  ICMLM_REQUIRE(train.Y.dim(1) == test.Y.dim(1), "train and test class counts differ");
  const int C = train.Y.dim(1);

  std::vector<int> kept;
  std::vector<int> skipped;
  for (int c = 0; c < C; ++c) {
    bool any = false;
    for (int i = 0; i < train.Y.dim(0) && !any; ++i) any = train.Y.at(i, c) > 0.5;
    (any ? kept : skipped).push_back(c);
  }
  for (int c : skipped)
    std::cerr << "warning: class " << c << " has no positives in the train split; excluded from mAP\n";
  ICMLM_REQUIRE(!kept.empty(), "no class has train positives");

  auto select = [&](const Tensor<double>& Y) {
    Tensor<double> out({Y.dim(0), static_cast<int>(kept.size())});
    for (int i = 0; i < Y.dim(0); ++i)
      for (std::size_t k = 0; k < kept.size(); ++k) out.at(i, static_cast<int>(k)) = Y.at(i, kept[k]);
    return out;
  };
  const Standardizer st = Standardizer::fit(train.X, cfg.standardize);
  const Tensor<double> Xtr = st.apply(train.X), Xte = st.apply(test.X);
  const Tensor<double> Ytr = select(train.Y), Yte = select(test.Y);
  const Compat m = fit_one_vs_all(Xtr, Ytr, cfg);

  const int K = Ytr.dim(1);
  Tensor<double> scores({Xte.dim(0), K});
  std::vector<double> z(K), s(K);
  for (int i = 0; i < Xte.dim(0); ++i) {
    scores_for(m, nullptr, Xte.row(i), z, s);
    std::copy(s.begin(), s.end(), scores.row(i).begin());
  }
  std::vector<int> test_skipped;
  ProbeResult r;
  r.layer_tag = layer_tag;
  r.task = "multilabel";
  r.metric = Metric::mAP;
  r.n_eval = Xte.dim(0);
  r.value = mean_average_precision(scores, Yte, &test_skipped);
  r.skipped_classes = skipped;
  for (int k : test_skipped) r.skipped_classes.push_back(kept[k]);
  std::sort(r.skipped_classes.begin(), r.skipped_classes.end());
  return r;
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& positive) {
  ICMLM_REQUIRE(scores.size() == positive.size(), "scores and labels differ in length");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  long hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (positive[order[r]] != 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  if (hits == 0) return std::numeric_limits<double>::quiet_NaN();
  return sum / static_cast<double>(hits);
}

double mean_average_precision(const Tensor<double>& scores, const Tensor<double>& Y, std::vector<int>* skipped) {
  ICMLM_REQUIRE(scores.shape() == Y.shape() && scores.rank() == 2, "scores and labels must be [n, C]");
  const int n = scores.dim(0), C = scores.dim(1);
  double sum = 0.0;
  int counted = 0;
  std::vector<double> s(n);
  std::vector<int> pos(n);
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < n; ++i) {
      s[i] = scores.at(i, c);
      pos[i] = Y.at(i, c) > 0.5;
    }
    const double ap = average_precision(s, pos);
    if (std::isnan(ap)) {
      if (skipped) skipped->push_back(c);
      continue;
    }
    sum += ap;
    ++counted;
  }
  ICMLM_REQUIRE(counted > 0, "no class has positives");
  return sum / counted;
}

// ---------------------------------------------------------------- zero-shot

void AttributeMatrix::validate() const {
  ICMLM_REQUIRE(A.rank() == 2 && A.dim(0) > 0 && A.dim(1) > 0, "attribute matrix must be [n_classes, n_attr]");
  std::vector<int> seen_mark(n_classes(), 0);
  for (int c : seen) {
    ICMLM_REQUIRE(c >= 0 && c < n_classes(), "seen class out of range");
    seen_mark[c] = 1;
  }
  for (int c : unseen) {
    ICMLM_REQUIRE(c >= 0 && c < n_classes(), "unseen class out of range");
    ICMLM_REQUIRE(!seen_mark[c], "class " + std::to_string(c) + " is both seen and unseen");
  }
  ICMLM_REQUIRE(!seen.empty(), "no seen classes");
}

AttributeMatrix identity_attributes(int n_classes) {
  AttributeMatrix a;
  a.A = Tensor<double>({n_classes, n_classes});
  for (int c = 0; c < n_classes; ++c) {
    a.A.at(c, c) = 1.0;
    a.seen.push_back(c);
  }
  return a;
}

ZeroShotResult zero_shot_eval(const FeatureSet& train, const FeatureSet& test, const AttributeMatrix& attrs,
                              const ProbeConfig& cfg) {
  attrs.validate();
  check_features(train, test);
  ICMLM_REQUIRE(static_cast<int>(train.labels.size()) == train.X.dim(0), "train labels do not match features");
  ICMLM_REQUIRE(static_cast<int>(test.labels.size()) == test.X.dim(0), "test labels do not match features");
  const int C = attrs.n_classes();
  std::vector<int> is_seen(C, 0);
  for (int c : attrs.seen) is_seen[c] = 1;
  for (int y : train.labels) {
    ICMLM_REQUIRE(y >= 0 && y < C, "train label out of range");
    ICMLM_REQUIRE(is_seen[y], "train sample from unseen class " + std::to_string(y));
  }
  for (int y : test.labels) ICMLM_REQUIRE(y >= 0 && y < C, "test label out of range");

  const Standardizer st = Standardizer::fit(train.X, cfg.standardize);
  const Tensor<double> Xtr = st.apply(train.X), Xte = st.apply(test.X);
  std::vector<int> seen_sorted = attrs.seen;
  std::sort(seen_sorted.begin(), seen_sorted.end());
  const Compat m = fit_softmax(Xtr, train.labels, attrs.n_attr(), &attrs.A, seen_sorted, cfg);

  std::vector<double> z(attrs.n_attr()), s(C);
  long correct = 0, n_seen = 0, c_seen = 0, n_unseen = 0, c_unseen = 0;
  for (int i = 0; i < Xte.dim(0); ++i) {
    scores_for(m, &attrs.A, Xte.row(i), z, s);
    const bool ok = argmax(s) == test.labels[i];
    correct += ok;
    if (is_seen[test.labels[i]]) {
      ++n_seen;
      c_seen += ok;
    } else {
      ++n_unseen;
      c_unseen += ok;
    }
  }
  ZeroShotResult r;
  r.n_eval = Xte.dim(0);
  r.top1 = static_cast<double>(correct) / r.n_eval;
  r.top1_seen = n_seen ? static_cast<double>(c_seen) / n_seen : 0.0;
  r.top1_unseen = n_unseen ? static_cast<double>(c_unseen) / n_unseen : 0.0;
  return r;
}

// ---------------------------------------------------------------- attention localization

const corpus::SceneShape& masked_shape(const corpus::SyntheticSceneSpec& spec, const std::string& caption_id,
                                       int mask_index) {
  ICMLM_REQUIRE(!spec.shapes.empty(), "scene has no shapes");
  // Per-shape captions end in "_c<k>" for k < shapes; the last caption describes the scene.
  const auto pos = caption_id.rfind("_c");
  if (pos == std::string::npos) throw ContractViolation("caption id without index: " + caption_id);
  int k = -1;
  try {
    k = std::stoi(caption_id.substr(pos + 2));
  } catch (const std::exception&) {
    throw ContractViolation("caption id without index: " + caption_id);
  }
  const int n = static_cast<int>(spec.shapes.size());
  if (k >= 0 && k < n) return spec.shapes[k];
  if (k == n) {
    // "there is a <color> <shape> and a <color> <shape> ..."
    const int idx = (mask_index - 3) / 4;
    if (mask_index < 3 || (mask_index - 3) % 4 > 1 || idx >= n) throw ContractViolation("mask index does not name a shape of the scene caption");
    return spec.shapes[idx];
  }
  throw ContractViolation("caption " + caption_id + " does not belong to this scene");
}

double in_box_mass(const fusion::AttentionMap& map, const std::vector<int>& cells) {
  ICMLM_REQUIRE(static_cast<int>(map.p.size()) == map.h * map.w, "attention map size mismatch");
  double mass = 0.0;
  for (int c : cells) {
    ICMLM_REQUIRE(c >= 0 && c < map.h * map.w, "cell outside the attention grid");
    mass += map.p[c];
  }
  return mass;
}

double attention_localization_score(const std::vector<fusion::AttentionMap>& maps, const corpus::Dataset& ds) {
  if (maps.empty()) throw ContractViolation("attention_localization_score: no maps");
  double sum = 0.0;
  for (const auto& map : maps) {
    const auto it = ds.scenes.find(map.image_id);
    if (it == ds.scenes.end()) throw ContractViolation("no scene geometry for image " + map.image_id);
    const auto& img = ds.image(map.image_id);
    if (map.h != map.w) throw ContractViolation("attention grid is not square");
    if (img.height % map.h != 0)
      throw ContractViolation("attention grid " + std::to_string(map.h) + " does not tile image " + map.image_id);
    const auto& shape = masked_shape(it->second, map.caption_id, map.mask_index);
    sum += in_box_mass(map, corpus::shape_cells(shape, img.height, map.h));
  }
  return sum / static_cast<double>(maps.size());
}

// ---------------------------------------------------------------- features and results

std::vector<LayerFeatures> extract_features(vision::VisionEncoder<float>& enc,
                                            const std::vector<const corpus::ImageRecord*>& images, int layers,
                                            vision::PoolMode mode) {
  ICMLM_REQUIRE(layers >= 1 && layers <= enc.num_blocks(), "layers must be within the backbone depth");
  ICMLM_REQUIRE(!images.empty(), "no images");
  std::vector<LayerFeatures> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto grids = vision::extract_grids(enc, *images[i], layers);
    if (out.empty()) {
      for (const auto& g : grids) {
        const auto f = vision::pool(g, mode);
        out.push_back({g.layer_tag, Tensor<double>({static_cast<int>(images.size()), static_cast<int>(f.size())})});
      }
    }
    for (std::size_t l = 0; l < grids.size(); ++l) {
      const auto f = vision::pool(grids[l], mode);
      auto row = out[l].X.row(static_cast<int>(i));
      std::copy(f.begin(), f.end(), row.begin());
    }
  }
  return out;
}

nlohmann::json to_json(const ProbeResult& r) {
  nlohmann::json j = {{"layer_tag", r.layer_tag},
                      {"task", r.task},
                      {"metric", std::string(to_string(r.metric))},
                      {"value", r.value},
                      {"n_eval", r.n_eval}};
  if (!r.skipped_classes.empty()) j["skipped_classes"] = r.skipped_classes;
  return j;
}

void append_results(const std::vector<ProbeResult>& results, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot open " + path.string());
  for (const auto& r : results) out << to_json(r).dump() << '\n';
}

std::string render_table(const std::vector<ProbeResult>& results) {
  std::size_t wl = 5, wt = 4;
  for (const auto& r : results) {
    wl = std::max(wl, r.layer_tag.size());
    wt = std::max(wt, r.task.size());
  }
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(wl)) << "layer" << "  " << std::setw(static_cast<int>(wt)) << "task"
     << "  " << std::setw(6) << "metric" << "  " << std::right << std::setw(7) << "value" << "  " << std::setw(6)
     << "n" << '\n';
  for (const auto& r : results) {
    os << std::left << std::setw(static_cast<int>(wl)) << r.layer_tag << "  " << std::setw(static_cast<int>(wt))
       << r.task << "  " << std::setw(6) << to_string(r.metric) << "  " << std::right << std::setw(6) << std::fixed
       << std::setprecision(2) << 100.0 * r.value << "%  " << std::setw(6) << r.n_eval << '\n';
  }
  return os.str();
}

}  // namespace icmlm::evaluator
