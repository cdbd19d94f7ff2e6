#include "icmlm/model.hpp"

#include <algorithm>
#include <array>

#include "icmlm/objectives.hpp"

namespace icmlm::model {

namespace {

constexpr std::array<std::pair<Flavor, std::string_view>, 4> kFlavorNames = {{
    {Flavor::tp_postag, "tp_postag"},
    {Flavor::tp_cluster, "tp_cluster"},
    {Flavor::icmlm_tfm, "icmlm_tfm"},
    {Flavor::icmlm_attfc, "icmlm_attfc"},
}};

}  // namespace

std::string_view to_string(Flavor f) {
  for (const auto& [k, v] : kFlavorNames) {
    if (k == f) return v;
  }
  return "?";
}

Flavor parse_flavor(std::string_view s) {
  for (const auto& [k, v] : kFlavorNames) {
    if (v == s) return k;
  }
  throw ConfigError("unknown model flavor '" + std::string(s) + "'");
}

template <class T>
Model<T>::Model(const ModelConfig& cfg, int d_w, std::uint64_t seed) : cfg_(cfg), d_w_(d_w) {
  Rng vr = Rng::derive(seed, 0x5649, 0);
  vision = vision::VisionEncoder<T>(cfg.vision, vr);
  const int dx = cfg.vision.d_x();
  if (!is_icmlm(cfg.flavor)) {
    ICMLM_REQUIRE(cfg.k >= 1, "tag-prediction flavors need K >= 1");
  }
  if (cfg.k >= 1) {
    Rng tr = Rng::derive(seed, 0x5450, 0);
    tp.emplace(fusion::TpConfig{dx, cfg.k, cfg.tp_layers, cfg.tp_width}, tr);
  }
  if (cfg.flavor == Flavor::icmlm_attfc) {
    Rng ar = Rng::derive(seed, 0x4146, 0);
    attfc.emplace(fusion::AttFcConfig{dx, d_w, cfg.d_z, cfg.heads, cfg.fc_hidden_layers, cfg.fc_hidden_dim}, ar);
  } else if (cfg.flavor == Flavor::icmlm_tfm) {
    Rng fr = Rng::derive(seed, 0x5446, 0);
    fusion::TfmConfig tc;
    tc.d_x = dx;
    tc.d_w = d_w;
    tc.grid_cells = grid_cells();
    tc.heads = cfg.heads;
    tc.head_dim = cfg.tfm_head_dim;
    tc.ff_dim = cfg.tfm_ff_dim;
    tc.dropout = cfg.tfm_dropout;
    tc.positional = cfg.tfm_positional;
    tfm.emplace(tc, fr);
  }
}

template <class T>
int Model<T>::grid_cells() const {
  const int side = cfg_.vision.grid_side();
  return side * side;
}

template <class T>
nn::ParamRefs<T> Model<T>::tp_parameters() {
  return tp ? tp->parameters() : nn::ParamRefs<T>{};
}

template <class T>
nn::ParamRefs<T> Model<T>::fusion_parameters() {
  if (attfc) return attfc->parameters();
  if (tfm) return tfm->parameters();
  return {};
}

template <class T>
nn::ParamRefs<T> Model<T>::parameters() {
  nn::ParamRefs<T> out = backbone_parameters();
  for (auto* p : fusion_parameters()) out.push_back(p);
  for (auto* p : tp_parameters()) out.push_back(p);
  return out;
}

template class Model<float>;
template class Model<double>;

template <class T>
BatchOutput<T> forward_batch(ag::Graph<T>& g, Model<T>& m, ag::Var<T> images, const std::vector<BatchItem<T>>& items,
                             ag::Var<T> vocab_table, bool want_tp, bool training, Rng* rng) {
  BatchOutput<T> out;
  ag::Var<T> feat = m.vision.forward(g, images);  // [B, C, h, w]
  const int b = feat.dim(0);
  out.grid_h = feat.dim(2);
  out.grid_w = feat.dim(3);
  const int n = out.grid_h * out.grid_w;
  if (want_tp) {
    ICMLM_REQUIRE(m.tp.has_value(), "model has no tag-prediction head");
    out.tp_logits = m.tp->forward(g, feat);
  }
  if (items.empty()) return out;
  ICMLM_REQUIRE(m.attfc || m.tfm, "model has no fusion head");

  ag::Var<T> rows = ag::grid_rows(feat);  // [B * n, C]
  std::vector<ag::Var<T>> grids(static_cast<std::size_t>(b));
  std::vector<ag::Var<T>> projected(static_cast<std::size_t>(b));
  std::vector<fusion::VisualTokens<T>> tokens(static_cast<std::size_t>(b));
  std::vector<bool> ready(static_cast<std::size_t>(b), false);

  std::vector<ag::Var<T>> logits;
  logits.reserve(items.size());
  for (const auto& item : items) {
    ICMLM_REQUIRE(item.image_slot >= 0 && item.image_slot < b, "batch item refers to a missing image");
    ICMLM_REQUIRE(item.W != nullptr, "batch item without text features");
    const auto s = static_cast<std::size_t>(item.image_slot);
    if (!ready[s]) {
      grids[s] = ag::slice_rows(rows, item.image_slot * n, (item.image_slot + 1) * n);
      if (m.attfc) {
        projected[s] = m.attfc->project_visual(g, grids[s]);
      } else {
        tokens[s] = m.tfm->encode_visual(g, grids[s]);
      }
      ready[s] = true;
    }
    ag::Var<T> w = g.constant_ref(*item.W);
    if (m.attfc) {
      auto o = m.attfc->forward(g, grids[s], projected[s], w, vocab_table);
      logits.push_back(o.logits);
      out.attention.push_back(o.pool.p_att);
    } else {
      auto o = m.tfm->forward(g, &tokens[s], w, item.mask_index, vocab_table, training, rng);
      logits.push_back(o.logits);
      out.attention.push_back(o.attention);
    }
  }
  out.logits = logits.size() == 1 ? logits.front() : ag::concat_rows(logits);
  return out;
}

template <class T>
LossTerms<T> batch_loss(ag::Graph<T>& g, const BatchOutput<T>& out, std::span<const int> targets,
                        const std::vector<int>& tp_rows, const Tensor<T>& tp_labels, T lambda) {
  LossTerms<T> terms;
  if (out.logits.valid()) {
    terms.mlm = objectives::mlm_loss(out.logits, targets);
    terms.mlm_active = true;
  }
  if (out.tp_logits.valid() && !tp_rows.empty()) {
    ag::Var<T> rows = out.tp_logits;
    if (static_cast<int>(tp_rows.size()) != rows.dim(0)) {
      std::vector<ag::Var<T>> picked;
      for (int r : tp_rows) picked.push_back(ag::slice_rows(rows, r, r + 1));
      rows = picked.size() == 1 ? picked.front() : ag::concat_rows(picked);
    }
    terms.tp = objectives::tp_loss(rows, tp_labels);
    terms.tp_active = true;
  }
  ICMLM_REQUIRE(terms.mlm_active || terms.tp_active, "batch has neither masked tokens nor tag labels");
  if (terms.mlm_active && terms.tp_active) {
    terms.total = objectives::combined_loss(terms.mlm, terms.tp, lambda);
  } else {
    terms.total = terms.mlm_active ? terms.mlm : terms.tp;
  }
  (void)g;
  return terms;
}

template BatchOutput<float> forward_batch<float>(ag::Graph<float>&, Model<float>&, ag::Var<float>,
                                                 const std::vector<BatchItem<float>>&, ag::Var<float>, bool, bool,
                                                 Rng*);
template BatchOutput<double> forward_batch<double>(ag::Graph<double>&, Model<double>&, ag::Var<double>,
                                                   const std::vector<BatchItem<double>>&, ag::Var<double>, bool,
                                                   bool, Rng*);
template LossTerms<float> batch_loss<float>(ag::Graph<float>&, const BatchOutput<float>&, std::span<const int>,
                                            const std::vector<int>&, const Tensor<float>&, float);
template LossTerms<double> batch_loss<double>(ag::Graph<double>&, const BatchOutput<double>&, std::span<const int>,
                                              const std::vector<int>&, const Tensor<double>&, double);

// ---------------------------------------------------------------- text cache

TextCache::TextCache(text::LanguageModel& lm, const std::vector<captions::TokenSequence>& seqs) : lm_(&lm) {
  for (const auto& s : seqs) {
    if (!s.excluded) tokens_[s.caption_id] = s.tokens;
  }
}

const std::vector<std::string>& TextCache::tokens(const std::string& caption_id) const {
  auto it = tokens_.find(caption_id);
  if (it == tokens_.end()) throw ContractViolation("unknown or excluded caption '" + caption_id + "'");
  return it->second;
}

const Tensor<float>& TextCache::features(const std::string& caption_id, int mask_index) {
  auto key = std::make_pair(caption_id, mask_index);
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    it = cache_.emplace(key, lm_->encode(tokens(caption_id), mask_index).W).first;
  }
  return it->second;
}

// ---------------------------------------------------------------- inference

Tensor<float> predict_triplets(Model<float>& m, TextCache& text, const corpus::Dataset& ds,
                               const std::vector<captions::MaskTriplet>& triplets, int images_per_chunk) {
  const Tensor<float>& vocab = text.lm().embedding_table().value;
  Tensor<float> out({static_cast<int>(triplets.size()), vocab.dim(0)});

  // Group triplets by image, keeping first-appearance order.
  std::vector<std::string> order;
  std::map<std::string, std::vector<int>> by_image;
  for (int i = 0; i < static_cast<int>(triplets.size()); ++i) {
    auto& v = by_image[triplets[static_cast<std::size_t>(i)].image_id];
    if (v.empty()) order.push_back(triplets[static_cast<std::size_t>(i)].image_id);
    v.push_back(i);
  }
  for (std::size_t c = 0; c < order.size(); c += static_cast<std::size_t>(images_per_chunk)) {
    const std::size_t end = std::min(order.size(), c + static_cast<std::size_t>(images_per_chunk));
    std::vector<const corpus::ImageRecord*> imgs;
    std::vector<BatchItem<float>> items;
    std::vector<int> rows;
    for (std::size_t i = c; i < end; ++i) {
      imgs.push_back(&ds.image(order[i]));
      for (int t : by_image[order[i]]) {
        const auto& tr = triplets[static_cast<std::size_t>(t)];
        items.push_back({static_cast<int>(i - c), &text.features(tr.caption_id, tr.mask_index), tr.mask_index});
        rows.push_back(t);
      }
    }
    ag::Graph<float> g(false);
    auto res = forward_batch(g, m, g.constant(vision::batch_tensor(imgs, m.config().vision.image_size)), items,
                             g.constant_ref(vocab), false, false, nullptr);
    const Tensor<float>& lv = res.logits.value();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy(lv.row(static_cast<int>(r)).begin(), lv.row(static_cast<int>(r)).end(), out.row(rows[r]).begin());
    }
  }
  return out;
}

Tensor<float> predict_text_only(TextCache& text, const std::vector<captions::MaskTriplet>& triplets) {
  const int v = text.lm().vocab().size();
  Tensor<float> out({static_cast<int>(triplets.size()), v});
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const auto& tr = triplets[i];
    const Tensor<float>& w = text.features(tr.caption_id, tr.mask_index);
    const auto logits = text.lm().vocab_logits(w.row(tr.mask_index));
    std::copy(logits.begin(), logits.end(), out.row(static_cast<int>(i)).begin());
  }
  return out;
}

fusion::AttentionMap extract_attention(Model<float>& m, text::LanguageModel& lm, const corpus::ImageRecord& image,
                                       const std::vector<std::string>& tokens, int mask_index,
                                       const std::string& caption_id) {
  ICMLM_REQUIRE(m.attfc || m.tfm, "attention maps need an icmlm model");
  const text::TextFeatures tf = lm.encode(tokens, mask_index);
  ag::Graph<float> g(false);
  std::vector<BatchItem<float>> items = {{0, &tf.W, mask_index}};
  auto res = forward_batch(g, m, g.constant(vision::batch_tensor({&image}, m.config().vision.image_size)), items,
                           g.constant_ref(lm.embedding_table().value), false, false, nullptr);
  fusion::AttentionMap map;
  map.image_id = image.image_id;
  map.caption_id = caption_id;
  map.mask_index = mask_index;
  map.h = res.grid_h;
  map.w = res.grid_w;
  const Tensor<float>& a = res.attention.front().value();
  if (m.attfc) {
    map.p.assign(a.values().begin(), a.values().end());
  } else {
    map.p = fusion::tfm_attention_cells(a, map.h * map.w);
  }
  return map;
}

}  // namespace icmlm::model
