#include "icmlm/text_encoder.hpp"

#include <algorithm>
#include <cmath>

#include "icmlm/image_io.hpp"
#include "icmlm/optim.hpp"
#include "icmlm/simd/kernels.hpp"

namespace icmlm::text {

LanguageModel::LanguageModel(Vocabulary vocab, const LmConfig& cfg, std::uint64_t seed)
    : vocab_(std::move(vocab)), cfg_(cfg) {
  Rng rng(seed);
  const int v = vocab_.size();
  Tensor<float> emb({v, cfg.d_w});
  for (float& x : emb.values()) x = static_cast<float>(rng.normal() * 0.5);
  token_emb_ = Parameter<float>("lm.token_embedding", std::move(emb));
  Tensor<float> pos({cfg.max_len, cfg.d_w});
  for (float& x : pos.values()) x = static_cast<float>(rng.normal() * 0.1);
  pos_emb_ = Parameter<float>("lm.position_embedding", std::move(pos));
  emb_ln_ = nn::LayerNorm<float>("lm.embedding_norm", cfg.d_w);
  nn::EncoderLayerConfig lc;
  lc.d_model = cfg.d_w;
  lc.n_heads = cfg.heads;
  lc.head_dim = cfg.head_dim;
  lc.ff_dim = cfg.ff_dim;
  lc.dropout = cfg.dropout;
  for (int l = 0; l < cfg.layers; ++l) layers_.emplace_back("lm.layer" + std::to_string(l), lc, rng);
}

ag::Var<float> LanguageModel::forward(ag::Graph<float>& g, std::span<const int> ids, bool training, Rng* rng) {
  const int n = static_cast<int>(ids.size());
  ICMLM_REQUIRE(n >= 1 && n <= cfg_.max_len, "sequence length exceeds the model's position table");
  for (int id : ids) ICMLM_REQUIRE(id >= 0 && id < vocab_.size(), "token id out of range");
  ag::Var<float> x = ag::gather_rows(g.param(token_emb_), ids);
  ag::Var<float> pos = ag::slice_rows(g.param(pos_emb_), 0, n);
  x = emb_ln_(g, ag::add(x, pos));
  for (auto& layer : layers_) x = layer.forward(g, x, training, rng).rows;
  return x;
}

TextFeatures LanguageModel::encode(const std::vector<std::string>& tokens, std::optional<int> mask_index) {
  return encode_ids(vocab_.encode(tokens), mask_index);
}

TextFeatures LanguageModel::encode_ids(std::vector<int> ids, std::optional<int> mask_index) {
  const int t = static_cast<int>(ids.size());
  if (mask_index) {
    ICMLM_REQUIRE(*mask_index >= 0 && *mask_index < t,
                  "mask_index " + std::to_string(*mask_index) + " out of range for " + std::to_string(t) + " tokens");
    ids[static_cast<std::size_t>(*mask_index)] = Vocabulary::kMask;
  }
  ids.insert(ids.begin(), Vocabulary::kCls);
  ag::Graph<float> g(false);
  const Tensor<float>& h = forward(g, ids, false, nullptr).value();
  TextFeatures out;
  out.W = Tensor<float>({t, cfg_.d_w});
  std::copy(h.data() + cfg_.d_w, h.data() + h.size(), out.W.data());
  out.cls.assign(h.data(), h.data() + cfg_.d_w);
  out.mask_index = mask_index;
  return out;
}

std::vector<float> LanguageModel::vocab_logits(std::span<const float> feature) const {
  ICMLM_REQUIRE(static_cast<int>(feature.size()) == cfg_.d_w, "feature dimension must equal d_w");
  const int v = vocab_.size();
  std::vector<float> out(static_cast<std::size_t>(v));
  simd::gemm<float>(false, true, 1, v, cfg_.d_w, 1.0f, feature.data(), cfg_.d_w, token_emb_.value.data(), cfg_.d_w,
                    0.0f, out.data(), v);
  return out;
}

nn::ParamRefs<float> LanguageModel::parameters() {
  nn::ParamRefs<float> out{&token_emb_, &pos_emb_};
  emb_ln_.collect(out);
  for (auto& l : layers_) l.collect(out);
  return out;
}

void LanguageModel::freeze() {
  for (auto* p : parameters()) {
    p->trainable = false;
    p->grad = Tensor<float>();
  }
  frozen_ = true;
}

std::uint32_t LanguageModel::checksum() { return parameter_checksum(parameters()); }

std::uint32_t parameter_checksum(const nn::ParamRefs<float>& params) {
  std::uint32_t crc = 0;
  for (const auto* p : params) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(p->value.data());
    crc = io::crc32(std::span(bytes, p->value.size() * sizeof(float)), crc);
  }
  return crc;
}

PretrainReport pretrain_reference_lm(LanguageModel& lm, const std::vector<std::vector<std::string>>& sentences,
                                     const PretrainConfig& cfg) {
  ICMLM_REQUIRE(!lm.frozen(), "language model is already frozen");
  ICMLM_REQUIRE(!sentences.empty(), "pretraining needs at least one sentence");
  std::vector<std::vector<int>> encoded;
  for (const auto& s : sentences) {
    if (!s.empty() && static_cast<int>(s.size()) < lm.config().max_len) encoded.push_back(lm.vocab().encode(s));
  }
  ICMLM_REQUIRE(!encoded.empty(), "no sentence fits the position table");

  auto params = lm.parameters();
  optim::Options oo;
  oo.kind = optim::Kind::adam;
  oo.lr = cfg.lr;
  optim::Optimizer<float> opt(oo);
  PretrainReport report;
  const int n = static_cast<int>(encoded.size());
  std::vector<int> order;
  int cursor = n;
  int epoch = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    optim::zero_grads(params);
    Rng step_rng = Rng::derive(cfg.seed, 0x4C4D, static_cast<std::uint64_t>(step));
    ag::Graph<float> g(true);
    ag::Var<float> total;
    int masked_total = 0;
    std::vector<ag::Var<float>> losses;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= n) {
        Rng perm = Rng::derive(cfg.seed, 0x4C4E, static_cast<std::uint64_t>(epoch++));
        order = perm.permutation(n);
        cursor = 0;
      }
      std::vector<int> ids = encoded[static_cast<std::size_t>(order[cursor++])];
      const int t = static_cast<int>(ids.size());
      std::vector<int> positions;
      for (int i = 0; i < t; ++i) {
        if (step_rng.bernoulli(cfg.mask_prob)) positions.push_back(i);
      }
      if (positions.empty()) positions.push_back(static_cast<int>(step_rng.below(static_cast<std::uint64_t>(t))));
      std::vector<int> targets;
      std::vector<int> rows;
      for (int p : positions) {
        targets.push_back(ids[static_cast<std::size_t>(p)]);
        ids[static_cast<std::size_t>(p)] = Vocabulary::kMask;
        rows.push_back(p + 1);
      }
      ids.insert(ids.begin(), Vocabulary::kCls);
      ag::Var<float> h = lm.forward(g, ids, true, &step_rng);
      ag::Var<float> picked = ag::gather_rows(h, rows);
      ag::Var<float> logits = ag::matmul(picked, g.param(lm.embedding_table()), false, true);
      // Sum of per-position losses; divided by the batch's mask count below.
      losses.push_back(ag::scale(ag::sparse_cross_entropy(logits, targets), static_cast<float>(targets.size())));
      masked_total += static_cast<int>(targets.size());
    }
    total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = ag::add(total, losses[i]);
    total = ag::scale(total, 1.0f / static_cast<float>(masked_total));
    g.backward(total);
    const double lr = optim::schedule_factor(optim::Schedule::cosine, step, cfg.steps);
    opt.step(params, cfg.lr * lr);
    report.loss.push_back(total.value()[0]);
  }
  lm.freeze();
  return report;
}

}  // namespace icmlm::text
