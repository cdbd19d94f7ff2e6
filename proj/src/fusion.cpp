#include "icmlm/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "icmlm/image_io.hpp"
#include "json.hpp"

namespace icmlm::fusion {

// ---------------------------------------------------------------- tp

template <class T>
TpHead<T>::TpHead(const TpConfig& cfg, Rng& rng) : cfg_(cfg) {
  ICMLM_REQUIRE(cfg.k >= 1, "tag-prediction head needs K >= 1");
  int in = cfg.d_x;
  for (int i = 0; i < cfg.layers; ++i) {
    trunk_.emplace_back("tp.block" + std::to_string(i + 1), in, cfg.width, 1, rng);
    in = cfg.width;
  }
  out_ = nn::Linear<T>("tp.out", in, cfg.k, true, rng);
}

template <class T>
ag::Var<T> TpHead<T>::forward(ag::Graph<T>& g, ag::Var<T> x) {
  ICMLM_REQUIRE(x.shape().size() == 4 && x.dim(1) == cfg_.d_x, "tp input must be [B, d_x, H, W]");
  for (auto& b : trunk_) x = b(g, x);
  return out_(g, ag::global_avg_pool(x));
}

template <class T>
nn::ParamRefs<T> TpHead<T>::parameters() {
  nn::ParamRefs<T> out;
  for (auto& b : trunk_) b.collect(out);
  out_.collect(out);
  return out;
}

// ---------------------------------------------------------------- att + fc

template <class T>
AttFcHead<T>::AttFcHead(const AttFcConfig& cfg, Rng& rng) : cfg_(cfg) {
  ICMLM_REQUIRE(cfg.heads >= 1 && cfg.d_z >= 1, "att head needs heads >= 1 and d_z >= 1");
  const int hz = cfg.heads * cfg.d_z;
  sigma_x = nn::Linear<T>("attfc.sigma_x", cfg.d_x, hz, false, rng);
  sigma_w = nn::Linear<T>("attfc.sigma_w", cfg.d_w, hz, false, rng);
  norm_x = nn::LayerNorm<T>("attfc.norm_x", hz, cfg.heads);
  norm_w = nn::LayerNorm<T>("attfc.norm_w", hz, cfg.heads);
  sigma_h = Parameter<T>("attfc.sigma_h", Tensor<T>({cfg.heads, 1}, T(1)));
  b_h = Parameter<T>("attfc.b_h", Tensor<T>({1}, T(0)));
  int in = cfg.d_x;
  for (int i = 0; i < cfg.fc_hidden_layers; ++i) {
    fc_hidden.emplace_back("attfc.fc" + std::to_string(i), in, cfg.fc_hidden_dim, true, rng);
    fc_norms.emplace_back("attfc.fc" + std::to_string(i) + ".norm", cfg.fc_hidden_dim);
    in = cfg.fc_hidden_dim;
  }
  fc_out = nn::Linear<T>("attfc.fc_out", in, cfg.d_w, true, rng);
}

template <class T>
ag::Var<T> AttFcHead<T>::project_visual(ag::Graph<T>& g, ag::Var<T> x) {
  ICMLM_REQUIRE(x.shape().size() == 2 && x.dim(1) == cfg_.d_x, "X must be [N, d_x]");
  return ag::relu(norm_x(g, sigma_x(g, x)));
}

template <class T>
ag::Var<T> AttFcHead<T>::project_text(ag::Graph<T>& g, ag::Var<T> w) {
  ICMLM_REQUIRE(w.shape().size() == 2 && w.dim(1) == cfg_.d_w, "W must be [T, d_w]");
  return ag::relu(norm_w(g, sigma_w(g, w)));
}

template <class T>
ag::Var<T> AttFcHead<T>::scores(ag::Var<T> xt, ag::Var<T> wt) {
  return ag::grouped_matmul_nt(xt, wt, cfg_.heads, T(1) / std::sqrt(static_cast<T>(cfg_.d_z)));
}

template <class T>
AttPool<T> AttFcHead<T>::pool(ag::Graph<T>& g, ag::Var<T> s, ag::Var<T> x) {
  const int n = s.dim(1);
  ag::Var<T> per_head = ag::logsumexp(s);  // [G, N]
  ag::Var<T> combined = ag::matmul(per_head, g.param(sigma_h), true, false);  // [N, 1]
  combined = ag::reshape(ag::add_bias(combined, g.param(b_h)), {1, n});
  ag::Var<T> p = ag::softmax(combined);
  return {ag::matmul(p, x), p, combined};
}

template <class T>
ag::Var<T> AttFcHead<T>::classify(ag::Graph<T>& g, ag::Var<T> x_hat, ag::Var<T> vocab_table) {
  ag::Var<T> h = x_hat;
  for (std::size_t i = 0; i < fc_hidden.size(); ++i) h = ag::relu(fc_norms[i](g, fc_hidden[i](g, h)));
  h = fc_out(g, h);
  return ag::matmul(h, vocab_table, false, true);
}

template <class T>
AttFcOutput<T> AttFcHead<T>::forward(ag::Graph<T>& g, ag::Var<T> x, ag::Var<T> xt, ag::Var<T> w,
                                     ag::Var<T> vocab_table) {
  if (!xt.valid()) xt = project_visual(g, x);
  AttPool<T> pooled = pool(g, scores(xt, project_text(g, w)), x);
  return {classify(g, pooled.x_hat, vocab_table), pooled};
}

template <class T>
nn::ParamRefs<T> AttFcHead<T>::attention_parameters() {
  nn::ParamRefs<T> out;
  sigma_x.collect(out);
  norm_x.collect(out);
  sigma_w.collect(out);
  norm_w.collect(out);
  out.push_back(&sigma_h);
  out.push_back(&b_h);
  return out;
}

template <class T>
nn::ParamRefs<T> AttFcHead<T>::fc_parameters() {
  nn::ParamRefs<T> out;
  for (std::size_t i = 0; i < fc_hidden.size(); ++i) {
    fc_hidden[i].collect(out);
    fc_norms[i].collect(out);
  }
  fc_out.collect(out);
  return out;
}

template <class T>
nn::ParamRefs<T> AttFcHead<T>::parameters() {
  nn::ParamRefs<T> out = attention_parameters();
  for (auto* p : fc_parameters()) out.push_back(p);
  return out;
}

template <class T>
ag::Var<T> single_head_scores(ag::Var<T> s) {
  ICMLM_REQUIRE(s.shape().size() == 3 && s.dim(0) == 1, "single-head scores need S[1, N, T]");
  return ag::logsumexp(s);  // [1, N]
}

// ---------------------------------------------------------------- tfm

template <class T>
TfmHead<T>::TfmHead(const TfmConfig& cfg, Rng& rng) : cfg_(cfg) {
  proj_ = nn::Linear<T>("tfm.visual_proj", cfg.d_x, cfg.d_w, true, rng);
  Tensor<T> pos({cfg.grid_cells, cfg.d_w});
  for (T& v : pos.values()) v = static_cast<T>(rng.normal() * 0.1);
  pos_ = Parameter<T>("tfm.cell_embedding", std::move(pos));
  if (!cfg.positional) pos_.value.fill(T(0));
  nn::EncoderLayerConfig lc;
  lc.d_model = cfg.d_w;
  lc.n_heads = cfg.heads;
  lc.head_dim = cfg.head_dim > 0 ? cfg.head_dim : cfg.d_w;
  lc.ff_dim = cfg.ff_dim;
  lc.dropout = cfg.dropout;
  lc.order = cfg.order;
  layer_ = nn::EncoderLayer<T>("tfm.encoder", lc, rng);
}

template <class T>
VisualTokens<T> TfmHead<T>::encode_visual(ag::Graph<T>& g, ag::Var<T> x) {
  ICMLM_REQUIRE(x.shape().size() == 2 && x.dim(1) == cfg_.d_x, "X must be [N, d_x]");
  ICMLM_REQUIRE(x.dim(0) == cfg_.grid_cells, "visual token count must equal grid_cells");
  VisualTokens<T> out;
  const Tensor<T>& xv = x.value();
  out.padding.assign(static_cast<std::size_t>(x.dim(0)), 0);
  for (int r = 0; r < x.dim(0); ++r) {
    auto row = xv.row(r);
    out.padding[static_cast<std::size_t>(r)] = std::all_of(row.begin(), row.end(), [](T v) { return v == T(0); });
  }
  out.rows = proj_(g, x);
  if (cfg_.positional) out.rows = ag::add(out.rows, g.param(pos_));
  return out;
}

template <class T>
TfmOutput<T> TfmHead<T>::forward(ag::Graph<T>& g, const VisualTokens<T>* visual, ag::Var<T> w, int mask_index,
                                 ag::Var<T> vocab_table, bool training, Rng* rng) {
  const int t = w.dim(0);
  ICMLM_REQUIRE(mask_index >= 0 && mask_index < t,
                "mask_index " + std::to_string(mask_index) + " out of range for " + std::to_string(t) + " tokens");
  const int n = visual != nullptr ? visual->rows.dim(0) : 0;
  ag::Var<T> z = visual != nullptr ? ag::concat_rows<T>({visual->rows, w}) : w;
  std::vector<std::uint8_t> key_mask;
  if (visual != nullptr && std::any_of(visual->padding.begin(), visual->padding.end(), [](auto v) { return v != 0; })) {
    key_mask.assign(static_cast<std::size_t>(n + t), 0);
    std::copy(visual->padding.begin(), visual->padding.end(), key_mask.begin());
  }
  const int q = n + mask_index;
  auto out = layer_.forward(g, z, q, q + 1, training, rng, key_mask);
  return {ag::matmul(out.rows, vocab_table, false, true), out.rows, out.attention};
}

template <class T>
nn::ParamRefs<T> TfmHead<T>::parameters() {
  nn::ParamRefs<T> out;
  proj_.collect(out);
  out.push_back(&pos_);
  layer_.collect(out);
  return out;
}

template <class T>
nn::ParamRefs<T> TfmHead<T>::attention_parameters() {
  return parameters();
}

template class TpHead<float>;
template class TpHead<double>;
template class AttFcHead<float>;
template class AttFcHead<double>;
template class TfmHead<float>;
template class TfmHead<double>;
template ag::Var<float> single_head_scores<float>(ag::Var<float>);
template ag::Var<double> single_head_scores<double>(ag::Var<double>);

// ---------------------------------------------------------------- maps

double AttentionMap::sum() const {
  double s = 0.0;
  for (double v : p) s += v;
  return s;
}

std::vector<double> tfm_attention_cells(const Tensor<float>& attention, int n_cells) {
  ICMLM_REQUIRE(attention.rank() == 3 && attention.dim(1) == 1 && attention.dim(2) >= n_cells,
                "expected masked-row attention [heads, 1, S]");
  const int heads = attention.dim(0), s = attention.dim(2);
  std::vector<double> out(static_cast<std::size_t>(n_cells), 0.0);
  for (int h = 0; h < heads; ++h) {
    for (int c = 0; c < n_cells; ++c) out[c] += attention[static_cast<std::size_t>(h) * s + c];
  }
  double total = 0.0;
  for (double v : out) total += v;
  if (total <= 0.0) {
    std::fill(out.begin(), out.end(), 1.0 / n_cells);
  } else {
    for (double& v : out) v /= total;
  }
  return out;
}

void save_attention(const AttentionMap& map, const corpus::ImageRecord& image, const std::filesystem::path& png,
                    const std::filesystem::path& json_path) {
  ICMLM_REQUIRE(static_cast<int>(map.p.size()) == map.h * map.w, "attention map size mismatch");
  ICMLM_REQUIRE(image.height % map.h == 0 && image.width % map.w == 0, "grid must divide the image");
  const double peak = std::max(*std::max_element(map.p.begin(), map.p.end()), 1e-12);
  io::RgbImage out{image.width, image.height, image.pixels};
  const int sy = image.height / map.h, sx = image.width / map.w;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const double a = map.p[static_cast<std::size_t>((y / sy) * map.w + x / sx)] / peak;
      // Ramp from pale yellow (low) to dark red (high), blended at up to 75%.
      const double ramp[3] = {255.0 + a * (128.0 - 255.0), 255.0 * (1.0 - a), 204.0 * (1.0 - a)};
      const double alpha = 0.25 + 0.5 * a;
      for (int c = 0; c < 3; ++c) {
        auto& px = out.pixels[(static_cast<std::size_t>(y) * image.width + x) * 3 + c];
        px = static_cast<std::uint8_t>(std::clamp(std::lround((1.0 - alpha) * px + alpha * ramp[c]), 0L, 255L));
      }
    }
  }
  io::write_png(png, out);
  nlohmann::ordered_json grid = nlohmann::ordered_json::array();
  for (int r = 0; r < map.h; ++r) {
    std::vector<double> row(map.p.begin() + r * map.w, map.p.begin() + (r + 1) * map.w);
    grid.push_back(row);
  }
  const nlohmann::ordered_json j{{"image_id", map.image_id},
                                 {"caption_id", map.caption_id},
                                 {"mask_index", map.mask_index},
                                 {"grid", grid}};
  io::write_text_file(json_path, j.dump(2) + "\n");
}

}  // namespace icmlm::fusion
