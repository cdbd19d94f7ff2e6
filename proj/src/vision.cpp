#include "icmlm/vision.hpp"

#include <cmath>

namespace icmlm::vision {

int VisionConfig::grid_side(int blocks) const {
  const int n = blocks < 0 ? static_cast<int>(strides.size()) : blocks;
  int side = image_size;
  for (int i = 0; i < n; ++i) side = (side - 1) / strides[static_cast<std::size_t>(i)] + 1;
  return side;
}

template <class T>
VisionEncoder<T>::VisionEncoder(const VisionConfig& cfg, Rng& rng) : cfg_(cfg) {
  ICMLM_REQUIRE(!cfg.widths.empty() && cfg.widths.size() == cfg.strides.size(),
                "vision config needs one stride per block");
  int in = 3;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    blocks_.emplace_back("vision.block" + std::to_string(i + 1), in, cfg.widths[i], cfg.strides[i], rng);
    in = cfg.widths[i];
  }
}

template <class T>
std::vector<ag::Var<T>> VisionEncoder<T>::forward_all(ag::Graph<T>& g, ag::Var<T> x) {
  const Shape& s = x.shape();
  ICMLM_REQUIRE(s.size() == 4 && s[1] == 3 && s[2] == cfg_.image_size && s[3] == cfg_.image_size,
                "vision input must be [B, 3, " + std::to_string(cfg_.image_size) + ", " +
                    std::to_string(cfg_.image_size) + "], got " + shape_str(s));
  std::vector<ag::Var<T>> outs;
  for (auto& b : blocks_) {
    x = b(g, x);
    outs.push_back(x);
  }
  return outs;
}

template <class T>
nn::ParamRefs<T> VisionEncoder<T>::parameters() {
  nn::ParamRefs<T> out;
  for (auto& b : blocks_) b.collect(out);
  return out;
}

template <class T>
void VisionEncoder<T>::set_trainable(bool trainable) {
  for (auto* p : parameters()) p->trainable = trainable;
}

template class VisionEncoder<float>;
template class VisionEncoder<double>;

Tensor<float> batch_tensor(const std::vector<const corpus::ImageRecord*>& images, int image_size) {
  const int b = static_cast<int>(images.size());
  Tensor<float> out({b, 3, image_size, image_size});
  const std::size_t per = static_cast<std::size_t>(3) * image_size * image_size;
  for (int i = 0; i < b; ++i) {
    const auto* img = images[static_cast<std::size_t>(i)];
    ICMLM_REQUIRE(img->height == image_size && img->width == image_size,
                  "image " + img->image_id + " is not " + std::to_string(image_size) + "x" + std::to_string(image_size));
    const Tensor<float> chw = corpus::to_chw(*img);
    std::copy(chw.data(), chw.data() + per, out.data() + per * i);
  }
  return out;
}

namespace {

FeatureGrid to_grid(const Tensor<float>& chw_batch, int index, std::string tag) {
  const int c = chw_batch.dim(1), h = chw_batch.dim(2), w = chw_batch.dim(3);
  FeatureGrid grid;
  grid.h = h;
  grid.w = w;
  grid.layer_tag = std::move(tag);
  grid.X = Tensor<float>({h * w, c});
  const float* src = chw_batch.data() + static_cast<std::size_t>(index) * c * h * w;
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < h * w; ++p) grid.X.at(p, ch) = src[static_cast<std::size_t>(ch) * h * w + p];
  }
  return grid;
}

}  // namespace

std::vector<FeatureGrid> extract_grids(VisionEncoder<float>& enc, const corpus::ImageRecord& img, int keep_last) {
  ICMLM_REQUIRE(keep_last >= 1 && keep_last <= enc.num_blocks(), "keep_last out of range");
  ag::Graph<float> g(false);
  auto outs = enc.forward_all(g, g.constant(batch_tensor({&img}, enc.config().image_size)));
  std::vector<FeatureGrid> grids;
  for (int i = enc.num_blocks() - keep_last; i < enc.num_blocks(); ++i) {
    grids.push_back(to_grid(outs[static_cast<std::size_t>(i)].value(), 0, "block" + std::to_string(i + 1)));
  }
  return grids;
}

FeatureGrid extract_grid(VisionEncoder<float>& enc, const corpus::ImageRecord& img) {
  return std::move(extract_grids(enc, img, 1).front());
}

std::vector<float> pool(const FeatureGrid& grid, PoolMode mode, bool l2_normalize) {
  const int c = grid.channels();
  std::vector<double> acc;
  if (mode == PoolMode::global_average) {
    acc.assign(static_cast<std::size_t>(c), 0.0);
    for (int p = 0; p < grid.h * grid.w; ++p) {
      for (int ch = 0; ch < c; ++ch) acc[ch] += grid.X.at(p, ch);
    }
    for (double& v : acc) v /= grid.h * grid.w;
  } else {
    ICMLM_REQUIRE(grid.h % 2 == 0 && grid.w % 2 == 0, "2x2 pooling needs an even grid");
    acc.assign(static_cast<std::size_t>(4) * c, 0.0);
    const int hh = grid.h / 2, hw = grid.w / 2;
    for (int y = 0; y < grid.h; ++y) {
      for (int x = 0; x < grid.w; ++x) {
        const int q = (y / hh) * 2 + (x / hw);
        for (int ch = 0; ch < c; ++ch) acc[static_cast<std::size_t>(q) * c + ch] += grid.X.at(y * grid.w + x, ch);
      }
    }
    for (double& v : acc) v /= hh * hw;
  }
  if (l2_normalize) {
    double n2 = 0.0;
    for (double v : acc) n2 += v * v;
    if (n2 > 0.0) {
      const double inv = 1.0 / std::sqrt(n2);
      for (double& v : acc) v *= inv;
    }
  }
  return std::vector<float>(acc.begin(), acc.end());
}

}  // namespace icmlm::vision
