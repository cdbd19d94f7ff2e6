#pragma once

#include <string>
#include <vector>

#include "icmlm/corpus.hpp"
#include "icmlm/nn.hpp"

namespace icmlm::vision {

struct VisionConfig {
  int image_size = 64;
  std::vector<int> widths = {32, 64, 128, 128};  // last entry is d_x
  std::vector<int> strides = {2, 2, 1, 2};

  int d_x() const { return widths.back(); }
  // Side of the grid after `blocks` blocks (all blocks by default).
  int grid_side(int blocks = -1) const;
};

// One block's output for a single image: X[h, w, c] stored as [h * w, c] rows.
struct FeatureGrid {
  Tensor<float> X;
  int h = 0;
  int w = 0;
  std::string layer_tag;

  int channels() const { return X.dim(1); }
};

// Plain CNN backbone: a stack of ConvBlocks (3x3 conv, per-sample norm, ReLU).
template <class T>
class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(const VisionConfig& cfg, Rng& rng);

  const VisionConfig& config() const { return cfg_; }
  int num_blocks() const { return static_cast<int>(blocks_.size()); }

  // x: [B, 3, S, S]. Returns every block's output [B, C_l, H_l, W_l].
  std::vector<ag::Var<T>> forward_all(ag::Graph<T>& g, ag::Var<T> x);
  ag::Var<T> forward(ag::Graph<T>& g, ag::Var<T> x) { return forward_all(g, x).back(); }

  nn::ParamRefs<T> parameters();
  void set_trainable(bool trainable);

 private:
  VisionConfig cfg_;
  std::vector<nn::ConvBlock<T>> blocks_;
};

// Inference helpers over float weights. Blocks are tagged "block1".."blockN".
// `keep_last` selects how many trailing blocks to return (final grid last).
std::vector<FeatureGrid> extract_grids(VisionEncoder<float>& enc, const corpus::ImageRecord& img, int keep_last = 1);
FeatureGrid extract_grid(VisionEncoder<float>& enc, const corpus::ImageRecord& img);

// Stacks images into a [B, 3, S, S] batch.
Tensor<float> batch_tensor(const std::vector<const corpus::ImageRecord*>& images, int image_size);

enum class PoolMode { global_average, spatial_2x2 };

std::vector<float> pool(const FeatureGrid& grid, PoolMode mode, bool l2_normalize = false);

}  // namespace icmlm::vision
