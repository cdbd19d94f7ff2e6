#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "icmlm/tensor.hpp"

namespace icmlm::corpus {

inline constexpr int kDefaultImageSize = 64;
inline constexpr int kDatasetFormatVersion = 1;

// 3-channel image stored as interleaved 8-bit samples (row, column, channel).
// Pixel values exposed to models are sample / 255, so the [0,1] range holds by
// construction and persistence through PNG is lossless.
struct ImageRecord {
  std::string image_id;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
  std::string source_path = "synthetic";

  float value(int y, int x, int c) const {
    return static_cast<float>(pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]) / 255.0f;
  }

  bool operator==(const ImageRecord&) const = default;
};

struct CaptionRecord {
  std::string caption_id;
  std::string image_id;
  std::string text;

  bool operator==(const CaptionRecord&) const = default;
};

enum class Split { train, val };
std::string_view split_name(Split s);
Split parse_split(std::string_view name);

enum class ShapeKind { circle, square, triangle, star };
enum class Color { red, green, blue, yellow, purple, cyan };
enum class SizeClass { small, large };

inline constexpr std::array<ShapeKind, 4> kShapeKinds = {ShapeKind::circle, ShapeKind::square,
                                                         ShapeKind::triangle, ShapeKind::star};
inline constexpr std::array<Color, 6> kColors = {Color::red,    Color::green,  Color::blue,
                                                 Color::yellow, Color::purple, Color::cyan};
inline constexpr std::array<SizeClass, 2> kSizes = {SizeClass::small, SizeClass::large};

std::string_view to_string(ShapeKind k);
std::string_view to_string(Color c);
std::string_view to_string(SizeClass s);
ShapeKind parse_shape(std::string_view s);
Color parse_color(std::string_view s);
SizeClass parse_size(std::string_view s);

// Phrase naming a 3x3 layout cell ("top left", "center", ...).
std::string_view region_phrase(int cell);

struct SceneShape {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  int cell = 0;  // 0..8, row-major over a 3x3 layout
  SizeClass size = SizeClass::small;

  bool operator==(const SceneShape&) const = default;
};

struct SyntheticSceneSpec {
  std::vector<SceneShape> shapes;
  std::uint64_t seed = 0;

  bool operator==(const SyntheticSceneSpec&) const = default;
};

// Pixel box [y0, y1) x [x0, x1) covered by a shape in an image of side `size`.
struct PixelBox {
  int y0, y1, x0, x1;
};
PixelBox shape_box(const SceneShape& s, int image_size);

// Feature-grid cells (row * grid + col) whose pixel footprint intersects the
// shape's box, for a grid of side `grid` over an image of side `image_size`.
std::vector<int> shape_cells(const SceneShape& s, int image_size, int grid);

struct Dataset {
  std::vector<ImageRecord> images;
  std::vector<CaptionRecord> captions;
  Split split = Split::train;
  // Geometry of synthetic scenes, keyed by image id; empty for ingested data.
  std::map<std::string, SyntheticSceneSpec> scenes;

  const ImageRecord& image(std::string_view image_id) const;
  std::size_t image_index(std::string_view image_id) const;
  // Throws ContractViolation naming the first dangling caption.
  void check_integrity() const;

  bool operator==(const Dataset&) const = default;
};

struct SyntheticOptions {
  int image_size = kDefaultImageSize;
  int min_shapes = 1;
  int max_shapes = 3;
  Split split = Split::train;
  // Per-pixel background noise amplitude in 8-bit units.
  int noise = 24;
};

// Draws the scene layout for image `index` of a (seed) stream.
SyntheticSceneSpec sample_scene(std::uint64_t seed, int index, const SyntheticOptions& opt = {});
ImageRecord render_scene(const SyntheticSceneSpec& spec, const std::string& image_id,
                         const SyntheticOptions& opt = {});
std::string shape_caption(const SceneShape& s);
std::string scene_caption(const SyntheticSceneSpec& spec);

Dataset generate_synthetic(int n_images, std::uint64_t seed, const SyntheticOptions& opt = {});

// JSON Lines manifest: {"image": "<path>", "captions": ["...", ...]} per line,
// optional "id". Relative image paths resolve against the manifest directory.
Dataset load_manifest(const std::filesystem::path& path, int image_size = kDefaultImageSize);

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// Model input: [3, H, W] floats in [0,1].
Tensor<float> to_chw(const ImageRecord& img);

}  // namespace icmlm::corpus
