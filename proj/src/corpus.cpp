#include "icmlm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "icmlm/image_io.hpp"
#include "icmlm/rng.hpp"
#include "json.hpp"

namespace icmlm::corpus {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSceneTag = 0x5CE4E;

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::array<E, N>& all, const char* what) {
  for (E e : all) {
    if (to_string(e) == s) return e;
  }
  throw ParseError(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

struct Rgb {
  int r, g, b;
};

Rgb palette(Color c) {
  switch (c) {
    case Color::red: return {215, 35, 35};
    case Color::green: return {40, 170, 55};
    case Color::blue: return {45, 75, 215};
    case Color::yellow: return {230, 205, 35};
    case Color::purple: return {145, 55, 185};
    case Color::cyan: return {40, 195, 205};
  }
  return {0, 0, 0};
}

struct Geometry {
  double cx, cy, half;
};

Geometry geometry(const SceneShape& s, int image_size) {
  const double step = image_size / 4.0;
  const int row = s.cell / 3, col = s.cell % 3;
  const double half = std::round(image_size * (s.size == SizeClass::small ? 5.0 : 8.0) / 64.0);
  return {step * (col + 1), step * (row + 1), half};
}

bool inside_polygon(const std::vector<std::pair<double, double>>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto [xi, yi] = poly[i];
    const auto [xj, yj] = poly[j];
    if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) in = !in;
  }
  return in;
}

std::vector<std::pair<double, double>> outline(const SceneShape& s, const Geometry& g) {
  std::vector<std::pair<double, double>> poly;
  if (s.shape == ShapeKind::triangle) {
    poly = {{g.cx, g.cy - g.half}, {g.cx + g.half, g.cy + g.half}, {g.cx - g.half, g.cy + g.half}};
  } else if (s.shape == ShapeKind::star) {
    for (int k = 0; k < 10; ++k) {
      const double r = (k % 2 == 0) ? g.half : 0.45 * g.half;
      const double a = -std::numbers::pi / 2 + k * std::numbers::pi / 5;
      poly.emplace_back(g.cx + r * std::cos(a), g.cy + r * std::sin(a));
    }
  }
  return poly;
}

bool covers(const SceneShape& s, const Geometry& g, const std::vector<std::pair<double, double>>& poly,
            double px, double py) {
  switch (s.shape) {
    case ShapeKind::circle: {
      const double dx = px - g.cx, dy = py - g.cy;
      return dx * dx + dy * dy <= g.half * g.half;
    }
    case ShapeKind::square:
      return std::abs(px - g.cx) <= g.half && std::abs(py - g.cy) <= g.half;
    default:
      return inside_polygon(poly, px, py);
  }
}

std::uint8_t clamp8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

std::string image_id_for(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img%06d", index);
  return buf;
}

json shape_json(const SceneShape& s) {
  return json{{"shape", to_string(s.shape)},
              {"color", to_string(s.color)},
              {"cell", s.cell},
              {"size", to_string(s.size)}};
}

SceneShape shape_from_json(const json& j) {
  SceneShape s;
  s.shape = parse_shape(j.at("shape").get<std::string>());
  s.color = parse_color(j.at("color").get<std::string>());
  s.cell = j.at("cell").get<int>();
  s.size = parse_size(j.at("size").get<std::string>());
  return s;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::vector<std::string> lines;
  std::istringstream in(io::read_text_file(path));
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

}  // namespace

std::string_view split_name(Split s) { return s == Split::train ? "train" : "val"; }

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  throw ParseError("unknown split '" + std::string(name) + "'");
}

std::string_view to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::star: return "star";
  }
  return "?";
}

std::string_view to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
    case Color::purple: return "purple";
    case Color::cyan: return "cyan";
  }
  return "?";
}

std::string_view to_string(SizeClass s) { return s == SizeClass::small ? "small" : "large"; }

ShapeKind parse_shape(std::string_view s) { return parse_enum(s, kShapeKinds, "shape"); }
Color parse_color(std::string_view s) { return parse_enum(s, kColors, "color"); }
SizeClass parse_size(std::string_view s) { return parse_enum(s, kSizes, "size"); }

std::string_view region_phrase(int cell) {
  static constexpr std::array<std::string_view, 9> kRegions = {
      "top left", "top", "top right", "left", "center", "right", "bottom left", "bottom", "bottom right"};
  ICMLM_REQUIRE(cell >= 0 && cell < 9, "cell out of range");
  return kRegions[static_cast<std::size_t>(cell)];
}

PixelBox shape_box(const SceneShape& s, int image_size) {
  const Geometry g = geometry(s, image_size);
  const int h = static_cast<int>(g.half);
  const int cx = static_cast<int>(g.cx), cy = static_cast<int>(g.cy);
  return {cy - h, cy + h, cx - h, cx + h};
}

std::vector<int> shape_cells(const SceneShape& s, int image_size, int grid) {
  ICMLM_REQUIRE(grid > 0 && image_size % grid == 0, "grid must divide the image size");
  const int side = image_size / grid;
  const PixelBox b = shape_box(s, image_size);
  std::vector<int> cells;
  for (int r = std::max(0, b.y0 / side); r <= std::min(grid - 1, (b.y1 - 1) / side); ++r) {
    for (int c = std::max(0, b.x0 / side); c <= std::min(grid - 1, (b.x1 - 1) / side); ++c) {
      cells.push_back(r * grid + c);
    }
  }
  return cells;
}

const ImageRecord& Dataset::image(std::string_view image_id) const { return images[image_index(image_id)]; }

std::size_t Dataset::image_index(std::string_view image_id) const {
  auto it = std::lower_bound(images.begin(), images.end(), image_id,
                             [](const ImageRecord& r, std::string_view id) { return r.image_id < id; });
  if (it != images.end() && it->image_id == image_id) return static_cast<std::size_t>(it - images.begin());
  // Fall back to a scan for datasets not sorted by id.
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].image_id == image_id) return i;
  }
  throw ContractViolation("unknown image id '" + std::string(image_id) + "'");
}

void Dataset::check_integrity() const {
  std::set<std::string_view> ids;
  for (const auto& img : images) ids.insert(img.image_id);
  for (const auto& c : captions) {
    if (!ids.count(c.image_id)) {
      throw ContractViolation("caption " + c.caption_id + " references unknown image " + c.image_id);
    }
  }
}

SyntheticSceneSpec sample_scene(std::uint64_t seed, int index, const SyntheticOptions& opt) {
  ICMLM_REQUIRE(opt.min_shapes >= 1 && opt.max_shapes <= 9 && opt.min_shapes <= opt.max_shapes,
                "shape count range must lie in [1, 9]");
  Rng rng = Rng::derive(seed, kSceneTag, static_cast<std::uint64_t>(index));
  SyntheticSceneSpec spec;
  const int n = opt.min_shapes + static_cast<int>(rng.below(opt.max_shapes - opt.min_shapes + 1));
  const std::vector<int> cells = rng.permutation(9);
  for (int i = 0; i < n; ++i) {
    SceneShape s;
    s.cell = cells[i];
    s.shape = kShapeKinds[rng.below(kShapeKinds.size())];
    s.color = kColors[rng.below(kColors.size())];
    s.size = kSizes[rng.below(kSizes.size())];
    spec.shapes.push_back(s);
  }
  std::sort(spec.shapes.begin(), spec.shapes.end(),
            [](const SceneShape& a, const SceneShape& b) { return a.cell < b.cell; });
  spec.seed = rng.next();
  return spec;
}

ImageRecord render_scene(const SyntheticSceneSpec& spec, const std::string& image_id,
                         const SyntheticOptions& opt) {
  const int n = opt.image_size;
  ICMLM_REQUIRE(n >= 16 && n % 16 == 0, "synthetic image size must be a positive multiple of 16");
  Rng rng(spec.seed);
  ImageRecord img;
  img.image_id = image_id;
  img.height = img.width = n;
  img.pixels.resize(static_cast<std::size_t>(n) * n * 3);

  // Background: a gray level tinted toward a random color, a linear ramp, and
  // per-pixel noise.
  const double gray = rng.uniform(60.0, 150.0);
  const double tint[3] = {rng.uniform(-45.0, 45.0), rng.uniform(-45.0, 45.0), rng.uniform(-45.0, 45.0)};
  const double ramp_y = rng.uniform(-25.0, 25.0), ramp_x = rng.uniform(-25.0, 25.0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double base = gray + ramp_y * (y / double(n) - 0.5) + ramp_x * (x / double(n) - 0.5);
      for (int c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-opt.noise, opt.noise);
        img.pixels[(static_cast<std::size_t>(y) * n + x) * 3 + c] = clamp8(base + tint[c] + noise);
      }
    }
  }

  for (const SceneShape& s : spec.shapes) {
    const Geometry g = geometry(s, n);
    const auto poly = outline(s, g);
    const Rgb base = palette(s.color);
    const double jitter[3] = {rng.uniform(-18.0, 18.0), rng.uniform(-18.0, 18.0), rng.uniform(-18.0, 18.0)};
    const PixelBox b = shape_box(s, n);
    for (int y = std::max(0, b.y0); y < std::min(n, b.y1); ++y) {
      for (int x = std::max(0, b.x0); x < std::min(n, b.x1); ++x) {
        if (!covers(s, g, poly, x + 0.5, y + 0.5)) continue;
        const int rgb[3] = {base.r, base.g, base.b};
        for (int c = 0; c < 3; ++c) {
          const double noise = rng.uniform(-opt.noise / 2.0, opt.noise / 2.0);
          img.pixels[(static_cast<std::size_t>(y) * n + x) * 3 + c] = clamp8(rgb[c] + jitter[c] + noise);
        }
      }
    }
  }
  return img;
}

std::string shape_caption(const SceneShape& s) {
  std::string out = "a ";
  out += to_string(s.size);
  out += ' ';
  out += to_string(s.color);
  out += ' ';
  out += to_string(s.shape);
  out += " in the ";
  out += region_phrase(s.cell);
  return out;
}

std::string scene_caption(const SyntheticSceneSpec& spec) {
  std::string out = "there is";
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    out += i == 0 ? " a " : " and a ";
    out += to_string(spec.shapes[i].color);
    out += ' ';
    out += to_string(spec.shapes[i].shape);
  }
  return out;
}

Dataset generate_synthetic(int n_images, std::uint64_t seed, const SyntheticOptions& opt) {
  ICMLM_REQUIRE(n_images >= 1, "n_images must be >= 1");
  Dataset ds;
  ds.split = opt.split;
  ds.images.reserve(static_cast<std::size_t>(n_images));
  for (int i = 0; i < n_images; ++i) {
    const std::string id = image_id_for(i);
    SyntheticSceneSpec spec = sample_scene(seed, i, opt);
    ds.images.push_back(render_scene(spec, id, opt));
    int k = 0;
    for (const SceneShape& s : spec.shapes) {
      ds.captions.push_back({id + "_c" + std::to_string(k++), id, shape_caption(s)});
    }
    ds.captions.push_back({id + "_c" + std::to_string(k), id, scene_caption(spec)});
    ds.scenes.emplace(id, std::move(spec));
  }
  return ds;
}

Dataset load_manifest(const fs::path& path, int image_size) {
  const auto lines = read_lines(path);
  const fs::path base = path.parent_path();
  struct Entry {
    ImageRecord image;
    std::vector<std::string> captions;
  };
  std::vector<Entry> entries;
  std::set<std::string> seen;
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    if (blank(lines[ln])) continue;
    const std::string where = path.string() + ":" + std::to_string(ln + 1);
    json j;
    try {
      j = json::parse(lines[ln]);
    } catch (const json::exception& e) {
      throw ParseError(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("image") || !j["image"].is_string() || !j.contains("captions") ||
        !j["captions"].is_array()) {
      throw ParseError(where + ": expected {\"image\": string, \"captions\": [string, ...]}");
    }
    fs::path img_path = j["image"].get<std::string>();
    if (img_path.is_relative()) img_path = base / img_path;
    if (!fs::exists(img_path)) throw IngestionError(where + ": image file not found: " + img_path.string());
    io::RgbImage raw;
    try {
      raw = io::read_png(img_path);
    } catch (const Error& e) {
      throw IngestionError(where + ": " + e.what());
    }
    // Center crop to a square, then resample.
    const int side = std::min(raw.width, raw.height);
    io::RgbImage crop{side, side, std::vector<std::uint8_t>(static_cast<std::size_t>(side) * side * 3)};
    const int oy = (raw.height - side) / 2, ox = (raw.width - side) / 2;
    for (int y = 0; y < side; ++y) {
      std::copy_n(raw.pixels.begin() + ((static_cast<std::size_t>(y + oy) * raw.width + ox) * 3), side * 3,
                  crop.pixels.begin() + static_cast<std::size_t>(y) * side * 3);
    }
    io::RgbImage sized = io::resize_bilinear(crop, image_size, image_size);

    Entry e;
    e.image.image_id = j.contains("id") ? j["id"].get<std::string>() : img_path.stem().string();
    if (!seen.insert(e.image.image_id).second) {
      throw IngestionError(where + ": duplicate image id '" + e.image.image_id + "'");
    }
    e.image.height = e.image.width = image_size;
    e.image.pixels = std::move(sized.pixels);
    e.image.source_path = img_path.string();
    for (const auto& c : j["captions"]) {
      if (!c.is_string()) throw ParseError(where + ": captions must be strings");
      e.captions.push_back(c.get<std::string>());
    }
    entries.push_back(std::move(e));
  }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.image.image_id < b.image.image_id; });
  Dataset ds;
  for (auto& e : entries) {
    for (std::size_t k = 0; k < e.captions.size(); ++k) {
      ds.captions.push_back({e.image.image_id + "_c" + std::to_string(k), e.image.image_id, e.captions[k]});
    }
    ds.images.push_back(std::move(e.image));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  ds.check_integrity();
  fs::create_directories(dir / "images");
  int size = ds.images.empty() ? kDefaultImageSize : ds.images.front().height;
  std::string images_jsonl;
  for (const auto& img : ds.images) {
    ICMLM_REQUIRE(img.height == img.width, "images must be square");
    const fs::path file = dir / "images" / (img.image_id + ".png");
    io::write_png(file, {img.width, img.height, img.pixels});
    images_jsonl += json{{"image_id", img.image_id},
                         {"source_path", img.source_path},
                         {"crc32", io::file_crc32(file)}}
                        .dump() +
                    "\n";
  }
  std::string captions_jsonl;
  for (const auto& c : ds.captions) {
    captions_jsonl += json{{"caption_id", c.caption_id}, {"image_id", c.image_id}, {"text", c.text}}.dump() + "\n";
  }
  std::string scenes_jsonl;
  for (const auto& [id, spec] : ds.scenes) {
    json shapes = json::array();
    for (const auto& s : spec.shapes) shapes.push_back(shape_json(s));
    scenes_jsonl += json{{"image_id", id}, {"seed", spec.seed}, {"shapes", shapes}}.dump() + "\n";
  }
  io::write_text_file(dir / "images.jsonl", images_jsonl);
  io::write_text_file(dir / "captions.jsonl", captions_jsonl);
  io::write_text_file(dir / "scenes.jsonl", scenes_jsonl);
  const json meta{{"format", "icmlm-dataset"},
                  {"version", kDatasetFormatVersion},
                  {"split", split_name(ds.split)},
                  {"image_size", size},
                  {"n_images", ds.images.size()},
                  {"n_captions", ds.captions.size()},
                  {"n_scenes", ds.scenes.size()}};
  io::write_text_file(dir / "meta.json", meta.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw IngestionError(dir.string() + " is not a dataset (no meta.json)");
  json meta;
  try {
    meta = json::parse(io::read_text_file(meta_path));
  } catch (const json::exception& e) {
    throw ParseError(meta_path.string() + ": " + e.what());
  }
  if (meta.value("format", "") != "icmlm-dataset") throw IngestionError(dir.string() + " is not a dataset");
  const int version = meta.value("version", -1);
  if (version != kDatasetFormatVersion) {
    throw IncompatibleVersion(meta_path.string() + ": dataset version " + std::to_string(version) +
                              " is not supported (expected " + std::to_string(kDatasetFormatVersion) + ")");
  }
  Dataset ds;
  ds.split = parse_split(meta.at("split").get<std::string>());
  const int size = meta.at("image_size").get<int>();

  auto parse_line = [](const fs::path& file, std::size_t ln, const std::string& line) {
    try {
      return json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(file.string() + ":" + std::to_string(ln + 1) + ": " + e.what());
    }
  };

  const fs::path images_path = dir / "images.jsonl";
  const auto image_lines = read_lines(images_path);
  for (std::size_t ln = 0; ln < image_lines.size(); ++ln) {
    if (blank(image_lines[ln])) continue;
    const json j = parse_line(images_path, ln, image_lines[ln]);
    const std::string id = j.at("image_id").get<std::string>();
    const fs::path file = dir / "images" / (id + ".png");
    if (!fs::exists(file)) throw IngestionError("missing image file " + file.string());
    if (io::file_crc32(file) != j.at("crc32").get<std::uint32_t>()) {
      throw IngestionError("checksum mismatch in " + file.string());
    }
    io::RgbImage raw = io::read_png(file);
    if (raw.width != size || raw.height != size) {
      throw IngestionError(file.string() + ": expected " + std::to_string(size) + "x" + std::to_string(size));
    }
    ImageRecord img;
    img.image_id = id;
    img.height = raw.height;
    img.width = raw.width;
    img.pixels = std::move(raw.pixels);
    img.source_path = j.at("source_path").get<std::string>();
    ds.images.push_back(std::move(img));
  }

  const fs::path captions_path = dir / "captions.jsonl";
  const auto caption_lines = read_lines(captions_path);
  for (std::size_t ln = 0; ln < caption_lines.size(); ++ln) {
    if (blank(caption_lines[ln])) continue;
    const json j = parse_line(captions_path, ln, caption_lines[ln]);
    ds.captions.push_back({j.at("caption_id").get<std::string>(), j.at("image_id").get<std::string>(),
                           j.at("text").get<std::string>()});
  }

  const fs::path scenes_path = dir / "scenes.jsonl";
  if (fs::exists(scenes_path)) {
    const auto scene_lines = read_lines(scenes_path);
    for (std::size_t ln = 0; ln < scene_lines.size(); ++ln) {
      if (blank(scene_lines[ln])) continue;
      const json j = parse_line(scenes_path, ln, scene_lines[ln]);
      SyntheticSceneSpec spec;
      spec.seed = j.at("seed").get<std::uint64_t>();
      for (const auto& s : j.at("shapes")) spec.shapes.push_back(shape_from_json(s));
      ds.scenes.emplace(j.at("image_id").get<std::string>(), std::move(spec));
    }
  }
  if (ds.images.size() != meta.at("n_images").get<std::size_t>() ||
      ds.captions.size() != meta.at("n_captions").get<std::size_t>()) {
    throw IngestionError(dir.string() + ": record counts disagree with meta.json");
  }
  ds.check_integrity();
  return ds;
}

Tensor<float> to_chw(const ImageRecord& img) {
  Tensor<float> t({3, img.height, img.width});
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) t[c * plane + p] = static_cast<float>(img.pixels[p * 3 + c]) / 255.0f;
  }
  return t;
}

}  // namespace icmlm::corpus
