#include "icmlm/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "icmlm/image_io.hpp"

namespace icmlm::io {

namespace {

static_assert(std::endian::native == std::endian::little, "weights.bin writer assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class Reader {
 public:
  Reader(std::string data, std::filesystem::path path) : data_(std::move(data)), path_(std::move(path)) {}

  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4), 4);
    return v;
  }
  const char* take(std::size_t n) {
    if (pos_ + n > data_.size()) throw ParseError(path_.string() + ": truncated weights file");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_tensors(const std::filesystem::path& path, const TensorList& tensors) {
  std::string out = "ICMW";
  put_u32(out, kWeightsVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (int d : t->shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(float));
  }
  write_text_file(path, out);
}

std::map<std::string, Tensor<float>> read_tensors(const std::filesystem::path& path) {
  Reader r(read_text_file(path), path);
  if (std::string(r.take(4), 4) != "ICMW") throw ParseError(path.string() + ": not a weights file");
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion) {
    throw IncompatibleVersion(path.string() + ": weights version " + std::to_string(version) + ", expected " +
                              std::to_string(kWeightsVersion));
  }
  const std::uint32_t count = r.u32();
  std::map<std::string, Tensor<float>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    std::string name(r.take(len), len);
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(r.u32()));
    Tensor<float> t(shape);
    std::memcpy(t.data(), r.take(t.size() * sizeof(float)), t.size() * sizeof(float));
    if (!out.emplace(name, std::move(t)).second) throw ParseError(path.string() + ": duplicate tensor " + name);
  }
  if (!r.done()) throw ParseError(path.string() + ": trailing bytes");
  return out;
}

}  // namespace icmlm::io
