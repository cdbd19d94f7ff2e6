#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace icmlm::text {

// Token <-> id map. Ids 0..3 are reserved for the special tokens; the rest are
// ordered by descending corpus frequency, ties lexicographic.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kMask = 3;
  static constexpr int kNumSpecial = 4;

  Vocabulary();

  // Counts tokens over `sentences`; tokens below min_count are left out.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sentences, int min_count = 1);

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  bool contains(std::string_view token) const { return ids_.find(std::string(token)) != ids_.end(); }
  // Unknown tokens map to kUnk.
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  std::vector<int> encode(const std::vector<std::string>& tokens) const;

  // UTF-8 lines "token<TAB>id".
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void add(const std::string& token);
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> ids_;
};

}  // namespace icmlm::text
