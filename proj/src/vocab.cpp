#include "icmlm/vocab.hpp"

#include <algorithm>
#include <sstream>

#include "icmlm/errors.hpp"
#include "icmlm/image_io.hpp"

namespace icmlm::text {

Vocabulary::Vocabulary() {
  for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[MASK]"}) add(s);
}

void Vocabulary::add(const std::string& token) {
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences, int min_count) {
  std::map<std::string, long, std::less<>> counts;
  for (const auto& s : sentences) {
    for (const auto& t : s) ++counts[t];
  }
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, n] : ranked) {
    if (n >= min_count && !v.contains(tok)) v.add(tok);
  }
  return v;
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  ICMLM_REQUIRE(id >= 0 && id < size(), "vocabulary id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::string out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) out += tokens_[i] + "\t" + std::to_string(i) + "\n";
  io::write_text_file(path, out);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::istringstream in(io::read_text_file(path));
  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(path.string() + ":" + std::to_string(line_no) + ": missing tab");
    const std::string tok = line.substr(0, tab);
    int id = -1;
    try {
      id = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad id");
    }
    if (id != v.size()) throw ParseError(path.string() + ":" + std::to_string(line_no) + ": ids must be dense");
    v.add(tok);
  }
  if (v.size() < kNumSpecial || v.tokens_[kPad] != "[PAD]" || v.tokens_[kUnk] != "[UNK]" ||
      v.tokens_[kCls] != "[CLS]" || v.tokens_[kMask] != "[MASK]") {
    throw ParseError(path.string() + ": special tokens missing or misplaced");
  }
  return v;
}

}  // namespace icmlm::text
