#include "icmlm/captions.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "icmlm/image_io.hpp"
#include "icmlm/rng.hpp"
#include "json.hpp"

namespace icmlm::captions {

using json = nlohmann::ordered_json;

std::string_view to_string(PosTag t) {
  switch (t) {
    case PosTag::NN: return "NN";
    case PosTag::ADJ: return "ADJ";
    case PosTag::VB: return "VB";
    case PosTag::OTHER: return "OTHER";
  }
  return "?";
}

PosTag parse_pos(std::string_view s) {
  for (PosTag t : {PosTag::NN, PosTag::ADJ, PosTag::VB, PosTag::OTHER}) {
    if (to_string(t) == s) return t;
  }
  throw ParseError("unknown POS tag '" + std::string(s) + "'");
}

PosTag LexiconTagger::tag(std::string_view token) const {
  auto it = lexicon_.find(token);
  return it == lexicon_.end() ? PosTag::OTHER : it->second;
}

const LexiconTagger& synthetic_tagger() {
  static const LexiconTagger tagger = [] {
    LexiconTagger t;
    for (auto s : corpus::kShapeKinds) t.set(std::string(corpus::to_string(s)), PosTag::NN);
    for (auto c : corpus::kColors) t.set(std::string(corpus::to_string(c)), PosTag::ADJ);
    for (auto z : corpus::kSizes) t.set(std::string(corpus::to_string(z)), PosTag::ADJ);
    for (const char* r : {"top", "bottom", "left", "right", "center"}) t.set(r, PosTag::NN);
    t.set("is", PosTag::VB);
    return t;
  }();
  return tagger;
}

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TokenSequence tokenize(const corpus::CaptionRecord& caption, const Tagger& tagger) {
  ICMLM_REQUIRE(!caption.text.empty(), "caption " + caption.caption_id + " has empty text");
  TokenSequence seq;
  seq.caption_id = caption.caption_id;
  seq.image_id = caption.image_id;
  seq.tokens = split_tokens(caption.text);
  for (const auto& t : seq.tokens) seq.pos_tags.push_back(tagger.tag(t));
  const int n = static_cast<int>(seq.tokens.size());
  if (n < kMinTokens || n > kMaxTokens) {
    seq.excluded = true;
    seq.exclusion_reason = "length " + std::to_string(n) + " outside [" + std::to_string(kMinTokens) + ", " +
                           std::to_string(kMaxTokens) + "]";
  }
  return seq;
}

std::vector<TokenSequence> tokenize_dataset(const corpus::Dataset& ds, const Tagger& tagger) {
  std::vector<TokenSequence> out;
  out.reserve(ds.captions.size());
  std::map<std::string, std::set<std::vector<std::string>>> seen;
  for (const auto& c : ds.captions) {
    TokenSequence seq = tokenize(c, tagger);
    if (!seq.excluded && !seen[c.image_id].insert(seq.tokens).second) {
      seq.excluded = true;
      seq.exclusion_reason = "duplicate caption";
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<TokenSequence> retained(const std::vector<TokenSequence>& seqs) {
  std::vector<TokenSequence> out;
  for (const auto& s : seqs) {
    if (!s.excluded) out.push_back(s);
  }
  return out;
}

int ConceptSet::index_of(std::string_view token) const {
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    if (concepts[i] == token) return static_cast<int>(i);
  }
  return -1;
}

ConceptSet build_postag_concepts(const std::vector<TokenSequence>& seqs, const PostagOptions& opt) {
  ICMLM_REQUIRE(opt.k >= 1, "K must be >= 1");
  ICMLM_REQUIRE(!opt.pos_filter.empty(), "POS filter must be non-empty");
  std::map<std::string, std::pair<std::int64_t, PosTag>> counts;
  for (const auto& s : seqs) {
    if (s.excluded) continue;
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (!opt.pos_filter.count(s.pos_tags[i])) continue;
      if (!opt.restrict_to.empty() && !opt.restrict_to.count(s.tokens[i])) continue;
      auto& e = counts[s.tokens[i]];
      ++e.first;
      e.second = s.pos_tags[i];
    }
  }
  std::vector<std::pair<std::string, std::pair<std::int64_t, PosTag>>> ranked(counts.begin(), counts.end());
  // Map iteration is lexicographic, so a stable sort on count keeps that as the tie order.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second.first > b.second.first; });
  ConceptSet cs;
  cs.origin = ConceptOrigin::postag;
  cs.pos_filter = opt.pos_filter;
  cs.exhausted = static_cast<int>(ranked.size()) < opt.k;
  for (std::size_t i = 0; i < ranked.size() && static_cast<int>(i) < opt.k; ++i) {
    cs.concepts.push_back(ranked[i].first);
    cs.counts.push_back(ranked[i].second.first);
    cs.tags.push_back(ranked[i].second.second);
  }
  return cs;
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Returns the objective.
double assign_all(const Tensor<double>& points, const Tensor<double>& centroids, std::vector<int>& assign) {
  double total = 0.0;
  for (int i = 0; i < points.dim(0); ++i) {
    const int c = nearest_centroid(centroids, points.row(i));
    assign[static_cast<std::size_t>(i)] = c;
    total += sq_dist(points.row(i), centroids.row(c));
  }
  return total;
}

}  // namespace

int nearest_centroid(const Tensor<double>& centroids, std::span<const double> x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < centroids.dim(0); ++c) {
    const double d = sq_dist(x, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

double kmeans_objective(const Tensor<double>& points, const Tensor<double>& centroids,
                        const std::vector<int>& assignments) {
  double total = 0.0;
  for (int i = 0; i < points.dim(0); ++i) {
    total += sq_dist(points.row(i), centroids.row(assignments[static_cast<std::size_t>(i)]));
  }
  return total;
}

KMeansResult kmeans(const Tensor<double>& points, int k, std::uint64_t seed, int max_iter, double tol) {
  ICMLM_REQUIRE(points.rank() == 2, "points must be [N, d]");
  const int n = points.dim(0), d = points.dim(1);
  ICMLM_REQUIRE(k >= 1 && n >= k, "k-means needs N >= K >= 1");
  Rng rng(seed);

  // k-means++ seeding.
  Tensor<double> cent({k, d});
  std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  int first = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
  std::copy_n(points.row(first).begin(), d, cent.row(0).begin());
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], sq_dist(points.row(i), cent.row(c - 1)));
      total += dist[i];
    }
    int pick = 0;
    if (total <= 0.0) {
      // All points coincide with chosen centers; take the first unused index.
      pick = c;
    } else {
      double r = rng.uniform() * total;
      pick = n - 1;
      for (int i = 0; i < n; ++i) {
        r -= dist[i];
        if (r < 0.0 && dist[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    std::copy_n(points.row(pick).begin(), d, cent.row(c).begin());
  }

  KMeansResult res;
  std::vector<int> assign(static_cast<std::size_t>(n));
  double obj = assign_all(points, cent, assign);
  res.objective.push_back(obj);
  for (int it = 0; it < max_iter && obj > 0.0; ++it) {
    Tensor<double> next({k, d});
    std::vector<int> sizes(static_cast<std::size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      const int c = assign[i];
      ++sizes[c];
      auto row = next.row(c);
      auto p = points.row(i);
      for (int j = 0; j < d; ++j) row[j] += p[j];
    }
    for (int c = 0; c < k; ++c) {
      if (sizes[c] == 0) continue;
      for (double& v : next.row(c)) v /= sizes[c];
    }
    // Empty cluster: move its centroid onto the point farthest from its own centroid.
    for (int c = 0; c < k; ++c) {
      if (sizes[c] != 0) continue;
      int far = 0;
      double far_d = -1.0;
      for (int i = 0; i < n; ++i) {
        if (sizes[assign[i]] <= 1) continue;
        const double dd = sq_dist(points.row(i), next.row(assign[i]));
        if (dd > far_d) {
          far_d = dd;
          far = i;
        }
      }
      std::copy_n(points.row(far).begin(), d, next.row(c).begin());
      --sizes[assign[far]];
      assign[far] = c;
      sizes[c] = 1;
    }
    std::vector<int> next_assign(assign.size());
    const double next_obj = assign_all(points, next, next_assign);
    if (next_obj > obj) break;  // rounding noise at convergence; keep the previous state
    const double gain = obj - next_obj;
    cent = std::move(next);
    assign = std::move(next_assign);
    obj = next_obj;
    res.objective.push_back(obj);
    ++res.iterations;
    if (gain <= tol * std::max(next_obj + gain, 1e-300)) break;
  }

  // Relabel by descending cluster size, ties by current label.
  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  for (int a : assign) ++sizes[a];
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sizes[a] > sizes[b]; });
  std::vector<int> relabel(static_cast<std::size_t>(k));
  res.centroids = Tensor<double>({k, d});
  for (int newc = 0; newc < k; ++newc) {
    relabel[order[newc]] = newc;
    std::copy_n(cent.row(order[newc]).begin(), d, res.centroids.row(newc).begin());
  }
  res.assignments.resize(assign.size());
  for (std::size_t i = 0; i < assign.size(); ++i) res.assignments[i] = relabel[assign[i]];
  // Relabelling can reorder equidistant ties; settle them against the final labels.
  for (int i = 0; i < n; ++i) res.assignments[i] = nearest_centroid(res.centroids, points.row(i));
  return res;
}

ConceptSet cluster_concept_set(const KMeansResult& km) {
  ConceptSet cs;
  cs.origin = ConceptOrigin::cluster;
  const int k = km.centroids.dim(0);
  std::vector<std::int64_t> sizes(static_cast<std::size_t>(k), 0);
  for (int a : km.assignments) ++sizes[a];
  for (int c = 0; c < k; ++c) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "cluster%04d", c);
    cs.concepts.emplace_back(buf);
    cs.tags.push_back(PosTag::OTHER);
    cs.counts.push_back(sizes[c]);
  }
  return cs;
}

std::vector<LabelVector> postag_presence(const corpus::Dataset& ds, const std::vector<TokenSequence>& seqs,
                                         const ConceptSet& cs) {
  std::map<std::string, std::size_t> row;
  std::vector<LabelVector> out;
  for (const auto& img : ds.images) {
    row[img.image_id] = out.size();
    out.push_back({img.image_id, std::vector<double>(static_cast<std::size_t>(cs.size()), 0.0), false});
  }
  for (const auto& s : seqs) {
    if (s.excluded) continue;
    auto it = row.find(s.image_id);
    ICMLM_REQUIRE(it != row.end(), "caption " + s.caption_id + " references unknown image");
    for (const auto& t : s.tokens) {
      const int k = cs.index_of(t);
      if (k >= 0) out[it->second].y[k] = 1.0;
    }
  }
  return out;
}

std::vector<LabelVector> cluster_presence(const corpus::Dataset& ds, const std::vector<std::string>& caption_ids,
                                          const std::vector<int>& assignments, int k) {
  ICMLM_REQUIRE(caption_ids.size() == assignments.size(), "one assignment per caption");
  std::map<std::string, std::string> owner;
  for (const auto& c : ds.captions) owner[c.caption_id] = c.image_id;
  std::map<std::string, std::size_t> row;
  std::vector<LabelVector> out;
  for (const auto& img : ds.images) {
    row[img.image_id] = out.size();
    out.push_back({img.image_id, std::vector<double>(static_cast<std::size_t>(k), 0.0), false});
  }
  for (std::size_t i = 0; i < caption_ids.size(); ++i) {
    auto o = owner.find(caption_ids[i]);
    ICMLM_REQUIRE(o != owner.end(), "unknown caption " + caption_ids[i]);
    ICMLM_REQUIRE(assignments[i] >= 0 && assignments[i] < k, "cluster id out of range");
    out[row.at(o->second)].y[assignments[i]] = 1.0;
  }
  return out;
}

void normalize_labels(std::vector<LabelVector>& labels) {
  for (auto& l : labels) {
    const double s = std::accumulate(l.y.begin(), l.y.end(), 0.0);
    if (s <= 0.0) {
      l.excluded = true;
      continue;
    }
    for (double& v : l.y) v /= s;
    l.excluded = false;
  }
}

TripletBuild build_triplets(const std::vector<TokenSequence>& seqs, const ConceptSet& cs,
                            const text::Vocabulary& vocab) {
  TripletBuild out;
  for (const auto& s : seqs) {
    if (s.excluded) continue;
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (cs.index_of(s.tokens[i]) < 0) continue;
      if (!vocab.contains(s.tokens[i])) {
        ++out.skipped;
        ++out.skipped_tokens[s.tokens[i]];
        continue;
      }
      out.triplets.push_back({s.image_id, s.caption_id, static_cast<int>(i), vocab.id(s.tokens[i])});
    }
  }
  return out;
}

void save_concepts(const ConceptSet& cs, const std::filesystem::path& path) {
  std::string out;
  for (int i = 0; i < cs.size(); ++i) {
    out += cs.concepts[i] + "\t" + std::string(to_string(cs.tags[i])) + "\t" + std::to_string(cs.counts[i]) + "\n";
  }
  io::write_text_file(path, out);
}

ConceptSet load_concepts(const std::filesystem::path& path) {
  std::istringstream in(io::read_text_file(path));
  ConceptSet cs;
  int ln = 0;
  bool all_other = true;
  for (std::string line; std::getline(in, line);) {
    ++ln;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string tok, pos, count;
    if (!std::getline(fields, tok, '\t') || !std::getline(fields, pos, '\t') || !std::getline(fields, count)) {
      throw ParseError(path.string() + ":" + std::to_string(ln) + ": expected token<TAB>pos<TAB>count");
    }
    cs.concepts.push_back(tok);
    cs.tags.push_back(parse_pos(pos));
    try {
      cs.counts.push_back(std::stoll(count));
    } catch (const std::exception&) {
      throw ParseError(path.string() + ":" + std::to_string(ln) + ": bad count");
    }
    if (cs.tags.back() != PosTag::OTHER) {
      all_other = false;
      cs.pos_filter.insert(cs.tags.back());
    }
  }
  if (cs.concepts.empty()) throw ParseError(path.string() + ": empty concept set");
  cs.origin = all_other ? ConceptOrigin::cluster : ConceptOrigin::postag;
  return cs;
}

void save_triplets(const std::vector<MaskTriplet>& triplets, const std::filesystem::path& path) {
  std::string out;
  for (const auto& t : triplets) {
    out += json{{"image_id", t.image_id},
                {"caption_id", t.caption_id},
                {"mask_index", t.mask_index},
                {"target_vocab_id", t.target_vocab_id}}
               .dump() +
           "\n";
  }
  io::write_text_file(path, out);
}

std::vector<MaskTriplet> load_triplets(const std::filesystem::path& path) {
  std::istringstream in(io::read_text_file(path));
  std::vector<MaskTriplet> out;
  int ln = 0;
  for (std::string line; std::getline(in, line);) {
    ++ln;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("image_id").get<std::string>(), j.at("caption_id").get<std::string>(),
                     j.at("mask_index").get<int>(), j.at("target_vocab_id").get<int>()});
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(ln) + ": " + e.what());
    }
  }
  return out;
}

void save_labels(const std::vector<LabelVector>& labels, const std::filesystem::path& path) {
  std::string out;
  for (const auto& l : labels) {
    json j{{"image_id", l.image_id}, {"y", l.y}};
    if (l.excluded) j["excluded"] = true;
    out += j.dump() + "\n";
  }
  io::write_text_file(path, out);
}

std::vector<LabelVector> load_labels(const std::filesystem::path& path) {
  std::istringstream in(io::read_text_file(path));
  std::vector<LabelVector> out;
  int ln = 0;
  for (std::string line; std::getline(in, line);) {
    ++ln;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      LabelVector l;
      l.image_id = j.at("image_id").get<std::string>();
      const json& y = j.at("y");
      if (y.is_array()) {
        l.y = y.get<std::vector<double>>();
      } else {
        // Sparse form: {"dim": K, "y": {"<index>": weight, ...}}.
        l.y.assign(j.at("dim").get<std::size_t>(), 0.0);
        for (const auto& [k, v] : y.items()) l.y.at(std::stoul(k)) = v.get<double>();
      }
      l.excluded = j.value("excluded", false);
      out.push_back(std::move(l));
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(ln) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace icmlm::captions
