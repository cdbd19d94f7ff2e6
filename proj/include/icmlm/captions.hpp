#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "icmlm/corpus.hpp"
#include "icmlm/tensor.hpp"
#include "icmlm/vocab.hpp"

namespace icmlm::captions {

inline constexpr int kMinTokens = 3;
inline constexpr int kMaxTokens = 25;

enum class PosTag { NN, ADJ, VB, OTHER };
std::string_view to_string(PosTag t);
PosTag parse_pos(std::string_view s);

class Tagger {
 public:
  virtual ~Tagger() = default;
  virtual PosTag tag(std::string_view token) const = 0;
};

// Dictionary tagger: listed tokens get their tag, everything else OTHER.
class LexiconTagger : public Tagger {
 public:
  LexiconTagger() = default;
  explicit LexiconTagger(std::map<std::string, PosTag, std::less<>> lexicon) : lexicon_(std::move(lexicon)) {}
  PosTag tag(std::string_view token) const override;
  void set(std::string token, PosTag tag) { lexicon_[std::move(token)] = tag; }

 private:
  std::map<std::string, PosTag, std::less<>> lexicon_;
};

// Exact lexicon of the synthetic caption grammar.
const LexiconTagger& synthetic_tagger();

struct TokenSequence {
  std::string caption_id;
  std::string image_id;
  std::vector<std::string> tokens;
  std::vector<PosTag> pos_tags;
  bool excluded = false;
  std::string exclusion_reason;
};

// Lowercase, punctuation stripped, split on whitespace.
std::vector<std::string> split_tokens(std::string_view text);

TokenSequence tokenize(const corpus::CaptionRecord& caption, const Tagger& tagger = synthetic_tagger());

// Tokenizes every caption; a caption whose token string repeats an earlier
// caption of the same image is excluded.
std::vector<TokenSequence> tokenize_dataset(const corpus::Dataset& ds,
                                            const Tagger& tagger = synthetic_tagger());

// Retained (non-excluded) sequences only.
std::vector<TokenSequence> retained(const std::vector<TokenSequence>& seqs);

enum class ConceptOrigin { postag, cluster };

struct ConceptSet {
  std::vector<std::string> concepts;
  std::vector<PosTag> tags;            // per concept; OTHER for cluster concepts
  std::vector<std::int64_t> counts;    // corpus frequency (cluster size for cluster concepts)
  std::set<PosTag> pos_filter;
  ConceptOrigin origin = ConceptOrigin::postag;
  bool exhausted = false;  // fewer qualifying tokens than requested

  int size() const noexcept { return static_cast<int>(concepts.size()); }
  // -1 when absent.
  int index_of(std::string_view token) const;
  bool operator==(const ConceptSet&) const = default;
};

struct PostagOptions {
  std::set<PosTag> pos_filter = {PosTag::NN};
  int k = 1000;
  // When non-empty, only these tokens qualify.
  std::set<std::string> restrict_to;
};

ConceptSet build_postag_concepts(const std::vector<TokenSequence>& seqs, const PostagOptions& opt);

struct KMeansResult {
  Tensor<double> centroids;           // [K, d]
  std::vector<int> assignments;       // cluster per point
  std::vector<double> objective;      // after every assignment step
  int iterations = 0;
};

// k-means++ seeding followed by Lloyd iterations on rows of points [N, d].
// Clusters are relabelled by descending size (ties by seeding order).
KMeansResult kmeans(const Tensor<double>& points, int k, std::uint64_t seed, int max_iter = 100,
                    double tol = 1e-6);
double kmeans_objective(const Tensor<double>& points, const Tensor<double>& centroids,
                        const std::vector<int>& assignments);
// Index of the nearest centroid, ties to the lower index.
int nearest_centroid(const Tensor<double>& centroids, std::span<const double> x);

ConceptSet cluster_concept_set(const KMeansResult& km);

struct LabelVector {
  std::string image_id;
  std::vector<double> y;
  bool excluded = false;  // all-zero presence; no tag-prediction signal

  bool operator==(const LabelVector&) const = default;
};

// Binary presence of each concept over an image's retained captions.
std::vector<LabelVector> postag_presence(const corpus::Dataset& ds, const std::vector<TokenSequence>& seqs,
                                         const ConceptSet& cs);
// Union of cluster one-hots over an image's captions. assignments[i] belongs
// to caption_ids[i].
std::vector<LabelVector> cluster_presence(const corpus::Dataset& ds, const std::vector<std::string>& caption_ids,
                                          const std::vector<int>& assignments, int k);
// Scales every non-zero vector to sum 1 and flags all-zero ones as excluded.
void normalize_labels(std::vector<LabelVector>& labels);

struct MaskTriplet {
  std::string image_id;
  std::string caption_id;
  int mask_index = 0;
  int target_vocab_id = 0;

  bool operator==(const MaskTriplet&) const = default;
};

struct TripletBuild {
  std::vector<MaskTriplet> triplets;
  std::int64_t skipped = 0;
  std::map<std::string, std::int64_t> skipped_tokens;
};

TripletBuild build_triplets(const std::vector<TokenSequence>& seqs, const ConceptSet& cs,
                            const text::Vocabulary& vocab);

// File formats.
void save_concepts(const ConceptSet& cs, const std::filesystem::path& path);
ConceptSet load_concepts(const std::filesystem::path& path);
void save_triplets(const std::vector<MaskTriplet>& triplets, const std::filesystem::path& path);
std::vector<MaskTriplet> load_triplets(const std::filesystem::path& path);
void save_labels(const std::vector<LabelVector>& labels, const std::filesystem::path& path);
std::vector<LabelVector> load_labels(const std::filesystem::path& path);

}  // namespace icmlm::captions
