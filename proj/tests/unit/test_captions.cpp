#include <algorithm>
#include <cmath>
#include <map>

#include "../support/tmpdir.hpp"
#include "doctest.h"
#include "icmlm/captions.hpp"
#include "icmlm/rng.hpp"

using namespace icmlm;
using namespace icmlm::captions;
using icmlm::testing::TempDir;

namespace {

corpus::CaptionRecord cap(std::string id, std::string image, std::string text) {
  return {std::move(id), std::move(image), std::move(text)};
}

text::Vocabulary vocab_of(const std::vector<TokenSequence>& seqs) {
  std::vector<std::vector<std::string>> s;
  for (const auto& q : seqs) s.push_back(q.tokens);
  return text::Vocabulary::build(s);
}

}  // namespace

TEST_CASE("tokenize with the synthetic lexicon") {
  const TokenSequence t = tokenize(cap("c0", "i0", "A small red circle in the center"));
  CHECK(t.tokens == std::vector<std::string>{"a", "small", "red", "circle", "in", "the", "center"});
  CHECK(t.pos_tags == std::vector<PosTag>{PosTag::OTHER, PosTag::ADJ, PosTag::ADJ, PosTag::NN, PosTag::OTHER,
                                          PosTag::OTHER, PosTag::NN});
  CHECK_FALSE(t.excluded);
  CHECK(tokenize(cap("c1", "i0", "Hi")).excluded);
}

TEST_CASE("duplicate captions of one image are excluded") {
  corpus::Dataset ds;
  ds.images.push_back({"i0", 4, 4, std::vector<std::uint8_t>(48, 0)});
  ds.images.push_back({"i1", 4, 4, std::vector<std::uint8_t>(48, 0)});
  ds.captions = {cap("c0", "i0", "a red circle"), cap("c1", "i0", "A red circle!"), cap("c2", "i1", "a red circle")};
  const auto seqs = tokenize_dataset(ds);
  REQUIRE(seqs.size() == 3);
  CHECK_FALSE(seqs[0].excluded);
  CHECK(seqs[1].excluded);
  CHECK_FALSE(seqs[2].excluded);
  CHECK(retained(seqs).size() == 2);
}

TEST_CASE("postag concepts are the most frequent tokens of the filter") {
  const auto ds = corpus::generate_synthetic(300, 2);
  const auto seqs = tokenize_dataset(ds);
  PostagOptions opt;
  opt.pos_filter = {PosTag::NN};
  opt.k = 4;
  const ConceptSet cs = build_postag_concepts(seqs, opt);
  REQUIRE(cs.size() == 4);
  CHECK_FALSE(cs.exhausted);

  std::map<std::string, long> counts;
  for (const auto& s : seqs) {
    if (s.excluded) continue;
    for (std::size_t i = 0; i < s.tokens.size(); ++i)
      if (s.pos_tags[i] == PosTag::NN) ++counts[s.tokens[i]];
  }
  std::vector<std::pair<long, std::string>> ranked;
  for (const auto& [tok, n] : counts) ranked.push_back({-n, tok});
  std::sort(ranked.begin(), ranked.end());
  for (int k = 0; k < 4; ++k) {
    CHECK(cs.concepts[k] == ranked[k].second);
    CHECK(cs.counts[k] == -ranked[k].first);
  }

  opt.k = 1000;
  const ConceptSet all = build_postag_concepts(seqs, opt);
  CHECK(all.exhausted);
  CHECK(all.size() == static_cast<int>(counts.size()));

  opt.pos_filter = {PosTag::NN, PosTag::ADJ, PosTag::VB};
  CHECK_NOTHROW(build_postag_concepts(seqs, opt));
}

TEST_CASE("kmeans") {
  SUBCASE("one point per cluster") {
    Tensor<double> pts({3, 2}, std::vector<double>{0, 0, 5, 5, -3, 4});
    const auto km = kmeans(pts, 3, 1);
    CHECK(km.objective.back() == doctest::Approx(0.0));
    std::vector<int> a = km.assignments;
    std::sort(a.begin(), a.end());
    CHECK(a == std::vector<int>{0, 1, 2});
  }
  SUBCASE("two separated blobs") {
    Rng rng(5);
    Tensor<double> pts({100, 3});
    std::vector<int> blob(100);
    for (int i = 0; i < 100; ++i) {
      blob[i] = i % 2;
      for (int j = 0; j < 3; ++j) pts.at(i, j) = rng.normal() * 0.3 + (blob[i] ? 10.0 : -10.0);
    }
    const auto km = kmeans(pts, 2, 3);
    for (int i = 0; i < 100; ++i) CHECK((km.assignments[i] == km.assignments[0]) == (blob[i] == blob[0]));
    for (std::size_t t = 1; t < km.objective.size(); ++t) CHECK(km.objective[t] <= km.objective[t - 1] + 1e-12);
  }
}

TEST_CASE("label vectors") {
  std::vector<LabelVector> lv = {{"a", {1, 0, 1, 0}, false}, {"b", {0, 0, 0, 0}, false}};
  normalize_labels(lv);
  CHECK(lv[0].y == std::vector<double>{0.5, 0, 0.5, 0});
  CHECK(lv[1].excluded);

  corpus::Dataset ds;
  ds.images.push_back({"i0", 4, 4, std::vector<std::uint8_t>(48, 0)});
  ds.images.push_back({"i1", 4, 4, std::vector<std::uint8_t>(48, 0)});
  ds.captions = {cap("c0", "i0", "x y z"), cap("c1", "i0", "x y w"), cap("c2", "i1", "p q r"), cap("c3", "i1", "p q s")};
  auto cl = cluster_presence(ds, {"c0", "c1", "c2", "c3"}, {3, 3, 1, 4}, 5);
  normalize_labels(cl);
  CHECK(cl[0].y == std::vector<double>{0, 0, 0, 1, 0});
  CHECK(cl[1].y == std::vector<double>{0, 0.5, 0, 0, 0.5});
}

TEST_CASE("triplets enumerate concept positions") {
  corpus::Dataset ds;
  ds.images.push_back({"i0", 4, 4, std::vector<std::uint8_t>(48, 0)});
  ds.captions = {cap("c0", "i0", "a red circle near a blue circle"), cap("c1", "i0", "nothing to see here")};
  const auto seqs = tokenize_dataset(ds);
  const auto vocab = vocab_of(seqs);
  ConceptSet cs;
  cs.concepts = {"circle", "red", "blue"};
  cs.tags = {PosTag::NN, PosTag::ADJ, PosTag::ADJ};
  cs.counts = {2, 1, 1};
  const auto tb = build_triplets(seqs, cs, vocab);
  REQUIRE(tb.triplets.size() == 4);
  CHECK(tb.triplets[0].mask_index == 1);
  CHECK(tb.triplets[1].mask_index == 2);
  CHECK(tb.triplets[2].mask_index == 5);
  CHECK(tb.triplets[3].mask_index == 6);
  CHECK(tb.triplets[1].target_vocab_id == vocab.id("circle"));
  for (const auto& t : tb.triplets) CHECK(t.caption_id == "c0");
}

TEST_CASE("caption artifacts round-trip") {
  TempDir dir("cap");
  const auto ds = corpus::generate_synthetic(30, 9);
  const auto seqs = tokenize_dataset(ds);
  PostagOptions opt;
  opt.pos_filter = {PosTag::NN, PosTag::ADJ};
  opt.k = 8;
  const auto cs = build_postag_concepts(seqs, opt);
  save_concepts(cs, dir / "c.tsv");
  const auto back = load_concepts(dir / "c.tsv");
  CHECK(back.concepts == cs.concepts);
  CHECK(back.tags == cs.tags);
  CHECK(back.counts == cs.counts);

  const auto tb = build_triplets(seqs, cs, vocab_of(seqs));
  save_triplets(tb.triplets, dir / "t.jsonl");
  CHECK(load_triplets(dir / "t.jsonl") == tb.triplets);

  auto labels = postag_presence(ds, seqs, cs);
  normalize_labels(labels);
  save_labels(labels, dir / "l.jsonl");
  CHECK(load_labels(dir / "l.jsonl") == labels);
}
