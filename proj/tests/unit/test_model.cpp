#include <cmath>

#include "../support/tiny.hpp"
#include "doctest.h"

using namespace icmlm;
using icmlm::testing::make_tiny;

TEST_CASE("flavor names round-trip") {
  for (auto f : {model::Flavor::tp_postag, model::Flavor::tp_cluster, model::Flavor::icmlm_tfm,
                 model::Flavor::icmlm_attfc})
    CHECK(model::parse_flavor(model::to_string(f)) == f);
  CHECK_THROWS_AS(model::parse_flavor("bert"), ConfigError);
}

TEST_CASE("attention maps and batched prediction") {
  for (auto flavor : {model::Flavor::icmlm_attfc, model::Flavor::icmlm_tfm}) {
    auto t = make_tiny(flavor, 12);
    auto st = trainer::init_training(t.config, t.lm, t.data.k);
    model::TextCache text(*t.lm, t.data.sequences);

    const auto& tr = t.data.triplets.front();
    const auto& tokens = text.tokens(tr.caption_id);
    const auto map = model::extract_attention(st.model, *t.lm, t.dataset.image(tr.image_id), tokens, tr.mask_index,
                                              tr.caption_id);
    CHECK(map.h == 8);
    CHECK(map.w == 8);
    REQUIRE(map.p.size() == 64u);
    for (double v : map.p) CHECK(v >= 0.0);
    CHECK(std::abs(map.sum() - 1.0) < 1e-6);

    // Batched logits agree with one-at-a-time logits.
    std::vector<captions::MaskTriplet> few(t.data.triplets.begin(), t.data.triplets.begin() + 6);
    const auto batched = model::predict_triplets(st.model, text, t.dataset, few, 4);
    for (std::size_t i = 0; i < few.size(); ++i) {
      const auto single = model::predict_triplets(st.model, text, t.dataset, {few[i]}, 1);
      for (int v = 0; v < single.dim(1); ++v)
        CHECK(batched.at(static_cast<int>(i), v) == doctest::Approx(single.at(0, v)).epsilon(1e-4));
    }
    const auto text_only = model::predict_text_only(text, few);
    CHECK(text_only.dim(0) == 6);
    CHECK(text_only.dim(1) == t.lm->vocab().size());
  }
}
