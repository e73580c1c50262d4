// SPDX-License-Identifier: Apache-2.0
// Decision-level blending and the two-channel input-level baseline.
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "pemma/forward.hpp"
#include "pemma/fusion.hpp"

using namespace pemma;

namespace {

ModelGeometry micro_geometry() {
  ModelGeometry g;
  g.side = 8;
  g.patch = 4;
  g.dim = 8;
  g.heads = 2;
  g.blocks = 4;
  g.classes = 2;
  g.mlp_ratio = 2;
  g.decoder_channels = 4;
  return g;
}

Volume random_volume(int side, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
  Volume v(side, side, side);
  for (auto& x : v.data) x = lo + (hi - lo) * static_cast<float>(rng.uniform());
  return v;
}

template <typename T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
std::vector<T> logits_of(SegmentationModel<T>& m, const Volume* ct, const Volume* pet, Mode mode) {
  Tape<T> tape;
  TapeBinder<T> bind(tape);
  auto r = model_logits(tape, bind, m, ct, pet, mode);
  return tape.val(r.logits).data;
}

// Rows of positive entries normalised to sum one.
Tensor<float> random_prob_rows(int rows, int cols, Rng& rng) {
  Tensor<float> t({rows, cols});
  for (int i = 0; i < rows; ++i) {
    double total = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double v = 0.05 + rng.uniform();
      t.at(i, j) = static_cast<float>(v);
      total += v;
    }
    for (int j = 0; j < cols; ++j) t.at(i, j) = static_cast<float>(t.at(i, j) / total);
  }
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Decision-level blend
// ---------------------------------------------------------------------------

TEST_CASE("late blend: endpoint weights return each member untouched") {
  Rng rng(11);
  Tensor<float> ct = random_prob_rows(20, 3, rng);
  Tensor<float> pet = random_prob_rows(20, 3, rng);

  Tensor<float> only_ct = late_fusion_combine(ct, pet, 1.0);
  Tensor<float> only_pet = late_fusion_combine(ct, pet, 0.0);
  CHECK(bitwise_equal(only_ct.data, ct.data));
  CHECK(bitwise_equal(only_pet.data, pet.data));
}

TEST_CASE("late blend: hand example and row-sum preservation") {
  Tensor<float> a({1, 2}, {1.0f, 0.0f});
  Tensor<float> b({1, 2}, {0.0f, 1.0f});
  Tensor<float> half = late_fusion_combine(a, b, 0.5);
  CHECK(half.at(0, 0) == 0.5f);
  CHECK(half.at(0, 1) == 0.5f);

  Rng rng(13);
  Tensor<float> ct = random_prob_rows(50, 4, rng);
  Tensor<float> pet = random_prob_rows(50, 4, rng);
  for (double w : {0.25, 0.37, 0.5, 0.99}) {
    Tensor<float> mix = late_fusion_combine(ct, pet, w);
    for (int i = 0; i < mix.rows(); ++i) {
      double total = 0.0;
      for (int j = 0; j < mix.cols(); ++j) {
        total += mix.at(i, j);
        CHECK(mix.at(i, j) >= 0.0f);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("late blend: validation") {
  Tensor<float> a({2, 2});
  Tensor<float> b({2, 3});
  CHECK_THROWS_AS(late_fusion_combine(a, b, 0.5), ConfigError);
  Tensor<float> c({2, 2});
  CHECK_THROWS_AS(late_fusion_combine(a, c, -0.1), ConfigError);
  CHECK_THROWS_AS(late_fusion_combine(a, c, 1.1), ConfigError);
  CHECK_THROWS_AS(late_fusion_combine(a, c, std::nan("")), ConfigError);
}

TEST_CASE("late blend: ensemble ledger is exactly two members") {
  ModelGeometry geo = micro_geometry();
  ParamLedger one = ledger_for_geometry(geo, VariantSpec{});
  ParamLedger both = late_fusion_ledger(geo);
  CHECK(both.total() == 2 * one.total());
  CHECK(both.rows.size() == 2 * one.rows.size());
  CHECK(both.trainable_fraction() == 1.0);
  CHECK(both.rows.front().name.rfind("ct.", 0) == 0);
  CHECK(both.rows.back().name.rfind("pet.", 0) == 0);

  ModelGeometry paper;
  paper.side = 96;
  paper.patch = 16;
  paper.dim = 768;
  paper.heads = 12;
  paper.blocks = 12;
  paper.classes = 3;
  paper.mlp_ratio = 4;
  paper.decoder_channels = 8;
  CHECK(late_fusion_ledger(paper).total() ==
        2 * ledger_for_geometry(paper, VariantSpec{}).total());
}

// ---------------------------------------------------------------------------
// Input-level two-channel baseline
// ---------------------------------------------------------------------------

TEST_CASE("input-level baseline: zero second slice reproduces the single-channel model") {
  auto geo = micro_geometry();
  auto base = build_model<float>(geo, 900);
  auto early = build_early_fusion_from_base(base, PetInit::zero, 901);

  Rng rng(902);
  Volume ct = random_volume(geo.side, rng);
  Volume pet = random_volume(geo.side, rng, -2.0f, 3.0f);

  auto base_logits = logits_of(base, &ct, nullptr, Mode::ct);
  auto early_logits = logits_of(early, &ct, &pet, Mode::ctpet);
  CHECK(bitwise_equal(base_logits, early_logits));

  // Single-modality requests need the explicit zero-fill opt-in.
  CHECK_THROWS_WITH_AS(logits_of(early, &ct, nullptr, Mode::ct),
                       doctest::Contains("allow_zero_fill"), ConfigError);
  early.allow_zero_fill = true;
  auto filled = logits_of(early, &ct, nullptr, Mode::ct);
  CHECK(bitwise_equal(filled, base_logits));
  CHECK_NOTHROW(logits_of(early, nullptr, &pet, Mode::pet));
}

TEST_CASE("input-level baseline: weight slices follow the chosen start") {
  auto geo = micro_geometry();
  auto base = build_model<float>(geo, 903);
  const int p3 = geo.patch_volume();

  SUBCASE("mirrored start duplicates the first slice") {
    auto m = build_early_fusion_from_base(base, PetInit::cross_modal, 1);
    for (int r = 0; r < geo.dim; ++r)
      for (int c = 0; c < p3; ++c)
        CHECK(m.embed_ct.weight.at(r, p3 + c) == base.embed_ct.weight.at(r, c));
    for (int r = 0; r < geo.decoder_channels; ++r)
      CHECK(m.skip_ct.weight.at(r, 1) == base.skip_ct.weight.at(r, 0));
  }
  SUBCASE("random start is seed-reproducible and nonzero") {
    auto m1 = build_early_fusion_from_base(base, PetInit::random, 7);
    auto m2 = build_early_fusion_from_base(base, PetInit::random, 7);
    auto m3 = build_early_fusion_from_base(base, PetInit::random, 8);
    CHECK(bitwise_equal(m1.embed_ct.weight.data, m2.embed_ct.weight.data));
    CHECK_FALSE(bitwise_equal(m1.embed_ct.weight.data, m3.embed_ct.weight.data));
    float peak = 0.0f;
    for (int r = 0; r < geo.dim; ++r)
      for (int c = 0; c < p3; ++c)
        peak = std::max(peak, std::abs(m1.embed_ct.weight.at(r, p3 + c)));
    CHECK(peak > 0.0f);
  }
  SUBCASE("first slice always reuses the base weights bitwise") {
    auto m = build_early_fusion_from_base(base, PetInit::random, 9);
    for (int r = 0; r < geo.dim; ++r)
      for (int c = 0; c < p3; ++c)
        CHECK(m.embed_ct.weight.at(r, c) == base.embed_ct.weight.at(r, c));
    CHECK(bitwise_equal(m.embed_ct.bias.data, base.embed_ct.bias.data));
    CHECK(bitwise_equal(m.embed_ct.pos.data, base.embed_ct.pos.data));
  }
}

TEST_CASE("input-level baseline: every parameter stays trainable; size delta is two slices") {
  auto geo = micro_geometry();
  auto base = build_model<float>(geo, 904);
  auto early = build_early_fusion_from_base(base, PetInit::random, 905);

  for (auto& p : named_params(early)) {
    CAPTURE(p.name);
    CHECK(p.tensor->requires_grad);
  }
  ParamLedger lb = ledger_of(base);
  ParamLedger le = ledger_of(early);
  CHECK(le.total() - lb.total() ==
        static_cast<long long>(geo.dim) * geo.patch_volume() + geo.decoder_channels);
  CHECK(le.trainable_fraction() == 1.0);
}

TEST_CASE("input-level baseline: gradient reaches the second input slice") {
  auto geo = micro_geometry();
  auto base = build_model<double>(geo, 906);
  auto early = build_early_fusion_from_base(base, PetInit::zero, 907);

  Rng rng(908);
  Volume ct = random_volume(geo.side, rng);
  Volume pet = random_volume(geo.side, rng, 0.5f, 2.0f);

  early.embed_ct.weight.zero_grad();
  Tape<double> tape;
  TapeBinder<double> bind(tape);
  auto r = model_logits(tape, bind, early, &ct, &pet, Mode::ctpet);
  tape.backward(tape.sum(tape.mul(r.logits, r.logits)));

  const int p3 = geo.patch_volume();
  double ct_peak = 0.0, pet_peak = 0.0;
  for (int row = 0; row < geo.dim; ++row)
    for (int c = 0; c < p3; ++c) {
      ct_peak = std::max(ct_peak,
                         std::abs(early.embed_ct.weight.grad[static_cast<size_t>(row) * 2 * p3 + c]));
      pet_peak = std::max(
          pet_peak,
          std::abs(early.embed_ct.weight.grad[static_cast<size_t>(row) * 2 * p3 + p3 + c]));
    }
  CHECK(ct_peak > 0.0);
  CHECK(pet_peak > 0.0);
}

TEST_CASE("input-level baseline: base-model validation") {
  auto geo = micro_geometry();
  auto pet_only = build_model<float>(geo, 909, ModelKind::uni_pet);
  CHECK_THROWS_AS(build_early_fusion_from_base(pet_only, PetInit::zero, 1), ConfigError);
  auto already = build_model<float>(geo, 910, ModelKind::early_fusion);
  CHECK_THROWS_AS(build_early_fusion_from_base(already, PetInit::zero, 1), ConfigError);
  auto upgraded = build_model<float>(geo, 911);
  upgrade_to_multimodal(upgraded, PetInit::zero, 2);
  CHECK_THROWS_AS(build_early_fusion_from_base(upgraded, PetInit::zero, 1), ConfigError);
}
