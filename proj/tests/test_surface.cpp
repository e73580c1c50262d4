// SPDX-License-Identifier: Apache-2.0
// Instantiates the full model stack once so template errors surface early.
#include <doctest.h>

#include "pemma/adaptation.hpp"
#include "pemma/backbone.hpp"
#include "pemma/forward.hpp"
#include "pemma/manifest.hpp"
#include "pemma/modality.hpp"

using namespace pemma;

namespace {

ModelGeometry tiny_geometry() {
  ModelGeometry g;
  g.side = 16;
  g.patch = 4;
  g.dim = 16;
  g.heads = 2;
  g.blocks = 4;
  g.classes = 3;
  g.mlp_ratio = 2;
  g.decoder_channels = 4;
  return g;
}

PhantomSpec tiny_phantom() {
  PhantomSpec spec;
  spec.side = 16;
  spec.tumor_radius_min = 2.0;
  spec.tumor_radius_max = 3.0;
  spec.node_radius_min = 2.0;
  spec.node_radius_max = 2.5;
  return spec;
}

}  // namespace

TEST_CASE("full stack: build, upgrade, inject, forward in every mode") {
  auto geo = tiny_geometry();
  auto model = build_model<float>(geo, 7);
  CaseSample c = generate_phantom(11, tiny_phantom(), "A");
  preprocess_intensities(c);

  {
    Tape<float> tape;
    TapeBinder<float> bind(tape);
    auto r = model_forward(tape, bind, model, &c.ct, nullptr, Mode::ct);
    const auto& probs = tape.val(r.logits);
    CHECK(probs.rows() == geo.voxels());
    CHECK(probs.cols() == geo.classes);
    double row0 = 0.0;
    for (int j = 0; j < geo.classes; ++j) row0 += probs.at(0, j);
    CHECK(row0 == doctest::Approx(1.0).epsilon(1e-6));
  }

  CHECK_THROWS_AS(
      [&] {
        Tape<float> tape;
        TapeBinder<float> bind(tape);
        model_forward(tape, bind, model, &c.ct, &c.pet, Mode::pet);
      }(),
      ConfigError);

  upgrade_to_multimodal(model, PetInit::cross_modal, 13);
  AdaptationConfig cfg;
  cfg.method = AdaptMethod::lora;
  inject_adapters(model, cfg, 17);

  for (Mode mode : {Mode::ct, Mode::pet, Mode::ctpet}) {
    Tape<float> tape;
    TapeBinder<float> bind(tape);
    auto r = model_forward(tape, bind, model, &c.ct, &c.pet, mode);
    const auto& probs = tape.val(r.logits);
    CHECK(probs.rows() == geo.voxels());
    for (int i = 0; i < probs.rows(); i += 999) {
      double s = 0.0;
      for (int j = 0; j < geo.classes; ++j) s += probs.at(i, j);
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
  }

  auto ledger = ledger_of(model);
  VariantSpec variant;
  variant.multimodal = true;
  variant.adapt = cfg;
  variant.base_frozen = true;
  auto expected = ledger_for_geometry(geo, variant);
  REQUIRE(ledger.rows.size() == expected.rows.size());
  for (size_t i = 0; i < ledger.rows.size(); ++i) {
    CHECK(ledger.rows[i].name == expected.rows[i].name);
    CHECK(ledger.rows[i].shape == expected.rows[i].shape);
    CHECK(ledger.rows[i].group == expected.rows[i].group);
    CHECK(ledger.rows[i].trainable == expected.rows[i].trainable);
  }
}
