// SPDX-License-Identifier: Apache-2.0
// Backbone, adapters, multimodal upgrade, routing, and parameter accounting.
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <vector>

#include "pemma/adaptation.hpp"
#include "pemma/backbone.hpp"
#include "pemma/forward.hpp"
#include "pemma/losses.hpp"

using namespace pemma;

namespace {

namespace fs = std::filesystem;

ModelGeometry desk_geometry() {
  ModelGeometry g;
  g.side = 32;
  g.patch = 8;
  g.dim = 64;
  g.heads = 4;
  g.blocks = 4;
  g.classes = 3;
  g.mlp_ratio = 4;
  g.decoder_channels = 8;
  return g;
}

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

// Dense reference for the low-rank update: x (W + s B A)^T.
template <typename T>
Tensor<T> dense_lowrank_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& a,
                               const Tensor<T>& b, T scale) {
  const int d_out = w.rows(), d_in = w.cols(), rank = a.rows();
  Tensor<T> combined = w;
  for (int i = 0; i < d_out; ++i)
    for (int j = 0; j < d_in; ++j) {
      T acc = T(0);
      for (int r = 0; r < rank; ++r) acc += b.at(i, r) * a.at(r, j);
      combined.at(i, j) += scale * acc;
    }
  Tensor<T> out({x.rows(), d_out});
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < d_out; ++j) {
      T acc = T(0);
      for (int k = 0; k < d_in; ++k) acc += x.at(i, k) * combined.at(j, k);
      out.at(i, j) = acc;
    }
  return out;
}

// Dense reference for the magnitude/direction form in its column-rescaled
// flavour: every column of (W + s B A) is scaled to the magnitude row m.
template <typename T>
Tensor<T> dense_magnitude_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& a,
                                 const Tensor<T>& b, const Tensor<T>& m, T scale) {
  const int d_out = w.rows(), d_in = w.cols(), rank = a.rows();
  Tensor<T> combined = w;
  for (int i = 0; i < d_out; ++i)
    for (int j = 0; j < d_in; ++j) {
      T acc = T(0);
      for (int r = 0; r < rank; ++r) acc += b.at(i, r) * a.at(r, j);
      combined.at(i, j) += scale * acc;
    }
  for (int j = 0; j < d_in; ++j) {
    T norm2 = T(0);
    for (int i = 0; i < d_out; ++i) norm2 += combined.at(i, j) * combined.at(i, j);
    const T ratio = m.data[static_cast<size_t>(j)] / std::sqrt(norm2);
    for (int i = 0; i < d_out; ++i) combined.at(i, j) *= ratio;
  }
  Tensor<T> out({x.rows(), d_out});
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < d_out; ++j) {
      T acc = T(0);
      for (int k = 0; k < d_in; ++k) acc += x.at(i, k) * combined.at(j, k);
      out.at(i, j) = acc;
    }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

TEST_CASE("geometry: token and voxel arithmetic") {
  ModelGeometry g;
  g.side = 16;
  g.patch = 8;
  CHECK(g.grid() == 2);
  CHECK(g.tokens_per_modality() == 8);
  CHECK(g.voxels() == 4096);
  CHECK(g.patch_volume() == 512);
  CHECK(g.upsample_stages() == 2);

  ModelGeometry paper;
  paper.side = 96;
  paper.patch = 16;
  paper.dim = 768;
  paper.heads = 12;
  paper.blocks = 12;
  CHECK(paper.tokens_per_modality() == 216);
  CHECK(paper.upsample_stages() == 3);
  CHECK_NOTHROW(paper.validate());
}

TEST_CASE("geometry: validation rejects inconsistent shapes") {
  auto bad = [](auto&& mutate) {
    ModelGeometry g = desk_geometry();
    mutate(g);
    CHECK_THROWS_AS(g.validate(), ConfigError);
  };
  bad([](ModelGeometry& g) { g.side = 30; });          // not divisible by patch
  bad([](ModelGeometry& g) { g.patch = 6; });          // not a power of two
  bad([](ModelGeometry& g) { g.patch = 1; });          // too small
  bad([](ModelGeometry& g) { g.blocks = 6; });         // not a multiple of 4
  bad([](ModelGeometry& g) { g.blocks = 0; });
  bad([](ModelGeometry& g) { g.dim = 30; });           // not divisible by heads
  bad([](ModelGeometry& g) { g.classes = 1; });
  bad([](ModelGeometry& g) { g.decoder_channels = 0; });
}

// ---------------------------------------------------------------------------
// Embedding and encoder identities
// ---------------------------------------------------------------------------

TEST_CASE("embedding: zero input with zero positions yields the bias in every row") {
  auto geo = micro_geometry();
  auto model = build_model<float>(geo, 3);
  Rng rng(5);
  for (auto& v : model.embed_ct.bias.data) v = static_cast<float>(rng.gaussian(0.0, 1.0));
  std::fill(model.embed_ct.pos.data.begin(), model.embed_ct.pos.data.end(), 0.0f);

  Tape<float> tape;
  TapeBinder<float> bind(tape);
  Id vox = tape.constant(Tensor<float>({geo.voxels(), 1}));
  Id tokens = embed_patches(tape, bind, geo, model.embed_ct, vox);
  const auto& t = tape.val(tokens);
  REQUIRE(t.rows() == geo.tokens_per_modality());
  REQUIRE(t.cols() == geo.dim);
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j)
      CHECK(t.at(i, j) == model.embed_ct.bias.data[static_cast<size_t>(j)]);
}

TEST_CASE("encoder: block with zero output projections is the identity") {
  auto geo = micro_geometry();
  auto model = build_model<float>(geo, 11);
  auto& blk = model.blocks[1];
  std::fill(blk.wo.data.begin(), blk.wo.data.end(), 0.0f);
  std::fill(blk.w2.data.begin(), blk.w2.data.end(), 0.0f);

  Rng rng(17);
  Tensor<float> x({geo.tokens_per_modality(), geo.dim});
  for (auto& v : x.data) v = static_cast<float>(rng.gaussian(0.0, 1.0));

  Tape<float> tape;
  TapeBinder<float> bind(tape);
  Id in = tape.constant(x);
  Id out = transformer_block(tape, bind, model, 1, in);
  CHECK(bitwise_equal(tape.val(out).data, x.data));
}

// ---------------------------------------------------------------------------
// Token routing
// ---------------------------------------------------------------------------

TEST_CASE("routing: hand-enumerated row selections") {
  Tape<float> tape;
  Tensor<float> tap({8, 1});
  for (int i = 0; i < 8; ++i) tap.data[static_cast<size_t>(i)] = static_cast<float>(i);
  Id id = tape.constant(tap);

  auto picked = [&](RoutePolicy p) {
    Id r = route_to_decoder<float>(tape, id, 4, 4, p);
    std::vector<int> rows;
    for (float v : tape.val(r).data) rows.push_back(static_cast<int>(v));
    return rows;
  };
  CHECK(picked(RoutePolicy::ct_only) == std::vector<int>{0, 1, 2, 3});
  CHECK(picked(RoutePolicy::pet_only) == std::vector<int>{4, 5, 6, 7});
  CHECK(picked(RoutePolicy::alternate) == std::vector<int>{0, 4, 1, 5});
}

TEST_CASE("routing: single-modality passthrough and validation") {
  Tape<float> tape;
  Tensor<float> tap({4, 2});
  Id id = tape.constant(tap);
  CHECK(route_to_decoder<float>(tape, id, 4, 0, RoutePolicy::ct_only) == id);
  CHECK_THROWS_AS(route_to_decoder<float>(tape, id, 4, 0, RoutePolicy::alternate), ConfigError);
  CHECK_THROWS_AS(route_to_decoder<float>(tape, id, 4, 0, RoutePolicy::pet_only), ConfigError);
  CHECK_THROWS_AS(route_to_decoder<float>(tape, id, 3, 3, RoutePolicy::ct_only), ConfigError);
  CHECK_THROWS_AS(route_to_decoder<float>(tape, id, 3, 1, RoutePolicy::alternate), ConfigError);
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

TEST_CASE("decoder: with all weights zeroed every voxel logit row equals the class bias") {
  auto geo = desk_geometry();
  auto model = build_model<float>(geo, 23);
  for (auto& p : named_params(model)) {
    std::fill(p.tensor->data.begin(), p.tensor->data.end(), 0.0f);
  }
  model.dec.cls_b.data = {0.3f, -0.7f, 1.1f};

  Volume ct(geo.side, geo.side, geo.side);
  Tape<float> tape;
  TapeBinder<float> bind(tape);
  auto r = model_logits(tape, bind, model, &ct, nullptr, Mode::ct);
  const auto& logits = tape.val(r.logits);
  REQUIRE(logits.rows() == 32768);
  REQUIRE(logits.cols() == 3);
  for (int i = 0; i < logits.rows(); ++i) {
    CHECK(logits.at(i, 0) == 0.3f);
    CHECK(logits.at(i, 1) == -0.7f);
    CHECK(logits.at(i, 2) == 1.1f);
  }
}

// ---------------------------------------------------------------------------
// Low-rank projections
// ---------------------------------------------------------------------------

TEST_CASE("low-rank update: worked 2-d example and dense-weight agreement") {
  Tensor<double> x({1, 2}, {3.0, 5.0});
  Tensor<double> w({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor<double> a({1, 2}, {1.0, 0.0});
  Tensor<double> b({2, 1}, {1.0, 0.0});

  Tape<double> tape;
  Id out = lora_linear(tape, tape.constant(x), tape.constant(w), tape.constant(a),
                       tape.constant(b), 1.0);
  const auto& o = tape.val(out);
  CHECK(o.at(0, 0) == 6.0);
  CHECK(o.at(0, 1) == 5.0);

  Tensor<double> oracle = dense_lowrank_oracle(x, w, a, b, 1.0);
  CHECK(o.at(0, 0) == oracle.at(0, 0));
  CHECK(o.at(0, 1) == oracle.at(0, 1));
}

TEST_CASE("low-rank update: random draws match the dense oracle") {
  Rng rng(29);
  for (int trial = 0; trial < 30; ++trial) {
    const int d_in = rng.uniform_int(2, 6);
    const int d_out = rng.uniform_int(2, 6);
    const int rank = rng.uniform_int(1, 3);
    const int n = rng.uniform_int(1, 4);
    Tensor<double> x = Tensor<double>::randn({n, d_in}, rng);
    Tensor<double> w = Tensor<double>::randn({d_out, d_in}, rng);
    Tensor<double> a = Tensor<double>::randn({rank, d_in}, rng);
    Tensor<double> b = Tensor<double>::randn({d_out, rank}, rng);
    const double s = 0.25 * (1 + rng.uniform_int(1, 8));

    Tape<double> tape;
    Id out = lora_linear(tape, tape.constant(x), tape.constant(w), tape.constant(a),
                         tape.constant(b), s);
    Tensor<double> oracle = dense_lowrank_oracle(x, w, a, b, s);
    const auto& o = tape.val(out);
    for (size_t i = 0; i < o.data.size(); ++i)
      CHECK(o.data[i] == doctest::Approx(oracle.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("low-rank update: zero B leaves the frozen projection bit-identical") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> x = Tensor<float>::randn({3, 5}, rng);
    Tensor<float> w = Tensor<float>::randn({4, 5}, rng);
    Tensor<float> a = Tensor<float>::randn({2, 5}, rng);
    Tensor<float> b({4, 2});

    Tape<float> tape;
    Id xid = tape.constant(x);
    Id wid = tape.constant(w);
    Id frozen = base_linear(tape, xid, wid);
    Id adapted = lora_linear(tape, xid, wid, tape.constant(a), tape.constant(b), 2.0f);
    CHECK(bitwise_equal(tape.val(adapted).data, tape.val(frozen).data));
  }
}

TEST_CASE("low-rank update: gradients agree with finite differences") {
  Rng rng(37);
  Tensor<double> x = Tensor<double>::randn({3, 4}, rng);
  Tensor<double> w = Tensor<double>::randn({4, 4}, rng);
  Tensor<double> a = Tensor<double>::randn({2, 4}, rng);
  Tensor<double> b = Tensor<double>::randn({4, 2}, rng);

  auto build = [&](Tape<double>& tape) {
    Id out = lora_linear(tape, tape.constant(x), tape.leaf(w), tape.leaf(a), tape.leaf(b), 2.0);
    return tape.sum(tape.mul(out, out));
  };
  double worst = finite_difference_check_params<double>(build, {&w, &a, &b}, 1e-5);
  CHECK(worst < 1e-7);
}

// ---------------------------------------------------------------------------
// Magnitude/direction form
// ---------------------------------------------------------------------------

TEST_CASE("magnitude form: zero update with matching magnitudes reproduces the base bitwise") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> x = Tensor<float>::randn({3, 6}, rng);
    Tensor<float> w = Tensor<float>::randn({4, 6}, rng);
    Tensor<float> a = Tensor<float>::randn({2, 6}, rng);
    Tensor<float> b({4, 2});
    Tensor<float> m = column_norms(w);

    Tape<float> tape;
    Id xid = tape.constant(x);
    Id wid = tape.constant(w);
    Id frozen = base_linear(tape, xid, wid);
    Id adapted = dora_linear(tape, xid, wid, tape.constant(a), tape.constant(b),
                             tape.constant(m), 1.5f, DoraForm::canonical);
    CHECK(bitwise_equal(tape.val(adapted).data, tape.val(frozen).data));
  }
}

TEST_CASE("magnitude form: adapted columns carry exactly the stored magnitudes") {
  Rng rng(43);
  const int d = 6;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> w = Tensor<double>::randn({d, d}, rng);
    Tensor<double> a = Tensor<double>::randn({2, d}, rng);
    Tensor<double> b = Tensor<double>::randn({d, 2}, rng);
    Tensor<double> m({d});
    for (auto& v : m.data) v = 0.2 + 2.0 * rng.uniform();

    // Probing with the identity matrix returns the adapted weight transposed,
    // so row i of the output is column i of the effective weight.
    Tensor<double> eye({d, d});
    for (int i = 0; i < d; ++i) eye.at(i, i) = 1.0;

    Tape<double> tape;
    Id out = dora_linear(tape, tape.constant(eye), tape.constant(w), tape.constant(a),
                         tape.constant(b), tape.constant(m), 0.5, DoraForm::canonical);
    const auto& o = tape.val(out);
    for (int i = 0; i < d; ++i) {
      double norm2 = 0.0;
      for (int j = 0; j < d; ++j) norm2 += o.at(i, j) * o.at(i, j);
      CHECK(std::sqrt(norm2) == doctest::Approx(m.data[static_cast<size_t>(i)]).epsilon(1e-9));
    }
  }
}

TEST_CASE("magnitude form: nonzero update matches the dense oracle") {
  Tensor<double> x({1, 2}, {1.0, 2.0});
  Tensor<double> w({2, 2}, {3.0, 0.0, 0.0, 4.0});
  Tensor<double> a({1, 2}, {1.0, 1.0});
  Tensor<double> b({2, 1}, {1.0, 0.0});
  Tensor<double> m({2}, {1.0, 2.0});

  Tape<double> tape;
  Id out = dora_linear(tape, tape.constant(x), tape.constant(w), tape.constant(a),
                       tape.constant(b), tape.constant(m), 1.0, DoraForm::canonical);
  Tensor<double> oracle = dense_magnitude_oracle(x, w, a, b, m, 1.0);
  const auto& o = tape.val(out);
  REQUIRE(o.data.size() == oracle.data.size());
  for (size_t i = 0; i < o.data.size(); ++i)
    CHECK(o.data[i] == doctest::Approx(oracle.data[i]).epsilon(1e-12));

  Rng rng(47);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> xr = Tensor<double>::randn({3, 5}, rng);
    Tensor<double> wr = Tensor<double>::randn({4, 5}, rng);
    Tensor<double> ar = Tensor<double>::randn({2, 5}, rng);
    Tensor<double> br = Tensor<double>::randn({4, 2}, rng);
    Tensor<double> mr({5});
    for (auto& v : mr.data) v = 0.5 + rng.uniform();
    Tape<double> t2;
    Id o2 = dora_linear(t2, t2.constant(xr), t2.constant(wr), t2.constant(ar), t2.constant(br),
                        t2.constant(mr), 0.5, DoraForm::canonical);
    Tensor<double> oracle2 = dense_magnitude_oracle(xr, wr, ar, br, mr, 0.5);
    for (size_t i = 0; i < oracle2.data.size(); ++i)
      CHECK(t2.val(o2).data[i] == doctest::Approx(oracle2.data[i]).epsilon(1e-11));
  }
}

TEST_CASE("magnitude form: literal variant normalises the frozen weight only") {
  Tensor<double> x({1, 2}, {1.0, 1.0});
  Tensor<double> w({2, 2}, {3.0, 0.0, 0.0, 4.0});
  Tensor<double> a({1, 2}, {1.0, 2.0});
  Tensor<double> b({2, 1}, {1.0, 1.0});

  // W / ||W||_col = I; adding the rank-1 update gives [[1+s, 2s], [s, 1+2s]],
  // so probing with x = [1, 1] returns the row sums (1+3s, 1+3s).
  const double s = 0.5;
  Tape<double> tape;
  Id out = dora_linear(tape, tape.constant(x), tape.constant(w), tape.constant(a),
                       tape.constant(b), Id{-1}, s, DoraForm::paper_literal);
  const auto& o = tape.val(out);
  CHECK(o.at(0, 0) == doctest::Approx(1.0 + 3.0 * s).epsilon(1e-12));
  CHECK(o.at(0, 1) == doctest::Approx(1.0 + 3.0 * s).epsilon(1e-12));
}

TEST_CASE("magnitude form: zero column norm raises a numeric error") {
  Tensor<float> x({1, 2}, {1.0f, 1.0f});
  Tensor<float> w({2, 2}, {1.0f, 0.0f, 1.0f, 0.0f});  // second column is zero
  Tensor<float> a({1, 2}, {0.0f, 0.0f});
  Tensor<float> b({2, 1});
  Tensor<float> m({2}, {1.0f, 1.0f});

  {
    Tape<float> tape;
    CHECK_THROWS_AS(dora_linear(tape, tape.constant(x), tape.constant(w), tape.constant(a),
                                tape.constant(b), tape.constant(m), 1.0f, DoraForm::canonical),
                    NumericError);
  }
  {
    Tape<float> tape;
    CHECK_THROWS_AS(dora_linear(tape, tape.constant(x), tape.constant(w), tape.constant(a),
                                tape.constant(b), Id{-1}, 1.0f, DoraForm::paper_literal),
                    NumericError);
  }
  {
    Tape<float> tape;
    Tensor<float> bad_m({3}, {1.0f, 1.0f, 1.0f});
    CHECK_THROWS_AS(dora_linear(tape, tape.constant(x), tape.constant(w), tape.constant(a),
                                tape.constant(b), tape.constant(bad_m), 1.0f,
                                DoraForm::canonical),
                    ConfigError);
  }
}

TEST_CASE("magnitude form: gradients agree with finite differences in both variants") {
  Rng rng(53);
  Tensor<double> x = Tensor<double>::randn({2, 4}, rng);
  Tensor<double> w = Tensor<double>::randn({3, 4}, rng);
  Tensor<double> a = Tensor<double>::randn({2, 4}, rng);
  Tensor<double> b = Tensor<double>::randn({3, 2}, rng);
  Tensor<double> m({4});
  for (auto& v : m.data) v = 0.5 + rng.uniform();

  auto canonical = [&](Tape<double>& tape) {
    Id out = dora_linear(tape, tape.constant(x), tape.leaf(w), tape.leaf(a), tape.leaf(b),
                         tape.leaf(m), 0.5, DoraForm::canonical);
    return tape.sum(tape.mul(out, out));
  };
  CHECK(finite_difference_check_params<double>(canonical, {&w, &a, &b, &m}, 1e-5) < 1e-6);

  auto literal = [&](Tape<double>& tape) {
    Id out = dora_linear(tape, tape.constant(x), tape.leaf(w), tape.leaf(a), tape.leaf(b),
                         Id{-1}, 0.5, DoraForm::paper_literal);
    return tape.sum(tape.mul(out, out));
  };
  CHECK(finite_difference_check_params<double>(literal, {&w, &a, &b}, 1e-5) < 1e-6);
}

TEST_CASE("column norms: plain and on-tape versions agree bitwise") {
  Rng rng(59);
  Tensor<float> w = Tensor<float>::randn({5, 7}, rng);
  Tensor<float> plain = column_norms(w);
  Tape<float> tape;
  Id node = column_norms_node(tape, tape.constant(w));
  REQUIRE(tape.val(node).numel() == 7);
  for (int j = 0; j < 7; ++j) CHECK(tape.val(node).data[static_cast<size_t>(j)] == plain.data[static_cast<size_t>(j)]);
  CHECK_THROWS_AS(column_norms(Tensor<float>({3})), ConfigError);
}

// ---------------------------------------------------------------------------
// Skip blend and channel expander
// ---------------------------------------------------------------------------

TEST_CASE("skip blend: zero factor passes the first branch through bitwise") {
  Rng rng(61);
  Tensor<float> z_ct = Tensor<float>::randn({6, 4}, rng);
  Tensor<float> z_pet = Tensor<float>::randn({6, 4}, rng);
  Tensor<float> beta({1});

  Tape<float> tape;
  Id ct = tape.constant(z_ct);
  Id out = skip_combine(tape, ct, tape.constant(z_pet), tape.constant(beta));
  CHECK(bitwise_equal(tape.val(out).data, z_ct.data));
}

TEST_CASE("skip blend: unit factor with opposite branches cancels to exact zero") {
  Rng rng(67);
  Tensor<double> z_ct = Tensor<double>::randn({5, 3}, rng);
  Tensor<double> z_pet = z_ct;
  for (auto& v : z_pet.data) v = -v;
  Tensor<double> beta({1}, {1.0});

  Tape<double> tape;
  Id out = skip_combine(tape, tape.constant(z_ct), tape.constant(z_pet), tape.constant(beta));
  for (double v : tape.val(out).data) {
    CHECK(v == 0.0);
    CHECK_FALSE(std::signbit(v));
  }
}

TEST_CASE("skip blend: gradient of the factor is the inner product of branch and upstream") {
  Rng rng(71);
  Tensor<double> z_ct = Tensor<double>::randn({4, 3}, rng);
  Tensor<double> z_pet = Tensor<double>::randn({4, 3}, rng);
  Tensor<double> beta({1}, {0.37});
  beta.requires_grad = true;
  beta.zero_grad();

  Tape<double> tape;
  Id out = skip_combine(tape, tape.constant(z_ct), tape.constant(z_pet), tape.leaf(beta));
  tape.backward(tape.sum(out));
  double expect = 0.0;
  for (double v : z_pet.data) expect += v;
  CHECK(beta.grad[0] == doctest::Approx(expect).epsilon(1e-12));

  auto build = [&](Tape<double>& t) {
    return t.sum(t.mul(skip_combine(t, t.constant(z_ct), t.constant(z_pet), t.leaf(beta)),
                       t.constant(z_ct)));
  };
  CHECK(finite_difference_check_params<double>(build, {&beta}, 1e-6) < 1e-8);
}

TEST_CASE("skip blend: validation") {
  Tape<float> tape;
  Id a = tape.constant(Tensor<float>({2, 2}));
  Id b = tape.constant(Tensor<float>({2, 3}));
  Id beta = tape.constant(Tensor<float>({1}));
  Id beta2 = tape.constant(Tensor<float>({2}));
  CHECK_THROWS_AS(skip_combine(tape, a, b, beta), ConfigError);
  CHECK_THROWS_AS(skip_combine(tape, a, a, beta2), ConfigError);
}

TEST_CASE("channel expander: fresh initialisation copies input to channel 0") {
  AdapterLayer<float> layer;
  layer.weight = Tensor<float>({2, 1}, {1.0f, 0.0f});
  layer.bias = Tensor<float>({2});

  Rng rng(73);
  Tensor<float> x = Tensor<float>::randn({9, 1}, rng);
  Tape<float> tape;
  TapeBinder<float> bind(tape);
  Id out = adapter_expand(tape, bind, layer, tape.constant(x));
  const auto& o = tape.val(out);
  REQUIRE(o.rows() == 9);
  REQUIRE(o.cols() == 2);
  for (int i = 0; i < 9; ++i) {
    CHECK(o.at(i, 0) == x.data[static_cast<size_t>(i)]);
    CHECK(o.at(i, 1) == 0.0f);
  }

  Id wide = tape.constant(Tensor<float>({4, 2}));
  CHECK_THROWS_WITH_AS(adapter_expand(tape, bind, layer, wide),
                       doctest::Contains("single-channel"), ConfigError);
}

// ---------------------------------------------------------------------------
// Multimodal upgrade
// ---------------------------------------------------------------------------

TEST_CASE("second-modality embedding: initialisation strategies") {
  auto geo = micro_geometry();
  Rng r0(7);
  auto ct_embed = build_patch_embedding<float>(geo, 1, r0);

  SUBCASE("zero start") {
    Rng rng(1);
    auto e = init_pet_embedding(geo, PetInit::zero, ct_embed, rng);
    for (float v : e.weight.data) CHECK(v == 0.0f);
    for (float v : e.bias.data) CHECK(v == 0.0f);
    for (float v : e.pos.data) CHECK(v == 0.0f);
  }
  SUBCASE("mirrored start copies the first modality bit for bit") {
    Rng rng(1);
    auto e = init_pet_embedding(geo, PetInit::cross_modal, ct_embed, rng);
    CHECK(bitwise_equal(e.weight.data, ct_embed.weight.data));
    CHECK(bitwise_equal(e.bias.data, ct_embed.bias.data));
    CHECK(bitwise_equal(e.pos.data, ct_embed.pos.data));
  }
  SUBCASE("random start is seed-reproducible") {
    Rng ra(9), rb(9), rc(10);
    auto e1 = init_pet_embedding(geo, PetInit::random, ct_embed, ra);
    auto e2 = init_pet_embedding(geo, PetInit::random, ct_embed, rb);
    auto e3 = init_pet_embedding(geo, PetInit::random, ct_embed, rc);
    CHECK(bitwise_equal(e1.weight.data, e2.weight.data));
    CHECK_FALSE(bitwise_equal(e1.weight.data, e3.weight.data));
  }
  SUBCASE("mirrored start requires a single-channel source") {
    Rng rng(2);
    auto two = build_patch_embedding<float>(geo, 2, rng);
    CHECK_THROWS_AS(init_pet_embedding(geo, PetInit::cross_modal, two, rng), ConfigError);
  }
  SUBCASE("strategy parsing") {
    CHECK(parse_pet_init("zero") == PetInit::zero);
    CHECK(parse_pet_init("random") == PetInit::random);
    CHECK(parse_pet_init("cross_modal") == PetInit::cross_modal);
    CHECK_THROWS_AS(parse_pet_init("xavier"), ConfigError);
  }
}

TEST_CASE("upgrade: wiring, trainability, and misuse errors") {
  auto geo = micro_geometry();
  auto model = build_model<float>(geo, 13);
  CHECK_FALSE(model.multimodal());

  upgrade_to_multimodal(model, PetInit::zero, 99);
  CHECK(model.multimodal());
  REQUIRE(model.beta.has_value());
  CHECK(model.beta->numel() == 1);
  CHECK(model.beta->data[0] == 0.0f);
  REQUIRE(model.adapter.has_value());
  CHECK(model.adapter->weight.data == std::vector<float>{1.0f, 0.0f});
  CHECK(model.adapter->bias.data == std::vector<float>{0.0f, 0.0f});
  CHECK(model.embed_pet->weight.requires_grad);
  CHECK(model.skip_pet->weight.requires_grad);
  CHECK(model.beta->requires_grad);

  CHECK_THROWS_AS(upgrade_to_multimodal(model, PetInit::zero, 99), ConfigError);
  auto early = build_model<float>(geo, 13, ModelKind::early_fusion);
  CHECK_THROWS_AS(upgrade_to_multimodal(early, PetInit::zero, 99), ConfigError);
}

TEST_CASE("adapter injection: groups freeze and the additions stay trainable") {
  auto geo = micro_geometry();
  auto model = build_model<float>(geo, 19);
  upgrade_to_multimodal(model, PetInit::zero, 20);

  AdaptationConfig cfg;
  cfg.method = AdaptMethod::dora;
  cfg.rank = 2;
  cfg.alpha = 4.0;
  cfg.targets = {AttnTarget::q, AttnTarget::v};
  cfg.dora_form = DoraForm::canonical;
  inject_adapters(model, cfg, 77);

  int base_rows = 0, peft_rows = 0;
  for (auto& p : named_params(model)) {
    if (p.group == ParamGroup::base) {
      CHECK_FALSE(p.tensor->requires_grad);
      ++base_rows;
    }
    if (p.group == ParamGroup::peft) {
      CHECK(p.tensor->requires_grad);
      ++peft_rows;
    }
    if (p.group == ParamGroup::pe_pet || p.group == ParamGroup::sk_pet ||
        p.group == ParamGroup::adapter)
      CHECK(p.tensor->requires_grad);
  }
  CHECK(base_rows > 0);
  // 4 blocks x 2 targets x (a, b, m)
  CHECK(peft_rows == 24);
  for (auto& ba : model.adapters) {
    REQUIRE(ba.q.has_value());
    REQUIRE(ba.v.has_value());
    CHECK_FALSE(ba.k.has_value());
    CHECK_FALSE(ba.o.has_value());
    for (float v : ba.q->pair.b.data) CHECK(v == 0.0f);
  }

  CHECK_THROWS_AS(inject_adapters(model, cfg, 77), ConfigError);

  auto fresh = build_model<float>(geo, 19);
  AdaptationConfig none;
  none.method = AdaptMethod::none;
  CHECK_THROWS_AS(inject_adapters(fresh, none, 1), ConfigError);
  AdaptationConfig bad = cfg;
  bad.rank = 0;
  CHECK_THROWS_AS(inject_adapters(fresh, bad, 1), ConfigError);
  bad = cfg;
  bad.targets.clear();
  CHECK_THROWS_AS(inject_adapters(fresh, bad, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// Whole-model identities
// ---------------------------------------------------------------------------

TEST_CASE("upgrade + injection leave single-modality inference bit-identical") {
  auto geo = micro_geometry();
  Rng rng(81);
  Volume ct = random_volume(geo.side, rng);

  for (AdaptMethod method : {AdaptMethod::lora, AdaptMethod::dora}) {
    auto base = build_model<float>(geo, 311);
    auto before = logits_of(base, &ct, nullptr, Mode::ct);

    upgrade_to_multimodal(base, PetInit::zero, 42);
    AdaptationConfig cfg;
    cfg.method = method;
    cfg.rank = 2;
    cfg.alpha = 4.0;
    cfg.targets = {AttnTarget::q, AttnTarget::v};
    inject_adapters(base, cfg, 43);

    auto after = logits_of(base, &ct, nullptr, Mode::ct);
    CHECK(bitwise_equal(before, after));
  }
}

TEST_CASE("joint pass with zero-start second modality ignores the PET volume content") {
  auto geo = micro_geometry();
  auto model = build_model<float>(geo, 313);
  upgrade_to_multimodal(model, PetInit::zero, 44);
  AdaptationConfig cfg;
  cfg.method = AdaptMethod::lora;
  cfg.rank = 2;
  cfg.alpha = 4.0;
  inject_adapters(model, cfg, 45);
  model.route = RoutePolicy::ct_only;

  Rng rng(83);
  Volume ct = random_volume(geo.side, rng);
  Volume pet_a = random_volume(geo.side, rng);
  Volume pet_b = random_volume(geo.side, rng, 5.0f, 9.0f);

  auto with_a = logits_of(model, &ct, &pet_a, Mode::ctpet);
  auto with_b = logits_of(model, &ct, &pet_b, Mode::ctpet);
  CHECK(bitwise_equal(with_a, with_b));

  // The same weights routed through the joint path when only CT is acquired.
  model.ct_inference = CtInference::joint;
  auto joint_ct = logits_of(model, &ct, nullptr, Mode::ct);
  CHECK(bitwise_equal(joint_ct, with_a));

  // Native single-modality inference avoids the extra attention rows and is a
  // genuinely different function.
  model.ct_inference = CtInference::native;
  auto native_ct = logits_of(model, &ct, nullptr, Mode::ct);
  CHECK_FALSE(bitwise_equal(native_ct, joint_ct));
}

TEST_CASE("forward: mode and volume validation") {
  auto geo = micro_geometry();
  auto base = build_model<float>(geo, 317);
  Rng rng(89);
  Volume ct = random_volume(geo.side, rng);
  Volume pet = random_volume(geo.side, rng);

  auto run = [&](SegmentationModel<float>& m, const Volume* c, const Volume* p, Mode mode) {
    Tape<float> tape;
    TapeBinder<float> bind(tape);
    return model_logits(tape, bind, m, c, p, mode);
  };

  CHECK_THROWS_WITH_AS(run(base, nullptr, nullptr, Mode::ct), doctest::Contains("ct volume"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(run(base, &ct, &pet, Mode::ctpet), doctest::Contains("no PET pathway"),
                       ConfigError);
  CHECK_THROWS_AS(run(base, nullptr, &pet, Mode::pet), ConfigError);

  auto pet_only = build_model<float>(geo, 318, ModelKind::uni_pet);
  CHECK_NOTHROW(run(pet_only, nullptr, &pet, Mode::pet));
  CHECK_THROWS_WITH_AS(run(pet_only, &ct, nullptr, Mode::ct), doctest::Contains("PET only"),
                       ConfigError);

  Volume small(4, 4, 4);
  CHECK_THROWS_AS(run(base, &small, nullptr, Mode::ct), DataError);

  auto joint = build_model<float>(geo, 319);
  upgrade_to_multimodal(joint, PetInit::zero, 1);
  CHECK_THROWS_AS(run(joint, &ct, nullptr, Mode::ctpet), ConfigError);  // missing pet
  CHECK_NOTHROW(run(joint, &ct, nullptr, Mode::ct));
  CHECK_NOTHROW(run(joint, nullptr, &pet, Mode::pet));
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

namespace {

VariantSpec adapted_variant(AdaptMethod method) {
  VariantSpec v;
  v.kind = ModelKind::uni_ct;
  v.multimodal = true;
  v.adapt.method = method;
  v.adapt.rank = 8;
  v.adapt.alpha = 16.0;
  v.adapt.targets = {AttnTarget::q, AttnTarget::v};
  v.adapt.dora_form = DoraForm::canonical;
  v.base_frozen = true;
  return v;
}

}  // namespace

TEST_CASE("ledger: closed form matches an instantiated model row for row") {
  auto geo = micro_geometry();

  auto compare = [&](SegmentationModel<float>& m, const VariantSpec& v) {
    ParamLedger real = ledger_of(m);
    ParamLedger closed = ledger_for_geometry(geo, v);
    REQUIRE(real.rows.size() == closed.rows.size());
    for (size_t i = 0; i < real.rows.size(); ++i) {
      CAPTURE(real.rows[i].name);
      CHECK(real.rows[i].name == closed.rows[i].name);
      CHECK(real.rows[i].shape == closed.rows[i].shape);
      CHECK(real.rows[i].group == closed.rows[i].group);
      CHECK(real.rows[i].trainable == closed.rows[i].trainable);
    }
    CHECK(real.total() == closed.total());
    CHECK(real.trainable() == closed.trainable());
  };

  {
    auto m = build_model<float>(geo, 5);
    VariantSpec v;
    compare(m, v);
  }
  {
    auto m = build_model<float>(geo, 5);
    upgrade_to_multimodal(m, PetInit::zero, 6);
    AdaptationConfig cfg;
    cfg.method = AdaptMethod::lora;
    cfg.rank = 8;
    cfg.alpha = 16.0;
    cfg.targets = {AttnTarget::q, AttnTarget::v};
    inject_adapters(m, cfg, 7);
    compare(m, adapted_variant(AdaptMethod::lora));
  }
  {
    auto m = build_model<float>(geo, 5);
    upgrade_to_multimodal(m, PetInit::zero, 6);
    AdaptationConfig cfg;
    cfg.method = AdaptMethod::dora;
    cfg.rank = 8;
    cfg.alpha = 16.0;
    cfg.targets = {AttnTarget::q, AttnTarget::v};
    cfg.dora_form = DoraForm::canonical;
    inject_adapters(m, cfg, 7);
    compare(m, adapted_variant(AdaptMethod::dora));
  }
  {
    auto m = build_model<float>(geo, 5, ModelKind::early_fusion);
    VariantSpec v;
    v.kind = ModelKind::early_fusion;
    compare(m, v);
  }
  {
    auto m = build_model<float>(geo, 5);
    m.prognosis = build_prognosis_head<float>(geo.dim + 28, 32, 20, 8);
    VariantSpec v;
    v.with_prognosis = true;
    v.prognosis_in = geo.dim + 28;
    compare(m, v);
  }
}

TEST_CASE("ledger: published-scale arithmetic") {
  ModelGeometry geo;
  geo.side = 96;
  geo.patch = 16;
  geo.dim = 768;
  geo.heads = 12;
  geo.blocks = 12;
  geo.classes = 3;
  geo.mlp_ratio = 4;
  geo.decoder_channels = 8;
  geo.validate();

  ParamLedger base = ledger_for_geometry(geo, VariantSpec{});
  ParamLedger adapted = ledger_for_geometry(geo, adapted_variant(AdaptMethod::lora));

  // 12 blocks x 2 targets x (8x768 + 768x8)
  CHECK(adapted.group_total(ParamGroup::peft) == 294912);
  CHECK(adapted.trainable_fraction() <= 0.10);
  CHECK(adapted.trainable() == adapted.group_total(ParamGroup::peft) +
                                   adapted.group_total(ParamGroup::pe_pet) +
                                   adapted.group_total(ParamGroup::sk_pet) +
                                   adapted.group_total(ParamGroup::adapter));

  VariantSpec early;
  early.kind = ModelKind::early_fusion;
  ParamLedger early_ledger = ledger_for_geometry(geo, early);
  // Widening the input adds one extra input-channel slice to the patch
  // embedding and to the voxel skip; nothing else changes.
  const long long delta = early_ledger.total() - base.total();
  CHECK(delta == static_cast<long long>(geo.dim) * geo.patch_volume() + geo.decoder_channels);
  CHECK(early_ledger.trainable_fraction() == 1.0);
  CHECK(adapted.trainable_fraction() < early_ledger.trainable_fraction());
}

TEST_CASE("ledger: magnitude rows appear only for the canonical magnitude form") {
  ModelGeometry geo = micro_geometry();
  ParamLedger lora = ledger_for_geometry(geo, adapted_variant(AdaptMethod::lora));
  ParamLedger dora = ledger_for_geometry(geo, adapted_variant(AdaptMethod::dora));
  const long long magnitude_rows = static_cast<long long>(geo.blocks) * 2 * geo.dim;
  CHECK(dora.group_total(ParamGroup::peft) - lora.group_total(ParamGroup::peft) ==
        magnitude_rows);
}

// ---------------------------------------------------------------------------
// Round trip through storage
// ---------------------------------------------------------------------------

TEST_CASE("model round trip: parameters, adapters, and outputs survive save/load") {
  const fs::path dir = fs::temp_directory_path() / "pemma_model_rt";
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();

  auto geo = micro_geometry();
  auto model = build_model<float>(geo, 401);
  upgrade_to_multimodal(model, PetInit::random, 402);
  AdaptationConfig cfg;
  cfg.method = AdaptMethod::dora;
  cfg.rank = 2;
  cfg.alpha = 4.0;
  cfg.targets = {AttnTarget::q, AttnTarget::v, AttnTarget::o};
  inject_adapters(model, cfg, 403);
  model.prognosis = build_prognosis_head<float>(geo.dim, 16, 20, 404);
  // Give the low-rank updates nonzero content so the round trip carries it.
  Rng rng(405);
  for (auto& ba : model.adapters)
    for (auto* slot : {&ba.q, &ba.v, &ba.o})
      if (*slot)
        for (auto& v : (*slot)->pair.b.data) v = static_cast<float>(rng.gaussian(0.0, 0.1));

  save_model(model, path);
  auto loaded = load_model<float>(path);

  auto a = named_params(model);
  auto b = named_params(loaded);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CAPTURE(a[i].name);
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].group == b[i].group);
    CHECK(a[i].tensor->shape == b[i].tensor->shape);
    CHECK(a[i].tensor->requires_grad == b[i].tensor->requires_grad);
    CHECK(bitwise_equal(a[i].tensor->data, b[i].tensor->data));
  }
  CHECK(loaded.adapt_cfg.method == AdaptMethod::dora);
  CHECK(loaded.adapt_cfg.rank == 2);
  CHECK(loaded.adapt_cfg.dora_form == DoraForm::canonical);
  CHECK(loaded.multimodal());
  REQUIRE(loaded.prognosis.has_value());
  CHECK(loaded.prognosis->bins() == 20);

  Volume ct = random_volume(geo.side, rng);
  Volume pet = random_volume(geo.side, rng);
  CHECK(bitwise_equal(logits_of(model, &ct, &pet, Mode::ctpet),
                      logits_of(loaded, &ct, &pet, Mode::ctpet)));

  // A tampered table must be rejected, not silently half-loaded.
  Checkpoint ckpt = load_checkpoint(path);
  Checkpoint missing = ckpt;
  missing.entries.pop_back();
  CHECK_THROWS_WITH_AS(model_from_checkpoint<float>(missing), doctest::Contains("missing"),
                       DataError);
  Checkpoint extra = ckpt;
  CheckpointEntry stray;
  stray.name = "enc.block9.attn.wq";
  stray.group = ParamGroup::base;
  stray.shape = {2, 2};
  stray.data = {1.f, 2.f, 3.f, 4.f};
  extra.entries.push_back(stray);
  CHECK_THROWS_WITH_AS(model_from_checkpoint<float>(extra), doctest::Contains("unknown"),
                       DataError);
  Checkpoint reshaped = ckpt;
  for (auto& e : reshaped.entries)
    if (e.name == "skip.beta") e.shape = {2};
  CHECK_THROWS_AS(model_from_checkpoint<float>(reshaped), DataError);

  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Prognosis head
// ---------------------------------------------------------------------------

TEST_CASE("prognosis head: untrained output is the uniform distribution") {
  auto head = build_prognosis_head<double>(10, 8, 20, 500);
  Rng rng(501);
  Tensor<double> feats = Tensor<double>::randn({3, 10}, rng);

  Tape<double> tape;
  TapeBinder<double> bind(tape);
  Id pmf = prognosis_forward(tape, bind, head, tape.constant(feats));
  const auto& p = tape.val(pmf);
  REQUIRE(p.rows() == 3);
  REQUIRE(p.cols() == 20);
  for (int i = 0; i < p.rows(); ++i) {
    double total = 0.0;
    for (int j = 0; j < p.cols(); ++j) {
      CHECK(p.at(i, j) == doctest::Approx(0.05).epsilon(1e-12));
      CHECK(p.at(i, j) == p.at(i, 0));
      total += p.at(i, j);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }

  Tensor<double> wrong = Tensor<double>::randn({2, 7}, rng);
  CHECK_THROWS_WITH_AS(prognosis_forward(tape, bind, head, tape.constant(wrong)),
                       doctest::Contains("feature width"), ConfigError);
  CHECK_THROWS_AS(build_prognosis_head<double>(0, 8, 20, 1), ConfigError);
  CHECK_THROWS_AS(build_prognosis_head<double>(10, 8, 1, 1), ConfigError);
}

TEST_CASE("prognosis head: gradients through the survival loss check out") {
  auto head = build_prognosis_head<double>(6, 5, 8, 502);
  // Perturb the zero layers so gradients are generic.
  Rng rng(503);
  for (auto& v : head.w2.data) v = rng.gaussian(0.0, 0.3);
  for (auto& v : head.b2.data) v = rng.gaussian(0.0, 0.3);
  Tensor<double> feats = Tensor<double>::randn({4, 6}, rng);
  std::vector<SurvivalTarget> targets = {{1, true}, {4, false}, {0, true}, {6, true}};

  auto build = [&](Tape<double>& tape) {
    TapeBinder<double> bind(tape);
    Id pmf = prognosis_forward(tape, bind, head, tape.constant(feats));
    return deephit_loss(tape, pmf, targets, 0.5, 0.2);
  };
  double worst = finite_difference_check_params<double>(
      build, {&head.w1, &head.b1, &head.w2, &head.b2}, 1e-5);
  CHECK(worst < 1e-6);
}

TEST_CASE("pooled case embedding has one row per case") {
  auto geo = micro_geometry();
  auto model = build_model<float>(geo, 601);
  Rng rng(602);
  Volume ct = random_volume(geo.side, rng);

  Tape<float> tape;
  TapeBinder<float> bind(tape);
  Id pooled = pooled_embedding(tape, bind, model, &ct, nullptr, Mode::ct);
  CHECK(tape.val(pooled).rows() == 1);
  CHECK(tape.val(pooled).cols() == geo.dim);
}

// ---------------------------------------------------------------------------
// End-to-end gradient check through the full joint model
// ---------------------------------------------------------------------------

TEST_CASE("full model: finite differences across the joint path and both losses") {
  auto geo = micro_geometry();
  auto model = build_model<double>(geo, 701);
  upgrade_to_multimodal(model, PetInit::random, 702);
  AdaptationConfig cfg;
  cfg.method = AdaptMethod::lora;
  cfg.rank = 2;
  cfg.alpha = 4.0;
  cfg.targets = {AttnTarget::q, AttnTarget::v};
  inject_adapters(model, cfg, 703);
  model.route = RoutePolicy::alternate;

  // Nonzero low-rank content so the adapter path carries signal.
  Rng rng(704);
  for (auto& ba : model.adapters)
    for (auto* slot : {&ba.q, &ba.v})
      if (*slot)
        for (auto& v : (*slot)->pair.b.data) v = rng.gaussian(0.0, 0.05);
  model.beta->data[0] = 0.3;

  Volume ct = random_volume(geo.side, rng);
  Volume pet = random_volume(geo.side, rng);
  std::vector<unsigned char> labels(static_cast<size_t>(geo.voxels()));
  for (auto& l : labels) l = static_cast<unsigned char>(rng.uniform_int(0, geo.classes - 1));

  auto build = [&](Tape<double>& tape) {
    TapeBinder<double> bind(tape);
    auto r = model_logits(tape, bind, model, &ct, &pet, Mode::ctpet);
    return dice_ce_loss(tape, r.logits, labels);
  };
  std::vector<Tensor<double>*> probes = {
      &*model.beta,
      &model.adapter->weight,
      &model.adapters[0].q->pair.a,
      &model.adapters[0].q->pair.b,
      &model.adapters[3].v->pair.b,
      &model.dec.cls_b,
      &model.skip_pet->bias,
  };
  double worst = finite_difference_check_params<double>(build, probes, 1e-5);
  CHECK(worst < 5e-6);
}
