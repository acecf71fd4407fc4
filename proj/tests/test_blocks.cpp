#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "jamt/blocks.hpp"

using namespace jamt;

namespace {

// plain-loop matrix container for oracle math, independent of the Tensor path
struct Raw {
  int r = 0, c = 0;
  std::vector<double> v;
  double& at(int i, int j) { return v[static_cast<size_t>(i) * c + j]; }
  double at(int i, int j) const { return v[static_cast<size_t>(i) * c + j]; }
};

Raw raw(const Tensor& t) {
  Raw m;
  m.r = t.rows();
  m.c = t.cols();
  m.v.assign(t.data().begin(), t.data().end());
  return m;
}

Raw raw_mul(const Raw& a, const Raw& b) {
  Raw out;
  out.r = a.r;
  out.c = b.c;
  out.v.assign(static_cast<size_t>(a.r) * b.c, 0);
  for (int i = 0; i < a.r; ++i)
    for (int k = 0; k < a.c; ++k)
      for (int j = 0; j < b.c; ++j) out.at(i, j) += a.at(i, k) * b.at(k, j);
  return out;
}

Raw linear_oracle(const Raw& x, const Linear& lin) {
  Raw w = raw(lin.w.tensor);
  Raw b = raw(lin.b.tensor);
  Raw y = raw_mul(x, w);
  for (int i = 0; i < y.r; ++i)
    for (int j = 0; j < y.c; ++j) y.at(i, j) += b.v[j];
  return y;
}

// multi-head attention over an explicit key/value set; scale is applied to
// every dot product, softmax normalizes over all key positions
Raw attention_oracle(const Raw& q, const Raw& k, const Raw& v, int n_heads,
                     double scale) {
  int n = q.r;
  int kk = k.r;
  int d = q.c;
  int dh = d / n_heads;
  Raw out;
  out.r = n;
  out.c = d;
  out.v.assign(static_cast<size_t>(n) * d, 0);
  for (int h = 0; h < n_heads; ++h) {
    for (int i = 0; i < n; ++i) {
      std::vector<double> e(kk);
      double mx = -1e300;
      for (int j = 0; j < kk; ++j) {
        double dot = 0;
        for (int c = 0; c < dh; ++c)
          dot += q.at(i, h * dh + c) * k.at(j, h * dh + c);
        e[j] = dot * scale;
        mx = std::max(mx, e[j]);
      }
      double denom = 0;
      for (int j = 0; j < kk; ++j) {
        e[j] = std::exp(e[j] - mx);
        denom += e[j];
      }
      for (int j = 0; j < kk; ++j) {
        double w = e[j] / denom;
        for (int c = 0; c < dh; ++c)
          out.at(i, h * dh + c) += w * v.at(j, h * dh + c);
      }
    }
  }
  return out;
}

// standalone multi-head self-attention reference for the reduction identity
Raw self_attention_oracle(const Raw& x, const JointAttentionBlock& blk) {
  const auto& cfg = blk.config();
  Raw q = linear_oracle(x, blk.q_proj);
  Raw k = linear_oracle(x, blk.k_proj);
  Raw v = linear_oracle(x, blk.v_proj);
  int dh = cfg.d_model / cfg.n_heads;
  double scale =
      1.0 / std::sqrt(double(cfg.scale_per_head ? dh : cfg.d_model));
  Raw ctx = attention_oracle(q, k, v, cfg.n_heads, scale);
  return linear_oracle(ctx, blk.out_proj);
}

// direct evaluation of the joint form: keys/values are the primary rows
// followed by the secondary rows
Raw joint_attention_oracle(const Raw& x, const Raw& s,
                           const JointAttentionBlock& blk) {
  const auto& cfg = blk.config();
  Raw q = linear_oracle(x, blk.q_proj);
  Raw k = linear_oracle(x, blk.k_proj);
  Raw v = linear_oracle(x, blk.v_proj);
  Raw ks = linear_oracle(s, blk.ks_proj);
  Raw vs = linear_oracle(s, blk.vs_proj);
  Raw kj, vj;
  kj.r = k.r + ks.r;
  kj.c = k.c;
  kj.v = k.v;
  kj.v.insert(kj.v.end(), ks.v.begin(), ks.v.end());
  vj.r = v.r + vs.r;
  vj.c = v.c;
  vj.v = v.v;
  vj.v.insert(vj.v.end(), vs.v.begin(), vs.v.end());
  int dh = cfg.d_model / cfg.n_heads;
  double scale =
      1.0 / std::sqrt(double(cfg.scale_per_head ? dh : cfg.d_model));
  Raw ctx = attention_oracle(q, kj, vj, cfg.n_heads, scale);
  return linear_oracle(ctx, blk.out_proj);
}

Tensor rand_tensor(std::vector<int> shape, RngStream& rng) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.raw_data()) v = static_cast<real_t>(rng.next_normal());
  return t;
}

double max_abs_diff(const Tensor& t, const Raw& m) {
  double worst = 0;
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j)
      worst = std::max(worst, std::abs(t.at(i, j) - m.at(i, j)));
  return worst;
}

}  // namespace

TEST_CASE("joint attention with empty secondary equals reference self-attention") {
  RngStream rng(100, 0);
  for (int trial = 0; trial < 100; ++trial) {
    int heads_pool[] = {1, 2, 4};
    int n_heads = heads_pool[rng.next_below(3)];
    int d = n_heads * static_cast<int>(2 + rng.next_below(3)) * 2;
    int n = 1 + static_cast<int>(rng.next_below(5));
    JointAttentionConfig cfg;
    cfg.d_model = d;
    cfg.n_heads = n_heads;
    cfg.secondary_dim = 2 + static_cast<int>(rng.next_below(6));
    JointAttentionBlock blk("blk", cfg, rng, Parameter::Group::EncDec);

    Tensor x = rand_tensor({n, d}, rng);
    Tensor empty = Tensor::zeros({0, *cfg.secondary_dim});
    RngStream drop(0, 0);
    Tensor out = blk.forward(x, &empty, Mask::full({n, n}),
                             Mask::full({n, 0}), false, drop);
    CHECK(max_abs_diff(out, self_attention_oracle(raw(x), blk)) <= 1e-9);

    // all-false secondary mask suppresses the secondary entirely
    Tensor sec = rand_tensor({3, *cfg.secondary_dim}, rng);
    Tensor out2 = blk.forward(x, &sec, Mask::full({n, n}),
                              Mask::full({n, 3}, false), false, drop);
    CHECK(max_abs_diff(out2, self_attention_oracle(raw(x), blk)) <= 1e-9);
  }
}

TEST_CASE("joint attention n=1 m=1 with identical projected keys") {
  RngStream rng(7, 1);
  JointAttentionConfig cfg;
  cfg.d_model = 4;
  cfg.n_heads = 1;
  cfg.secondary_dim = 3;
  JointAttentionBlock blk("blk", cfg, rng, Parameter::Group::EncDec);

  // zero both key projections and give them one shared bias: the two joint
  // keys coincide no matter the inputs
  for (auto& v : blk.k_proj.w.tensor.raw_data()) v = 0;
  for (auto& v : blk.ks_proj.w.tensor.raw_data()) v = 0;
  for (int i = 0; i < 4; ++i) {
    blk.k_proj.b.tensor.raw_data()[i] = static_cast<real_t>(0.25 * (i + 1));
    blk.ks_proj.b.tensor.raw_data()[i] = static_cast<real_t>(0.25 * (i + 1));
  }

  Tensor x = rand_tensor({1, 4}, rng);
  Tensor s = rand_tensor({1, 3}, rng);
  RngStream drop(0, 0);
  Tensor out = blk.forward(x, &s, Mask::full({1, 1}), Mask::full({1, 1}),
                           false, drop);

  Raw vp = linear_oracle(raw(x), blk.v_proj);
  Raw vs = linear_oracle(raw(s), blk.vs_proj);
  Raw mean;
  mean.r = 1;
  mean.c = 4;
  mean.v.resize(4);
  for (int j = 0; j < 4; ++j) mean.v[j] = 0.5 * vp.v[j] + 0.5 * vs.v[j];
  Raw expect = linear_oracle(mean, blk.out_proj);
  CHECK(max_abs_diff(out, expect) <= 1e-12);
}

TEST_CASE("joint attention matches the direct-equation oracle") {
  RngStream rng(55, 2);
  for (int trial = 0; trial < 20; ++trial) {
    JointAttentionConfig cfg;
    cfg.d_model = 6;
    cfg.n_heads = 1;
    cfg.secondary_dim = 4;
    JointAttentionBlock blk("blk", cfg, rng, Parameter::Group::EncDec);
    Tensor x = rand_tensor({3, 6}, rng);
    Tensor s = rand_tensor({2, 4}, rng);
    RngStream drop(0, 0);
    Tensor out = blk.forward(x, &s, Mask::full({3, 3}), Mask::full({3, 2}),
                             false, drop);
    CHECK(max_abs_diff(out, joint_attention_oracle(raw(x), raw(s), blk)) <=
          1e-9);
  }
}

TEST_CASE("joint attention rejects fully masked query rows") {
  RngStream rng(9, 9);
  JointAttentionConfig cfg;
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.secondary_dim = 4;
  JointAttentionBlock blk("blk", cfg, rng, Parameter::Group::EncDec);
  Tensor x = rand_tensor({2, 4}, rng);
  Tensor s = rand_tensor({1, 4}, rng);
  Mask pm({2, 2}, false);
  Mask sm({2, 1}, false);
  pm.at(0, 0) = 1;  // row 1 has no attendable joint position
  RngStream drop(0, 0);
  CHECK_THROWS_AS(blk.forward(x, &s, pm, sm, false, drop), DataError);
}

TEST_CASE("joint attention block gradients") {
  RngStream rng(31, 4);
  JointAttentionConfig cfg;
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.secondary_dim = 3;
  JointAttentionBlock blk("blk", cfg, rng, Parameter::Group::EncDec);
  Tensor x = rand_tensor({3, 4}, rng);
  Tensor s = rand_tensor({2, 3}, rng);
  x.set_requires_grad(true);
  s.set_requires_grad(true);
  RngStream drop(0, 0);
  auto f = [&]() {
    Tensor out = blk.forward(x, &s, Mask::full({3, 3}), Mask::full({3, 2}),
                             false, drop);
    return sum(mul(out, out));
  };
  std::vector<Tensor> params = {x,
                                s,
                                blk.q_proj.w.tensor,
                                blk.q_proj.b.tensor,
                                blk.k_proj.w.tensor,
                                blk.v_proj.w.tensor,
                                blk.ks_proj.w.tensor,
                                blk.ks_proj.b.tensor,
                                blk.vs_proj.w.tensor,
                                blk.out_proj.w.tensor,
                                blk.out_proj.b.tensor};
  CHECK(check_gradients(f, params, 1e-5) <= 1e-6);
}

TEST_CASE("glu combiner at initialization with compensation") {
  RngStream rng(12, 0);
  GluCombiner glu("glu", 3, CombinerMode::Gated);
  glu.compensation_active = true;
  std::vector<Tensor> states;
  for (int i = 0; i < 3; ++i) states.push_back(rand_tensor({4, 5}, rng));
  Tensor out = glu.combine(states);
  // sigma(0) = 1/2 and the doubling are exact, so this is bitwise equality
  for (int64_t i = 0; i < out.numel(); ++i)
    CHECK(out.data()[i] == states[2].data()[i]);
}

TEST_CASE("glu combiner with zero gate weights halves the mix") {
  RngStream rng(13, 0);
  GluCombiner glu("glu", 2, CombinerMode::Gated);
  glu.alpha.tensor.raw_data()[0] = static_cast<real_t>(0.7);
  glu.alpha.tensor.raw_data()[1] = static_cast<real_t>(-1.2);
  std::vector<Tensor> states = {rand_tensor({3, 4}, rng),
                                rand_tensor({3, 4}, rng)};
  Tensor out = glu.combine(states);
  for (int64_t i = 0; i < out.numel(); ++i) {
    double expect =
        0.5 * (0.7 * states[0].data()[i] - 1.2 * states[1].data()[i]);
    CHECK(std::abs(out.data()[i] - expect) < 1e-12);
  }
}

TEST_CASE("glu combiner matches the elementwise oracle") {
  RngStream rng(14, 0);
  GluCombiner glu("glu", 2, CombinerMode::Gated);
  for (auto& v : glu.alpha.tensor.raw_data())
    v = static_cast<real_t>(rng.next_normal());
  for (auto& v : glu.beta.tensor.raw_data())
    v = static_cast<real_t>(rng.next_normal());
  std::vector<Tensor> states = {rand_tensor({3, 4}, rng),
                                rand_tensor({3, 4}, rng)};
  Tensor out = glu.combine(states);
  double a0 = glu.alpha.tensor.data()[0], a1 = glu.alpha.tensor.data()[1];
  double b0 = glu.beta.tensor.data()[0], b1 = glu.beta.tensor.data()[1];
  for (int64_t i = 0; i < out.numel(); ++i) {
    double mix = a0 * states[0].data()[i] + a1 * states[1].data()[i];
    double gate_arg = b0 * states[0].data()[i] + b1 * states[1].data()[i];
    double gate = 1.0 / (1.0 + std::exp(-gate_arg));
    CHECK(std::abs(out.data()[i] - gate * mix) < 1e-12);
  }

  CHECK_THROWS_AS(glu.combine({states[0]}), ShapeError);
}

TEST_CASE("glu combiner is linear in each state when beta is zero") {
  RngStream rng(15, 0);
  GluCombiner glu("glu", 2, CombinerMode::Gated);
  for (auto& v : glu.alpha.tensor.raw_data())
    v = static_cast<real_t>(rng.next_normal());
  Tensor b0 = rand_tensor({2, 3}, rng);
  Tensor b1 = rand_tensor({2, 3}, rng);
  Tensor b0_scaled = Tensor::zeros({2, 3});
  for (int64_t i = 0; i < 6; ++i)
    b0_scaled.raw_data()[i] = static_cast<real_t>(2.5) * b0.data()[i];

  Tensor base = glu.combine({b0, b1});
  Tensor scaled = glu.combine({b0_scaled, b1});
  Tensor zeroed = glu.combine({Tensor::zeros({2, 3}), b1});
  for (int64_t i = 0; i < 6; ++i) {
    double lhs = scaled.data()[i] - zeroed.data()[i];
    double rhs = 2.5 * (base.data()[i] - zeroed.data()[i]);
    CHECK(std::abs(lhs - rhs) < 1e-12);
  }
}

TEST_CASE("glu fold_compensation keeps the function bitwise identical") {
  RngStream rng(16, 0);
  GluCombiner glu("glu", 3, CombinerMode::Gated);
  for (auto& v : glu.beta.tensor.raw_data())
    v = static_cast<real_t>(rng.next_normal());
  glu.compensation_active = true;
  std::vector<Tensor> states;
  for (int i = 0; i < 3; ++i) states.push_back(rand_tensor({2, 4}, rng));
  Tensor before = glu.combine(states);
  glu.fold_compensation();
  CHECK_FALSE(glu.compensation_active);
  Tensor after = glu.combine(states);
  for (int64_t i = 0; i < before.numel(); ++i)
    CHECK(before.data()[i] == after.data()[i]);
}

TEST_CASE("glu combiner gradients") {
  RngStream rng(17, 0);
  GluCombiner glu("glu", 2, CombinerMode::Gated);
  std::vector<Tensor> states = {rand_tensor({2, 3}, rng),
                                rand_tensor({2, 3}, rng)};
  states[0].set_requires_grad(true);
  states[1].set_requires_grad(true);
  auto f = [&]() {
    Tensor out = glu.combine(states);
    return sum(mul(out, out));
  };
  CHECK(check_gradients(
            f, {states[0], states[1], glu.alpha.tensor, glu.beta.tensor},
            1e-5) <= 1e-6);
}

TEST_CASE("weighted-sum combiner has no gate parameters") {
  GluCombiner glu("glu", 3, CombinerMode::WeightedSum);
  std::vector<std::string> names;
  glu.visit([&](Parameter& p) { names.push_back(p.name); });
  REQUIRE(names.size() == 1);
  CHECK(names[0] == "glu.alpha");

  // and at initialization it passes through the last state exactly
  RngStream rng(18, 0);
  std::vector<Tensor> states = {rand_tensor({2, 2}, rng),
                                rand_tensor({2, 2}, rng),
                                rand_tensor({2, 2}, rng)};
  Tensor out = glu.combine(states);
  for (int64_t i = 0; i < 4; ++i) CHECK(out.data()[i] == states[2].data()[i]);
}

TEST_CASE("positional encoding") {
  Tensor zero = Tensor::zeros({3, 4});
  Tensor enc = positional_encode(zero, 16);
  // position 0: sin channels add 0, cos channels add 1
  CHECK(enc.at(0, 0) == 0.0);
  CHECK(enc.at(0, 1) == 1.0);
  CHECK(enc.at(0, 2) == 0.0);
  CHECK(enc.at(0, 3) == 1.0);

  // position 1, d=4: closed form sin/cos at wavelength 10000^(2i/d)
  CHECK(enc.at(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
  CHECK(enc.at(1, 1) == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
  CHECK(enc.at(1, 2) ==
        doctest::Approx(std::sin(1.0 / 100.0)).epsilon(1e-12));
  CHECK(enc.at(1, 3) ==
        doctest::Approx(std::cos(1.0 / 100.0)).epsilon(1e-12));

  Tensor enc2 = positional_encode(zero, 16);
  for (int64_t i = 0; i < enc.numel(); ++i)
    CHECK(enc.data()[i] == enc2.data()[i]);

  CHECK_THROWS_AS(positional_encode(Tensor::zeros({20, 4}), 16), DataError);
}

TEST_CASE("feed forward") {
  RngStream rng(19, 0);
  FeedForward ffn("ffn", 4, 8, 0, rng, Parameter::Group::EncDec);
  RngStream drop(0, 0);

  SUBCASE("zero weights give zero output") {
    for (auto& v : ffn.lin1.w.tensor.raw_data()) v = 0;
    for (auto& v : ffn.lin2.w.tensor.raw_data()) v = 0;
    Tensor x = rand_tensor({3, 4}, rng);
    Tensor y = ffn.forward(x, false, drop);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
  }

  SUBCASE("all-negative pre-activations give the second bias") {
    for (auto& v : ffn.lin1.w.tensor.raw_data()) v = 0;
    for (auto& v : ffn.lin1.b.tensor.raw_data()) v = -3;
    for (int i = 0; i < 4; ++i)
      ffn.lin2.b.tensor.raw_data()[i] = static_cast<real_t>(i - 1.5);
    Tensor x = rand_tensor({2, 4}, rng);
    Tensor y = ffn.forward(x, false, drop);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 4; ++c)
        CHECK(y.at(r, c) == ffn.lin2.b.tensor.data()[c]);
  }

  SUBCASE("matches a scalar-loop oracle") {
    Tensor x = rand_tensor({3, 4}, rng);
    Tensor y = ffn.forward(x, false, drop);
    Raw h = linear_oracle(raw(x), ffn.lin1);
    for (auto& v : h.v) v = std::max(v, 0.0);
    Raw expect = linear_oracle(h, ffn.lin2);
    CHECK(max_abs_diff(y, expect) <= 1e-12);
  }

  SUBCASE("gradients") {
    Tensor x = rand_tensor({2, 4}, rng);
    x.set_requires_grad(true);
    auto f = [&]() {
      Tensor y = ffn.forward(x, false, drop);
      return sum(mul(y, y));
    };
    CHECK(check_gradients(f,
                          {x, ffn.lin1.w.tensor, ffn.lin1.b.tensor,
                           ffn.lin2.w.tensor, ffn.lin2.b.tensor},
                          1e-5) <= 1e-6);
  }
}

TEST_CASE("embedding and layer norm block gradients") {
  RngStream rng(20, 0);
  EmbeddingTable emb("emb", 9, 4, rng, Parameter::Group::EncDec);
  LayerNormBlock ln("ln", 4, Parameter::Group::EncDec);
  std::vector<int> ids = {1, 4, 8, 4};
  Tensor probe = rand_tensor({4, 4}, rng);
  auto f = [&]() {
    Tensor x = ln.forward(emb.lookup(ids));
    return sum(mul(x, probe));
  };
  CHECK(check_gradients(
            f, {emb.weights.tensor, ln.gain.tensor, ln.bias.tensor}, 1e-5) <=
        1e-6);

  CHECK_THROWS_AS(emb.lookup({9}), DataError);
}
