#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "tmoe/grad_check.hpp"
#include "tmoe/moe.hpp"
#include "tmoe/rng.hpp"

namespace tmoe {
namespace {

using D = BasicTensor<double>;

Tensor dist_tensor(std::vector<std::vector<float>> rows) {
  std::vector<float> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from_data({static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(rows[0].size())}, flat);
}

template <class T>
BasicTensor<T> random_rows(Rng& rng, std::int64_t r, std::int64_t c, double scale = 1.0) {
  std::vector<T> v(static_cast<std::size_t>(r * c));
  for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
  return BasicTensor<T>::from_data({r, c}, std::move(v));
}

TEST(TopK, Examples) {
  auto d = dist_tensor({{0.5f, 0.2f, 0.3f}});
  auto k1 = top_k_select(d, 1);
  EXPECT_EQ(k1.experts[0], (std::vector<std::int64_t>{0}));
  EXPECT_DOUBLE_EQ(k1.weights[0][0], 1.0);
  auto k2 = top_k_select(d, 2);
  EXPECT_EQ(k2.experts[0], (std::vector<std::int64_t>{0, 2}));
  EXPECT_NEAR(k2.weights[0][0], 0.625, 1e-6);
  EXPECT_NEAR(k2.weights[0][1], 0.375, 1e-6);
  auto u = top_k_select(dist_tensor({{0.25f, 0.25f, 0.25f, 0.25f}}), 2);
  EXPECT_EQ(u.experts[0], (std::vector<std::int64_t>{0, 1}));
  EXPECT_DOUBLE_EQ(u.weights[0][0], 0.5);
  EXPECT_DOUBLE_EQ(u.weights[0][1], 0.5);
}

TEST(TopK, KAboveNIsConfigError) {
  try {
    top_k_select(dist_tensor({{0.5f, 0.5f}}), 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kConfig);
  }
}

TEST(TopK, SelectedSetInvariantUnderMonotoneTransform) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    auto logits = random_rows<float>(rng, 1, 6, 2.0);
    auto p = softmax(logits);
    std::vector<float> cubed(p.data().begin(), p.data().end());
    for (auto& v : cubed) v = v * v * v + 0.5f * v;
    auto a = top_k_select(p, 3);
    auto b = top_k_select(Tensor::from_data({1, 6}, cubed), 3);
    EXPECT_EQ(std::set<std::int64_t>(a.experts[0].begin(), a.experts[0].end()),
              std::set<std::int64_t>(b.experts[0].begin(), b.experts[0].end()));
  }
}

TEST(Gate, ZeroWeightsUniformAndSingleExpert) {
  ParameterSet<float> ps(1);
  MoeConfig cfg;
  cfg.n_experts = 4;
  MoELayer<float> layer(ps, "m", 3, 5, cfg);
  ParameterSet<float> ps1(1);
  MoeConfig one;
  one.n_experts = 1;
  MoELayer<float> single(ps1, "m", 3, 5, one);
  auto w = layer.gate_weight();
  for (auto& v : w.mutable_data()) v = 0.f;
  Rng rng(2);
  auto x = random_rows<float>(rng, 4, 3);
  auto p = layer.gate_forward(x);
  for (auto v : p.data()) EXPECT_FLOAT_EQ(v, 0.25f);
  auto p1 = single.gate_forward(x);
  for (auto v : p1.data()) EXPECT_EQ(v, 1.f);
}

TEST(Gate, MatchesMatmulSoftmaxOracle) {
  ParameterSet<double> ps(9);
  MoeConfig cfg;
  cfg.n_experts = 3;
  MoELayer<double> layer(ps, "m", 4, 6, cfg);
  Rng rng(3);
  auto x = random_rows<double>(rng, 5, 4);
  auto p = layer.gate_forward(x);
  const auto w = layer.gate_weight().data();
  for (int r = 0; r < 5; ++r) {
    double logits[3] = {0, 0, 0};
    for (int e = 0; e < 3; ++e) {
      for (int i = 0; i < 4; ++i) logits[e] += x.at(r * 4 + i) * w[i * 3 + e];
    }
    double z = 0;
    for (double l : logits) z += std::exp(l);
    for (int e = 0; e < 3; ++e) EXPECT_NEAR(p.at(r * 3 + e), std::exp(logits[e]) / z, 1e-12);
  }
}

TEST(Capacity, Examples) {
  RoutingDecision d;
  d.n_experts = 2;
  d.k = 1;
  for (int t = 0; t < 4; ++t) {
    d.experts.push_back({0});
    d.weights.push_back({1.0});
    d.distribution.push_back({0.9, 0.1});
  }
  auto c = apply_capacity(d, 1.0);
  EXPECT_EQ(c.capacity, 2);
  EXPECT_EQ(c.dropped_assignments, 2);
  EXPECT_EQ(c.dropped_tokens, 2);
  EXPECT_TRUE(c.decision.experts[2].empty());
  EXPECT_TRUE(c.decision.experts[3].empty());
  auto none = apply_capacity(d, 2.0);
  EXPECT_EQ(none.dropped_assignments, 0);
  EXPECT_EQ(none.decision.experts, d.experts);
}

TEST(Capacity, FallsBackToNextSelection) {
  RoutingDecision d;
  d.n_experts = 2;
  d.k = 2;
  for (int t = 0; t < 4; ++t) {
    d.experts.push_back({0, 1});
    d.weights.push_back({0.6, 0.4});
    d.distribution.push_back({0.6, 0.4});
  }
  auto c = apply_capacity(d, 1.0);
  // capacity 2 per expert: the first two tokens fill both experts.
  EXPECT_EQ(c.decision.experts[0], (std::vector<std::int64_t>{0, 1}));
  EXPECT_TRUE(c.decision.experts[2].empty());
  EXPECT_EQ(c.dropped_tokens, 2);
}

TEST(Capacity, RandomStressRespectsBudget) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(0, 6));
    const int k = 1 + static_cast<int>(rng.uniform_int(0, n - 1));
    const int tokens = 1 + static_cast<int>(rng.uniform_int(0, 200));
    auto d = top_k_select(softmax(random_rows<float>(rng, tokens, n, 3.0)), k);
    const double factor = 0.2 + 2.0 * rng.uniform();
    auto c = apply_capacity(d, factor);
    const auto cap = static_cast<std::int64_t>(std::ceil(factor * tokens / n));
    EXPECT_EQ(c.capacity, cap);
    std::vector<std::int64_t> load(static_cast<std::size_t>(n), 0);
    std::int64_t accepted = 0;
    for (std::size_t t = 0; t < c.decision.units(); ++t) {
      double s = 0;
      for (auto w : c.decision.weights[t]) s += w;
      if (!c.decision.experts[t].empty()) {
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
      for (auto e : c.decision.experts[t]) ++load[static_cast<std::size_t>(e)], ++accepted;
    }
    for (auto l : load) EXPECT_LE(l, cap);
    EXPECT_LE(accepted, cap * n);
    EXPECT_EQ(accepted, c.accepted);
    EXPECT_EQ(accepted + c.dropped_assignments, static_cast<std::int64_t>(tokens) * k);
  }
}

DispatchStats<double> stats_of(const std::vector<std::vector<double>>& probs,
                               const std::vector<std::vector<std::int64_t>>& sel) {
  std::vector<double> flat;
  for (const auto& r : probs) flat.insert(flat.end(), r.begin(), r.end());
  auto t = D::from_data({static_cast<std::int64_t>(probs.size()), static_cast<std::int64_t>(probs[0].size())}, flat, true);
  return dispatch_stats(t, sel);
}

TEST(AuxLoss, BalancedIsOne) {
  auto s = stats_of({{0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}},
                    {{0}, {1}, {2}, {3}});
  EXPECT_NEAR(aux_load_balance_loss(s).item(), 1.0, 1e-12);
}

TEST(AuxLoss, ConcentratedIsN) {
  const double e = 1e-5;
  std::vector<std::vector<double>> p(10, {1 - 3 * e, e, e, e});
  std::vector<std::vector<std::int64_t>> sel(10, {0});
  EXPECT_NEAR(aux_load_balance_loss(stats_of(p, sel)).item(), 4.0, 1e-3);
}

TEST(AuxLoss, RandomMatchesCountingOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(0, 6));
    auto probs = softmax(random_rows<double>(rng, 100, n, 2.0));
    auto d = top_k_select(probs, 1);
    double f_sum = 0;
    double oracle = 0;
    for (int e = 0; e < n; ++e) {
      double f = 0, p = 0;
      for (int t = 0; t < 100; ++t) {
        f += d.experts[static_cast<std::size_t>(t)][0] == e;
        p += probs.at(t * n + e);
      }
      f /= 100;
      p /= 100;
      f_sum += f;
      oracle += f * p;
    }
    oracle *= n;
    auto s = dispatch_stats(probs, d.experts);
    EXPECT_NEAR(f_sum, 1.0, 1e-12);
    EXPECT_NEAR(aux_load_balance_loss(s).item(), oracle, 1e-6);
  }
}

TEST(AuxLoss, SelfConsistentDispatchIsAtLeastOne) {
  // With f_e = P_e = q_e the loss is N * sum q_e^2 >= 1, equality iff uniform.
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(0, 6));
    auto q = softmax(random_rows<double>(rng, 1, n, trial % 10 == 0 ? 0.0 : 1.5));
    DispatchStats<double> s;
    s.n_experts = n;
    s.n_tokens = 1;
    s.token_fraction.assign(q.data().begin(), q.data().end());
    s.mean_gate_prob_tensor = reshape(q, {n});
    const double v = aux_load_balance_loss(s).item();
    EXPECT_GE(v, 1.0 - 1e-12);
    if (trial % 10 == 0) {
      EXPECT_NEAR(v, 1.0, 1e-12);
    }
  }
}

TEST(AuxLoss, GradientOnlyThroughGateProbabilities) {
  Rng rng(6);
  auto logits = random_rows<double>(rng, 8, 3);
  logits.set_requires_grad(true);
  auto probs = softmax(logits);
  auto d = top_k_select(probs, 1);
  auto loss = aux_load_balance_loss(dispatch_stats(probs, d.experts));
  loss.backward();
  // d/d P_e = N f_e / tokens at each row; check via finite differences with frozen selection.
  std::function<D()> f = [&] {
    auto p = softmax(logits);
    return aux_load_balance_loss(dispatch_stats(p, d.experts));
  };
  EXPECT_LT(grad_check_params<double>(f, {logits}, 1e-5).max_rel_error, 1e-6);
}

struct LayerFixture {
  ParameterSet<double> ps{17};
  MoELayer<double> layer;
  LayerFixture(std::int64_t n, std::int64_t k, std::int64_t d = 4, std::int64_t dff = 6, std::int64_t d_task = 0) {
    MoeConfig cfg;
    cfg.n_experts = n;
    cfg.k = k;
    layer = MoELayer<double>(ps, "m", d, dff, cfg, d_task);
  }
};

TEST(MoeForward, SingleExpertEqualsFfn) {
  LayerFixture fx(1, 1);
  Rng rng(1);
  auto x = random_rows<double>(rng, 6, 4);
  auto out = fx.layer.forward(x, Granularity::kToken);
  auto ref = fx.layer.experts()[0](x);
  for (int i = 0; i < 24; ++i) EXPECT_EQ(out.y.at(i), ref.at(i));
}

TEST(MoeForward, DuplicateExpertsEqualSingle) {
  for (int k = 1; k <= 3; ++k) {
    LayerFixture fx(3, k);
    const auto& ex = fx.layer.experts();
    for (int e = 1; e < 3; ++e) {
      for (auto [dst, src] : {std::pair{ex[e].w_in, ex[0].w_in}, {ex[e].b_in, ex[0].b_in}, {ex[e].w_out, ex[0].w_out}, {ex[e].b_out, ex[0].b_out}}) {
        auto dd = dst.mutable_data();
        std::copy(src.data().begin(), src.data().end(), dd.begin());
      }
    }
    Rng rng(2);
    auto x = random_rows<double>(rng, 7, 4);
    auto out = fx.layer.forward(x, Granularity::kToken);
    auto ref = ex[0](x);
    for (int i = 0; i < 28; ++i) EXPECT_NEAR(out.y.at(i), ref.at(i), 1e-12);
  }
}

TEST(MoeForward, WeightedCombinationOracle) {
  LayerFixture fx(4, 2);
  Rng rng(3);
  auto x = random_rows<double>(rng, 5, 4);
  auto out = fx.layer.forward(x, Granularity::kToken);
  auto probs = fx.layer.gate_forward(x);
  for (int t = 0; t < 5; ++t) {
    auto sel = top_k_indices(std::vector<double>(probs.data().begin() + t * 4, probs.data().begin() + t * 4 + 4), 2);
    const double s = probs.at(t * 4 + sel[0]) + probs.at(t * 4 + sel[1]);
    std::vector<std::int64_t> row{t};
    auto xr = gather_rows(x, std::span<const std::int64_t>(row));
    for (int j = 0; j < 4; ++j) {
      double expect = 0;
      for (auto e : sel) expect += probs.at(t * 4 + e) / s * fx.layer.experts()[static_cast<std::size_t>(e)](xr).at(j);
      EXPECT_NEAR(out.y.at(t * 4 + j), expect, 1e-12);
    }
    double wsum = 0;
    for (auto w : out.decision.weights[static_cast<std::size_t>(t)]) wsum += w;
    EXPECT_NEAR(wsum, 1.0, 1e-12);
  }
}

TEST(MoeForward, SentenceGranularityNeedsIds) {
  LayerFixture fx(2, 1);
  Rng rng(3);
  auto x = random_rows<double>(rng, 4, 4);
  try {
    fx.layer.forward(x, Granularity::kSentence);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kContract);
  }
}

TEST(MoeForward, SentenceOfIdenticalTokensMatchesTokenRouting) {
  LayerFixture fx(4, 2);
  Rng rng(12);
  auto one = random_rows<double>(rng, 1, 4);
  std::vector<double> flat;
  for (int i = 0; i < 5; ++i) flat.insert(flat.end(), one.data().begin(), one.data().end());
  auto x = D::from_data({5, 4}, flat);
  auto layout = TokenLayout::single_sentence(5);
  MoeContext<double> ctx;
  ctx.layout = &layout;
  auto s = fx.layer.forward(x, Granularity::kSentence, ctx);
  auto t = fx.layer.forward(x, Granularity::kToken, ctx);
  EXPECT_EQ(s.gate_evaluations, 1);
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(s.y.at(i), t.y.at(i), 1e-12);
  for (int r = 0; r < 5; ++r) EXPECT_EQ(s.decision.experts[static_cast<std::size_t>(r)], t.decision.experts[0]);
}

TEST(MoeForward, OneDecisionPerSentence) {
  LayerFixture fx(8, 2);
  Rng rng(5);
  auto x = random_rows<double>(rng, 12, 4);
  TokenLayout layout;
  layout.sentence_of_row = {0, 0, 0, 1, 1, -1, 2, 2, 2, 2, 3, -1};
  layout.task_of_sentence = {0, 0, 0, 0};
  layout.n_sentences = 4;
  MoeContext<double> ctx;
  ctx.layout = &layout;
  auto out = fx.layer.forward(x, Granularity::kSentence, ctx);
  EXPECT_EQ(out.gate_evaluations, 4);
  std::vector<std::set<std::vector<std::int64_t>>> per_sentence(4);
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    per_sentence[static_cast<std::size_t>(layout.sentence_of_row[static_cast<std::size_t>(out.rows[i])])].insert(out.decision.experts[i]);
  }
  for (const auto& s : per_sentence) EXPECT_EQ(s.size(), 1u);
  // Pad rows are untouched.
  for (int j = 0; j < 4; ++j) {
    EXPECT_EQ(out.y.at(5 * 4 + j), 0.0);
    EXPECT_EQ(out.y.at(11 * 4 + j), 0.0);
  }
}

TEST(MoeForward, NonSelectedExpertsGetNoGradient) {
  LayerFixture fx(4, 1);
  Rng rng(7);
  auto x = random_rows<double>(rng, 1, 4);
  auto out = fx.layer.forward(x, Granularity::kToken);
  sum(out.y).backward();
  const auto chosen = out.decision.experts[0][0];
  for (std::int64_t e = 0; e < 4; ++e) {
    const auto& ex = fx.layer.experts()[static_cast<std::size_t>(e)];
    double g = 0;
    for (auto v : ex.w_in.grad()) g += std::abs(v);
    if (e == chosen) {
      EXPECT_GT(g, 0.0);
    } else {
      EXPECT_EQ(g, 0.0);
    }
  }
}

TEST(MoeForward, CapacityDropsPassThroughAsZero) {
  ParameterSet<double> ps(3);
  MoeConfig cfg;
  cfg.n_experts = 2;
  cfg.capacity_factor = 0.5;
  MoELayer<double> layer(ps, "m", 4, 6, cfg);
  Rng rng(4);
  auto x = random_rows<double>(rng, 8, 4);
  auto out = layer.forward(x, Granularity::kToken);
  std::int64_t empty = 0;
  for (std::size_t t = 0; t < out.decision.units(); ++t) {
    if (out.decision.experts[t].empty()) {
      ++empty;
      for (int j = 0; j < 4; ++j) EXPECT_EQ(out.y.at(static_cast<std::int64_t>(t) * 4 + j), 0.0);
    }
  }
  EXPECT_EQ(empty, out.stats.dropped_tokens);
  EXPECT_EQ(out.stats.dropped_tokens, 4);
}

TEST(MoeForward, GradCheckWithFrozenRouting) {
  for (int seed = 0; seed < 20; ++seed) {
    ParameterSet<double> ps(static_cast<std::uint64_t>(seed) + 100);
    MoeConfig cfg;
    cfg.n_experts = 3;
    cfg.k = 2;
    MoELayer<double> layer(ps, "m", 4, 5, cfg);
    Rng rng(static_cast<std::uint64_t>(seed));
    auto x = random_rows<double>(rng, 4, 4);
    auto target = random_rows<double>(rng, 4, 4);
    RoutingTape<double> tape;
    MoeContext<double> ctx;
    ctx.tape = &tape;
    std::function<D()> f = [&] {
      tape.begin_pass();
      auto out = layer.forward(x, Granularity::kToken, ctx);
      auto loss = add(sum(mul(out.y, target)), aux_load_balance_loss(out.stats));
      tape.set_mode(RoutingTape<double>::Mode::kReplay);
      return loss;
    };
    auto params = ps.tensors();
    params.push_back(x);
    const auto r = grad_check_params<double>(f, params, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-2) << "seed " << seed;
  }
}

TEST(MoeForward, ExactNormalizerAlsoChecks) {
  ParameterSet<double> ps(5);
  MoeConfig cfg;
  cfg.n_experts = 4;
  cfg.k = 2;
  cfg.detach_normalizer = false;
  MoELayer<double> layer(ps, "m", 4, 5, cfg);
  Rng rng(9);
  auto x = random_rows<double>(rng, 4, 4);
  auto target = random_rows<double>(rng, 4, 4);
  RoutingTape<double> tape;
  MoeContext<double> ctx;
  ctx.tape = &tape;
  std::function<D()> f = [&] {
    tape.begin_pass();
    auto out = layer.forward(x, Granularity::kToken, ctx);
    tape.set_mode(RoutingTape<double>::Mode::kReplay);
    return sum(mul(out.y, target));
  };
  EXPECT_LT(grad_check_params<double>(f, ps.tensors(), 1e-6).max_rel_error, 1e-4);
}

}  // namespace
}  // namespace tmoe
