#include <gtest/gtest.h>

#include <functional>
#include <memory>
#include <set>
#include <vector>

#include "tmoe/adapters.hpp"
#include "tmoe/grad_check.hpp"
#include "tmoe/rng.hpp"

namespace tmoe {
namespace {

using D = BasicTensor<double>;

D random_rows(Rng& rng, std::int64_t r, std::int64_t c, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(r * c));
  for (auto& x : v) x = rng.normal() * scale;
  return D::from_data({r, c}, std::move(v));
}

void randomize(std::vector<D> params, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : params) {
    for (auto& v : p.mutable_data()) v = rng.normal() * 0.5;
  }
}

std::shared_ptr<TaskEmbeddingTable<double>> make_table(ParameterSet<double>& ps, std::int64_t m, std::int64_t d) {
  auto t = std::make_shared<TaskEmbeddingTable<double>>();
  t->table = ps.add("task_embedding", {m, d}, Init::normal(1.0));
  return t;
}

TokenLayout rows_with_tasks(const std::vector<std::int64_t>& tasks) {
  TokenLayout l;
  for (std::size_t i = 0; i < tasks.size(); ++i) l.sentence_of_row.push_back(static_cast<std::int64_t>(i));
  l.task_of_sentence = tasks;
  l.n_sentences = static_cast<std::int64_t>(tasks.size());
  return l;
}

TEST(AdapterCount, Examples) {
  EXPECT_EQ(adapter_count(4, AdapterMode::kDynamic), 2);
  EXPECT_EQ(adapter_count(1, AdapterMode::kDynamic), 1);
  EXPECT_EQ(adapter_count(18, AdapterMode::kDynamic), 5);
  EXPECT_EQ(adapter_count(18, AdapterMode::kSharedDynamic), 5);
  EXPECT_EQ(adapter_count(6, AdapterMode::kDynamic), 3);
  EXPECT_EQ(adapter_count(8, AdapterMode::kDynamic), 3);
  EXPECT_EQ(adapter_count(6, AdapterMode::kStatic), 6);
  for (std::int64_t m = 2; m <= 64; ++m) EXPECT_LT(adapter_count(m, AdapterMode::kDynamic), m);
}

TEST(StaticRoute, IdentityAndUnknownTask) {
  ParameterSet<double> ps(1);
  TaskAdapterBank<double> bank(ps, "b", AdapterMode::kStatic, 4, 3, 5, nullptr);
  EXPECT_EQ(bank.n_adapters(), 4);
  EXPECT_EQ(bank.static_route(3), 3);
  try {
    bank.static_route(99);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::kUnknownTask);
  }
}

TEST(StaticRoute, ContentIndependent) {
  ParameterSet<double> ps(2);
  TaskAdapterBank<double> bank(ps, "b", AdapterMode::kStatic, 3, 4, 5, nullptr);
  Rng rng(3);
  auto layout = rows_with_tasks({2, 0, 2, 1});
  for (int trial = 0; trial < 5; ++trial) {
    auto out = bank.forward(random_rows(rng, 4, 4), layout);
    EXPECT_EQ(out.decision.experts,
              (std::vector<std::vector<std::int64_t>>{{2}, {0}, {2}, {1}}));
  }
}

TEST(AdapterForward, ZeroWeightsAreIdentity) {
  ParameterSet<double> ps(4);
  auto a = Adapter<double>::make(ps, "a", 4, 3);
  for (auto& p : ps.tensors()) {
    auto h = p;
    for (auto& v : h.mutable_data()) v = 0.0;
  }
  Rng rng(1);
  auto x = random_rows(rng, 3, 4);
  auto y = adapter_forward(x, a);
  for (int i = 0; i < 12; ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST(AdapterForward, FreshUpProjectionIsIdentity) {
  ParameterSet<double> ps(4);
  auto a = Adapter<double>::make(ps, "a", 4, 3);
  Rng rng(1);
  auto x = random_rows(rng, 3, 4);
  auto y = adapter_forward(x, a);
  for (int i = 0; i < 12; ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST(AdapterForward, BottleneckOracle) {
  ParameterSet<double> ps(5);
  auto a = Adapter<double>::make(ps, "a", 3, 2);
  randomize(ps.tensors(), 8);
  Rng rng(2);
  auto x = random_rows(rng, 2, 3);
  auto y = adapter_forward(x, a);
  const auto wd = a.w_down.data(), bd = a.b_down.data(), wu = a.w_up.data(), bu = a.b_up.data();
  for (int r = 0; r < 2; ++r) {
    double h[2];
    for (int j = 0; j < 2; ++j) {
      double s = bd[j];
      for (int i = 0; i < 3; ++i) s += x.at(r * 3 + i) * wd[i * 2 + j];
      h[j] = s > 0 ? s : 0;
    }
    for (int i = 0; i < 3; ++i) {
      double s = bu[i];
      for (int j = 0; j < 2; ++j) s += h[j] * wu[j * 3 + i];
      EXPECT_NEAR(y.at(r * 3 + i), x.at(r * 3 + i) + s, 1e-12);
    }
  }
}

TEST(AdapterForward, TwoIdenticalAdaptersEqualOne) {
  ParameterSet<double> ps(6);
  auto table = make_table(ps, 4, 3);
  TaskAdapterBank<double> bank(ps, "b", AdapterMode::kDynamic, 4, 4, 5, table, 2);
  randomize(ps.tensors(), 9);
  const auto& ad = bank.adapters();
  for (auto [dst, src] : {std::pair{ad[1].w_down, ad[0].w_down}, {ad[1].b_down, ad[0].b_down}, {ad[1].w_up, ad[0].w_up}, {ad[1].b_up, ad[0].b_up}}) {
    auto d = dst.mutable_data();
    std::copy(src.data().begin(), src.data().end(), d.begin());
  }
  Rng rng(3);
  auto x = random_rows(rng, 5, 4);
  auto out = bank.forward(x, rows_with_tasks({0, 1, 2, 3, 0}));
  auto ref = adapter_forward(x, ad[0]);
  for (int i = 0; i < 20; ++i) EXPECT_NEAR(out.y.at(i), ref.at(i), 1e-12);
}

TEST(DynamicRoute, DeterministicAndZeroGate) {
  ParameterSet<double> ps(7);
  auto table = make_table(ps, 4, 3);
  TaskAdapterBank<double> bank(ps, "b", AdapterMode::kDynamic, 4, 4, 5, table);
  EXPECT_EQ(bank.n_adapters(), 2);
  Rng rng(1);
  auto row = random_rows(rng, 1, 4);
  std::vector<double> flat(row.data().begin(), row.data().end());
  flat.insert(flat.end(), row.data().begin(), row.data().end());
  auto x = D::from_data({2, 4}, flat);
  auto d = bank.dynamic_route(x, 2);
  EXPECT_EQ(d.experts[0], d.experts[1]);
  auto w = bank.gate().w_t;
  for (auto& v : w.mutable_data()) v = 0.0;
  auto z = bank.dynamic_route(random_rows(rng, 3, 4), 1);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(z.experts[t], (std::vector<std::int64_t>{0}));
    EXPECT_DOUBLE_EQ(z.distribution[t][0], 0.5);
  }
}

TEST(DynamicRoute, MatchesConcatMatmulSoftmaxOracle) {
  ParameterSet<double> ps(8);
  auto table = make_table(ps, 6, 3);
  TaskAdapterBank<double> bank(ps, "b", AdapterMode::kDynamic, 6, 4, 5, table);
  randomize(ps.tensors(), 2);
  Rng rng(4);
  auto x = random_rows(rng, 5, 4);
  const std::int64_t task = 4;
  auto d = bank.dynamic_route(x, task);
  const auto l = bank.n_adapters();
  const auto w = bank.gate().w_t.data();
  const auto emb = table->table.data();
  for (int r = 0; r < 5; ++r) {
    std::vector<double> in;
    for (int i = 0; i < 4; ++i) in.push_back(x.at(r * 4 + i));
    for (int i = 0; i < 3; ++i) in.push_back(emb[task * 3 + i]);
    std::vector<double> logits(static_cast<std::size_t>(l), 0.0);
    for (std::int64_t a = 0; a < l; ++a) {
      for (std::size_t i = 0; i < in.size(); ++i) logits[static_cast<std::size_t>(a)] += in[i] * w[i * l + a];
    }
    double z = 0;
    for (auto v : logits) z += std::exp(v);
    std::int64_t best = 0;
    for (std::int64_t a = 0; a < l; ++a) {
      EXPECT_NEAR(d.distribution[static_cast<std::size_t>(r)][static_cast<std::size_t>(a)], std::exp(logits[static_cast<std::size_t>(a)]) / z, 1e-12);
      if (logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(best)]) best = a;
    }
    EXPECT_EQ(d.experts[static_cast<std::size_t>(r)][0], best);
  }
}

TEST(DynamicRoute, DistinctAdaptersBoundedByL) {
  ParameterSet<double> ps(9);
  auto table = make_table(ps, 6, 3);
  TaskAdapterBank<double> bank(ps, "b", AdapterMode::kDynamic, 6, 4, 5, table);
  randomize(ps.tensors(), 3);
  Rng rng(5);
  std::vector<std::int64_t> tasks;
  for (int i = 0; i < 200; ++i) tasks.push_back(i % 6);
  auto out = bank.forward(random_rows(rng, 200, 4, 3.0), rows_with_tasks(tasks));
  std::set<std::int64_t> used;
  for (const auto& s : out.decision.experts) used.insert(s.begin(), s.end());
  EXPECT_LE(static_cast<std::int64_t>(used.size()), bank.n_adapters());
  EXPECT_LT(bank.n_adapters(), 6);
  for (const auto& w : out.decision.weights) {
    double s = 0;
    for (auto v : w) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Bank, PadRowsPassThrough) {
  ParameterSet<double> ps(10);
  TaskAdapterBank<double> bank(ps, "b", AdapterMode::kStatic, 2, 4, 5, nullptr);
  randomize(ps.tensors(), 4);
  Rng rng(6);
  auto x = random_rows(rng, 4, 4);
  TokenLayout l;
  l.sentence_of_row = {0, -1, 1, -1};
  l.task_of_sentence = {0, 1};
  l.n_sentences = 2;
  auto out = bank.forward(x, l);
  for (int j = 0; j < 4; ++j) {
    EXPECT_EQ(out.y.at(4 + j), x.at(4 + j));
    EXPECT_EQ(out.y.at(12 + j), x.at(12 + j));
    EXPECT_NE(out.y.at(j), x.at(j));
  }
}

TEST(Bank, SharedTableIsSingleObject) {
  ParameterSet<double> ps(11);
  auto table = make_table(ps, 4, 3);
  TaskAdapterBank<double> a(ps, "a", AdapterMode::kSharedDynamic, 4, 4, 5, table);
  TaskAdapterBank<double> b(ps, "b", AdapterMode::kSharedDynamic, 4, 4, 5, table);
  EXPECT_EQ(a.embedding().get(), b.embedding().get());
  EXPECT_EQ(a.embedding()->table.node().get(), table->table.node().get());
  // Write through one handle, read through the other.
  auto h = a.embedding()->table;
  h.mutable_data()[5] = 42.0;
  EXPECT_EQ(b.embedding()->table.at(5), 42.0);
}

class BankGradients : public ::testing::TestWithParam<AdapterMode> {};

TEST_P(BankGradients, FrozenRoutingBelowTolerance) {
  for (int seed = 0; seed < 20; ++seed) {
    ParameterSet<double> ps(static_cast<std::uint64_t>(seed) + 40);
    const auto mode = GetParam();
    auto table = mode == AdapterMode::kStatic ? nullptr : make_table(ps, 4, 3);
    TaskAdapterBank<double> bank(ps, "b", mode, 4, 4, 5, table, mode == AdapterMode::kStatic ? 1 : 2);
    randomize(ps.tensors(), static_cast<std::uint64_t>(seed) + 7);
    Rng rng(static_cast<std::uint64_t>(seed));
    auto x = random_rows(rng, 4, 4);
    auto target = random_rows(rng, 4, 4);
    auto layout = rows_with_tasks({0, 3, 1, 2});
    RoutingTape<double> tape;
    std::function<D()> f = [&] {
      tape.begin_pass();
      auto out = bank.forward(x, layout, &tape);
      tape.set_mode(RoutingTape<double>::Mode::kReplay);
      return sum(mul(out.y, target));
    };
    auto params = ps.tensors();
    params.push_back(x);
    const auto r = grad_check_params<double>(f, params, 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-3) << "seed " << seed << " param " << r.worst_param;
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, BankGradients,
                         ::testing::Values(AdapterMode::kStatic, AdapterMode::kDynamic, AdapterMode::kSharedDynamic));

}  // namespace
}  // namespace tmoe
