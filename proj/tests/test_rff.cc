#include <optional>
#include <random>

#include "doctest.h"
#include "dcp/errors.h"
#include "dcp/rff.h"
#include "support.h"

using namespace dcp;
using dcp::testing::random_tensor;

namespace {

Var scalar_node(Graph& g, double v) { return g.constant(Tensor({1, 1}, {v})); }

Tensor identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = 1.0;
  return t;
}

}  // namespace

TEST_CASE("embed dim must be at most a quarter of the channels") {
  std::mt19937_64 rng(1);
  CHECK_NOTHROW(RffParams::init(32, 8, rng));
  CHECK_THROWS_AS(RffParams::init(32, 9, rng), ConfigError);
  CHECK_THROWS_AS(RffParams::init(32, 0, rng), ConfigError);
}

TEST_CASE("embedding shapes and identity value path") {
  std::mt19937_64 rng(2);
  RffParams p = RffParams::init(32, 8, rng);
  Graph g;
  const Tensor fl = random_tensor({8, 8, 32}, rng);
  const Tensor fc = random_tensor({8, 8, 32}, rng);
  Embeddings e = embed_features(g, g.constant(fl), g.constant(fc), p);
  CHECK(g.value(e.theta).shape() == Shape{8, 8, 8});
  CHECK(g.value(e.phi).shape() == Shape{8, 8, 8});
  CHECK(g.value(e.g).shape() == Shape{8, 8, 32});

  p.g_w = identity(32);
  p.g_b = Tensor({32});
  Graph fresh;
  e = embed_features(fresh, fresh.constant(fl), fresh.constant(fc), p);
  CHECK(fresh.value(e.g) == fc);

  CHECK_THROWS_AS(embed_features(g, g.constant(fl), g.constant(Tensor({8, 4, 32})), p),
                  DimensionError);
}

TEST_CASE("fusion grid above the affinity cap is rejected") {
  std::mt19937_64 rng(3);
  const RffParams p = RffParams::init(4, 1, rng);
  Graph g;
  const Var big = g.constant(Tensor({16, 17, 4}));
  CHECK_THROWS_AS(embed_features(g, big, big, p), ConfigError);
  const Var edge = g.constant(Tensor({16, 16, 4}));
  CHECK_NOTHROW(embed_features(g, edge, edge, p));
}

TEST_CASE("affinity reference cases") {
  Graph g;
  const Var zero = g.constant(Tensor({8, 8, 8}));
  const Tensor& a = g.value(affinity(g, zero, zero));
  CHECK(a.shape() == Shape{64, 64});
  for (double v : a.data()) CHECK(v == doctest::Approx(1.0 / 64.0).epsilon(1e-15));

  const Var t = g.constant(Tensor({1, 2, 2}, {1, 0, 0, 1}));
  const Tensor& two = g.value(affinity(g, t, t));
  CHECK(two[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(two[1] == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK(two[2] == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK(two[3] == doctest::Approx(0.7311).epsilon(1e-4));

  CHECK_THROWS_AS(affinity(g, t, g.constant(Tensor({1, 2, 3}))), DimensionError);
}

TEST_CASE("affinity rows are probability vectors") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    Graph g;
    const Var th = g.constant(random_tensor({4, 4, 3}, rng, -6.0, 6.0));
    const Var ph = g.constant(random_tensor({4, 4, 3}, rng, -6.0, 6.0));
    const Tensor& a = g.value(affinity(g, th, ph));
    for (std::size_t r = 0; r < 16; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 16; ++c) {
        CHECK(a[r * 16 + c] >= 0.0);
        total += a[r * 16 + c];
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("related feature reference cases") {
  std::mt19937_64 rng(5);
  Graph g;
  const Tensor gout = random_tensor({2, 3, 4}, rng);
  const Var gv = g.constant(gout);
  CHECK(g.value(related_feature(g, g.constant(identity(6)), gv)) == gout);

  const Tensor& avg = g.value(related_feature(g, g.constant(Tensor({6, 6}, 1.0 / 6.0)), gv));
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (std::size_t p = 0; p < 6; ++p) mean += gout[p * 4 + c] / 6.0;
    for (std::size_t p = 0; p < 6; ++p) CHECK(avg[p * 4 + c] == doctest::Approx(mean));
  }
  CHECK_THROWS_AS(related_feature(g, g.constant(identity(5)), gv), DimensionError);
}

TEST_CASE("related feature stays inside the per-channel hull of g(F_c)") {
  std::mt19937_64 rng(6);
  const RffParams p = RffParams::init(8, 2, rng);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const Var fl = g.constant(random_tensor({3, 3, 8}, rng, -3.0, 3.0));
    const Var fc = g.constant(random_tensor({3, 3, 8}, rng, -3.0, 3.0));
    const Embeddings e = embed_features(g, fl, fc, p);
    const Tensor& gv = g.value(e.g);
    const Tensor& fr = g.value(related_feature(g, affinity(g, e.theta, e.phi), e.g));
    for (std::size_t c = 0; c < 8; ++c) {
      double lo = gv[c], hi = gv[c];
      for (std::size_t q = 0; q < 9; ++q) {
        lo = std::min(lo, gv[q * 8 + c]);
        hi = std::max(hi, gv[q * 8 + c]);
      }
      for (std::size_t q = 0; q < 9; ++q) {
        CHECK(fr[q * 8 + c] >= lo - 1e-12);
        CHECK(fr[q * 8 + c] <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("fusion limits and hand arithmetic") {
  std::mt19937_64 rng(7);
  Graph g;
  const Tensor local = random_tensor({2, 2, 3}, rng);
  const Var fl = g.constant(local);
  const std::vector<std::optional<Var>> related = {g.constant(random_tensor({2, 2, 3}, rng))};
  const std::vector<Var> w = {scalar_node(g, 1.0)};

  CHECK(g.value(fuse(g, fl, related, scalar_node(g, 1.0), w, {true, false})) == local);

  const Tensor& off = g.value(fuse(g, fl, related, scalar_node(g, 0.3), w, {false, false}));
  CHECK(off == local);
  const Tensor& literal = g.value(fuse(g, fl, related, scalar_node(g, 0.3), w, {false, true}));
  for (std::size_t i = 0; i < local.size(); ++i) CHECK(literal[i] == 0.3 * local[i]);

  const std::vector<std::optional<Var>> four = {g.constant(Tensor({2, 2, 3}, 4.0))};
  const Tensor& three =
      g.value(fuse(g, g.constant(Tensor({2, 2, 3}, 2.0)), four, scalar_node(g, 0.5), w, {}));
  for (double v : three.data()) CHECK(v == 3.0);
}

TEST_CASE("fusion needs a feature for every nonzero weight") {
  Graph g;
  const Var fl = g.constant(Tensor({1, 1, 2}, 1.0));
  const std::vector<std::optional<Var>> related = {std::nullopt, g.constant(Tensor({1, 1, 2}, 2.0))};
  const std::vector<Var> dropped = {scalar_node(g, 0.0), scalar_node(g, 0.6)};
  CHECK_NOTHROW(fuse(g, fl, related, scalar_node(g, 0.5), dropped, {}));
  const std::vector<Var> missing = {scalar_node(g, 0.4), scalar_node(g, 0.6)};
  CHECK_THROWS_AS(fuse(g, fl, related, scalar_node(g, 0.5), missing, {}), ProtocolError);
  const std::vector<Var> short_w = {scalar_node(g, 1.0)};
  CHECK_THROWS_AS(fuse(g, fl, related, scalar_node(g, 0.5), short_w, {}), DimensionError);
}

TEST_CASE("fusion is linear in each input map") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const Tensor a = random_tensor({2, 2, 2}, rng), b = random_tensor({2, 2, 2}, rng);
    const Tensor r1 = random_tensor({2, 2, 2}, rng), r2 = random_tensor({2, 2, 2}, rng);
    const double p = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double s = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const std::vector<Var> w = {scalar_node(g, s), scalar_node(g, 1.0 - s)};
    auto run = [&](const Tensor& l, const Tensor& x) {
      const std::vector<std::optional<Var>> rel = {g.constant(x), g.constant(r2)};
      return g.value(fuse(g, g.constant(l), rel, scalar_node(g, p), w, {}));
    };
    Tensor sum_l = a, sum_x = r1;
    for (std::size_t i = 0; i < a.size(); ++i) {
      sum_l[i] += b[i];
      sum_x[i] += r1[i];
    }
    const Tensor base = run(a, r1);
    const Tensor lin_l = run(sum_l, r1);
    const Tensor lin_x = run(a, sum_x);
    const Tensor only_b = run(b, r1);
    for (std::size_t i = 0; i < a.size(); ++i) {
      // O(a + b) - O(a) = p * b
      CHECK(lin_l[i] - base[i] == doctest::Approx(p * b[i]));
      CHECK(only_b[i] - base[i] == doctest::Approx(p * (b[i] - a[i])));
      CHECK(lin_x[i] - base[i] == doctest::Approx((1.0 - p) * s * r1[i]));
    }
  }
}

TEST_CASE("gradient check through the full related-feature path") {
  std::mt19937_64 rng(9);
  RffParams p = RffParams::init(8, 2, rng);
  for (Tensor* b : {&p.theta_b, &p.g_b}) *b = random_tensor(b->shape(), rng);
  const Tensor fl = random_tensor({2, 3, 8}, rng);
  const Tensor fc = random_tensor({2, 3, 8}, rng);
  const Tensor probe = random_tensor({2, 3, 8}, rng);
  Tensor conf({1, 1}, {0.3});
  std::vector<Tensor*> params;
  p.for_each([&params](const char*, Tensor& t) { params.push_back(&t); });
  params.push_back(&conf);
  const GradCheckResult r = grad_check(
      [&](Graph& g) {
        const Var l = g.constant(fl);
        const std::vector<std::optional<Var>> rel = {related_feature_for(g, l, g.constant(fc), p)};
        const std::vector<Var> w = {g.constant(Tensor({1, 1}, {1.0}))};
        const Var o = fuse(g, l, rel, g.param(conf), w, {});
        return sum(g, mul(g, o, g.constant(probe)));
      },
      params, 1e-5);
  CHECK(r.max_rel_error < 1e-4);
}
