#include <algorithm>
#include <random>

#include "doctest.h"
#include "dcp/errors.h"
#include "dcp/smim.h"
#include "support.h"

using namespace dcp;
using dcp::testing::random_tensor;

namespace {

std::vector<double> row(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

SmimParams zero_bias_params(std::mt19937_64& rng) {
  SmimParams p = SmimParams::init(32, 128, 32, rng);
  for (Tensor* b : {&p.theta_q_b, &p.theta_k_b, &p.theta_r_b}) {
    for (double& v : b->data()) v = 0.0;
  }
  return p;
}

}  // namespace

TEST_CASE("request size must compress the key") {
  std::mt19937_64 rng(1);
  CHECK_NOTHROW(SmimParams::init(32, 128, 64, rng));
  CHECK_THROWS_AS(SmimParams::init(32, 128, 65, rng), ConfigError);
  CHECK_THROWS_AS(SmimParams::init(32, 128, 0, rng), ConfigError);
  CHECK_NOTHROW(SmimParams::init(32, 128, 128, rng, false));
  CHECK_THROWS_AS(SmimParams::init(32, 128, 129, rng, false), ConfigError);
}

TEST_CASE("query, key and request encoders") {
  std::mt19937_64 rng(2);
  const SmimParams p = zero_bias_params(rng);
  Graph g;
  const Var zero = g.constant(Tensor({8, 8, 32}));
  const QueryKey qk = encode_query_key(g, zero, p);
  CHECK(g.value(qk.q).shape() == Shape{1, 128});
  CHECK(g.value(qk.k).shape() == Shape{1, 128});
  for (double v : g.value(qk.q).data()) CHECK(v == 0.0);
  for (double v : g.value(qk.k).data()) CHECK(v == 0.0);
  const Var r = encode_request(g, zero, p);
  CHECK(g.value(r).shape() == Shape{1, 32});
  for (double v : g.value(r).data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(encode_query_key(g, g.constant(Tensor({8, 8, 16})), p), DimensionError);
}

TEST_CASE("self confidence reference values") {
  const std::vector<double> q = {1, 0, 0}, k = {0, 5, 0};
  CHECK(self_confidence(q, k) == 0.5);
  const std::vector<double> a = {2, 1}, b = {1, 2};
  CHECK(self_confidence(a, b) == doctest::Approx(0.98201).epsilon(1e-5));
  const std::vector<double> short_k = {1};
  CHECK_THROWS_AS(self_confidence(a, short_k), DimensionError);
}

TEST_CASE("scaling the query keeps the side of one half") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto q = row(random_tensor({6}, rng));
    const auto k = row(random_tensor({6}, rng));
    const double lambda = std::uniform_real_distribution<double>(0.1, 10.0)(rng);
    std::vector<double> ql = q;
    for (double& v : ql) v *= lambda;
    const double p = self_confidence(q, k);
    const double pl = self_confidence(ql, k);
    CHECK((p > 0.5) == (pl > 0.5));
    CHECK((p < 0.5) == (pl < 0.5));
  }
}

TEST_CASE("request decision") {
  SmimConfig c;
  CHECK_FALSE(decide_request(0.95, c));
  CHECK(decide_request(0.3, c));
  CHECK_FALSE(decide_request(0.8, c));
  c.request_threshold = 1.0;
  CHECK(decide_request(0.999999, c));
  CHECK_FALSE(decide_request(1.0, c));
  c.request_threshold = 0.0;
  CHECK_FALSE(decide_request(0.0, c));
  CHECK_FALSE(decide_request(1e-12, c));
}

TEST_CASE("config validation") {
  SmimConfig c;
  CHECK(c.collaboration_threshold() == doctest::Approx(1.0 / 3.0));
  c.num_platforms = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.num_platforms = 4;
  c.request_threshold = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("candidate relevance") {
  std::mt19937_64 rng(4);
  const auto r = row(random_tensor({4}, rng));
  const auto k = row(random_tensor({8}, rng));
  CHECK(candidate_relevance(r, k, Tensor({4, 8})) == 0.0);

  std::vector<double> e_r(4, 0.0), e_k(8, 0.0);
  e_r[0] = 1.0;
  e_k[0] = 1.0;
  Tensor eye({4, 8});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 8 + i] = 1.0;
  CHECK(candidate_relevance(e_r, e_k, eye) == 1.0);

  CHECK_THROWS_AS(candidate_relevance(r, k, Tensor({4, 7})), DimensionError);
}

TEST_CASE("relevance is independent of evaluation order on exact inputs") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> small(-4, 4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor r({1, 3}), w({3, 5}), k({1, 5});
    for (Tensor* t : {&r, &w, &k}) {
      for (double& v : t->data()) v = small(rng);
    }
    Graph g;
    const Var rv = g.constant(r), wv = g.constant(w), kv = g.constant(k);
    const double left =
        g.value(matmul(g, rv, matmul(g, wv, transpose(g, kv)))).item();
    const double right =
        g.value(matmul(g, matmul(g, rv, wv), transpose(g, kv))).item();
    CHECK(left == right);
    CHECK(g.value(candidate_relevance(g, rv, kv, wv)).item() == left);
    CHECK(candidate_relevance(row(r), row(k), w) == left);
  }
}

TEST_CASE("match scores") {
  const std::vector<double> equal = {0.4, 0.4, 0.4};
  for (double s : match_scores(equal)) CHECK(s == doctest::Approx(1.0 / 3.0));
  const std::vector<double> one = {-3.0};
  CHECK(match_scores(one) == std::vector<double>{1.0});
  const std::vector<double> logits = {1, 2, 3};
  const auto s = match_scores(logits);
  CHECK(s[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(s[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(s[2] == doctest::Approx(0.66524).epsilon(1e-4));
  CHECK_THROWS_AS(match_scores(std::vector<double>{}), ProtocolError);
}

TEST_CASE("supporter selection") {
  CHECK(select_supporters(std::vector<double>{0.5, 0.3, 0.2}, 4) ==
        std::vector<std::size_t>{0});
  const double third = 1.0 / 3.0;
  CHECK(select_supporters(std::vector<double>{third, third, third}, 4).empty());
  CHECK(select_supporters(std::vector<double>{1.0}, 2) == std::vector<std::size_t>{0});
  CHECK(select_supporters(std::vector<double>{0.1, 0.45, 0.45}, 4) ==
        std::vector<std::size_t>{1, 2});
  CHECK_THROWS_AS(select_supporters(std::vector<double>{1.0}, 1), ConfigError);
}

TEST_CASE("match score properties over random logits") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + trial % 6;
    auto logits = row(random_tensor({n}, rng, -5.0, 5.0));
    const auto s = match_scores(logits);
    double total = 0.0;
    for (double v : s) total += v;
    CHECK(std::abs(total - 1.0) < 1e-9);

    // Shift invariance of the ranking and the supporter set.
    std::vector<double> shifted = logits;
    for (double& v : shifted) v += 17.25;
    const auto ss = match_scores(shifted);
    CHECK(select_supporters(s, n + 1) == select_supporters(ss, n + 1));
    CHECK(std::max_element(s.begin(), s.end()) - s.begin() ==
          std::max_element(ss.begin(), ss.end()) - ss.begin());

    // Raising one logit raises its own score and lowers no other above it.
    if (n >= 2) {
      std::vector<double> raised = logits;
      raised[0] += 0.5;
      const auto sr = match_scores(raised);
      CHECK(sr[0] > s[0]);
      for (std::size_t j = 1; j < n; ++j) CHECK(sr[j] <= s[j]);
    }

    // One candidate is the N = 2 fallback, exempt from the bound.
    for (std::size_t j : n >= 2 ? select_supporters(s, n + 1) : std::vector<std::size_t>{}) {
      CHECK(s[j] > 1.0 / static_cast<double>(n));
    }
  }
}

TEST_CASE("gradient of the confidence reaches the query encoder") {
  std::mt19937_64 rng(7);
  SmimParams p = SmimParams::init(8, 8, 4, rng);
  const Tensor feat = random_tensor({2, 2, 8}, rng);
  std::vector<Tensor*> params;
  p.for_each([&params](const char*, Tensor& t) { params.push_back(&t); });
  const GradCheckResult r = grad_check(
      [&](Graph& g) {
        const QueryKey qk = encode_query_key(g, g.constant(feat), p);
        const Var conf = self_confidence(g, qk.q, qk.k);
        const Var req = encode_request(g, g.constant(feat), p);
        const Var rel = candidate_relevance(g, req, qk.k, g.param(p.w_alpha));
        return add(g, sum(g, conf), sum(g, sigmoid(g, rel)));
      },
      params, 1e-5);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.per_block[0] < 1e-4);
}
