#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "trfeddis/gradcheck.hpp"
#include "trfeddis/losses.hpp"

using namespace trfeddis;
using nd::Graph;
using nd::Tensor64;
using nd::Var;

namespace {

Tensor64 onehot(std::vector<std::size_t> labels, std::size_t k) {
  return losses::one_hot<double>(labels, k);
}

Tensor64 row(std::vector<double> v) {
  const std::size_t k = v.size();
  return Tensor64({1, k}, std::move(v));
}

double eval_scalar(const std::function<Var<double>(Graph<double>&)>& f) {
  Graph<double> g;
  return f(g).value().item();
}

// splits a [B, 2K] tensor into its left and right [B, K] halves
std::pair<Var<double>, Var<double>> halves(Graph<double>& g, Var<double> packed, std::size_t k) {
  auto sel = [&](std::size_t off) {
    Tensor64 s({2 * k, k});
    for (std::size_t i = 0; i < k; ++i) s.at(off + i, i) = 1.0;
    return nd::matmul(packed, g.constant(std::move(s)));
  };
  return {sel(0), sel(k)};
}

std::vector<std::size_t> labels_for(std::size_t b, std::size_t k) {
  std::vector<std::size_t> y(b);
  for (std::size_t i = 0; i < b; ++i) y[i] = (i * 7 + 1) % k;
  return y;
}

}  // namespace

TEST(Anneal, LinearRamp) {
  const losses::AnnealSchedule s{0.8, 100};
  EXPECT_EQ(losses::anneal(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(losses::anneal(s, 50), 0.4);
  EXPECT_DOUBLE_EQ(losses::anneal(s, 100), 0.8);
  EXPECT_DOUBLE_EQ(losses::anneal(s, 1000), 0.8);
  EXPECT_DOUBLE_EQ(losses::anneal({0.3, 0}, 0), 0.3);
}

TEST(OneHot, RowsAndErrors) {
  const auto y = onehot({2, 0}, 3);
  EXPECT_EQ(y, Tensor64({2, 3}, std::vector<double>{0, 0, 1, 1, 0, 0}));
  EXPECT_THROW(onehot({3}, 3), std::out_of_range);
}

TEST(CrossEntropy, Values) {
  const double ce = eval_scalar([](Graph<double>& g) {
    return losses::cross_entropy(g.constant(row({0.5, 0.5})), onehot({1}, 2));
  });
  EXPECT_NEAR(ce, std::log(2.0), 1e-15);
  // a zero probability on the true class is clamped, not infinite
  const double clamped = eval_scalar([](Graph<double>& g) {
    return losses::cross_entropy(g.constant(row({1.0, 0.0})), onehot({1}, 2));
  });
  EXPECT_NEAR(clamped, -std::log(losses::kLogFloor), 1e-9);
}

TEST(DceLoss, HarmonicAnchor) {
  // psi(6) - psi(3) = 1/3 + 1/4 + 1/5
  const double v = eval_scalar([](Graph<double>& g) {
    return losses::dce_loss(g.constant(row({3, 2, 1})), onehot({0}, 3));
  });
  EXPECT_NEAR(v, 0.78333333333, 1e-6);
  EXPECT_NEAR(v, 1.0 / 3 + 0.25 + 0.2, 1e-12);
  // uniform Dirichlet with K=2, class 1: psi(2) - psi(1) = 1
  const double u = eval_scalar([](Graph<double>& g) {
    return losses::dce_loss(g.constant(row({1, 1})), onehot({1}, 2));
  });
  EXPECT_NEAR(u, 1.0, 1e-12);
}

TEST(DceLoss, DecreasesWithTrueClassEvidence) {
  auto rng = testutil::test_rng(1);
  for (int t = 0; t < 200; ++t) {
    auto alpha = testutil::uniform_tensor(rng, {1, 4}, 1.0, 6.0);
    const std::size_t k = rng.below(4);
    auto y = onehot({k}, 4);
    auto f = [&](const Tensor64& a) {
      return eval_scalar([&](Graph<double>& g) { return losses::dce_loss(g.constant(a), y); });
    };
    const double before = f(alpha);
    alpha[k] += 0.05 + rng.uniform();
    EXPECT_LT(f(alpha), before);
  }
}

TEST(KlRegularizer, Anchors) {
  // alpha_tilde = (1, 5): lgamma(6) - lgamma(5) + 4 (psi(5) - psi(6)) = ln 5 - 4/5
  const double v = eval_scalar([](Graph<double>& g) {
    return losses::kl_regularizer(g.constant(row({9, 5})), onehot({0}, 2));
  });
  EXPECT_NEAR(v, 0.8094379124341004, 1e-12);
  // only true-class evidence: alpha_tilde = 1 everywhere
  const double z = eval_scalar([](Graph<double>& g) {
    return losses::kl_regularizer(g.constant(row({1, 1, 7.5})), onehot({2}, 3));
  });
  EXPECT_NEAR(z, 0.0, 1e-12);
}

TEST(KlRegularizer, NonNegative) {
  auto rng = testutil::test_rng(2);
  for (int t = 0; t < 500; ++t) {
    const auto alpha = testutil::uniform_tensor(rng, {4, 5}, 1.0, 20.0);
    const auto y = onehot(labels_for(4, 5), 5);
    const double v =
        eval_scalar([&](Graph<double>& g) { return losses::kl_regularizer(g.constant(alpha), y); });
    ASSERT_GE(v, -1e-12);
    ASSERT_GT(v, 0.0);  // wrong-class alpha > 1 almost surely
  }
}

TEST(UncertaintyLoss, Composition) {
  auto rng = testutil::test_rng(3);
  const auto alpha = testutil::uniform_tensor(rng, {3, 4}, 1.0, 5.0);
  const auto y = onehot(labels_for(3, 4), 4);
  const double dce = eval_scalar([&](Graph<double>& g) { return losses::dce_loss(g.constant(alpha), y); });
  const double kl = eval_scalar([&](Graph<double>& g) { return losses::kl_regularizer(g.constant(alpha), y); });
  const double un =
      eval_scalar([&](Graph<double>& g) { return losses::uncertainty_loss(g.constant(alpha), y, 0.3); });
  EXPECT_NEAR(un, dce + 0.3 * kl, 1e-12);
  Graph<double> g;
  EXPECT_THROW(losses::uncertainty_loss(g.constant(alpha), y, -0.1), std::invalid_argument);
}

TEST(LossInputs, Rejected) {
  Graph<double> g;
  EXPECT_THROW(losses::dce_loss(g.constant(row({0.5, 2.0})), onehot({0}, 2)), std::invalid_argument);
  EXPECT_THROW(losses::dce_loss(g.constant(row({1.5, 2.0})), row({1, 1})), std::invalid_argument);
  EXPECT_THROW(losses::dce_loss(g.constant(row({1.5, 2.0})), onehot({0}, 3)), nd::ShapeError);
  EXPECT_THROW(losses::disentangle_loss(g.constant(row({1, 2})), g.constant(row({1, 2, 3}))), nd::ShapeError);
}

TEST(DisentangleLoss, Anchors) {
  const double same = eval_scalar([](Graph<double>& g) {
    auto r = g.constant(Tensor64({2, 3}, std::vector<double>{1, -2, 0.5, 3, 3, 0}));
    return losses::disentangle_loss(r, r);
  });
  EXPECT_NEAR(same, 1.0, 1e-12);
  // P = (0.9, 0.1) from the local head, Q = (0.1, 0.9) from the global head
  const double two_point = eval_scalar([](Graph<double>& g) {
    auto local = g.constant(row({std::log(0.9), std::log(0.1)}));
    auto global = g.constant(row({std::log(0.1), std::log(0.9)}));
    return losses::disentangle_loss(global, local);
  });
  EXPECT_NEAR(two_point, std::exp(-0.8 * std::log(9.0)), 1e-12);
  EXPECT_NEAR(two_point, 0.1724, 1e-4);
}

TEST(DisentangleLoss, DecreasesAlongSeparatingRay) {
  const Tensor64 dir = row({1.0, -0.5, 0.2, -0.7});
  double prev = 1.0 + 1e-15;
  for (int i = 1; i <= 20; ++i) {
    const double t = 0.25 * i;
    const double v = eval_scalar([&](Graph<double>& g) {
      auto d = g.constant(dir);
      return losses::disentangle_loss(nd::scale(d, -t), nd::scale(d, t));
    });
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, prev) << t;
    prev = v;
  }
}

TEST(DisentangleLoss, MinimizingSeparatesFrozenFeatureHeads) {
  // encoder output fixed; two linear heads trained on lambda_d * L_dis only
  auto rng = testutil::test_rng(4);
  const auto feats = testutil::normal_tensor(rng, {8, 6});
  auto wg = testutil::normal_tensor(rng, {6, 5}, 0.1);
  auto wl = testutil::normal_tensor(rng, {6, 5}, 0.1);
  double prev = 2.0;
  for (int step = 0; step < 10; ++step) {
    Graph<double> g;
    auto f = g.constant(feats);
    auto vg = g.leaf(wg), vl = g.leaf(wl);
    auto loss = nd::scale(losses::disentangle_loss(nd::matmul(f, vg), nd::matmul(f, vl)), 0.1);
    const double v = loss.value().item();
    EXPECT_LT(v, prev) << step;
    prev = v;
    g.backward(loss);
    for (std::size_t i = 0; i < wg.size(); ++i) {
      wg[i] -= 5.0 * vg.grad()[i];
      wl[i] -= 5.0 * vl.grad()[i];
    }
  }
}

TEST(TotalLoss, StepZeroHasNoRegularizers) {
  auto rng = testutil::test_rng(5);
  const auto rg = testutil::normal_tensor(rng, {4, 3}), rl = testutil::normal_tensor(rng, {4, 3});
  const auto y = onehot(labels_for(4, 3), 3);
  losses::Objective obj;
  obj.lambda_u = {1.0, 100};
  obj.lambda_d = {0.1, 100};
  Graph<double> g;
  const auto r = losses::total_loss(g.constant(rg), g.constant(rl), y, 0, obj);
  const auto& b = r.breakdown;
  EXPECT_EQ(b.lambda_u, 0.0);
  EXPECT_EQ(b.lambda_d, 0.0);
  EXPECT_NEAR(b.l_total, b.l_un_global + b.l_un_local + b.l_un_fused + b.l_ce_global + b.l_ce_local, 1e-12);
  EXPECT_GT(b.l_dis, 0.0);  // still reported
}

TEST(TotalLoss, IdenticalHeadsAreSymmetric) {
  auto rng = testutil::test_rng(6);
  const auto r = testutil::normal_tensor(rng, {4, 3});
  Graph<double> g;
  const auto res = losses::total_loss(g.constant(r), g.constant(r), onehot(labels_for(4, 3), 3), 0,
                                      losses::Objective{});
  EXPECT_EQ(res.breakdown.l_un_global, res.breakdown.l_un_local);
  EXPECT_EQ(res.breakdown.l_ce_global, res.breakdown.l_ce_local);
  EXPECT_NEAR(res.breakdown.l_dis, 1.0, 1e-12);
}

TEST(TotalLoss, BreakdownAddsUp) {
  auto rng = testutil::test_rng(7);
  for (int t = 0; t < 50; ++t) {
    const auto rg = testutil::normal_tensor(rng, {6, 5}, 2.0), rl = testutil::normal_tensor(rng, {6, 5}, 2.0);
    const auto y = onehot(labels_for(6, 5), 5);
    losses::Objective obj;
    obj.weight_un_global = 0.5;
    obj.weight_un_local = 1.5;
    obj.weight_un_fused = 2.0;
    obj.lambda_u = {1.0, 40};
    obj.lambda_d = {0.1, 40};
    const std::size_t step = rng.below(60);
    Graph<double> g;
    const auto b = losses::total_loss(g.constant(rg), g.constant(rl), y, step, obj).breakdown;
    const double sum = 0.5 * b.l_un_global + 1.5 * b.l_un_local + 2.0 * b.l_un_fused + b.l_ce_global +
                       b.l_ce_local + b.lambda_d * b.l_dis;
    ASSERT_NEAR(b.l_total, sum, 1e-6);
    ASSERT_DOUBLE_EQ(b.lambda_u, losses::anneal(obj.lambda_u, step));
  }
}

TEST(TotalLoss, AblationVariants) {
  auto rng = testutil::test_rng(8);
  const auto rg = testutil::normal_tensor(rng, {4, 3}), rl = testutil::normal_tensor(rng, {4, 3});
  const auto y = onehot(labels_for(4, 3), 3);

  losses::Objective single;
  single.dual_head = false;
  Graph<double> g;
  const auto s = losses::total_loss(g.constant(rg), Var<double>{}, y, 5, single).breakdown;
  EXPECT_EQ(s.l_total, s.l_ce_global);

  losses::Objective dis_only;
  dis_only.enable_un = false;
  dis_only.enable_ce = false;
  const auto d = losses::total_loss(g.constant(rg), g.constant(rl), y, 5, dis_only).breakdown;
  EXPECT_EQ(d.l_un_global, 0.0);
  EXPECT_EQ(d.l_ce_global, 0.0);
  EXPECT_NEAR(d.l_total, d.l_ce_fused + 0.1 * d.l_dis, 1e-12);

  losses::Objective no_dis;
  no_dis.enable_dis = false;
  const auto n = losses::total_loss(g.constant(rg), g.constant(rl), y, 5, no_dis).breakdown;
  EXPECT_EQ(n.lambda_d, 0.0);
  EXPECT_NEAR(n.l_total, n.l_un_global + n.l_un_local + n.l_un_fused + n.l_ce_global + n.l_ce_local, 1e-12);
}

// ---------------------------------------------------------------------------
// Finite-difference checks, ten random points each

namespace {

template <typename Fn, typename Sample>
void check_ten(Fn f, Sample sample, std::uint64_t owner) {
  auto rng = testutil::test_rng(100 + owner);
  for (int i = 0; i < 10; ++i) EXPECT_LT(nd::grad_check(f, sample(rng)), 1e-4) << "point " << i;
}

auto alpha_sampler(nd::Shape s) {
  return [s](specfun::RngStream& r) { return testutil::uniform_tensor(r, s, 1.2, 8.0); };
}
auto normal_sampler(nd::Shape s, double sigma = 1.0) {
  return [s, sigma](specfun::RngStream& r) { return testutil::normal_tensor(r, s, sigma); };
}

}  // namespace

TEST(GradCheck, CrossEntropyThroughSoftmax) {
  const auto y = onehot(labels_for(4, 3), 3);
  check_ten([y](Graph<double>&, Var<double> x) { return losses::cross_entropy(nd::softmax(x), y); },
            normal_sampler({4, 3}), 1);
}

TEST(GradCheck, DceLoss) {
  const auto y = onehot(labels_for(4, 3), 3);
  check_ten([y](Graph<double>&, Var<double> a) { return losses::dce_loss(a, y); }, alpha_sampler({4, 3}), 2);
}

TEST(GradCheck, KlRegularizer) {
  const auto y = onehot(labels_for(4, 3), 3);
  check_ten([y](Graph<double>&, Var<double> a) { return losses::kl_regularizer(a, y); }, alpha_sampler({4, 3}), 3);
}

TEST(GradCheck, UncertaintyLoss) {
  const auto y = onehot(labels_for(4, 3), 3);
  check_ten([y](Graph<double>&, Var<double> a) { return losses::uncertainty_loss(a, y, 0.7); },
            alpha_sampler({4, 3}), 4);
}

TEST(GradCheck, DisentangleLoss) {
  check_ten([](Graph<double>& g, Var<double> p) {
    auto [rg, rl] = halves(g, p, 3);
    return losses::disentangle_loss(rg, rl);
  }, normal_sampler({4, 6}), 5);
}

TEST(GradCheck, CompositeObjective) {
  const auto y = onehot(labels_for(4, 3), 3);
  losses::Objective obj;
  obj.lambda_u = {1.0, 10};
  obj.lambda_d = {0.1, 10};
  check_ten([y, obj](Graph<double>& g, Var<double> p) {
    auto [rg, rl] = halves(g, p, 3);
    return losses::total_loss(rg, rl, y, 5, obj).total;
  }, normal_sampler({4, 6}, 1.5), 6);
  losses::Objective summed = obj;
  summed.enable_un = false;
  check_ten([y, summed](Graph<double>& g, Var<double> p) {
    auto [rg, rl] = halves(g, p, 3);
    return losses::total_loss(rg, rl, y, 5, summed).total;
  }, normal_sampler({4, 6}, 1.5), 7);
}
