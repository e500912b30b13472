#include <cmath>
#include <set>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <gtest/gtest.h>

#include "test_util.hpp"
#include "trfeddis/specfun.hpp"

using namespace trfeddis;
using specfun::RngStream;

// Reference values computed with mpmath at 30 digits.
TEST(SpecialFunctions, FixedValues) {
  EXPECT_NEAR(specfun::digamma(1.0), -0.5772156649015329, 1e-12);
  EXPECT_NEAR(specfun::digamma(0.5), -1.9635100260214235, 1e-12);
  EXPECT_NEAR(specfun::trigamma(1.0), 1.6449340668482264, 1e-12);
  EXPECT_NEAR(specfun::trigamma(2.0), 0.6449340668482264, 1e-12);
  EXPECT_NEAR(specfun::trigamma(1e4), 1.00005000166666666e-4, 1e-16);
  EXPECT_NEAR(specfun::lgamma(0.5), 0.5723649429247001, 1e-12);
  EXPECT_NEAR(specfun::lgamma(1.0), 0.0, 1e-15);
  EXPECT_NEAR(specfun::lgamma(2.0), 0.0, 1e-15);
}

TEST(SpecialFunctions, HarmonicIdentity) {
  // psi(n) - psi(1) = H_{n-1}
  double h = 0.0;
  for (int n = 2; n <= 40; ++n) {
    h += 1.0 / (n - 1);
    EXPECT_NEAR(specfun::digamma(n) - specfun::digamma(1.0), h, 1e-12) << n;
  }
}

TEST(SpecialFunctions, Recurrences) {
  auto rng = testutil::test_rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double x = 1e-3 + 50.0 * rng.uniform();
    const double d = specfun::digamma(x + 1) - specfun::digamma(x) - 1.0 / x;
    const double t = specfun::trigamma(x + 1) - specfun::trigamma(x) + 1.0 / (x * x);
    const double l = specfun::lgamma(x + 1) - specfun::lgamma(x) - std::log(x);
    const double scale_d = std::max(1.0, 1.0 / x);
    const double scale_t = std::max(1.0, 1.0 / (x * x));
    const double scale_l = std::max(1.0, std::abs(specfun::lgamma(x + 1)));
    ASSERT_LE(std::abs(d), 1e-12 * scale_d) << x;
    ASSERT_LE(std::abs(t), 1e-12 * scale_t) << x;
    ASSERT_LE(std::abs(l), 1e-12 * scale_l) << x;
  }
}

TEST(SpecialFunctions, AgreesWithIndependentLibrary) {
  auto rng = testutil::test_rng(2);
  for (int i = 0; i < 2000; ++i) {
    const double x = std::exp(-5.0 + 12.0 * rng.uniform());  // 6.7e-3 .. 1.1e5
    const double dref = boost::math::digamma(x), tref = boost::math::trigamma(x);
    EXPECT_NEAR(specfun::digamma(x), dref, 1e-13 * std::max(1.0, std::abs(dref))) << x;
    EXPECT_NEAR(specfun::trigamma(x), tref, 1e-13 * std::max(1.0, std::abs(tref))) << x;
  }
}

TEST(SpecialFunctions, TrigammaIsDigammaDerivative) {
  for (double x : {0.3, 1.0, 2.5, 7.0, 30.0}) {
    const double h = 1e-5 * x;
    const double fd = (specfun::digamma(x + h) - specfun::digamma(x - h)) / (2 * h);
    EXPECT_NEAR(fd, specfun::trigamma(x), 1e-7 * specfun::trigamma(x));
  }
}

TEST(SpecialFunctions, DomainErrors) {
  EXPECT_THROW(specfun::digamma(0.0), specfun::DomainError);
  EXPECT_THROW(specfun::digamma(-1.5), specfun::DomainError);
  EXPECT_THROW(specfun::trigamma(0.0), specfun::DomainError);
  EXPECT_THROW(specfun::lgamma(-2.0), specfun::DomainError);
  EXPECT_THROW(specfun::digamma(std::nan("")), specfun::DomainError);
}

TEST(SpecialFunctions, SoftplusStable) {
  EXPECT_NEAR(specfun::softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(specfun::softplus(1000.0), 1000.0);
  EXPECT_GT(specfun::softplus(-800.0), -1.0);
  EXPECT_GE(specfun::softplus(-800.0), 0.0);
  EXPECT_NEAR(specfun::softplus(-30.0), std::exp(-30.0), 1e-25);
  EXPECT_NEAR(specfun::sigmoid(0.0), 0.5, 1e-15);
  EXPECT_NEAR(specfun::sigmoid(-1000.0), 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(specfun::sigmoid(1000.0), 1.0);
}

TEST(RandomStreams, SameKeySameSequence) {
  RngStream a(7, 3), b(7, 3);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(RandomStreams, DistinctKeysDiffer) {
  std::set<std::uint64_t> first;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    for (std::uint64_t id = 0; id < 4; ++id) first.insert(RngStream(seed, id).next_u64());
  }
  EXPECT_EQ(first.size(), 16u);
  EXPECT_NE(specfun::stream_key(specfun::StreamPurpose::kInit, 0),
            specfun::stream_key(specfun::StreamPurpose::kShuffle, 0));
}

TEST(RandomStreams, UniformRangeAndMoments) {
  RngStream r(11, 0);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const double p = r.uniform_pos();
    ASSERT_GT(p, 0.0);
    ASSERT_LE(p, 1.0);
    sum += u;
    sq += u * u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
  EXPECT_NEAR(sq / n - 0.25, 1.0 / 12.0, 0.005);  // E[u^2] - 1/4
}

TEST(RandomStreams, BelowIsUnbiased) {
  RngStream r(5, 5);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[r.below(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
  EXPECT_THROW(r.below(0), std::invalid_argument);
}

TEST(RandomStreams, NormalMoments) {
  RngStream r(9, 1);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = specfun::standard_normal(r);
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.015);
}
