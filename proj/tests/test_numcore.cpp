#include <gtest/gtest.h>

#include <cmath>

#include "steerlab/numcore/finite_difference.hpp"
#include "steerlab/numcore/ops.hpp"
#include "support.hpp"

using namespace steerlab;
using steerlab::testing::random_tensor;

namespace {

constexpr double kFdEps = 1e-5;
constexpr double kFdTol = 1e-5;
constexpr int kSeeds = 20;

double weighted_sum(const Tensor& y, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

}  // namespace

TEST(Linear, IdentityAndZero) {
  const auto eye = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_TRUE(linear(Tensor::matrix({{1, 2}}), eye).bit_equal(Tensor::matrix({{1, 2}})));
  Rng rng(1);
  const auto w = random_tensor({2, 3}, rng);
  const auto y = linear(Tensor::matrix({{0, 0}}), w);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
  try {
    linear(Tensor({2, 3}), Tensor({4, 2}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("[4x2]"), std::string::npos) << e.what();
  }
}

TEST(Linear, AdditiveInInput) {
  Rng rng(7);
  const auto w = random_tensor({4, 3}, rng), b = random_tensor({3}, rng);
  const auto x1 = random_tensor({2, 4}, rng), x2 = random_tensor({2, 4}, rng);
  Tensor xs = x1;
  xs += x2;
  const auto lhs = linear(xs, w, b);
  const auto r1 = linear(x1, w, b), r2 = linear(x2, w, b);
  for (std::size_t i = 0; i < lhs.rows(); ++i) {
    for (std::size_t j = 0; j < lhs.cols(); ++j) EXPECT_NEAR(lhs(i, j), r1(i, j) + r2(i, j) - b[j], 1e-12);
  }
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed));
    const auto x = random_tensor({3, 4}, rng), w = random_tensor({4, 2}, rng), b = random_tensor({2}, rng);
    const auto up = random_tensor({3, 2}, rng);
    const auto g = linear_backward(x, w, true, up);
    const auto fx = finite_difference_gradient([&](const Tensor& t) { return weighted_sum(linear(t, w, b), up); }, x, kFdEps);
    const auto fw = finite_difference_gradient([&](const Tensor& t) { return weighted_sum(linear(x, t, b), up); }, w, kFdEps);
    const auto fb = finite_difference_gradient([&](const Tensor& t) { return weighted_sum(linear(x, w, t), up); }, b, kFdEps);
    EXPECT_LE(relative_error(g.dx, fx), 1e-6) << "seed " << seed;
    EXPECT_LE(relative_error(g.dw, fw), 1e-6) << "seed " << seed;
    EXPECT_LE(relative_error(*g.dbias, fb), 1e-6) << "seed " << seed;
  }
}

TEST(RmsNorm, UnitRowAndZeroGain) {
  const auto ones = Tensor::matrix({{1, 1, 1, 1}});
  const auto y = rmsnorm(ones, Tensor::vector({1, 1, 1, 1}), 0.0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0, 1e-5);
  Rng rng(3);
  const auto z = rmsnorm(random_tensor({2, 4}, rng), Tensor({4}), 1e-6);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(rmsnorm(ones, Tensor::vector({1, 1, 1, 1}), -1.0), ParameterError);
}

TEST(RmsNorm, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(100 + static_cast<std::uint64_t>(seed));
    const auto x = random_tensor({3, 5}, rng), gain = random_tensor({5}, rng), up = random_tensor({3, 5}, rng);
    const auto g = rmsnorm_backward(x, gain, 1e-6, up);
    const auto fx = finite_difference_gradient([&](const Tensor& t) { return weighted_sum(rmsnorm(t, gain, 1e-6), up); }, x, kFdEps);
    const auto fg = finite_difference_gradient([&](const Tensor& t) { return weighted_sum(rmsnorm(x, t, 1e-6), up); }, gain, kFdEps);
    EXPECT_LE(relative_error(g.dx, fx), kFdTol) << "seed " << seed;
    EXPECT_LE(relative_error(g.dgain, fg), kFdTol) << "seed " << seed;
  }
}

namespace {

AttentionWeights random_attention(std::size_t d, Rng& rng, double scale = 0.5) {
  return {random_tensor({d, d}, rng, scale), random_tensor({d, d}, rng, scale), random_tensor({d, d}, rng, scale),
          random_tensor({d, d}, rng, scale)};
}

// O(T^2) textbook evaluation: explicit rotation angles, explicit masked softmax.
Tensor naive_attention(const Tensor& x, const AttentionWeights& w, std::size_t heads, double base) {
  const std::size_t t_len = x.rows(), d = x.cols(), hd = d / heads;
  Tensor q = linear(x, w.wq), k = linear(x, w.wk), v = linear(x, w.wv);
  auto rotate = [&](Tensor& m) {
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < hd / 2; ++i) {
          const double theta = static_cast<double>(t) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
          const double c = std::cos(theta), s = std::sin(theta);
          double& a = m(t, h * hd + 2 * i);
          double& b = m(t, h * hd + 2 * i + 1);
          const double a0 = a, b0 = b;
          a = a0 * c - b0 * s;
          b = a0 * s + b0 * c;
        }
      }
    }
  };
  rotate(q);
  rotate(k);
  Tensor ctx({t_len, d});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t t = 0; t < t_len; ++t) {
      std::vector<double> s(t + 1);
      double mx = -1e300;
      for (std::size_t u = 0; u <= t; ++u) {
        double dot = 0.0;
        for (std::size_t j = 0; j < hd; ++j) dot += q(t, h * hd + j) * k(u, h * hd + j);
        s[u] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, s[u]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t u = 0; u <= t; ++u) {
        for (std::size_t j = 0; j < hd; ++j) ctx(t, h * hd + j) += s[u] / z * v(u, h * hd + j);
      }
    }
  }
  return linear(ctx, w.wo);
}

}  // namespace

TEST(Attention, SingleTokenIsValueThenOutput) {
  Rng rng(5);
  const auto w = random_attention(4, rng);
  const auto x = random_tensor({1, 4}, rng);
  const auto out = causal_attention(x, w, 2);
  const auto ref = linear(linear(x, w.wv), w.wo);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out[j], ref[j], 1e-14);
}

TEST(Attention, ZeroValueProjectionGivesZero) {
  Rng rng(6);
  auto w = random_attention(4, rng);
  w.wv.fill(0.0);
  const auto out = causal_attention(random_tensor({3, 4}, rng), w, 2);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, HeadCountMustDivideWidth) {
  Rng rng(1);
  const auto w = random_attention(6, rng);
  EXPECT_THROW(causal_attention(random_tensor({2, 6}, rng), w, 4), ConfigError);
}

TEST(Attention, MatchesNaiveReference) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(200 + static_cast<std::uint64_t>(seed));
    const auto w = random_attention(4, rng);
    const auto x = random_tensor({3, 4}, rng);
    const auto fast = causal_attention(x, w, 2);
    const auto slow = naive_attention(x, w, 2, kDefaultRopeBase);
    EXPECT_LE(relative_error(fast, slow), 1e-13) << "seed " << seed;
  }
}

TEST(Attention, IsCausal) {
  Rng rng(11);
  const auto w = random_attention(8, rng);
  const auto x = random_tensor({5, 8}, rng);
  const auto base = causal_attention(x, w, 2);
  for (std::size_t t = 0; t < 5; ++t) {
    Tensor y = x;
    for (std::size_t u = t + 1; u < 5; ++u) {
      for (std::size_t j = 0; j < 8; ++j) y(u, j) += rng.normal();
    }
    const auto out = causal_attention(y, w, 2);
    for (std::size_t u = 0; u <= t; ++u) {
      for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(out(u, j), base(u, j));
    }
  }
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(300 + static_cast<std::uint64_t>(seed));
    auto w = random_attention(4, rng);
    const auto x = random_tensor({3, 4}, rng), up = random_tensor({3, 4}, rng);
    const auto g = causal_attention_backward(x, w, 2, up);
    auto loss = [&] { return weighted_sum(causal_attention(x, w, 2), up); };
    const auto fx = finite_difference_gradient([&](const Tensor& t) { return weighted_sum(causal_attention(t, w, 2), up); }, x, kFdEps);
    EXPECT_LE(relative_error(g.dx, fx), kFdTol) << "seed " << seed;
    EXPECT_LE(relative_error(g.dwq, finite_difference_gradient_inplace(loss, w.wq, kFdEps)), kFdTol) << "seed " << seed;
    EXPECT_LE(relative_error(g.dwk, finite_difference_gradient_inplace(loss, w.wk, kFdEps)), kFdTol) << "seed " << seed;
    EXPECT_LE(relative_error(g.dwv, finite_difference_gradient_inplace(loss, w.wv, kFdEps)), kFdTol) << "seed " << seed;
    EXPECT_LE(relative_error(g.dwo, finite_difference_gradient_inplace(loss, w.wo, kFdEps)), kFdTol) << "seed " << seed;
  }
}

TEST(Softmax, Examples) {
  const auto half = softmax(Tensor::vector({0, 0}));
  EXPECT_EQ(half[0], 0.5);
  EXPECT_EQ(half[1], 0.5);
  const auto big = softmax(Tensor::vector({1e4, 0}));
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_GE(big[1], 0.0);
  EXPECT_LT(big[1], 1e-300);
  const auto a = softmax(Tensor::vector({1, 2, 3}), 2.0), b = softmax(Tensor::vector({0.5, 1, 1.5}), 1.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
  EXPECT_THROW(softmax(Tensor::vector({1, 2}), 0.0), ParameterError);
  EXPECT_THROW(softmax(Tensor::vector({1, 2}), -1.0), ParameterError);
}

TEST(Softmax, SumsToOne) {
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const auto p = softmax(random_tensor({17}, rng, 30.0), 0.1 + rng.uniform() * 3.0);
    double s = 0.0;
    for (double v : p.data()) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(TokenLogprob, Examples) {
  EXPECT_NEAR(token_logprob(Tensor::vector({3, 3, 3, 3}), 2), std::log(0.25), 1e-15);
  EXPECT_NEAR(token_logprob(Tensor::vector({20, 0, 0}), 0), 0.0, 1e-8);
  EXPECT_THROW(token_logprob(Tensor::vector({1, 2}), 2), IndexError);
  EXPECT_THROW(token_logprob(Tensor::vector({1, 2}), -1), IndexError);
}

TEST(TokenLogprob, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(400 + static_cast<std::uint64_t>(seed));
    const auto logits = random_tensor({9}, rng, 2.0);
    const long long tok = static_cast<long long>(rng.below(9));
    const auto g = token_logprob_backward(logits, tok);
    const auto f = finite_difference_gradient([&](const Tensor& t) { return token_logprob(t, tok); }, logits, kFdEps);
    EXPECT_LE(relative_error(g, f), 1e-6) << "seed " << seed;
  }
}

TEST(TokenLogprob, ComposedWithLinear) {
  Rng rng(12);
  const auto x = random_tensor({1, 5}, rng), w = random_tensor({5, 7}, rng);
  auto f = [&](const Tensor& t) {
    const auto y = linear(t, w);
    return token_logprob(Tensor({7}, y.storage()), 3);
  };
  const auto y = linear(x, w);
  const auto dlogits = token_logprob_backward(Tensor({7}, y.storage()), 3);
  const auto g = linear_backward(x, w, false, Tensor({1, 7}, dlogits.storage()));
  EXPECT_LE(relative_error(g.dx, finite_difference_gradient(f, x, kFdEps)), 1e-6);
}

TEST(FiniteDifference, KnownCases) {
  const auto g = finite_difference_gradient([](const Tensor& t) { return t[0] * t[0] + t[1] * t[1]; }, Tensor::vector({1, 2}));
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
  const auto z = finite_difference_gradient([](const Tensor&) { return 3.0; }, Tensor::vector({1, 2, 3}));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(finite_difference_gradient([](const Tensor& t) { return std::log(t[0]); }, Tensor::vector({0.0})),
               OracleError);
  EXPECT_THROW(finite_difference_gradient([](const Tensor&) { return 0.0; }, Tensor::vector({1}), 0.0), ParameterError);
}

TEST(TensorType, RejectsBadShapesAndChecksFinite) {
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), DimensionError);
  Tensor t({2});
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(require_finite(t, "test"), NumericError);
  GradPair gp(Tensor::vector({1, 2}));
  gp.accumulate(Tensor::vector({0.5, 0.5}));
  gp.accumulate(Tensor::vector({0.5, 0.5}));
  EXPECT_EQ(gp.grad[0], 1.0);
  gp.zero_grad();
  EXPECT_EQ(gp.grad[1], 0.0);
}
