#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "asrl/adam.hpp"
#include "asrl/gradcheck.hpp"
#include "asrl/network.hpp"
#include "asrl/params.hpp"
#include "asrl/serialize.hpp"

using namespace asrl;

namespace {

ImageTensor random_image(std::uint64_t seed) {
  Rng rng(seed);
  ImageTensor img;
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

std::vector<ImageTensor> random_batch(int n, std::uint64_t seed) {
  std::vector<ImageTensor> out;
  for (int i = 0; i < n; ++i) out.push_back(random_image(derive_seed(seed, i)));
  return out;
}

// Direct (loop-nest) evaluation of the architecture in double precision.
struct NaiveOut {
  std::vector<double> logits;
  double value;
};

NaiveOut naive_forward(const ParamSet<double>& p, const ImageTensor& img) {
  using namespace arch;
  const auto w1 = p["conv1.w"], b1 = p["conv1.b"], w2 = p["conv2.w"], b2 = p["conv2.b"];
  const auto fw = p["fc.w"], fb = p["fc.b"], pw = p["pi.w"], pb = p["pi.b"], vw = p["v.w"], vb = p["v.b"];
  std::vector<double> a1(kConv1Out * kH1 * kH1), a2(kConv2Out * kH2 * kH2), h(kHidden);
  for (int co = 0; co < kConv1Out; ++co)
    for (int y = 0; y < kH1; ++y)
      for (int x = 0; x < kH1; ++x) {
        double s = b1[co];
        for (int ci = 0; ci < kChannels; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              s += w1[((co * kChannels + ci) * 3 + ky) * 3 + kx] * img.at(ci, 2 * y + ky, 2 * x + kx);
        a1[(co * kH1 + y) * kH1 + x] = std::max(0.0, s);
      }
  for (int co = 0; co < kConv2Out; ++co)
    for (int y = 0; y < kH2; ++y)
      for (int x = 0; x < kH2; ++x) {
        double s = b2[co];
        for (int ci = 0; ci < kConv1Out; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              s += w2[((co * kConv1Out + ci) * 3 + ky) * 3 + kx] * a1[(ci * kH1 + 2 * y + ky) * kH1 + 2 * x + kx];
        a2[(co * kH2 + y) * kH2 + x] = std::max(0.0, s);
      }
  for (int j = 0; j < kHidden; ++j) {
    double s = fb[j];
    for (int i = 0; i < kFlat; ++i) s += a2[i] * fw[static_cast<std::size_t>(i) * kHidden + j];
    h[j] = std::max(0.0, s);
  }
  NaiveOut out;
  const int A = p.n_actions();
  for (int a = 0; a < A; ++a) {
    double s = pb[a];
    for (int j = 0; j < kHidden; ++j) s += h[j] * pw[j * A + a];
    out.logits.push_back(s);
  }
  out.value = vb[0];
  for (int j = 0; j < kHidden; ++j) out.value += h[j] * vw[j];
  return out;
}

// L = sum_i c_i . logits_i + d_i * value_i with fixed random coefficients.
LossFn linear_output_loss(const std::vector<ImageTensor>& obs, int A, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<OutputGrad> coeff(obs.size());
  for (auto& g : coeff) {
    g.dlogits.resize(A);
    for (auto& v : g.dlogits) v = rng.normal();
    g.dvalue = rng.normal();
  }
  return [obs, coeff](const ParamSet<double>& p) {
    const auto out = forward(p, obs);
    double loss = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      for (std::size_t a = 0; a < out[i].logits.size(); ++a) loss += coeff[i].dlogits[a] * out[i].logits[a];
      loss += coeff[i].dvalue * out[i].value;
    }
    return LossAndGrad{loss, backward(p, obs, std::span<const OutputGrad>(coeff))};
  };
}

// Cross-entropy on the policy plus squared value error: a nonlinear head loss.
LossFn nonlinear_loss(const std::vector<ImageTensor>& obs, int A) {
  return [obs, A](const ParamSet<double>& p) {
    ForwardCache<double> cache;
    const auto out = forward(p, obs, &cache);
    double loss = 0.0;
    std::vector<OutputGrad> g(obs.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const int target = static_cast<int>(i % A);
      loss -= out[i].log_probs[target];
      g[i].dlogits.resize(A);
      for (int a = 0; a < A; ++a) g[i].dlogits[a] = out[i].probs[a] - (a == target ? 1.0 : 0.0);
      const double dv = out[i].value - 0.5;
      loss += dv * dv;
      g[i].dvalue = 2.0 * dv;
    }
    return LossAndGrad{loss, backward(p, cache, g)};
  };
}

}  // namespace

TEST(InitParams, DeterministicForSameSeed) {
  EXPECT_EQ(init_params<float>(5, 1, 1.0), init_params<float>(5, 1, 1.0));
}

TEST(InitParams, ZeroScaleGivesZeroWeights) {
  const auto p = init_params<float>(5, 1, 0.0);
  for (float v : p.flat()) EXPECT_EQ(v, 0.0f);
}

TEST(InitParams, SeedsDiffer) {
  const auto a = init_params<float>(5, 1), b = init_params<float>(5, 2);
  EXPECT_NE(a["conv1.w"][0], b["conv1.w"][0]);
  EXPECT_FALSE(a == b);
}

TEST(InitParams, FanInBoundsAndZeroBiases) {
  const double scale = 0.7;
  const auto p = init_params<double>(4, 3, scale);
  for (const auto& e : p.layout()) {
    const auto w = p[e.name];
    const bool bias = e.name.ends_with(".b");
    const double bound = scale / std::sqrt(static_cast<double>(e.fan_in));
    double max_abs = 0.0;
    for (double v : w) {
      if (bias) {
        EXPECT_EQ(v, 0.0) << e.name;
      } else {
        EXPECT_LE(std::abs(v), bound) << e.name;
      }
      max_abs = std::max(max_abs, std::abs(v));
    }
    if (!bias) {
      EXPECT_GT(max_abs, 0.5 * bound) << e.name;
    }
  }
}

TEST(InitParams, LayoutSortedAndShaped) {
  const auto p = init_params<float>(5, 1);
  std::vector<std::string> names;
  for (const auto& e : p.layout()) names.push_back(e.name);
  EXPECT_TRUE(std::is_sorted(names.begin(), names.end()));
  EXPECT_EQ(p.entry("conv1.w").dims, (std::vector<std::uint32_t>{16, 3, 3, 3}));
  EXPECT_EQ(p.entry("conv2.w").dims, (std::vector<std::uint32_t>{32, 16, 3, 3}));
  EXPECT_EQ(p.entry("fc.w").dims, (std::vector<std::uint32_t>{1568, 128}));
  EXPECT_EQ(p.entry("pi.w").dims, (std::vector<std::uint32_t>{128, 5}));
  EXPECT_EQ(p.entry("v.w").dims, (std::vector<std::uint32_t>{128, 1}));
}

TEST(Forward, ZeroParamsGiveUniformPolicyAndZeroValue) {
  const ParamSet<float> p(5);
  const auto out = forward(p, random_batch(3, 9));
  for (const auto& o : out) {
    for (int a = 0; a < 5; ++a) {
      EXPECT_EQ(o.logits[a], 0.0);
      EXPECT_NEAR(o.probs[a], 0.2, 1e-12);
    }
    EXPECT_EQ(o.value, 0.0);
  }
}

TEST(Forward, RepeatedObservationGivesIdenticalOutputs) {
  const auto p = init_params<float>(5, 4);
  const auto img = random_image(17);
  const auto out = forward(p, std::vector<ImageTensor>(20, img));
  for (const auto& o : out) {
    EXPECT_EQ(o.logits, out[0].logits);
    EXPECT_EQ(o.value, out[0].value);
  }
}

TEST(Forward, SoftmaxInvariants) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto p = init_params<float>(4, s, 3.0);
    for (const auto& o : forward(p, random_batch(40, 100 + s))) {
      double sum = 0.0;
      for (std::size_t a = 0; a < o.probs.size(); ++a) {
        sum += o.probs[a];
        EXPECT_GT(o.probs[a], 0.0);
        EXPECT_NEAR(o.log_probs[a], std::log(o.probs[a]), 1e-12);
      }
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(Forward, MatchesDirectConvolutionOracle) {
  const auto p = init_params<double>(5, 21, 2.0);
  const auto obs = random_batch(19, 22);  // spans more than one internal chunk
  const auto out = forward(p, obs);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto ref = naive_forward(p, obs[i]);
    for (int a = 0; a < 5; ++a) EXPECT_NEAR(out[i].logits[a], ref.logits[a], 1e-9);
    EXPECT_NEAR(out[i].value, ref.value, 1e-9);
  }
}

TEST(Forward, FloatAgreesWithDouble) {
  const auto pd = init_params<double>(5, 5);
  const auto pf = pd.cast<float>();
  const auto obs = random_batch(8, 6);
  const auto a = forward(pd, obs), b = forward(pf, obs);
  for (std::size_t i = 0; i < obs.size(); ++i) EXPECT_NEAR(a[i].value, b[i].value, 1e-4);
}

TEST(Forward, RejectsWrongShape) {
  const auto p = init_params<float>(5, 1);
  std::vector<ImageTensor> bad{ImageTensor(3, 16, 16)};
  EXPECT_THROW(forward(p, bad), ShapeError);
  std::vector<ImageTensor> bad_c{ImageTensor(1, 32, 32)};
  EXPECT_THROW(forward(p, bad_c), ShapeError);
}

TEST(Backward, ZeroOutputGradientsGiveZeroGradient) {
  const auto p = init_params<float>(5, 1);
  const auto obs = random_batch(4, 2);
  std::vector<OutputGrad> g(4);
  for (auto& x : g) x.dlogits.assign(5, 0.0);
  const auto grad = backward(p, std::span<const ImageTensor>(obs), std::span<const OutputGrad>(g));
  for (float v : grad.flat()) EXPECT_EQ(v, 0.0f);
}

TEST(Backward, RejectsMismatchedOutputGradients) {
  const auto p = init_params<float>(5, 1);
  const auto obs = random_batch(3, 2);
  std::vector<OutputGrad> g(2);
  for (auto& x : g) x.dlogits.assign(5, 0.0);
  EXPECT_THROW(backward(p, std::span<const ImageTensor>(obs), std::span<const OutputGrad>(g)), ShapeError);
  std::vector<OutputGrad> g3(3);
  for (auto& x : g3) x.dlogits.assign(4, 0.0);
  EXPECT_THROW(backward(p, std::span<const ImageTensor>(obs), std::span<const OutputGrad>(g3)), ShapeError);
}

TEST(Backward, LinearOutputLossPassesFiniteDifferences) {
  const auto p = init_params<double>(5, 31);
  const auto obs = random_batch(6, 32);
  EXPECT_LE(finite_diff_check(p, linear_output_loss(obs, 5, 33), 100, 34), 1e-5);
}

TEST(Backward, NonlinearLossPassesFiniteDifferences) {
  const auto p = init_params<double>(4, 41);
  const auto obs = random_batch(5, 42);
  EXPECT_LE(finite_diff_check(p, nonlinear_loss(obs, 4), 100, 43), 1e-5);
}

TEST(Backward, BatchEqualsSumOfPerSampleGradients) {
  const auto p = init_params<double>(5, 51);
  const auto obs = random_batch(21, 52);
  Rng rng(53);
  std::vector<OutputGrad> g(obs.size());
  for (auto& x : g) {
    x.dlogits.resize(5);
    for (auto& v : x.dlogits) v = rng.normal();
    x.dvalue = rng.normal();
  }
  const auto whole = backward(p, std::span<const ImageTensor>(obs), std::span<const OutputGrad>(g));
  Gradient<double> sum(5);
  for (std::size_t i = 0; i < obs.size(); ++i)
    sum += backward(p, std::span<const ImageTensor>(&obs[i], 1), std::span<const OutputGrad>(&g[i], 1));
  for (std::size_t k = 0; k < sum.size(); ++k) EXPECT_NEAR(whole.flat()[k], sum.flat()[k], 1e-9);
}

TEST(FiniteDiffCheck, LinearValueHeadLossIsExact) {
  const auto p = init_params<double>(5, 61);
  const auto obs = random_batch(3, 62);
  const LossFn value_sum = [obs](const ParamSet<double>& q) {
    const auto out = forward(q, obs);
    double loss = 0.0;
    std::vector<OutputGrad> g(obs.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      loss += out[i].value;
      g[i].dlogits.assign(5, 0.0);
      g[i].dvalue = 1.0;
    }
    return LossAndGrad{loss, backward(q, obs, std::span<const OutputGrad>(g))};
  };
  // The loss is linear in the value-head weights.
  double worst = 0.0;
  const auto analytic = value_sum(p).second;
  const auto vw = p.entry("v.w");
  for (std::size_t k = 0; k < 128; ++k) {
    const std::size_t idx = vw.offset + k;
    ParamSet<double> up = p, down = p;
    up.flat()[idx] += 1e-4;
    down.flat()[idx] -= 1e-4;
    const double numeric = (value_sum(up).first - value_sum(down).first) / 2e-4;
    const double a = analytic.flat()[idx];
    worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12}));
  }
  EXPECT_LE(worst, 1e-7);
  EXPECT_LE(finite_diff_check(p, value_sum, 50, 63), 1e-5);
}

TEST(FiniteDiffCheck, DetectsAPerturbedGradient) {
  const auto p = init_params<double>(5, 64);
  const auto obs = random_batch(3, 65);
  const auto exact = nonlinear_loss(obs, 5);
  const LossFn wrong = [&](const ParamSet<double>& q) {
    auto r = exact(q);
    r.second *= 1.001;
    return r;
  };
  EXPECT_GT(finite_diff_check(p, wrong, 20, 66), 5e-4);
}

TEST(FiniteDiffCheck, RejectsZeroProbes) {
  const auto p = init_params<double>(5, 1);
  const LossFn f = [](const ParamSet<double>& q) { return LossAndGrad{0.0, Gradient<double>(q.n_actions())}; };
  EXPECT_THROW(finite_diff_check(p, f, 0), Error);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  auto p = init_params<float>(5, 1);
  const auto before = p;
  AdamState<float> st(p);
  adam_step(p, Gradient<float>(5), st, 1e-3);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepOnScalarMovesByLearningRate) {
  // m = 0.1, v = 0.001, mhat = 1, vhat = 1: w = 0 - 0.1 * 1 / (1 + 1e-8).
  std::vector<double> w{0.0}, g{1.0};
  AdamState<double> st(1);
  adam_update(std::span<double>(w), std::span<const double>(g), st, 0.1);
  EXPECT_NEAR(w[0], -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, TwoStepsMatchHandEvaluation) {
  std::vector<double> w{1.0};
  AdamState<double> st(1);
  std::vector<double> g1{2.0}, g2{-1.0};
  adam_update(std::span<double>(w), std::span<const double>(g1), st, 0.01);
  adam_update(std::span<double>(w), std::span<const double>(g2), st, 0.01);
  double m = 0.0, v = 0.0, x = 1.0;
  int t = 0;
  for (double gi : {2.0, -1.0}) {
    ++t;
    m = 0.9 * m + 0.1 * gi;
    v = 0.999 * v + 0.001 * gi * gi;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  EXPECT_NEAR(w[0], x, 1e-15);
}

TEST(Adam, IdenticalRunsAreBitwiseIdentical) {
  auto run = [] {
    auto p = init_params<float>(5, 7);
    AdamState<float> st(p);
    Rng rng(8);
    for (int i = 0; i < 5; ++i) {
      Gradient<float> g(5);
      for (auto& v : g.flat()) v = static_cast<float>(rng.normal());
      adam_step(p, g, st, 1e-3);
    }
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, NonFiniteGradientIsRejected) {
  auto p = init_params<float>(5, 1);
  const auto before = p;
  AdamState<float> st(p);
  Gradient<float> g(5);
  g.flat()[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(adam_step(p, g, st, 1e-3), UpdateRejected);
  g.flat()[3] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(adam_step(p, g, st, 1e-3), UpdateRejected);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 0u);
}

TEST(Adam, MomentsStayFiniteOverManySteps) {
  std::vector<double> w{0.5, -0.5, 2.0};
  AdamState<double> st(3);
  Rng rng(9);
  std::uint64_t last = 0;
  for (int i = 0; i < 100000; ++i) {
    std::vector<double> g{rng.uniform(-1, 1), rng.uniform(-1e-3, 1e-3), 10.0 * rng.uniform(-1, 1)};
    adam_update(std::span<double>(w), std::span<const double>(g), st, 1e-3);
    ASSERT_GT(st.step, last);
    last = st.step;
  }
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_TRUE(std::isfinite(st.m[k]));
    EXPECT_TRUE(std::isfinite(st.v[k]));
    EXPECT_TRUE(std::isfinite(w[k]));
  }
}

TEST(Serialize, RoundTripIsBitExact) {
  const auto p = init_params<float>(4, 77);
  std::stringstream ss;
  write_arrays(ss, to_arrays(p));
  EXPECT_EQ(params_from_arrays(read_arrays(ss)), p);
}

TEST(Serialize, HeaderLayoutIsLittleEndian) {
  const auto p = init_params<float>(5, 1);
  std::stringstream ss;
  write_arrays(ss, to_arrays(p));
  const std::string bytes = ss.str();
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "ASRL");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);  // version 1, low byte first
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 10u);  // ten entries
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 7u);  // "conv1.b" length
  EXPECT_EQ(bytes.substr(14, 7), "conv1.b");
  const std::size_t expected = 12 + [&] {
    std::size_t n = 0;
    for (const auto& e : p.layout()) n += 2 + e.name.size() + 1 + 4 * e.dims.size() + 4 * e.size;
    return n;
  }();
  EXPECT_EQ(bytes.size(), expected);
}

TEST(Serialize, RejectsBadMagic) {
  std::stringstream ss("XXXX");
  EXPECT_THROW(read_arrays(ss), IoError);
}
