#include <catch2/catch_amalgamated.hpp>

#include "charm/ops.hpp"
#include "charm/optimizer.hpp"
#include "support.hpp"

using namespace charm;
using testsup::random_tensor;
using Catch::Approx;

TEST_CASE("softmax basic values") {
  Tape t;
  SECTION("uniform input") {
    Value y = softmax(constant(t, Tensor({4}, {1, 1, 1, 1})), 0);
    for (int i = 0; i < 4; ++i) REQUIRE(y.v().data[i] == Approx(0.25).epsilon(1e-12));
  }
  SECTION("singleton axis") {
    Value y = softmax(constant(t, Tensor({1}, {5.0})), 0);
    REQUIRE(y.v().data[0] == Approx(1.0).epsilon(1e-12));
  }
  SECTION("[0, ln 3] -> [0.25, 0.75]") {
    // exp(0)/(exp(0)+exp(ln3)) = 1/4, exp(ln3)/4 = 3/4
    Value y = softmax(constant(t, Tensor({2}, {0.0, std::log(3.0)})), 0);
    REQUIRE(y.v().data[0] == Approx(0.25).epsilon(1e-12));
    REQUIRE(y.v().data[1] == Approx(0.75).epsilon(1e-12));
  }
  SECTION("axis out of range / non-finite input rejected") {
    REQUIRE_THROWS_AS(softmax(constant(t, Tensor({2}, {0, 1})), 1), std::invalid_argument);
    Tensor bad({2}, {1.0, std::numeric_limits<double>::infinity()});
    REQUIRE_THROWS(softmax(make_leaf(t, bad, false), 0));
  }
}

TEST_CASE("softmax rows sum to 1 under large-magnitude inputs") {
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    Tape t;
    Tensor x = random_tensor({3, 5, 4}, rng, -1e4, 1e4);
    Value y = softmax(constant(t, x), 1);
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int k = 0; k < 5; ++k) s += y.v().data[(o * 5 + k) * 4 + i];
        REQUIRE(std::fabs(s - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("softmin values and identity with softmax(-x)") {
  SECTION("constant input is uniform") {
    for (double c : {-3.0, 0.0, 7.5}) {
      auto s = softmin({c, c, c});
      for (double v : s) REQUIRE(v == Approx(1.0 / 3).epsilon(1e-12));
    }
  }
  SECTION("[0, ln 3] -> [0.75, 0.25]") {
    auto s = softmin({0.0, std::log(3.0)});
    REQUIRE(s[0] == Approx(0.75).epsilon(1e-12));
    REQUIRE(s[1] == Approx(0.25).epsilon(1e-12));
  }
  SECTION("softmin(x) == softmax(-x) elementwise") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> x(5);
      for (double& v : x) v = rng.uniform(-10, 10);
      auto s = softmin(x);
      Tape t;
      Tensor nx({5});
      for (int i = 0; i < 5; ++i) nx.data[i] = -x[i];
      Value y = softmax(constant(t, nx), 0);
      for (int i = 0; i < 5; ++i) REQUIRE(s[i] == Approx(y.v().data[i]).margin(1e-12));
    }
  }
  SECTION("empty input rejected") { REQUIRE_THROWS_AS(softmin({}), std::invalid_argument); }
}

TEST_CASE("conv2d value oracles") {
  Tape t;
  SECTION("depthwise delta kernel is identity") {
    Rng rng(3);
    Tensor x = random_tensor({2, 5, 5}, rng);
    Tensor w = Tensor::zeros({2, 1, 3, 3});
    w.data[4] = 1.0;       // center tap, channel 0
    w.data[9 + 4] = 1.0;   // center tap, channel 1
    Value y = conv2d(constant(t, x), constant(t, w), std::nullopt, 1, 1, 2);
    REQUIRE(max_abs_diff(y.v(), x) == 0.0);
  }
  SECTION("all-zero kernel gives zero output") {
    Rng rng(4);
    Tensor x = random_tensor({3, 4, 4}, rng);
    Value y = conv2d(constant(t, x), constant(t, Tensor::zeros({2, 3, 3, 3})), std::nullopt, 1, 1, 1);
    for (double v : y.v().data) REQUIRE(v == 0.0);
  }
  SECTION("3x3 ramp with all-ones kernel sums to 45") {
    Tensor x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Value y = conv2d(constant(t, x), constant(t, Tensor::full({1, 1, 3, 3}, 1.0)), std::nullopt, 1, 0, 1);
    REQUIRE(y.shape() == Shape{1, 1, 1});
    REQUIRE(y.v().data[0] == Approx(45.0).epsilon(1e-14));
  }
  SECTION("output shape formula") {
    Rng rng(5);
    Tensor x = random_tensor({3, 11, 9}, rng);
    Value y = conv2d(constant(t, x), constant(t, random_tensor({4, 3, 3, 3}, rng)), std::nullopt, 2, 1, 1);
    REQUIRE(y.shape() == Shape{4, (11 + 2 - 3) / 2 + 1, (9 + 2 - 3) / 2 + 1});
  }
  SECTION("groups must divide channels") {
    Rng rng(6);
    Tensor x = random_tensor({3, 4, 4}, rng);
    REQUIRE_THROWS_AS(
        conv2d(constant(t, x), constant(t, random_tensor({4, 1, 3, 3}, rng)), std::nullopt, 1, 1, 2),
        std::invalid_argument);
  }
  SECTION("kernel larger than padded input rejected") {
    Rng rng(7);
    Tensor x = random_tensor({1, 2, 2}, rng);
    REQUIRE_THROWS_AS(
        conv2d(constant(t, x), constant(t, random_tensor({1, 1, 5, 5}, rng)), std::nullopt, 1, 0, 1),
        std::invalid_argument);
  }
}

TEST_CASE("conv2d linearity (bias-free)") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tape t;
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor y = random_tensor({2, 6, 6}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    Tensor axby({2, 6, 6});
    for (long i = 0; i < axby.numel(); ++i) axby.data[i] = a * x.data[i] + b * y.data[i];
    Value lhs = conv2d(constant(t, axby), constant(t, w), std::nullopt, 1, 1, 1);
    Value cx = conv2d(constant(t, x), constant(t, w), std::nullopt, 1, 1, 1);
    Value cy = conv2d(constant(t, y), constant(t, w), std::nullopt, 1, 1, 1);
    Value rhs = add(scale(cx, a), scale(cy, b));
    REQUIRE(max_abs_diff(lhs.v(), rhs.v()) < 1e-5);
  }
}

TEST_CASE("cross_entropy value oracles") {
  SECTION("confident correct prediction has near-zero loss") {
    Tape t;
    Tensor logits({3, 2, 2});
    std::vector<int> labels = {0, 1, 2, 1};
    for (long p = 0; p < 4; ++p) logits.data[(long)labels[p] * 4 + p] = 30.0;
    Value l = cross_entropy(constant(t, logits), labels, 255);
    REQUIRE(l.v().data[0] < 1e-3);
  }
  SECTION("uniform logits, K=4 -> ln 4") {
    Tape t;
    Value l = cross_entropy(constant(t, Tensor::zeros({4, 2, 2})), {0, 1, 2, 3}, 255);
    REQUIRE(l.v().data[0] == Approx(std::log(4.0)).epsilon(1e-12));
  }
  SECTION("two-pixel hand case") {
    // logits per pixel: p0=(2,0), p1=(0,2), labels (0,0):
    // loss = mean(-log s, -log(1-s)), s = e^2/(e^2+1)
    Tape t;
    Tensor logits({2, 1, 2}, {2, 0, 0, 2});
    Value l = cross_entropy(constant(t, logits), {0, 0}, 255);
    const double s = std::exp(2.0) / (std::exp(2.0) + 1.0);
    const double expect = 0.5 * (-std::log(s) - std::log(1.0 - s));
    REQUIRE(expect == Approx(1.1269280110429727).epsilon(1e-12));
    REQUIRE(l.v().data[0] == Approx(expect).epsilon(1e-12));
  }
  SECTION("all pixels ignored is an error, label >= K is an error") {
    Tape t;
    Tensor logits = Tensor::zeros({2, 1, 2});
    REQUIRE_THROWS_AS(cross_entropy(constant(t, logits), {255, 255}, 255), std::invalid_argument);
    REQUIRE_THROWS_AS(cross_entropy(constant(t, logits), {0, 2}, 255), std::invalid_argument);
  }
  SECTION("ignored pixels do not contribute") {
    Tape t;
    Tensor logits = Tensor::zeros({2, 1, 3});
    logits.data[2] = 999.0;  // ignored pixel, class 0 plane
    Value l = cross_entropy(constant(t, logits), {0, 0, 255}, 255);
    REQUIRE(l.v().data[0] == Approx(std::log(2.0)).epsilon(1e-12));
  }
}

TEST_CASE("adam_step behavior") {
  SECTION("zero gradient leaves parameters unchanged") {
    Tensor p = Tensor({3}, {1.0, -2.0, 0.5});
    Tensor orig = p;
    ParamRegistry reg;
    reg.add("p", &p);
    OptimizerState st;
    std::map<std::string, Tensor> grads;
    grads.emplace("p", Tensor::zeros({3}));
    adam_step(reg, grads, st);
    REQUIRE(max_abs_diff(p, orig) == 0.0);
    REQUIRE(st.step == 1);
  }
  SECTION("first step moves by ~lr against the gradient sign") {
    // m=0.1g, v=0.001g^2, bias correction -> mh=1, vh=1, step = lr/(1+eps)
    Tensor p = Tensor::zeros({1});
    ParamRegistry reg;
    reg.add("p", &p);
    OptimizerState st;
    st.lr = 0.1;
    std::map<std::string, Tensor> grads;
    grads.emplace("p", Tensor({1}, {1.0}));
    adam_step(reg, grads, st);
    REQUIRE(p.data[0] == Approx(-0.1).margin(1e-6));
  }
  SECTION("identical params with identical grads get identical updates") {
    Tensor a = Tensor({2}, {0.3, 0.3});
    Tensor b = a;
    ParamRegistry reg;
    reg.add("a", &a);
    reg.add("b", &b);
    OptimizerState st;
    std::map<std::string, Tensor> grads;
    grads.emplace("a", Tensor({2}, {0.7, 0.7}));
    grads.emplace("b", Tensor({2}, {0.7, 0.7}));
    adam_step(reg, grads, st);
    REQUIRE(max_abs_diff(a, b) == 0.0);
    REQUIRE(a.data[0] == Approx(a.data[1]).margin(0.0));
  }
  SECTION("params absent from the gradient map are untouched") {
    Tensor p = Tensor({1}, {4.0});
    ParamRegistry reg;
    reg.add("p", &p);
    OptimizerState st;
    adam_step(reg, {}, st);
    REQUIRE(p.data[0] == 4.0);
  }
  SECTION("shape mismatch rejected") {
    Tensor p = Tensor({2});
    ParamRegistry reg;
    reg.add("p", &p);
    OptimizerState st;
    std::map<std::string, Tensor> grads;
    grads.emplace("p", Tensor({3}));
    REQUIRE_THROWS_AS(adam_step(reg, grads, st), std::invalid_argument);
  }
}
