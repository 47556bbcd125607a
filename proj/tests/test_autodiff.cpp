#include <catch2/catch_amalgamated.hpp>

#include "charm/ops.hpp"
#include "charm/window.hpp"
#include "support.hpp"

using namespace charm;
using testsup::check_gradients;
using testsup::random_tensor;
using testsup::random_tensor_nonsingular;
using Catch::Approx;

namespace {
constexpr int kSeeds = 100;  // randomized-small-shape sweep per primitive
}

TEST_CASE("backward: analytic trivial cases") {
  SECTION("loss = sum(x) gives all-ones gradient") {
    Tape t;
    Rng rng(1);
    Tensor x = random_tensor({3, 4}, rng);
    Value vx = make_leaf(t, x, true);
    Value loss = scale(mean_all(vx), (double)x.numel());
    t.backward(loss.id);
    for (long i = 0; i < x.numel(); ++i) REQUIRE(t.grad(vx.id).data[i] == Approx(1.0).epsilon(1e-12));
  }
  SECTION("loss = sum(x*x)/2 gives gradient x") {
    Tape t;
    Rng rng(2);
    Tensor x = random_tensor({5}, rng);
    Value vx = make_leaf(t, x, true);
    Value loss = scale(mean_all(mul(vx, vx)), (double)x.numel() / 2.0);
    t.backward(loss.id);
    for (long i = 0; i < x.numel(); ++i)
      REQUIRE(t.grad(vx.id).data[i] == Approx(x.data[i]).margin(1e-12));
  }
  SECTION("backward rejects non-scalar loss") {
    Tape t;
    Value vx = make_leaf(t, Tensor::zeros({3}), true);
    REQUIRE_THROWS_AS(t.backward(vx.id), std::invalid_argument);
  }
}

TEST_CASE("finite differences: elementwise and reduction primitives") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(1000 + seed);
    Tensor a = random_tensor({2, 4, 3}, rng);
    Tensor b = random_tensor({2, 4, 3}, rng);
    auto rep = check_gradients({&a, &b}, [&](Tape& t, ParamBinder& P) {
      Value s = add(P(a), scale(P(b), 1.7));
      return mean_all(mul(s, P(b)));
    });
    INFO("seed " << seed << " max rel err " << rep.max_rel_err);
    REQUIRE(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: relu away from kinks") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(2000 + seed);
    Tensor a = random_tensor_nonsingular({3, 5}, rng);
    auto rep = check_gradients({&a}, [&](Tape& t, ParamBinder& P) { return mean_all(relu(P(a))); });
    REQUIRE(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: matmul and batched matmul") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(3000 + seed);
    Tensor a = random_tensor({3, 4, 2}, rng);  // leading dims flattened to rows
    Tensor w = random_tensor({2, 5}, rng);
    auto rep = check_gradients({&a, &w}, [&](Tape& t, ParamBinder& P) {
      return mean_all(matmul(P(a), P(w)));
    });
    REQUIRE(rep.max_rel_err < 1e-4);

    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor y = random_tensor({2, 4, 2}, rng);
    auto rep2 = check_gradients({&x, &y}, [&](Tape& t, ParamBinder& P) {
      return mean_all(bmm(P(x), P(y)));
    });
    REQUIRE(rep2.max_rel_err < 1e-4);

    Tensor z = random_tensor({2, 5, 4}, rng);
    auto rep3 = check_gradients({&x, &z}, [&](Tape& t, ParamBinder& P) {
      return mean_all(bmm_nt(P(x), P(z)));
    });
    REQUIRE(rep3.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: softmax and layer norm") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(4000 + seed);
    Tensor x = random_tensor({3, 4, 2}, rng, -3, 3);
    for (int axis = 0; axis < 3; ++axis) {
      // weighted sum keeps the loss sensitive to every softmax output
      Tensor wts = random_tensor({3, 4, 2}, rng);
      auto rep = check_gradients({&x}, [&](Tape& t, ParamBinder& P) {
        return mean_all(mul(softmax(P(x), axis), constant(t, wts)));
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
    Tensor f = random_tensor({4, 3, 3}, rng);
    Tensor g = random_tensor({4}, rng, 0.5, 1.5);
    Tensor b = random_tensor({4}, rng, -0.5, 0.5);
    Tensor wts = random_tensor({4, 3, 3}, rng);
    auto rep = check_gradients({&f, &g, &b}, [&](Tape& t, ParamBinder& P) {
      return mean_all(mul(layer_norm_chan(P(f), P(g), P(b)), constant(t, wts)));
    });
    REQUIRE(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: conv2d variants") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(5000 + seed);
    {
      Tensor x = random_tensor({2, 6, 6}, rng);
      Tensor w = random_tensor({3, 2, 3, 3}, rng);
      Tensor b = random_tensor({3}, rng);
      auto rep = check_gradients({&x, &w, &b}, [&](Tape& t, ParamBinder& P) {
        return mean_all(conv2d(P(x), P(w), P(b), 1, 1, 1));
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
    {
      // depthwise, stride 2, asymmetric spatial size
      Tensor x = random_tensor({3, 6, 4}, rng);
      Tensor w = random_tensor({3, 1, 3, 3}, rng);
      auto rep = check_gradients({&x, &w}, [&](Tape& t, ParamBinder& P) {
        return mean_all(conv2d(P(x), P(w), std::nullopt, 2, 1, 3));
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
    {
      // pointwise fast path
      Tensor x = random_tensor({4, 5, 5}, rng);
      Tensor w = random_tensor({2, 4, 1, 1}, rng);
      Tensor b = random_tensor({2}, rng);
      auto rep = check_gradients({&x, &w, &b}, [&](Tape& t, ParamBinder& P) {
        return mean_all(conv2d(P(x), P(w), P(b), 1, 0, 1));
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("finite differences: upsample, gather, concat, scale_by_map") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(6000 + seed);
    {
      Tensor x = random_tensor({2, 3, 4}, rng);
      Tensor wts = random_tensor({2, 6, 8}, rng);
      auto rep = check_gradients({&x}, [&](Tape& t, ParamBinder& P) {
        return mean_all(mul(upsample_bilinear(P(x), 2), constant(t, wts)));
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
    {
      Tensor x = random_tensor({12}, rng);
      auto map = std::make_shared<std::vector<long>>();
      for (int i = 0; i < 20; ++i) map->push_back(rng.uniform_int(12));  // repeats allowed
      Tensor wts = random_tensor({20}, rng);
      auto rep = check_gradients({&x}, [&](Tape& t, ParamBinder& P) {
        return mean_all(mul(gather(P(x), map, {20}), constant(t, wts)));
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
    {
      Tensor a = random_tensor({2, 2, 3}, rng);
      Tensor b = random_tensor({2, 4, 3}, rng);
      Tensor wts = random_tensor({2, 6, 3}, rng);
      auto rep = check_gradients({&a, &b}, [&](Tape& t, ParamBinder& P) {
        return mean_all(mul(concat({P(a), P(b)}, 1), constant(t, wts)));
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
    {
      Tensor x = random_tensor({3, 4, 4}, rng);
      Tensor r = random_tensor({1, 4, 4}, rng);
      auto rep = check_gradients({&x, &r}, [&](Tape& t, ParamBinder& P) {
        return mean_all(scale_by_map(P(x), P(r)));
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("finite differences: losses") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng(7000 + seed);
    {
      Tensor logits = random_tensor({3, 4, 4}, rng, -2, 2);
      std::vector<int> labels(16);
      for (int& l : labels) l = rng.uniform_int(4) == 3 ? 255 : rng.uniform_int(3);
      labels[0] = 0;  // keep at least one valid pixel
      auto rep = check_gradients({&logits}, [&](Tape& t, ParamBinder& P) {
        return cross_entropy(P(logits), labels, 255);
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
    {
      Tensor fa = random_tensor({3, 2, 2}, rng, -2, 2);
      Tensor fb = random_tensor({3, 2, 2}, rng, -2, 2);
      auto rep = check_gradients({&fa, &fb}, [&](Tape& t, ParamBinder& P) {
        Value pa = softmax(P(fa), 0);
        Value pb = softmax(P(fb), 0);
        Value avg = scale(add(pa, pb), 0.5);
        return scale(add(kl_div_mean(pa, avg), kl_div_mean(pb, avg)), 0.5);
      });
      REQUIRE(rep.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("finite differences: randomized conv -> softmax -> cross_entropy composite") {
  for (int seed = 0; seed < 40; ++seed) {
    Rng rng(8000 + seed);
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor w1 = random_tensor({4, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor b1 = random_tensor({4}, rng, -0.1, 0.1);
    Tensor w2 = random_tensor({3, 4, 1, 1}, rng, -0.5, 0.5);
    std::vector<int> labels(36);
    for (int& l : labels) l = rng.uniform_int(3);
    auto rep = check_gradients({&x, &w1, &b1, &w2}, [&](Tape& t, ParamBinder& P) {
      Value h = conv2d(P(x), P(w1), P(b1), 1, 1, 1);
      h = softmax(h, 0);
      Value logits = conv2d(h, P(w2), std::nullopt, 1, 0, 1);
      return cross_entropy(logits, labels, 255);
    });
    INFO("seed " << seed << " max rel err " << rep.max_rel_err);
    REQUIRE(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("determinism: identical graph construction is bit-identical") {
  auto run = [] {
    Rng rng(99);
    Tape t;
    Tensor x = random_tensor({2, 6, 6}, rng);
    Tensor w = random_tensor({2, 2, 3, 3}, rng);
    Value y = conv2d(constant(t, x), constant(t, w), std::nullopt, 1, 1, 1);
    return mean_all(softmax(y, 0)).v().data[0];
  };
  REQUIRE(run() == run());
}
