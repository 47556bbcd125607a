#include <catch2/catch_amalgamated.hpp>

#include "charm/seghead.hpp"
#include "support.hpp"

using namespace charm;
using testsup::random_tensor;
using Catch::Approx;

namespace {

std::array<Value, 4> make_levels(Tape& t, const std::array<int, 4>& ch, int H, int W, Rng& rng) {
  std::array<Value, 4> lv;
  for (int i = 0; i < 4; ++i)
    lv[i] = constant(t, random_tensor({ch[i], H / (4 << i), W / (4 << i)}, rng));
  return lv;
}

}  // namespace

TEST_CASE("decode shape contract") {
  std::array<int, 4> ch = {4, 8, 16, 32};
  Rng rng(1);
  SegHeadParams head;
  head.init(ch, 8, 2, rng);
  Tape t;
  ParamBinder P(t, false);
  Rng drng(2);
  auto lv = make_levels(t, ch, 64, 64, drng);
  Value logits = decode(P, lv, head, 64, 64);
  REQUIRE(logits.shape() == Shape{2, 64, 64});
}

TEST_CASE("decode validates level shapes") {
  std::array<int, 4> ch = {4, 8, 16, 32};
  Rng rng(3);
  SegHeadParams head;
  head.init(ch, 8, 2, rng);
  Tape t;
  ParamBinder P(t, false);
  Rng drng(4);
  auto lv = make_levels(t, ch, 64, 64, drng);
  lv[1] = constant(t, random_tensor({8, 4, 8}, drng));  // wrong spatial
  REQUIRE_THROWS_AS(decode(P, lv, head, 64, 64), std::invalid_argument);
  auto lv2 = make_levels(t, ch, 64, 64, drng);
  lv2[2] = constant(t, random_tensor({15, 4, 4}, drng));  // wrong channels
  REQUIRE_THROWS_AS(decode(P, lv2, head, 64, 64), std::invalid_argument);
}

TEST_CASE("zero classifier weights give constant logits at the bias") {
  std::array<int, 4> ch = {4, 8, 16, 32};
  Rng rng(5);
  SegHeadParams head;
  head.init(ch, 8, 3, rng);
  std::fill(head.classify.w.data.begin(), head.classify.w.data.end(), 0.0);
  head.classify.b = Tensor({3}, {0.25, -1.5, 2.0});
  Tape t;
  ParamBinder P(t, false);
  Rng drng(6);
  auto lv = make_levels(t, ch, 32, 32, drng);
  Value logits = decode(P, lv, head, 32, 32);
  for (int k = 0; k < 3; ++k)
    for (long p = 0; p < 32 * 32; ++p)
      REQUIRE(logits.v().data[(long)k * 32 * 32 + p] == Approx(head.classify.b.data[k]).margin(1e-12));
}

TEST_CASE("seghead gradients match finite differences") {
  std::array<int, 4> ch = {2, 3, 4, 5};
  Rng rng(7);
  SegHeadParams head;
  head.init(ch, 4, 2, rng);
  Rng drng(8);
  std::array<Tensor, 4> lv;
  for (int i = 0; i < 4; ++i) lv[i] = random_tensor({ch[i], 8 / (1 << i), 8 / (1 << i)}, drng);
  std::vector<int> labels(32 * 32);
  for (int& l : labels) l = drng.uniform_int(2);
  std::vector<Tensor*> ps = {&head.fuse.w, &head.fuse.b, &head.proj[0].w, &head.classify.w};
  auto rep = testsup::check_gradients(ps, [&](Tape& t, ParamBinder& P) {
    std::array<Value, 4> levels;
    for (int i = 0; i < 4; ++i) levels[i] = constant(t, lv[i]);
    Value logits = decode(P, levels, head, 32, 32);
    return cross_entropy(logits, labels, 255);
  });
  INFO("max rel err " << rep.max_rel_err);
  REQUIRE(rep.max_rel_err < 1e-4);
}
