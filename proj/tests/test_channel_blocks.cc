// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <doctest.h>

#include <algorithm>
#include <array>

#include "test_util.h"
#include "uses2/channel_blocks.h"

using namespace uses2;
using uses2::testing::LayerGradCheck;
using uses2::testing::MaxAbsDiff;
using uses2::testing::RandomTensor;

namespace {

template <typename T>
Tensor<T> PermuteChannels(const Tensor<T>& x, const std::array<int, 3>& perm) {
  Tensor<T> y(x.shape());
  const std::int64_t per = x.numel() / x.shape()[0];
  for (int c = 0; c < 3; ++c) std::copy(x.data() + perm[c] * per, x.data() + (perm[c] + 1) * per, y.data() + c * per);
  return y;
}

template <typename Fn>
double WorstPermutationError(const Tensor<float>& x, Fn&& fn) {
  const Tensor<float> base = fn(x);
  std::array<int, 3> perm{0, 1, 2};
  double worst = 0;
  do {
    const Tensor<float> out = fn(PermuteChannels(x, perm));
    worst = std::max(worst, MaxAbsDiff(out, PermuteChannels(base, perm)));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return worst;
}

}  // namespace

TEST_CASE("channel modules are permutation equivariant") {
  ParameterSet<float> params;
  Initializer init(21);
  Builder<float> b{params, init, true};
  const auto tac = TacBlock::Create(b, "tac", 16, 48);
  const auto tattc = TattcBlock::Create(b, "tattc", 16, 16, ChannelAttention::Scale::kHT2);
  const auto att = AttentionBlock::Create(b, "att", 16, 16, ChannelAttention::Scale::kHFT);
  Binding<float> p(params);
  const auto x = RandomTensor<float>({3, 5, 7, 16}, 22);
  CHECK(WorstPermutationError(x, [&](const Tensor<float>& v) { return tac(p, Var<float>(v)).value(); }) < 1e-5);
  CHECK(WorstPermutationError(x, [&](const Tensor<float>& v) { return tattc(p, Var<float>(v)).value(); }) < 1e-5);
  CHECK(WorstPermutationError(x, [&](const Tensor<float>& v) { return att(p, Var<float>(v)).value(); }) < 1e-5);
  CHECK(params.NumElements() == tac.NumParams() + tattc.NumParams() + att.NumParams());
}

TEST_CASE("channel attention weights") {
  ParameterSet<float> params;
  Initializer init(23);
  Builder<float> b{params, init, true};
  const auto att = ChannelAttention::Create(b, "a", 6, ChannelAttention::Scale::kHT2);
  Binding<float> p(params);

  SUBCASE("rows are distributions") {
    Tensor<float> map;
    const auto y = att(p, Var<float>(RandomTensor<float>({4, 3, 5, 6}, 24)), &map);
    CHECK(y.shape() == Shape{4, 3, 5, 6});
    REQUIRE(map.shape() == Shape{4, 4});
    for (int i = 0; i < 4; ++i) {
      float s = 0;
      for (int j = 0; j < 4; ++j) {
        CHECK(map[i * 4 + j] >= 0);
        s += map[i * 4 + j];
      }
      CHECK(s == doctest::Approx(1.0f).epsilon(1e-6));
    }
  }
  SUBCASE("identical channels attend uniformly") {
    const auto one = RandomTensor<float>({1, 3, 5, 6}, 25);
    Tensor<float> two({2, 3, 5, 6});
    std::copy(one.data(), one.data() + one.numel(), two.data());
    std::copy(one.data(), one.data() + one.numel(), two.data() + one.numel());
    Tensor<float> map;
    att(p, Var<float>(two), &map);
    for (float v : map.span()) CHECK(v == doctest::Approx(0.5f).epsilon(1e-6));
  }
  SUBCASE("single channel passes through the output projection only") {
    Tensor<float> map;
    att(p, Var<float>(RandomTensor<float>({1, 2, 3, 6}, 26)), &map);
    CHECK(map.numel() == 1);
    CHECK(map[0] == doctest::Approx(1.0f));
  }
}

TEST_CASE("tac averages over channels") {
  ParameterSet<float> params;
  Initializer init(27);
  Builder<float> b{params, init, true};
  const auto tac = TacBlock::Create(b, "tac", 8, 12, false);
  CHECK(tac.NumParams() == (8 * 12 + 12) + (12 * 12 + 12) + (24 * 8 + 8) + 3 + 2 * 8);
  Binding<float> p(params);
  // Without the residual, duplicated channels give duplicated outputs.
  const auto one = RandomTensor<float>({1, 2, 3, 8}, 28);
  Tensor<float> two({2, 2, 3, 8});
  std::copy(one.data(), one.data() + one.numel(), two.data());
  std::copy(one.data(), one.data() + one.numel(), two.data() + one.numel());
  const auto y1 = tac(p, Var<float>(one)).value();
  const auto y2 = tac(p, Var<float>(two)).value();
  for (std::int64_t i = 0; i < y1.numel(); ++i) {
    CHECK(y2[i] == doctest::Approx(y1[i]).epsilon(1e-5));
    CHECK(y2[i + y1.numel()] == doctest::Approx(y1[i]).epsilon(1e-5));
  }
}

TEST_CASE("channel blocks reject malformed features") {
  ParameterSet<float> params;
  Initializer init(29);
  Builder<float> b{params, init, true};
  const auto tac = TacBlock::Create(b, "tac", 8, 12);
  const auto tattc = TattcBlock::Create(b, "tattc", 8, 4, ChannelAttention::Scale::kHT2);
  Binding<float> p(params);
  CHECK_THROWS_AS(tac(p, Var<float>(Tensor<float>({2, 3, 4, 7}))), Error);
  CHECK_THROWS_AS(tattc(p, Var<float>(Tensor<float>({2, 3, 4}))), Error);
}

// Finite differences are meaningless within eps of a ReLU or PReLU kink, so
// the instance below is one where no pre-activation lies that close to zero.
TEST_CASE("channel block gradients match finite differences") {
  const auto x = RandomTensor<double>({3, 2, 5, 4}, 31);
  {
    ParameterSet<double> params;
    Initializer init(131);
    Builder<double> b{params, init, true};
    const auto tac = TacBlock::Create(b, "tac", 4, 6);
    CHECK(LayerGradCheck(params, x, [&](const Binding<double>& p, const Var<double>& v) { return tac(p, v); }) < 1e-4);
  }
  for (auto scale : {ChannelAttention::Scale::kHT2, ChannelAttention::Scale::kHFT}) {
    ParameterSet<double> params;
    Initializer init(131);
    Builder<double> b{params, init, true};
    const auto tattc = TattcBlock::Create(b, "tattc", 4, 3, scale);
    CHECK(LayerGradCheck(params, x, [&](const Binding<double>& p, const Var<double>& v) { return tattc(p, v); }) <
          1e-4);
  }
}
