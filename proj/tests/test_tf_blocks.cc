// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <doctest.h>

#include "test_util.h"
#include "uses2/tf_blocks.h"

using namespace uses2;
using uses2::testing::LayerGradCheck;
using uses2::testing::MaxAbsDiff;
using uses2::testing::RandomTensor;

TEST_CASE("window partition arithmetic") {
  const WindowPlan plan = PlanWindows({1, 129, 251, 4}, WindowSpec{8, 8, false});
  CHECK(plan.padded_f == 136);
  CHECK(plan.padded_t == 256);
  CHECK(plan.windows_per_channel() == 17 * 32);
  CHECK(plan.num_windows() == 544);

  const WindowPlan global = PlanWindows({3, 5, 7, 2}, WindowSpec{5, 7, false});
  CHECK(global.num_windows() == 3);
  CHECK(!global.mask);
}

TEST_CASE("merge inverts partition bit-exactly") {
  const auto x = RandomTensor<float>({2, 13, 21, 6}, 1);
  for (bool shifted : {false, true}) {
    const WindowPlan plan = PlanWindows(x.shape(), WindowSpec{4, 8, shifted});
    const Var<float> w = PartitionWindows(Var<float>(x), plan);
    CHECK(w.shape() == Shape{plan.num_windows(), 32, 6});
    CHECK(MergeWindows(w, plan).value() == x);
  }
  const WindowPlan plan = PlanWindows(x.shape(), WindowSpec{4, 8, true});
  const Var<float> zeros(Tensor<float>({plan.num_windows(), 32, 6}));
  const Tensor<float> merged = MergeWindows(zeros, plan).value();
  for (float v : merged.span()) CHECK(v == 0.0f);
}

TEST_CASE("shifted windows start half a window in") {
  // Tag each position with its coordinates and read back the first token.
  const std::int64_t F = 16, T = 24;
  Tensor<float> x({1, F, T, 2});
  for (std::int64_t f = 0; f < F; ++f)
    for (std::int64_t t = 0; t < T; ++t) {
      x[(f * T + t) * 2] = static_cast<float>(f);
      x[(f * T + t) * 2 + 1] = static_cast<float>(t);
    }
  for (auto [wf, wt] : {std::pair{8, 8}, {5, 7}, {1, 3}}) {
    const WindowSpec spec{wf, wt, true};
    CHECK(spec.shift_f() == wf / 2);
    CHECK(spec.shift_t() == wt / 2);
    const WindowPlan plan = PlanWindows(x.shape(), spec);
    const auto w = PartitionWindows(Var<float>(x), plan).value();
    CHECK(w[0] == static_cast<float>(wf / 2));
    CHECK(w[1] == static_cast<float>(wt / 2));
  }
}

TEST_CASE("shift mask separates wrapped regions") {
  const WindowPlan plan = PlanWindows({1, 8, 8, 1}, WindowSpec{4, 4, true});
  REQUIRE(plan.mask);
  const auto& m = *plan.mask;
  const std::int64_t L = 16;
  // Window (0, 0) lies entirely inside the unwrapped region.
  for (std::int64_t i = 0; i < L * L; ++i) CHECK(m[i] == 0);
  // Window (1, 1) mixes four regions: tokens (0,0) and (3,3) differ.
  const std::uint8_t* last = m.data() + 3 * L * L;
  CHECK(last[0 * L + 15] == 1);
  CHECK(last[0 * L + 1] == 0);
  CHECK(last[0 * L + 2] == 1);
}

TEST_CASE("relative bias table and index") {
  ParameterSet<float> params;
  Initializer init(3);
  Builder<float> b{params, init, false};
  const auto layer = WindowAttentionLayer::Create(b, "w", 8, 2, WindowSpec{3, 5, false}, 16);
  CHECK(params[layer.rel_bias].value.shape() == Shape{2, 5, 9});
  const auto idx = RelativeBiasIndex(WindowSpec{3, 5, false}, 2);
  CHECK(idx->size() == 2u * 15 * 15);
  // Zero offset maps to the table center for every head.
  for (int h = 0; h < 2; ++h)
    for (std::int64_t a = 0; a < 15; ++a) CHECK((*idx)[(h * 15 + a) * 15 + a] == (h * 5 + 2) * 9 + 4);
  CHECK(layer.NumParams() == params.NumElements());
}

TEST_CASE("window layer keeps the shape and reduces to identity with zeroed outputs") {
  ParameterSet<float> params;
  Initializer init(4);
  Builder<float> b{params, init, false};
  const auto layer = WindowAttentionLayer::Create(b, "w", 8, 2, WindowSpec{4, 4, true}, 16);
  for (std::size_t i : {layer.proj.weight, layer.proj.bias, layer.fc2.weight, layer.fc2.bias}) params[i].value.Fill(0);
  const auto x = RandomTensor<float>({2, 7, 10, 8}, 5);
  const auto y = layer(Binding<float>(params), Var<float>(x)).value();
  CHECK(y.shape() == x.shape());
  CHECK(y == x);
  CHECK_THROWS_AS(WindowAttentionLayer::Create(b, "bad", 6, 4, WindowSpec{}, 8), Error);
}

TEST_CASE("path layers only mix along their axis") {
  ParameterSet<float> params;
  Initializer init(6);
  Builder<float> b{params, init, false};
  using Axis = PathTransformerLayer::Axis;
  const auto freq = PathTransformerLayer::Create(b, "f", Axis::kFrequency, 8, 2, 8);
  const auto time = PathTransformerLayer::Create(b, "t", Axis::kTime, 8, 2, 8);
  Binding<float> p(params);
  const std::int64_t C = 2, F = 5, T = 6, N = 8;
  const auto x = RandomTensor<float>({C, F, T, N}, 7);
  auto x2 = x;
  // Perturb frame 4 of bin 2 in channel 1.
  for (std::int64_t n = 0; n < N; ++n) x2[((1 * F + 2) * T + 4) * N + n] += 0.5f;

  const auto fa = freq(p, Var<float>(x)).value(), fb = freq(p, Var<float>(x2)).value();
  const auto ta = time(p, Var<float>(x)).value(), tb = time(p, Var<float>(x2)).value();
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t f = 0; f < F; ++f)
      for (std::int64_t t = 0; t < T; ++t) {
        bool fsame = true, tsame = true;
        for (std::int64_t n = 0; n < N; ++n) {
          const std::int64_t i = ((c * F + f) * T + t) * N + n;
          fsame = fsame && fa[i] == fb[i];
          tsame = tsame && ta[i] == tb[i];
        }
        CHECK(fsame == !(c == 1 && t == 4));
        CHECK(tsame == !(c == 1 && f == 2));
      }
  CHECK(freq.NumParams() + time.NumParams() == params.NumElements());
}

TEST_CASE("memory attach and detach") {
  ParameterSet<float> params;
  Initializer init(8);
  Builder<float> b{params, init, false};
  const auto mem = MemoryTokens::Create(b, "m", 4, 4);
  Binding<float> p(params);
  const auto x = RandomTensor<float>({2, 3, 251, 4}, 9);
  const Var<float> a = AttachMemory(p, mem, Var<float>(x), Var<float>());
  CHECK(a.shape() == Shape{2, 3, 255, 4});
  // Leading frames are the learned tokens, broadcast over channels and bins.
  const auto& tok = params[mem.tokens].value;  // [1, N, 1, G]
  for (std::int64_t c = 0; c < 2; ++c)
    for (std::int64_t f = 0; f < 3; ++f)
      for (std::int64_t g = 0; g < 4; ++g)
        for (std::int64_t n = 0; n < 4; ++n) CHECK(a.value()[((c * 3 + f) * 255 + g) * 4 + n] == tok[n * 4 + g]);
  auto [rest, state] = DetachMemory(a, 4);
  CHECK(rest.value() == x);
  CHECK(state.shape() == Shape{1, 4, 1, 4});
  CHECK(MaxAbsDiff(state.value(), tok) < 1e-6);

  const Var<float> carried = AttachMemory(p, mem, Var<float>(x), state);
  CHECK(carried.shape() == Shape{2, 3, 255, 4});
  CHECK_THROWS_AS(AttachMemory(p, mem, Var<float>(x), Var<float>(Tensor<float>({1, 4, 1, 3}))), Error);
}

TEST_CASE("tf layer gradients match finite differences") {
  using Axis = PathTransformerLayer::Axis;
  ParameterSet<double> wp;
  Initializer init(10);
  Builder<double> b{wp, init, false};
  const auto win = WindowAttentionLayer::Create(b, "w", 4, 2, WindowSpec{2, 2, true}, 8);
  const auto x = RandomTensor<double>({1, 3, 3, 4}, 11);
  CHECK(LayerGradCheck(wp, x, [&](const Binding<double>& p, const Var<double>& v) { return win(p, v); }) < 1e-4);

  for (Axis axis : {Axis::kFrequency, Axis::kTime}) {
    ParameterSet<double> pp;
    Builder<double> pb{pp, init, false};
    const auto path = PathTransformerLayer::Create(pb, "p", axis, 4, 2, 4);
    const auto y = RandomTensor<double>({2, 3, 4, 4}, 12);
    CHECK(LayerGradCheck(pp, y, [&](const Binding<double>& p, const Var<double>& v) { return path(p, v); }) < 1e-4);
  }

  ParameterSet<double> mp;
  Builder<double> mb{mp, init, false};
  const auto mem = MemoryTokens::Create(mb, "m", 4, 2);
  const auto z = RandomTensor<double>({2, 2, 3, 4}, 13);
  CHECK(LayerGradCheck(mp, z, [&](const Binding<double>& p, const Var<double>& v) {
          auto a = AttachMemory(p, mem, v, Var<double>());
          auto [rest, state] = DetachMemory(ops::Scale(a, 2.0), 2);
          return ops::Concat<double>({ops::Reshape(rest, {rest.numel()}), ops::Reshape(state, {state.numel()})}, 0);
        }) < 1e-6);
}
