// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "uses2/tf_blocks.h"

#include <cmath>

namespace uses2 {
namespace {

std::int64_t RoundUp(std::int64_t n, std::int64_t m) { return (n + m - 1) / m * m; }

// Region label along one axis of the rolled grid, as in shifted-window attention.
int Region(std::int64_t pos, std::int64_t padded, std::int64_t win, std::int64_t shift) {
  if (pos < padded - win) return 0;
  if (pos < padded - shift) return 1;
  return 2;
}

void CheckFeature(const Shape& s, std::int64_t dim, const char* who) {
  if (s.size() != 4) throw Error(std::string(who) + ": expected [C, F, T, N], got " + ShapeString(s));
  if (s[3] != dim) throw Error(std::string(who) + ": embedding size mismatch, got " + ShapeString(s));
  if (s[0] < 1 || s[1] < 1 || s[2] < 1) throw Error(std::string(who) + ": empty feature " + ShapeString(s));
}

}  // namespace

WindowPlan PlanWindows(const Shape& s, const WindowSpec& spec) {
  if (s.size() != 4) throw Error("PlanWindows: expected [C, F, T, N], got " + ShapeString(s));
  if (spec.win_f < 1 || spec.win_t < 1) throw Error("PlanWindows: window sizes must be positive");
  WindowPlan plan;
  plan.spec = spec;
  plan.channels = s[0];
  plan.freq = s[1];
  plan.time = s[2];
  plan.dim = s[3];
  plan.padded_f = RoundUp(plan.freq, spec.win_f);
  plan.padded_t = RoundUp(plan.time, spec.win_t);
  plan.windows_f = plan.padded_f / spec.win_f;
  plan.windows_t = plan.padded_t / spec.win_t;

  const std::int64_t L = spec.tokens();
  const std::int64_t C = plan.channels, F = plan.freq, Tn = plan.time;
  const std::int64_t sf = spec.shift_f(), st = spec.shift_t();
  auto source = std::make_shared<std::vector<std::int64_t>>(plan.num_windows() * L, -1);
  auto target = std::make_shared<std::vector<std::int64_t>>(C * F * Tn, -1);
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t wf = 0; wf < plan.windows_f; ++wf)
      for (std::int64_t wt = 0; wt < plan.windows_t; ++wt)
        for (std::int64_t i = 0; i < spec.win_f; ++i)
          for (std::int64_t j = 0; j < spec.win_t; ++j) {
            const std::int64_t row = ((c * plan.windows_f + wf) * plan.windows_t + wt) * L + i * spec.win_t + j;
            const std::int64_t f = (wf * spec.win_f + i + sf) % plan.padded_f;
            const std::int64_t t = (wt * spec.win_t + j + st) % plan.padded_t;
            if (f >= F || t >= Tn) continue;
            const std::int64_t src = (c * F + f) * Tn + t;
            (*source)[row] = src;
            (*target)[src] = row;
          }
  plan.token_source = source;
  plan.token_target = target;

  if (spec.shifted) {
    auto mask = std::make_shared<std::vector<std::uint8_t>>(plan.windows_per_channel() * L * L, 0);
    std::vector<int> label(L);
    for (std::int64_t wf = 0; wf < plan.windows_f; ++wf)
      for (std::int64_t wt = 0; wt < plan.windows_t; ++wt) {
        for (std::int64_t i = 0; i < spec.win_f; ++i)
          for (std::int64_t j = 0; j < spec.win_t; ++j)
            label[i * spec.win_t + j] =
                3 * Region(wf * spec.win_f + i, plan.padded_f, spec.win_f, sf) +
                Region(wt * spec.win_t + j, plan.padded_t, spec.win_t, st);
        std::uint8_t* m = mask->data() + (wf * plan.windows_t + wt) * L * L;
        for (std::int64_t a = 0; a < L; ++a)
          for (std::int64_t b = 0; b < L; ++b) m[a * L + b] = label[a] != label[b];
      }
    plan.mask = mask;
  }
  return plan;
}

template <typename T>
Var<T> PartitionWindows(const Var<T>& feature, const WindowPlan& plan) {
  if (feature.shape() != Shape{plan.channels, plan.freq, plan.time, plan.dim})
    throw Error("PartitionWindows: feature does not match plan, got " + ShapeString(feature.shape()));
  Var<T> rows = ops::GatherRows(feature, plan.token_source);
  return ops::Reshape(rows, {plan.num_windows(), plan.spec.tokens(), plan.dim});
}

template <typename T>
Var<T> MergeWindows(const Var<T>& windows, const WindowPlan& plan) {
  if (windows.shape() != Shape{plan.num_windows(), plan.spec.tokens(), plan.dim})
    throw Error("MergeWindows: windows do not match plan, got " + ShapeString(windows.shape()));
  Var<T> rows = ops::GatherRows(windows, plan.token_target);
  return ops::Reshape(rows, {plan.channels, plan.freq, plan.time, plan.dim});
}

std::shared_ptr<const std::vector<std::int64_t>> RelativeBiasIndex(const WindowSpec& spec, int heads) {
  const std::int64_t L = spec.tokens();
  const std::int64_t span_f = 2 * spec.win_f - 1, span_t = 2 * spec.win_t - 1;
  auto index = std::make_shared<std::vector<std::int64_t>>(heads * L * L);
  for (int h = 0; h < heads; ++h)
    for (std::int64_t a = 0; a < L; ++a)
      for (std::int64_t b = 0; b < L; ++b) {
        const std::int64_t df = a / spec.win_t - b / spec.win_t + spec.win_f - 1;
        const std::int64_t dt = a % spec.win_t - b % spec.win_t + spec.win_t - 1;
        (*index)[(h * L + a) * L + b] = (h * span_f + df) * span_t + dt;
      }
  return index;
}

// --- window attention --------------------------------------------------------

template <typename T>
WindowAttentionLayer WindowAttentionLayer::Create(Builder<T>& b, const std::string& name, std::int64_t dim,
                                                  int heads, const WindowSpec& spec, std::int64_t ffn_dim) {
  if (heads < 1 || dim % heads != 0) throw Error(name + ": heads must divide the embedding size");
  WindowAttentionLayer l;
  l.spec = spec;
  l.heads = heads;
  l.dim = dim;
  l.ffn_dim = ffn_dim;
  l.norm1 = LayerNormRef::Create(b, name + ".norm1", dim);
  l.q = LinearRef::Create(b, name + ".attn.q", dim, dim);
  l.k = LinearRef::Create(b, name + ".attn.k", dim, dim);
  l.v = LinearRef::Create(b, name + ".attn.v", dim, dim);
  l.proj = LinearRef::Create(b, name + ".attn.proj", dim, dim);
  l.rel_bias = b.Add(name + ".attn.relative_bias",
                     b.init.template TruncatedNormalTensor<T>(
                         {heads, 2 * spec.win_f - 1, 2 * spec.win_t - 1}, 0.02));
  l.norm2 = LayerNormRef::Create(b, name + ".norm2", dim);
  l.fc1 = LinearRef::Create(b, name + ".ffn.fc1", dim, ffn_dim);
  l.fc2 = LinearRef::Create(b, name + ".ffn.fc2", ffn_dim, dim);
  return l;
}

template <typename T>
Var<T> WindowAttentionLayer::operator()(const Binding<T>& p, const Var<T>& x) const {
  CheckFeature(x.shape(), dim, "WindowAttentionLayer");
  const WindowPlan plan = PlanWindows(x.shape(), spec);
  const std::int64_t L = spec.tokens();
  Var<T> h = PartitionWindows(norm1(p, x), plan);
  Var<T> bias = ops::Gather(p[rel_bias], RelativeBiasIndex(spec, heads), {heads, L, L});
  const T scale = T(1) / std::sqrt(static_cast<T>(dim / heads));
  Var<T> a = ops::Attention(q(p, h), k(p, h), v(p, h), heads, scale, bias, plan.mask);
  Var<T> y = ops::Add(x, MergeWindows(proj(p, a), plan));
  Var<T> f = fc2(p, ops::Gelu(fc1(p, norm2(p, y))));
  return ops::Add(y, f);
}

std::int64_t WindowAttentionLayer::NumParams() const {
  return 4 * dim + q.NumParams() + k.NumParams() + v.NumParams() + proj.NumParams() +
         heads * (2 * spec.win_f - 1) * (2 * spec.win_t - 1) + fc1.NumParams() + fc2.NumParams();
}

std::uint64_t WindowAttentionLayer::Macs(const Shape& s) const {
  const WindowPlan plan = PlanWindows(s, spec);
  const std::uint64_t tokens = plan.num_windows() * spec.tokens();
  const std::uint64_t rows = s[0] * s[1] * s[2];
  const std::uint64_t L = spec.tokens(), N = dim;
  return 4 * tokens * N * N + 2 * plan.num_windows() * L * L * N + 2 * rows * N * ffn_dim;
}

// --- path transformer --------------------------------------------------------

template <typename T>
PathTransformerLayer PathTransformerLayer::Create(Builder<T>& b, const std::string& name, Axis axis,
                                                  std::int64_t dim, int heads, std::int64_t hidden) {
  if (heads < 1 || dim % heads != 0) throw Error(name + ": heads must divide the embedding size");
  PathTransformerLayer l;
  l.axis = axis;
  l.heads = heads;
  l.dim = dim;
  l.hidden = hidden;
  l.norm1 = LayerNormRef::Create(b, name + ".norm1", dim);
  l.q = LinearRef::Create(b, name + ".attn.q", dim, dim);
  l.k = LinearRef::Create(b, name + ".attn.k", dim, dim);
  l.v = LinearRef::Create(b, name + ".attn.v", dim, dim);
  l.proj = LinearRef::Create(b, name + ".attn.proj", dim, dim);
  l.norm2 = LayerNormRef::Create(b, name + ".norm2", dim);
  l.gru_fwd = GruRef::Create(b, name + ".ffn.gru_fwd", dim, hidden);
  l.gru_bwd = GruRef::Create(b, name + ".ffn.gru_bwd", dim, hidden);
  l.out = LinearRef::Create(b, name + ".ffn.out", 2 * hidden, dim);
  return l;
}

template <typename T>
Var<T> PathTransformerLayer::operator()(const Binding<T>& p, const Var<T>& x) const {
  CheckFeature(x.shape(), dim, "PathTransformerLayer");
  const std::int64_t C = x.dim(0), F = x.dim(1), Tn = x.dim(2);
  Var<T> s = axis == Axis::kTime ? ops::Reshape(x, {C * F, Tn, dim})
                                 : ops::Reshape(ops::Permute(x, {0, 2, 1, 3}), {C * Tn, F, dim});
  Var<T> h = norm1(p, s);
  const T scale = T(1) / std::sqrt(static_cast<T>(dim / heads));
  s = ops::Add(s, proj(p, ops::Attention(q(p, h), k(p, h), v(p, h), heads, scale)));
  h = norm2(p, s);
  Var<T> r = ops::Concat<T>({gru_fwd(p, h, false), gru_bwd(p, h, true)}, 2);
  s = ops::Add(s, out(p, ops::Relu(r)));
  if (axis == Axis::kTime) return ops::Reshape(s, {C, F, Tn, dim});
  return ops::Permute(ops::Reshape(s, {C, Tn, F, dim}), {0, 2, 1, 3});
}

std::int64_t PathTransformerLayer::NumParams() const {
  const std::int64_t gru = 3 * hidden * (dim + hidden) + 6 * hidden;
  return 4 * dim + q.NumParams() + k.NumParams() + v.NumParams() + proj.NumParams() + 2 * gru +
         out.NumParams();
}

std::uint64_t PathTransformerLayer::Macs(const Shape& s) const {
  const std::uint64_t rows = s[0] * s[1] * s[2];
  const std::uint64_t L = axis == Axis::kTime ? s[2] : s[1];
  const std::uint64_t N = dim, H = hidden;
  return 4 * rows * N * N + 2 * rows * L * N + 2 * rows * 3 * H * (N + H) + rows * 2 * H * N;
}

// --- memory tokens -----------------------------------------------------------

template <typename T>
MemoryTokens MemoryTokens::Create(Builder<T>& b, const std::string& name, std::int64_t dim, std::int64_t group) {
  if (group < 1) throw Error(name + ": memory group size must be positive");
  MemoryTokens m;
  m.dim = dim;
  m.group = group;
  m.tokens = b.Add(name, b.init.template TruncatedNormalTensor<T>({1, dim, 1, group}, 0.02));
  return m;
}

template <typename T>
Var<T> AttachMemory(const Binding<T>& p, const MemoryTokens& mem, const Var<T>& feature, const Var<T>& carry) {
  CheckFeature(feature.shape(), mem.dim, "AttachMemory");
  const Var<T>& state = carry.defined() ? carry : p[mem.tokens];
  if (state.shape() != Shape{1, mem.dim, 1, mem.group})
    throw Error("AttachMemory: memory state must be [1, N, 1, G], got " + ShapeString(state.shape()));
  const std::int64_t C = feature.dim(0), F = feature.dim(1);
  Var<T> frames = ops::Reshape(ops::Permute(state, {0, 2, 3, 1}), {1, mem.group * mem.dim});
  frames = ops::Reshape(ops::RepeatLeading(frames, C * F), {C, F, mem.group, mem.dim});
  return ops::Concat<T>({frames, feature}, 2);
}

template <typename T>
std::pair<Var<T>, Var<T>> DetachMemory(const Var<T>& feature, std::int64_t group) {
  if (feature.shape().size() != 4 || feature.dim(2) <= group)
    throw Error("DetachMemory: feature has no frames beyond memory, got " + ShapeString(feature.shape()));
  const std::int64_t C = feature.dim(0), F = feature.dim(1), N = feature.dim(3);
  Var<T> frames = ops::Reshape(ops::Slice(feature, 2, 0, group), {C * F, group * N});
  Var<T> state = ops::Permute(ops::Reshape(ops::MeanLeading(frames), {1, 1, group, N}), {0, 3, 1, 2});
  return {ops::Slice(feature, 2, group, feature.dim(2) - group), state};
}

#define USES2_INSTANTIATE_TF(T)                                                                      \
  template Var<T> PartitionWindows(const Var<T>&, const WindowPlan&);                                \
  template Var<T> MergeWindows(const Var<T>&, const WindowPlan&);                                    \
  template WindowAttentionLayer WindowAttentionLayer::Create(Builder<T>&, const std::string&,        \
                                                             std::int64_t, int, const WindowSpec&,   \
                                                             std::int64_t);                          \
  template Var<T> WindowAttentionLayer::operator()(const Binding<T>&, const Var<T>&) const;          \
  template PathTransformerLayer PathTransformerLayer::Create(Builder<T>&, const std::string&, Axis,  \
                                                             std::int64_t, int, std::int64_t);       \
  template Var<T> PathTransformerLayer::operator()(const Binding<T>&, const Var<T>&) const;          \
  template MemoryTokens MemoryTokens::Create(Builder<T>&, const std::string&, std::int64_t,          \
                                             std::int64_t);                                          \
  template Var<T> AttachMemory(const Binding<T>&, const MemoryTokens&, const Var<T>&, const Var<T>&); \
  template std::pair<Var<T>, Var<T>> DetachMemory(const Var<T>&, std::int64_t);

USES2_INSTANTIATE_TF(float)
USES2_INSTANTIATE_TF(double)

}  // namespace uses2
