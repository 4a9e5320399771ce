// Copyright 2026 The uses2 Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "uses2/channel_blocks.h"

#include <cmath>

namespace uses2 {
namespace {

template <typename T>
void Check(const Var<T>& x, std::int64_t dim, const char* who) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[3] != dim || s[0] < 1)
    throw Error(std::string(who) + ": expected [C, F, T, " + std::to_string(dim) + "], got " + ShapeString(s));
}

std::uint64_t Positions(const Shape& s) { return s[0] * s[1] * s[2]; }

}  // namespace

// --- TAC ---------------------------------------------------------------------

template <typename T>
TacBlock TacBlock::Create(Builder<T>& b, const std::string& name, std::int64_t dim, std::int64_t hidden,
                          bool residual) {
  TacBlock m;
  m.dim = dim;
  m.hidden = hidden;
  m.residual = residual;
  m.transform = LinearRef::Create(b, name + ".transform", dim, hidden);
  m.act_transform = PreluRef::Create(b, name + ".transform_act");
  m.average = LinearRef::Create(b, name + ".average", hidden, hidden);
  m.act_average = PreluRef::Create(b, name + ".average_act");
  m.output = LinearRef::Create(b, name + ".output", 2 * hidden, dim);
  m.act_output = PreluRef::Create(b, name + ".output_act");
  m.norm = LayerNormRef::Create(b, name + ".norm", dim);
  return m;
}

template <typename T>
Var<T> TacBlock::operator()(const Binding<T>& p, const Var<T>& x) const {
  Check(x, dim, "TacBlock");
  const std::int64_t C = x.dim(0);
  Var<T> t = act_transform(p, transform(p, x));
  Var<T> a = act_average(p, average(p, ops::MeanLeading(t)));
  Var<T> y = ops::Concat<T>({t, ops::RepeatLeading(a, C)}, 3);
  y = norm(p, act_output(p, output(p, y)));
  return residual ? ops::Add(x, y) : y;
}

std::int64_t TacBlock::NumParams() const {
  return transform.NumParams() + average.NumParams() + output.NumParams() + 3 + 2 * dim;
}

std::uint64_t TacBlock::Macs(const Shape& s) const {
  const std::uint64_t P = Positions(s), mean_rows = s[1] * s[2];
  return P * dim * hidden + mean_rows * hidden * hidden + P * 2 * hidden * dim;
}

// --- channel-wise attention --------------------------------------------------

template <typename T>
ChannelAttention ChannelAttention::Create(Builder<T>& b, const std::string& name, std::int64_t dim,
                                          Scale scale) {
  ChannelAttention m;
  m.dim = dim;
  m.scale = scale;
  m.q = LinearRef::Create(b, name + ".q", dim, dim);
  m.norm_q = LayerNormRef::Create(b, name + ".q_norm", dim);
  m.k = LinearRef::Create(b, name + ".k", dim, dim);
  m.norm_k = LayerNormRef::Create(b, name + ".k_norm", dim);
  m.v = LinearRef::Create(b, name + ".v", dim, dim);
  m.norm_v = LayerNormRef::Create(b, name + ".v_norm", dim);
  m.output = LinearRef::Create(b, name + ".output", dim, dim);
  m.norm_output = LayerNormRef::Create(b, name + ".output_norm", dim);
  return m;
}

template <typename T>
Var<T> ChannelAttention::operator()(const Binding<T>& p, const Var<T>& y, Tensor<T>* map) const {
  Check(y, dim, "ChannelAttention");
  const Shape shape = y.shape();
  const std::int64_t C = shape[0], F = shape[1], Tn = shape[2];
  const Shape flat{1, C, F * Tn * dim};
  Var<T> qs = ops::Reshape(norm_q(p, ops::Relu(q(p, y))), flat);
  Var<T> ks = ops::Reshape(norm_k(p, ops::Relu(k(p, y))), flat);
  Var<T> vs = ops::Reshape(norm_v(p, ops::Relu(v(p, y))), flat);
  const double h = static_cast<double>(dim);
  const double denom = scale == Scale::kHT2 ? std::sqrt(h) * static_cast<double>(Tn)
                                            : std::sqrt(h * static_cast<double>(F * Tn));
  Tensor<T> probs;
  Var<T> a = ops::Attention(qs, ks, vs, 1, static_cast<T>(1.0 / denom), Var<T>(), nullptr,
                            map ? &probs : nullptr);
  if (map) *map = probs.Reshaped({C, C});
  return norm_output(p, ops::Relu(output(p, ops::Reshape(a, shape))));
}

std::int64_t ChannelAttention::NumParams() const {
  return q.NumParams() + k.NumParams() + v.NumParams() + output.NumParams() + 8 * dim;
}

std::uint64_t ChannelAttention::Macs(const Shape& s) const {
  const std::uint64_t P = Positions(s), C = s[0];
  return 4 * P * dim * dim + 2 * C * P * dim;
}

// --- TA_ttC ------------------------------------------------------------------

template <typename T>
TattcBlock TattcBlock::Create(Builder<T>& b, const std::string& name, std::int64_t dim, std::int64_t hidden,
                              ChannelAttention::Scale scale, bool residual) {
  TattcBlock m;
  m.dim = dim;
  m.hidden = hidden;
  m.residual = residual;
  m.project = LinearRef::Create(b, name + ".project", dim, hidden);
  m.act_project = PreluRef::Create(b, name + ".project_act");
  m.attention = ChannelAttention::Create(b, name + ".attention", hidden, scale);
  m.attended = LinearRef::Create(b, name + ".attended", hidden, hidden);
  m.act_attended = PreluRef::Create(b, name + ".attended_act");
  m.output = LinearRef::Create(b, name + ".output", 2 * hidden, dim);
  m.act_output = PreluRef::Create(b, name + ".output_act");
  m.norm = LayerNormRef::Create(b, name + ".norm", dim);
  return m;
}

template <typename T>
Var<T> TattcBlock::operator()(const Binding<T>& p, const Var<T>& x, Tensor<T>* map) const {
  Check(x, dim, "TattcBlock");
  Var<T> y = act_project(p, project(p, x));
  Var<T> ybar = act_attended(p, attended(p, attention(p, y, map)));
  Var<T> out = norm(p, act_output(p, output(p, ops::Concat<T>({y, ybar}, 3))));
  return residual ? ops::Add(x, out) : out;
}

std::int64_t TattcBlock::NumParams() const {
  return project.NumParams() + attention.NumParams() + attended.NumParams() + output.NumParams() + 3 + 2 * dim;
}

std::uint64_t TattcBlock::Macs(const Shape& s) const {
  const std::uint64_t P = Positions(s);
  Shape hs = s;
  hs[3] = hidden;
  return P * dim * hidden + attention.Macs(hs) + P * hidden * hidden + P * 2 * hidden * dim;
}

// --- standalone attention ----------------------------------------------------

template <typename T>
AttentionBlock AttentionBlock::Create(Builder<T>& b, const std::string& name, std::int64_t dim,
                                      std::int64_t hidden, ChannelAttention::Scale scale) {
  AttentionBlock m;
  m.dim = dim;
  m.hidden = hidden;
  m.project = LinearRef::Create(b, name + ".project", dim, hidden);
  m.act_project = PreluRef::Create(b, name + ".project_act");
  m.attention = ChannelAttention::Create(b, name + ".attention", hidden, scale);
  m.output = LinearRef::Create(b, name + ".output", hidden, dim);
  m.act_output = PreluRef::Create(b, name + ".output_act");
  m.norm = LayerNormRef::Create(b, name + ".norm", dim);
  return m;
}

template <typename T>
Var<T> AttentionBlock::operator()(const Binding<T>& p, const Var<T>& x) const {
  Check(x, dim, "AttentionBlock");
  Var<T> y = attention(p, act_project(p, project(p, x)));
  return ops::Add(x, norm(p, act_output(p, output(p, y))));
}

std::int64_t AttentionBlock::NumParams() const {
  return project.NumParams() + attention.NumParams() + output.NumParams() + 2 + 2 * dim;
}

std::uint64_t AttentionBlock::Macs(const Shape& s) const {
  const std::uint64_t P = Positions(s);
  Shape hs = s;
  hs[3] = hidden;
  return P * dim * hidden + attention.Macs(hs) + P * hidden * dim;
}

#define USES2_INSTANTIATE_CHANNEL(T)                                                                   \
  template TacBlock TacBlock::Create(Builder<T>&, const std::string&, std::int64_t, std::int64_t, bool); \
  template Var<T> TacBlock::operator()(const Binding<T>&, const Var<T>&) const;                       \
  template ChannelAttention ChannelAttention::Create(Builder<T>&, const std::string&, std::int64_t,    \
                                                     Scale);                                           \
  template Var<T> ChannelAttention::operator()(const Binding<T>&, const Var<T>&, Tensor<T>*) const;   \
  template TattcBlock TattcBlock::Create(Builder<T>&, const std::string&, std::int64_t, std::int64_t,  \
                                         ChannelAttention::Scale, bool);                               \
  template Var<T> TattcBlock::operator()(const Binding<T>&, const Var<T>&, Tensor<T>*) const;         \
  template AttentionBlock AttentionBlock::Create(Builder<T>&, const std::string&, std::int64_t,        \
                                                 std::int64_t, ChannelAttention::Scale);               \
  template Var<T> AttentionBlock::operator()(const Binding<T>&, const Var<T>&) const;

USES2_INSTANTIATE_CHANNEL(float)
USES2_INSTANTIATE_CHANNEL(double)

}  // namespace uses2
