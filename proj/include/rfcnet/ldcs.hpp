// Loose/strong dense connection layers and their closed-form parameter
// counts, plus the enumeration used to cross-check the formulas.
//
// An LDCS layer maps n_in channel groups to n_out groups. Each output group
// convolves its parent input group with a k x k "strong" kernel, mixes the
// remaining groups through a 1x1 "loose" kernel, merges the two paths and
// applies a final 1x1 "fuse" kernel. SDCS is the dense baseline: one k x k
// convolution over all channels followed by a 1x1 over all channels.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rfcnet/core.hpp"
#include "rfcnet/nn.hpp"
#include "rfcnet/tensor.hpp"

namespace rfc {

enum class MergeMode { Concat, Add };

inline std::string to_string(MergeMode m) { return m == MergeMode::Concat ? "concat" : "add"; }

inline MergeMode merge_mode_from_string(const std::string& s) {
  if (s == "concat") return MergeMode::Concat;
  if (s == "add") return MergeMode::Add;
  throw ArgumentError("merge mode must be 'concat' or 'add', got '" + s + "'");
}

/// Dimensional description of one LDCS (or degenerate-SDCS) layer.
struct LdcsLayerSpec {
  int d_in = 0;   // total input channels
  int n_in = 0;   // input group count
  int d_out = 0;  // total output channels
  int n_out = 0;  // output group count
  std::vector<int> kernels;  // one odd size >= 3 per output group
  MergeMode merge = MergeMode::Concat;
  bool include_bias = true;

  int group_in() const { return d_in / n_in; }
  int group_out() const { return d_out / n_out; }

  void validate() const {
    if (d_in <= 0 || n_in <= 0 || d_out <= 0 || n_out <= 0)
      throw ArgumentError("LdcsLayerSpec: dims must be positive");
    if (d_in % n_in != 0)
      throw ArgumentError("LdcsLayerSpec: n_in=" + std::to_string(n_in) +
                          " does not divide d_in=" + std::to_string(d_in));
    if (d_out % n_out != 0)
      throw ArgumentError("LdcsLayerSpec: n_out=" + std::to_string(n_out) +
                          " does not divide d_out=" + std::to_string(d_out));
    if (static_cast<int>(kernels.size()) != n_out)
      throw ArgumentError("LdcsLayerSpec: need " + std::to_string(n_out) + " kernel sizes, got " +
                          std::to_string(kernels.size()));
    for (const int k : kernels)
      if (k < 3 || k % 2 == 0)
        throw ArgumentError("LdcsLayerSpec: strong kernel must be odd and >= 3, got " +
                            std::to_string(k));
  }
};

/// Parameters of a dense SDCS stage: d_out * (k^2 * d_in + d_out). A pure
/// counting formula, defined for any k >= 1 even though layer construction
/// only ever instantiates odd kernels.
inline std::int64_t param_count_sdcs(std::int64_t d_in, std::int64_t d_out, std::int64_t k) {
  if (d_in <= 0 || d_out <= 0 || k <= 0) throw ArgumentError("param_count_sdcs: dims must be positive");
  return d_out * (k * k * d_in + d_out);
}

/// Closed-form LDCS parameter count (uniform kernel size, merge=add,
/// bias-free). All divisions are exact under the divisibility preconditions.
inline std::int64_t param_count_ldcs(std::int64_t d_in, std::int64_t n_in, std::int64_t d_out,
                                     std::int64_t n_out, std::int64_t k) {
  if (d_in <= 0 || n_in <= 0 || d_out <= 0 || n_out <= 0 || k <= 0)
    throw ArgumentError("param_count_ldcs: dims must be positive");
  if (d_in % n_in != 0 || d_out % n_out != 0)
    throw ArgumentError("param_count_ldcs: group counts must divide channel totals");
  const std::int64_t strong = k * k * (d_in / n_in);
  const std::int64_t loose = (n_in - 1) * (d_in / n_in);
  const std::int64_t fuse = d_out / n_out;
  return d_out * (strong + loose + fuse);
}

/// Per-group variant: sums the strong term over the spec's kernel list.
inline std::int64_t param_count_ldcs(const LdcsLayerSpec& spec) {
  spec.validate();
  const std::int64_t c = spec.group_out();
  const std::int64_t gin = spec.group_in();
  std::int64_t total = 0;
  for (const int k : spec.kernels) total += static_cast<std::int64_t>(k) * k * gin * c;
  total += static_cast<std::int64_t>(spec.n_out) * (spec.n_in - 1) * gin * c;  // loose
  total += static_cast<std::int64_t>(spec.n_out) * c * c;                      // fuse
  return total;
}

/// One LDCS layer: per output group a strong, an optional loose and a fuse
/// kernel. The loose path is omitted entirely when n_in == 1.
template <typename T>
struct LdcsLayer {
  struct Group {
    ConvKernel<T> strong;  // k x k over the parent input group
    ConvKernel<T> loose;   // 1x1 over the concatenated complement; undefined when n_in == 1
    ConvKernel<T> fuse;    // 1x1 over merged paths

    bool has_loose() const { return loose.weights.defined(); }
  };

  LdcsLayerSpec spec;
  std::vector<Group> groups;
};

template <typename T>
LdcsLayer<T> build_ldcs_layer(const LdcsLayerSpec& spec, Rng& rng) {
  spec.validate();
  LdcsLayer<T> layer;
  layer.spec = spec;
  const int c = spec.group_out();
  const int gin = spec.group_in();
  const int loose_in = (spec.n_in - 1) * gin;
  layer.groups.reserve(spec.n_out);
  for (int g = 0; g < spec.n_out; ++g) {
    typename LdcsLayer<T>::Group group;
    group.strong = ConvKernel<T>::init(gin, c, spec.kernels[g], rng, spec.include_bias);
    if (spec.n_in > 1)
      group.loose = ConvKernel<T>::init(loose_in, c, 1, rng, spec.include_bias);
    const int fuse_in = (spec.n_in > 1 && spec.merge == MergeMode::Concat) ? 2 * c : c;
    group.fuse = ConvKernel<T>::init(fuse_in, c, 1, rng, spec.include_bias);
    layer.groups.push_back(std::move(group));
  }
  return layer;
}

/// Exact scalar-parameter count by walking the layer's kernels.
template <typename T>
std::int64_t enumerate_params(const LdcsLayer<T>& layer, bool include_bias) {
  std::int64_t total = 0;
  for (const auto& g : layer.groups) {
    total += g.strong.weight_count();
    if (g.has_loose()) total += g.loose.weight_count();
    total += g.fuse.weight_count();
    if (include_bias) {
      total += g.strong.bias_count();
      if (g.has_loose()) total += g.loose.bias_count();
      total += g.fuse.bias_count();
    }
  }
  return total;
}

/// Default parent assignment: group g of n_out descends from input group
/// g / (n_out / n_in). Covers both the identity map (n_out == n_in) and the
/// tree expansion (n_out == m * n_in).
inline std::vector<int> default_parent_map(int n_in, int n_out) {
  if (n_out % n_in != 0)
    throw ArgumentError("default_parent_map: n_in=" + std::to_string(n_in) +
                        " does not divide n_out=" + std::to_string(n_out));
  const int ratio = n_out / n_in;
  std::vector<int> parent(n_out);
  for (int g = 0; g < n_out; ++g) parent[g] = g / ratio;
  return parent;
}

/// Feature propagation for one layer: per output group, fuse the strong
/// convolution of the parent group with the loose 1x1 mix of all other
/// groups. Spatial dims are preserved. Pure convolutions and concats; any
/// activation is the caller's business.
template <typename T>
std::vector<Tensor<T>> ldcs_forward(const LdcsLayer<T>& layer, const std::vector<Tensor<T>>& groups,
                                    const std::vector<int>* parent_map = nullptr) {
  const LdcsLayerSpec& spec = layer.spec;
  if (static_cast<int>(groups.size()) != spec.n_in)
    throw DimensionError("ldcs_forward: got " + std::to_string(groups.size()) +
                         " input groups, spec expects " + std::to_string(spec.n_in));
  for (const auto& g : groups)
    if (g.shape().c != spec.group_in())
      throw DimensionError("ldcs_forward: group has " + std::to_string(g.shape().c) +
                           " channels, spec expects " + std::to_string(spec.group_in()));

  std::vector<int> parents = parent_map ? *parent_map : default_parent_map(spec.n_in, spec.n_out);
  if (static_cast<int>(parents.size()) != spec.n_out)
    throw ArgumentError("ldcs_forward: parent map size mismatch");

  std::vector<Tensor<T>> out;
  out.reserve(spec.n_out);
  for (int g = 0; g < spec.n_out; ++g) {
    const int parent = parents[g];
    if (parent < 0 || parent >= spec.n_in)
      throw ArgumentError("ldcs_forward: parent index " + std::to_string(parent) + " out of range");
    const auto& kernels = layer.groups[g];
    Tensor<T> strong = conv2d(groups[parent], kernels.strong);
    if (spec.n_in == 1) {
      out.push_back(conv2d(strong, kernels.fuse));
      continue;
    }
    std::vector<Tensor<T>> complement;
    complement.reserve(spec.n_in - 1);
    for (int j = 0; j < spec.n_in; ++j)
      if (j != parent) complement.push_back(groups[j]);
    Tensor<T> loose = conv2d(concat_channels(complement), kernels.loose);
    Tensor<T> merged = spec.merge == MergeMode::Concat
                           ? concat_channels<T>({strong, loose})
                           : add(strong, loose);
    out.push_back(conv2d(merged, kernels.fuse));
  }
  return out;
}

/// Dense baseline stage: k x k convolution over all channels, then a 1x1
/// over all channels. The bias-free weight count matches param_count_sdcs.
template <typename T>
struct SdcsLayer {
  ConvKernel<T> spatial;    // k x k, d_in -> d_out
  ConvKernel<T> pointwise;  // 1x1, d_out -> d_out
};

template <typename T>
SdcsLayer<T> build_sdcs_layer(int d_in, int d_out, int k, Rng& rng, bool include_bias = true) {
  if (d_in <= 0 || d_out <= 0) throw ArgumentError("build_sdcs_layer: dims must be positive");
  SdcsLayer<T> layer;
  layer.spatial = ConvKernel<T>::init(d_in, d_out, k, rng, include_bias);
  layer.pointwise = ConvKernel<T>::init(d_out, d_out, 1, rng, include_bias);
  return layer;
}

template <typename T>
std::int64_t enumerate_params(const SdcsLayer<T>& layer, bool include_bias) {
  std::int64_t total = layer.spatial.weight_count() + layer.pointwise.weight_count();
  if (include_bias) total += layer.spatial.bias_count() + layer.pointwise.bias_count();
  return total;
}

template <typename T>
Tensor<T> sdcs_forward(const SdcsLayer<T>& layer, const Tensor<T>& x) {
  return conv2d(conv2d(x, layer.spatial), layer.pointwise);
}

}  // namespace rfc
