// RFC-Net assembly: two-downsample stem, m-way LDCS tree with group counts
// m^l, and a concat + 1x1 + bilinear-x4 head. Also receptive-field chain
// enumeration, the analytic receptive-field recursion and a gradient-support
// probe that measures it empirically.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rfcnet/core.hpp"
#include "rfcnet/ldcs.hpp"
#include "rfcnet/nn.hpp"
#include "rfcnet/tensor.hpp"

namespace rfc {

/// Whole-network description. Tree layer l holds m^l groups of `width`
/// channels; kernel sizes cycle through `kernels` across each expansion.
struct RfcConfig {
  int m = 3;
  std::vector<int> kernels{3, 5, 7};
  int depth = 3;  // tree levels L
  int width = 16; // channels per tree group
  int stem1 = 16;
  int stem2 = 16; // must equal width: the stem output is tree level 0
  int num_classes = 2;
  MergeMode merge = MergeMode::Concat;
  std::uint64_t seed = 1;

  void validate() const {
    if (m < 2) throw ArgumentError("RfcConfig: m must be >= 2, got " + std::to_string(m));
    if (static_cast<int>(kernels.size()) != m)
      throw ArgumentError("RfcConfig: need exactly m=" + std::to_string(m) + " kernel sizes, got " +
                          std::to_string(kernels.size()));
    for (const int k : kernels)
      if (k < 3 || k % 2 == 0)
        throw ArgumentError("RfcConfig: tree kernels must be odd and >= 3, got " + std::to_string(k));
    if (depth < 1) throw ArgumentError("RfcConfig: depth must be >= 1");
    if (width < 1) throw ArgumentError("RfcConfig: width must be >= 1");
    if (stem1 < 1 || stem2 < 1) throw ArgumentError("RfcConfig: stem widths must be >= 1");
    if (stem2 != width)
      throw ArgumentError("RfcConfig: stem2 (" + std::to_string(stem2) +
                          ") must equal group width (" + std::to_string(width) +
                          "); the stem output is tree level 0");
    if (num_classes < 2) throw ArgumentError("RfcConfig: num_classes must be >= 2");
  }

  /// Published configurations: a [m=3, k=3,5,7], b [m=3, k=3,3,3],
  /// c [m=2, k=3,5], d [m=2, k=3,3]. Depth/width are local defaults.
  static RfcConfig preset(char which) {
    RfcConfig cfg;
    switch (which) {
      case 'a': cfg.m = 3; cfg.kernels = {3, 5, 7}; break;
      case 'b': cfg.m = 3; cfg.kernels = {3, 3, 3}; break;
      case 'c': cfg.m = 2; cfg.kernels = {3, 5}; break;
      case 'd': cfg.m = 2; cfg.kernels = {3, 3}; break;
      default: throw ArgumentError(std::string("RfcConfig: unknown preset '") + which + "'");
    }
    return cfg;
  }

  std::int64_t leaf_count() const {
    std::int64_t n = 1;
    for (int l = 0; l < depth; ++l) n *= m;
    return n;
  }
};

/// One root-to-leaf kernel-size sequence; leaf_index encodes the sequence
/// in base m, most-significant digit first.
struct ChainDescriptor {
  std::int64_t leaf_index = 0;
  std::vector<int> kernel_sequence;
};

/// All m^L receptive-field chains in leaf order.
inline std::vector<ChainDescriptor> enumerate_chains(const RfcConfig& config) {
  config.validate();
  const std::int64_t leaves = config.leaf_count();
  std::vector<ChainDescriptor> chains;
  chains.reserve(static_cast<std::size_t>(leaves));
  for (std::int64_t leaf = 0; leaf < leaves; ++leaf) {
    ChainDescriptor chain;
    chain.leaf_index = leaf;
    chain.kernel_sequence.resize(config.depth);
    std::int64_t rem = leaf;
    for (int t = config.depth - 1; t >= 0; --t) {
      chain.kernel_sequence[t] = config.kernels[rem % config.m];
      rem /= config.m;
    }
    chains.push_back(std::move(chain));
  }
  return chains;
}

/// Strong-path theoretical receptive field: the rf += (k-1)*jump recursion
/// over the fixed stem (conv3, pool2, conv3, pool2 -> rf 10, jump 4) and the
/// chain's stride-1 convolutions. Equals 10 + 4 * sum(k_t - 1).
inline int receptive_field(const ChainDescriptor& chain) {
  int rf = 1;
  int jump = 1;
  const std::pair<int, int> stem[] = {{3, 1}, {2, 2}, {3, 1}, {2, 2}};
  for (const auto& [k, stride] : stem) {
    rf += (k - 1) * jump;
    jump *= stride;
  }
  for (const int k : chain.kernel_sequence) rf += (k - 1) * jump;
  return rf;
}

inline int receptive_field(const ChainDescriptor& chain, const RfcConfig& config) {
  config.validate();
  return receptive_field(chain);
}

/// The full network. All tree layers run at 1/4 input resolution; the only
/// two downsamples live in the stem.
template <typename T>
struct RfcModel {
  RfcConfig config;
  ConvKernel<T> stem_conv1;  // 3 -> stem1
  ConvKernel<T> stem_conv2;  // stem1 -> stem2
  std::vector<LdcsLayer<T>> tree;
  ConvKernel<T> head;  // 1x1: width * m^L -> num_classes

  /// Tree outputs: m^L leaf groups of `width` channels at 1/4 resolution.
  std::vector<Tensor<T>> forward_leaves(const Tensor<T>& x) const {
    const Shape xs = x.shape();
    if (xs.c != 3)
      throw DimensionError("forward: expected 3 input channels, got " + std::to_string(xs.c));
    if (xs.h % 4 != 0 || xs.w % 4 != 0)
      throw DimensionError("forward: spatial dims " + std::to_string(xs.h) + "x" +
                           std::to_string(xs.w) + " must be divisible by 4");
    Tensor<T> feat = maxpool2(relu(conv2d(x, stem_conv1)));
    feat = maxpool2(relu(conv2d(feat, stem_conv2)));
    std::vector<Tensor<T>> groups{feat};
    for (const auto& layer : tree) {
      groups = ldcs_forward(layer, groups);
      for (auto& g : groups) g = relu(g);
    }
    return groups;
  }

  /// Logits (n, num_classes, h, w) at full input resolution.
  Tensor<T> forward(const Tensor<T>& x) const {
    std::vector<Tensor<T>> leaves = forward_leaves(x);
    Tensor<T> logits = conv2d(concat_channels(leaves), head);
    return bilinear_upsample(logits, 4);
  }

  /// Stable name -> tensor listing of every learnable tensor.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    auto push = [&out](const std::string& name, const ConvKernel<T>& kernel) {
      out.emplace_back(name + ".weight", kernel.weights);
      if (kernel.has_bias()) out.emplace_back(name + ".bias", kernel.bias);
    };
    push("stem1", stem_conv1);
    push("stem2", stem_conv2);
    for (std::size_t l = 0; l < tree.size(); ++l)
      for (std::size_t g = 0; g < tree[l].groups.size(); ++g) {
        const std::string base = "tree" + std::to_string(l) + ".g" + std::to_string(g);
        push(base + ".strong", tree[l].groups[g].strong);
        if (tree[l].groups[g].has_loose()) push(base + ".loose", tree[l].groups[g].loose);
        push(base + ".fuse", tree[l].groups[g].fuse);
      }
    push("head", head);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::int64_t parameter_count(bool include_bias = true) const {
    std::int64_t total = 0;
    for (const auto& [name, t] : named_parameters()) {
      if (!include_bias && name.ends_with(".bias")) continue;
      total += t.numel();
    }
    return total;
  }
};

/// Deterministic build for a fixed config+seed. Child i (1-based) of each
/// expansion uses strong kernel kernels[(i-1) mod m].
template <typename T>
RfcModel<T> build_rfc_net(const RfcConfig& config) {
  config.validate();
  Rng rng(config.seed);
  RfcModel<T> model;
  model.config = config;
  model.stem_conv1 = ConvKernel<T>::init(3, config.stem1, 3, rng);
  model.stem_conv2 = ConvKernel<T>::init(config.stem1, config.stem2, 3, rng);
  int groups = 1;
  for (int l = 0; l < config.depth; ++l) {
    LdcsLayerSpec spec;
    spec.n_in = groups;
    spec.d_in = groups * config.width;
    spec.n_out = groups * config.m;
    spec.d_out = spec.n_out * config.width;
    spec.merge = config.merge;
    spec.kernels.resize(spec.n_out);
    for (int g = 0; g < spec.n_out; ++g) spec.kernels[g] = config.kernels[g % config.m];
    model.tree.push_back(build_ldcs_layer<T>(spec, rng));
    groups = spec.n_out;
  }
  model.head = ConvKernel<T>::init(groups * config.width, config.num_classes, 1, rng);
  return model;
}

/// Zeroes every cross-group path: loose kernels entirely, and under concat
/// merge the fuse columns that read the loose half. Each output group then
/// depends only on its strong ancestor chain.
template <typename T>
void apply_locality_mode(RfcModel<T>& model) {
  for (auto& layer : model.tree)
    for (auto& group : layer.groups) {
      if (group.has_loose()) {
        std::fill(group.loose.weights.data().begin(), group.loose.weights.data().end(), T(0));
        if (group.loose.has_bias())
          std::fill(group.loose.bias.data().begin(), group.loose.bias.data().end(), T(0));
      }
      if (group.has_loose() && layer.spec.merge == MergeMode::Concat) {
        const int c = layer.spec.group_out();
        Tensor<T>& w = group.fuse.weights;
        const Shape ws = w.shape();
        for (int oc = 0; oc < ws.n; ++oc)
          for (int ic = c; ic < ws.c; ++ic) w.at(oc, ic, 0, 0) = T(0);
      }
    }
}

/// Rewrites every kernel to uniform positive weights 1/(in_ch*k^2) with zero
/// bias. All activations stay positive and no gradient contributions can
/// cancel, so gradient support equals reachability. Apply before
/// apply_locality_mode when isolating a strong chain.
template <typename T>
void apply_uniform_positive_weights(RfcModel<T>& model) {
  auto flatten = [](ConvKernel<T>& kernel) {
    const T v = T(1) / static_cast<T>(kernel.in_channels() * kernel.k() * kernel.k());
    std::fill(kernel.weights.data().begin(), kernel.weights.data().end(), v);
    if (kernel.has_bias())
      std::fill(kernel.bias.data().begin(), kernel.bias.data().end(), T(0));
  };
  flatten(model.stem_conv1);
  flatten(model.stem_conv2);
  for (auto& layer : model.tree)
    for (auto& group : layer.groups) {
      flatten(group.strong);
      if (group.has_loose()) flatten(group.loose);
      flatten(group.fuse);
    }
  flatten(model.head);
}

/// Measures the receptive field of one leaf group empirically: backward from
/// the center element of that group and report the side length of the
/// bounding box of input pixels with non-zero gradient.
///
/// The input is a radial ramp centered on the probed element's receptive
/// center, which steers every max-pool argmax outward; with uniform positive
/// weights the gradient then reaches the exact extremes of the box. The
/// caller prepares the model (apply_uniform_positive_weights, optionally
/// apply_locality_mode).
template <typename T>
int empirical_rf_probe(const RfcModel<T>& model, std::int64_t leaf_index, int input_size = 128) {
  if (leaf_index < 0 || leaf_index >= model.config.leaf_count())
    throw ArgumentError("empirical_rf_probe: leaf index " + std::to_string(leaf_index) +
                        " outside [0," + std::to_string(model.config.leaf_count()) + ")");
  if (input_size % 4 != 0) throw ArgumentError("empirical_rf_probe: input size must be divisible by 4");

  const int quarter = input_size / 4;
  const int center = quarter / 2;
  const double focus = 4.0 * center + 1.5;  // receptive center of the probed element, input coords

  Tensor<T> x = Tensor<T>::zeros(Shape{1, 3, input_size, input_size});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < input_size; ++y)
      for (int xx = 0; xx < input_size; ++xx) {
        const double dy = y - focus;
        const double dx = xx - focus;
        x.at(0, c, y, xx) = static_cast<T>(1.0 + (dy * dy + dx * dx) / (input_size * input_size));
      }
  x.set_requires_grad(true);

  std::vector<Tensor<T>> leaves = model.forward_leaves(x);
  Tensor<T> probe = pick(leaves[static_cast<std::size_t>(leaf_index)], 0, 0, center, center);
  probe.backward();

  int y_min = input_size, y_max = -1, x_min = input_size, x_max = -1;
  for (int y = 0; y < input_size; ++y)
    for (int xx = 0; xx < input_size; ++xx) {
      bool touched = false;
      for (int c = 0; c < 3 && !touched; ++c)
        touched = x.grad()[x.index(0, c, y, xx)] != T(0);
      if (touched) {
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
        x_min = std::min(x_min, xx);
        x_max = std::max(x_max, xx);
      }
    }
  if (y_max < 0) return 0;
  return std::max(y_max - y_min + 1, x_max - x_min + 1);
}

}  // namespace rfc
