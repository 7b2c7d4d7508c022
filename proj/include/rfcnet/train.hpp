// Training recipe: online hard example mining on top of per-pixel cross
// entropy, SGD with momentum and weight decay, step learning-rate decay,
// and mean-IoU evaluation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rfcnet/data.hpp"
#include "rfcnet/model.hpp"
#include "rfcnet/nn.hpp"
#include "rfcnet/tensor.hpp"

namespace rfc {

// ---------------------------------------------------------------------------
// OHEM cross entropy

/// Cross entropy averaged over hard pixels only: a pixel participates when
/// the probability assigned to its true class falls below `threshold`. If
/// fewer than `min_kept` qualify, the `min_kept` highest-loss pixels are kept
/// instead (ties broken by pixel index). Returns a scalar; the selection mask
/// is a constant with respect to the gradient.
template <typename T>
Tensor<T> ohem_ce(const Tensor<T>& logits, const ClassMask& target, double threshold,
                  std::int64_t min_kept, std::int64_t* kept_out = nullptr) {
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw ArgumentError("ohem_ce: threshold must be in (0, 1]");
  if (min_kept < 1) throw ArgumentError("ohem_ce: min_kept must be >= 1");
  if (target.ids.empty()) throw ArgumentError("ohem_ce: empty target");

  Tensor<T> ce = ce_per_pixel(logits, target);
  const std::size_t total = static_cast<std::size_t>(ce.shape().numel());
  auto loss = ce.data();
  // p_true < threshold  <=>  ce > -log(threshold)
  const T cutoff = static_cast<T>(-std::log(threshold));

  std::vector<std::size_t> kept;
  kept.reserve(total);
  for (std::size_t i = 0; i < total; ++i)
    if (loss[i] > cutoff) kept.push_back(i);

  const std::size_t floor_kept = std::min<std::size_t>(static_cast<std::size_t>(min_kept), total);
  if (kept.size() < floor_kept) {
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + floor_kept, order.end(),
                      [loss](std::size_t a, std::size_t b) {
                        if (loss[a] != loss[b]) return loss[a] > loss[b];
                        return a < b;
                      });
    kept.assign(order.begin(), order.begin() + floor_kept);
  }

  Tensor<T> mask = Tensor<T>::zeros(ce.shape());
  auto mv = mask.data();
  for (const std::size_t i : kept) mv[i] = T(1);
  if (kept_out) *kept_out = static_cast<std::int64_t>(kept.size());
  return scale(sum(mul(ce, mask)), T(1) / static_cast<T>(kept.size()));
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

/// Decayed learning rate: base * gamma^floor(epoch / step_size), epoch 0-based.
inline double step_lr(double base_lr, int epoch, int step_size, double gamma = 0.1) {
  if (step_size <= 0) throw ArgumentError("step_lr: step_size must be positive");
  if (epoch < 0) throw ArgumentError("step_lr: epoch must be non-negative");
  return base_lr * std::pow(gamma, epoch / step_size);
}

/// SGD with classic momentum and decoupled-from-nothing L2 weight decay:
///   v <- momentum * v + (grad + wd * param);  param <- param - lr * v
/// Gradients are zeroed after each step.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_)
      velocity_.push_back(std::vector<T>(p.shape().numel(), T(0)));
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (p.grad().empty())
        throw StateError("Sgd::step: parameter " + std::to_string(i) +
                         " has no gradient (missing backward?)");
      auto value = p.data();
      auto grad = p.grad();
      std::vector<T>& v = velocity_[i];
      const T m = static_cast<T>(momentum_);
      const T wd = static_cast<T>(weight_decay_);
      const T step_size = static_cast<T>(lr);
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = m * v[j] + (grad[j] + wd * value[j]);
        value[j] -= step_size * v[j];
      }
    }
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t size() const { return params_.size(); }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

// ---------------------------------------------------------------------------
// Metrics

/// Mean intersection-over-union between two masks, averaged over
/// `num_classes` classes. A class absent from both masks scores 1.
inline double miou(const ClassMask& pred, const ClassMask& target, int num_classes) {
  if (num_classes < 2) throw ArgumentError("miou: need at least 2 classes");
  if (pred.n != target.n || pred.h != target.h || pred.w != target.w)
    throw DimensionError("miou: pred " + std::to_string(pred.h) + "x" + std::to_string(pred.w) +
                         " vs target " + std::to_string(target.h) + "x" + std::to_string(target.w));
  std::vector<std::int64_t> inter(num_classes, 0), uni(num_classes, 0);
  for (std::size_t i = 0; i < pred.ids.size(); ++i) {
    const int p = pred.ids[i], t = target.ids[i];
    if (p < 0 || p >= num_classes || t < 0 || t >= num_classes)
      throw ArgumentError("miou: class id out of range");
    if (p == t) {
      ++inter[p];
      ++uni[p];
    } else {
      ++uni[p];
      ++uni[t];
    }
  }
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c)
    total += uni[c] == 0 ? 1.0 : static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
  return total / num_classes;
}

/// Argmax over channels of a logit tensor, cropped to (content_h, content_w).
template <typename T>
ClassMask argmax_mask(const Tensor<T>& logits, int content_h, int content_w) {
  const Shape s = logits.shape();
  if (content_h <= 0 || content_h > s.h || content_w <= 0 || content_w > s.w)
    throw ArgumentError("argmax_mask: content extent out of range");
  ClassMask mask{s.n, content_h, content_w,
                 std::vector<int>(static_cast<std::size_t>(s.n) * content_h * content_w)};
  auto v = logits.data();
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < content_h; ++y)
      for (int x = 0; x < content_w; ++x) {
        int best = 0;
        T best_v = v[((static_cast<std::size_t>(n) * s.c) * s.h + y) * s.w + x];
        for (int c = 1; c < s.c; ++c) {
          const T cv = v[((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w + x];
          if (cv > best_v) {
            best_v = cv;
            best = c;
          }
        }
        mask.ids[(static_cast<std::size_t>(n) * content_h + y) * content_w + x] = best;
      }
  return mask;
}

namespace detail {

inline ClassMask crop_mask(const ClassMask& mask, int content_h, int content_w) {
  if (content_h == mask.h && content_w == mask.w) return mask;
  ClassMask out{mask.n, content_h, content_w,
                std::vector<int>(static_cast<std::size_t>(mask.n) * content_h * content_w)};
  for (int n = 0; n < mask.n; ++n)
    for (int y = 0; y < content_h; ++y)
      for (int x = 0; x < content_w; ++x)
        out.ids[(static_cast<std::size_t>(n) * content_h + y) * content_w + x] =
            mask.ids[(static_cast<std::size_t>(n) * mask.h + y) * mask.w + x];
  return out;
}

template <typename T>
Tensor<T> to_tensor(const Tensor<float>& src) {
  if constexpr (std::is_same_v<T, float>) {
    return src;
  } else {
    Tensor<T> out = Tensor<T>::zeros(src.shape());
    auto s = src.data();
    auto d = out.data();
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = static_cast<T>(s[i]);
    return out;
  }
}

}  // namespace detail

/// Dataset mean IoU. With `pooled` (the default) intersections and unions are
/// accumulated over the whole set before dividing; otherwise per-image mIoU
/// values are averaged.
template <typename T>
double evaluate(RfcModel<T>& model, const std::vector<Sample>& samples, bool pooled = true) {
  if (samples.empty()) throw ArgumentError("evaluate: empty sample set");
  const int num_classes = model.config.num_classes;
  std::vector<std::int64_t> inter(num_classes, 0), uni(num_classes, 0);
  double per_image_total = 0.0;
  for (const auto& sample : samples) {
    Tensor<T> input = detail::to_tensor<T>(sample.image);
    Tensor<T> logits = model.forward(input);
    const ClassMask pred = argmax_mask(logits, sample.content_h, sample.content_w);
    const ClassMask truth = detail::crop_mask(sample.mask, sample.content_h, sample.content_w);
    if (pooled) {
      for (std::size_t i = 0; i < pred.ids.size(); ++i) {
        const int p = pred.ids[i], t = truth.ids[i];
        if (p == t) {
          ++inter[p];
          ++uni[p];
        } else {
          ++uni[p];
          ++uni[t];
        }
      }
    } else {
      per_image_total += miou(pred, truth, num_classes);
    }
  }
  if (!pooled) return per_image_total / static_cast<double>(samples.size());
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c)
    total += uni[c] == 0 ? 1.0 : static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
  return total / num_classes;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  int epochs = 60;
  int batch_size = 4;
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int step_size = 45;
  double gamma = 0.1;
  double ohem_threshold = 0.7;
  double ohem_min_kept_fraction = 1.0 / 16.0;  // of the pixels in a batch
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1) throw ArgumentError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw ArgumentError("TrainConfig: batch_size must be >= 1");
    if (base_lr < 0) throw ArgumentError("TrainConfig: base_lr must be >= 0");
    if (momentum < 0 || momentum >= 1) throw ArgumentError("TrainConfig: momentum must be in [0, 1)");
    if (weight_decay < 0) throw ArgumentError("TrainConfig: weight_decay must be >= 0");
    if (step_size < 1) throw ArgumentError("TrainConfig: step_size must be >= 1");
    if (gamma <= 0 || gamma > 1) throw ArgumentError("TrainConfig: gamma must be in (0, 1]");
    if (!(ohem_threshold > 0 && ohem_threshold <= 1))
      throw ArgumentError("TrainConfig: ohem_threshold must be in (0, 1]");
    if (!(ohem_min_kept_fraction > 0 && ohem_min_kept_fraction <= 1))
      throw ArgumentError("TrainConfig: ohem_min_kept_fraction must be in (0, 1]");
  }
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double mean_loss = 0.0;
  double val_miou = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  double best_miou = 0.0;
  int converged_epoch = 0;  // first epoch attaining best_miou, 1-based

  std::string to_csv() const {
    std::ostringstream os;
    os << "epoch,lr,mean_loss,val_miou\n";
    os << std::setprecision(10);
    for (const auto& e : epochs)
      os << e.epoch << "," << e.lr << "," << e.mean_loss << "," << e.val_miou << "\n";
    return os.str();
  }
};

namespace detail {

// Stacks the chosen samples into one batch tensor + mask; all samples must
// share spatial dims.
template <typename T>
std::pair<Tensor<T>, ClassMask> stack_batch(const std::vector<Sample>& samples,
                                            const std::vector<std::size_t>& index, std::size_t begin,
                                            std::size_t end) {
  const Shape first = samples[index[begin]].image.shape();
  const int b = static_cast<int>(end - begin);
  Tensor<T> batch = Tensor<T>::zeros({b, first.c, first.h, first.w});
  ClassMask mask{b, first.h, first.w,
                 std::vector<int>(static_cast<std::size_t>(b) * first.h * first.w)};
  auto dst = batch.data();
  const std::size_t plane = static_cast<std::size_t>(first.numel());
  for (std::size_t i = begin; i < end; ++i) {
    const Sample& sample = samples[index[i]];
    const Shape s = sample.image.shape();
    if (s.c != first.c || s.h != first.h || s.w != first.w)
      throw DimensionError("stack_batch: samples disagree on dims (" + s.to_string() + " vs " +
                           first.to_string() + ")");
    auto src = sample.image.data();
    for (std::size_t j = 0; j < plane; ++j) dst[(i - begin) * plane + j] = static_cast<T>(src[j]);
    std::copy(sample.mask.ids.begin(), sample.mask.ids.end(),
              mask.ids.begin() + static_cast<std::ptrdiff_t>((i - begin) * sample.mask.ids.size()));
  }
  return {batch, mask};
}

}  // namespace detail

/// Runs the full recipe and returns the per-epoch history. The model is left
/// holding the parameters of its best validation epoch; when
/// `checkpoint_path` is non-empty those parameters are also saved there.
/// Non-finite losses abort with a StateError naming the epoch and batch.
template <typename T>
TrainHistory train_loop(RfcModel<T>& model, const std::vector<Sample>& train_set,
                        const std::vector<Sample>& val_set, const TrainConfig& cfg,
                        std::ostream* log = nullptr, const std::string& checkpoint_path = "") {
  cfg.validate();
  if (train_set.empty()) throw ArgumentError("train_loop: empty training set");
  if (val_set.empty()) throw ArgumentError("train_loop: empty validation set");

  std::vector<Tensor<T>> params = model.parameters();
  Sgd<T> optimizer(params, cfg.momentum, cfg.weight_decay);
  Rng shuffle_rng(cfg.seed);

  TrainHistory history;
  std::vector<std::vector<T>> best_values;
  auto snapshot = [&params]() {
    std::vector<std::vector<T>> values;
    values.reserve(params.size());
    for (const auto& p : params) {
      auto d = p.data();
      values.emplace_back(d.begin(), d.end());
    }
    return values;
  };

  std::vector<std::size_t> index(train_set.size());
  std::iota(index.begin(), index.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = step_lr(cfg.base_lr, epoch, cfg.step_size, cfg.gamma);
    // Fisher-Yates keyed only by our own Rng so runs replay bit-for-bit.
    for (std::size_t i = index.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1));
      std::swap(index[i - 1], index[j]);
    }
    double loss_total = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < index.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(index.size(), begin + cfg.batch_size);
      auto [batch, target] = detail::stack_batch<T>(train_set, index, begin, end);
      Tensor<T> logits = model.forward(batch);
      const Shape ls = logits.shape();
      const std::int64_t pixels = static_cast<std::int64_t>(ls.n) * ls.h * ls.w;
      const std::int64_t min_kept = std::max<std::int64_t>(
          1, static_cast<std::int64_t>(static_cast<double>(pixels) * cfg.ohem_min_kept_fraction));
      Tensor<T> loss = ohem_ce(logits, target, cfg.ohem_threshold, min_kept);
      const double loss_value = static_cast<double>(loss.data()[0]);
      if (!std::isfinite(loss_value))
        throw StateError("train_loop: loss diverged (non-finite) at epoch " + std::to_string(epoch + 1) +
                         ", batch " + std::to_string(batches + 1));
      loss.backward();
      optimizer.step(lr);
      loss_total += loss_value;
      ++batches;
    }

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.lr = lr;
    stats.mean_loss = loss_total / std::max(1, batches);
    stats.val_miou = evaluate(model, val_set);
    history.epochs.push_back(stats);
    if (log)
      *log << "epoch " << std::setw(3) << stats.epoch << "  lr " << std::setprecision(6) << std::fixed
           << stats.lr << "  loss " << stats.mean_loss << "  val_miou " << stats.val_miou
           << std::defaultfloat << "\n";
    if (stats.val_miou > history.best_miou || history.converged_epoch == 0) {
      history.best_miou = stats.val_miou;
      history.converged_epoch = stats.epoch;
      best_values = snapshot();
    }
  }

  // Leave the model at its best validation epoch.
  for (std::size_t i = 0; i < params.size(); ++i)
    std::copy(best_values[i].begin(), best_values[i].end(), params[i].data().begin());
  if (!checkpoint_path.empty()) save_checkpoint(model, checkpoint_path);
  return history;
}

}  // namespace rfc
