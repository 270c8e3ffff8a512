#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "farmamba/labels.hpp"
#include "farmamba/ops.hpp"

// Segmentation loss (soft Dice + cross-entropy), composite reconstruction
// loss (L1 + channel-cosine + gradient), the epoch schedule that blends the
// two, and the DSC / MIoU evaluation metrics.

namespace farmamba {

// Mean over pixels of -log softmax(logits) at the target class. Fused so the
// backward pass is the exact (softmax - onehot) / N form.
template <class R>
Tensor<R> cross_entropy(const Tensor<R>& logits, const LabelMap& labels) {
  detail::expect_rank("cross_entropy", logits, 4);
  const std::int64_t B = logits.extent(0), K = logits.extent(1), H = logits.extent(2),
                     W = logits.extent(3);
  if (labels.batch != B || labels.height != H || labels.width != W)
    throw std::invalid_argument("cross_entropy: label map shape mismatch");
  const std::int64_t hw = H * W;
  const R* lp = logits.values().data();
  // Per-pixel softmax is recomputed in backward from stored probabilities.
  auto probs = std::make_shared<std::vector<R>>(static_cast<std::size_t>(logits.numel()));
  double total = 0.0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < hw; ++i) {
      const std::int32_t y = labels.v[static_cast<std::size_t>(b * hw + i)];
      if (y < 0 || y >= K)
        throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                    " out of range [0," + std::to_string(K) + ")");
      R mx = lp[(b * K) * hw + i];
      for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, lp[(b * K + k) * hw + i]);
      double denom = 0.0;
      for (std::int64_t k = 0; k < K; ++k)
        denom += std::exp(static_cast<double>(lp[(b * K + k) * hw + i] - mx));
      for (std::int64_t k = 0; k < K; ++k)
        (*probs)[static_cast<std::size_t>((b * K + k) * hw + i)] = static_cast<R>(
            std::exp(static_cast<double>(lp[(b * K + k) * hw + i] - mx)) / denom);
      total -= std::log(
          static_cast<double>((*probs)[static_cast<std::size_t>((b * K + y) * hw + i)]));
    }
  const std::int64_t n = B * hw;
  auto out = Tensor<R>::scalar(static_cast<R>(total / static_cast<double>(n)));
  if (grad_needed<R>(logits)) {
    out.ensure_grad();
    record_node<R>([gl = logits.grad_ptr(), go = out.grad_ptr(), probs, labels, B, K, hw, n] {
      const R g = (*go)[0] / static_cast<R>(n);
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < hw; ++i) {
          const std::int32_t y = labels.v[static_cast<std::size_t>(b * hw + i)];
          for (std::int64_t k = 0; k < K; ++k) {
            const R p = (*probs)[static_cast<std::size_t>((b * K + k) * hw + i)];
            (*gl)[(b * K + k) * hw + i] += g * (p - (k == y ? R(1) : R(0)));
          }
        }
    });
  }
  return out;
}

// lambda_dice * (1 - mean soft Dice over classes) + lambda_ce * cross-entropy.
// Dice smoothing eps covers classes absent from a batch.
template <class R>
Tensor<R> seg_loss(const Tensor<R>& logits, const LabelMap& labels, R lambda_dice = R(1),
                   R lambda_ce = R(1), R eps = R(1e-5)) {
  detail::expect_rank("seg_loss", logits, 4);
  const std::int64_t B = logits.extent(0), K = logits.extent(1), H = logits.extent(2),
                     W = logits.extent(3);
  auto probs = softmax(logits, 1);
  auto target = one_hot<R>(labels, K);
  auto flat_p = reshape(probs, {B, K, H * W});
  auto flat_t = reshape(target, {B, K, H * W});
  auto inter = reduce_sum(reduce_sum(mul(flat_p, flat_t), 2), 0);  // [K]
  auto psum = reduce_sum(reduce_sum(flat_p, 2), 0);
  auto tsum = reduce_sum(reduce_sum(flat_t, 2), 0);
  auto dice = div(add_scalar(mul_scalar(inter, R(2)), eps), add_scalar(add(psum, tsum), eps));
  auto dice_loss = add_scalar(neg(mean_all(dice)), R(1));
  auto ce = cross_entropy(logits, labels);
  return add(mul_scalar(dice_loss, lambda_dice), mul_scalar(ce, lambda_ce));
}

// Mean over (batch, channel) of 1 - cos(pred_c, target_c) where each channel's
// spatial map is treated as a vector. A zero-norm pair is counted as
// similarity 1 (no penalty, zero gradient): an all-zero channel carries no
// direction to align.
template <class R>
Tensor<R> cosine_channel_loss(const Tensor<R>& pred, const Tensor<R>& target) {
  detail::expect_rank("cosine_channel_loss", pred, 4);
  detail::expect_same_shape("cosine_channel_loss", pred, target);
  const std::int64_t BC = pred.extent(0) * pred.extent(1);
  const std::int64_t HW = pred.extent(2) * pred.extent(3);
  const R* pp = pred.values().data();
  const R* tp = target.values().data();
  const R tiny = static_cast<R>(1e-30);
  double total = 0.0;
  for (std::int64_t bc = 0; bc < BC; ++bc) {
    double dot = 0, np = 0, nt = 0;
    for (std::int64_t i = 0; i < HW; ++i) {
      const double p = pp[bc * HW + i], t = tp[bc * HW + i];
      dot += p * t;
      np += p * p;
      nt += t * t;
    }
    const double denom = std::sqrt(np) * std::sqrt(nt);
    total += denom < static_cast<double>(tiny) ? 0.0 : 1.0 - dot / denom;
  }
  auto out = Tensor<R>::scalar(static_cast<R>(total / static_cast<double>(BC)));
  if (grad_needed<R>(pred, target)) {
    out.ensure_grad();
    record_node<R>([gp = pred.grad_ptr(), gt = target.grad_ptr(), go = out.grad_ptr(),
                    pv = pred.value_ptr(), tv = target.value_ptr(), BC, HW, tiny] {
      const R g = (*go)[0] / static_cast<R>(BC);
      for (std::int64_t bc = 0; bc < BC; ++bc) {
        double dot = 0, np2 = 0, nt2 = 0;
        for (std::int64_t i = 0; i < HW; ++i) {
          const double p = (*pv)[bc * HW + i], t = (*tv)[bc * HW + i];
          dot += p * t;
          np2 += p * p;
          nt2 += t * t;
        }
        const double np = std::sqrt(np2), nt = std::sqrt(nt2);
        if (np * nt < static_cast<double>(tiny)) continue;
        const double c = dot / (np * nt);
        for (std::int64_t i = 0; i < HW; ++i) {
          const double p = (*pv)[bc * HW + i], t = (*tv)[bc * HW + i];
          if (gp) (*gp)[bc * HW + i] -= g * static_cast<R>(t / (np * nt) - c * p / np2);
          if (gt) (*gt)[bc * HW + i] -= g * static_cast<R>(p / (np * nt) - c * t / nt2);
        }
      }
    });
  }
  return out;
}

// lambda1 * L1 + lambda_cos * channel-cosine + lambda_grad * forward-difference
// gradient loss.
template <class R>
Tensor<R> recon_loss(const Tensor<R>& pred, const Tensor<R>& target, R lambda1 = R(1),
                     R lambda_cos = R(0.5), R lambda_grad = R(0.5)) {
  detail::expect_same_shape("recon_loss", pred, target);
  auto l1 = mean_all(abs(sub(pred, target)));
  auto cos = cosine_channel_loss(pred, target);
  auto gh = mean_all(abs(sub(diff_h(pred), diff_h(target))));
  auto gw = mean_all(abs(sub(diff_w(pred), diff_w(target))));
  auto grad_term = add(gh, gw);
  return add(add(mul_scalar(l1, lambda1), mul_scalar(cos, lambda_cos)),
             mul_scalar(grad_term, lambda_grad));
}

// Reconstruction-weight schedule: zero through warmup, linear ramp to w_max,
// linear decay to w_min at the final epoch, smoothed by an EMA that is
// stepped exactly once per epoch.
struct LossSchedule {
  std::int64_t warmup_epochs = 10;
  std::int64_t ramp_epochs = 10;
  std::int64_t total_epochs = 100;
  double w_max = 1.0;
  double w_min = 0.1;
  double ema_beta = 0.9;
  double ema_state = 0.0;
  std::int64_t epoch = -1;  // last epoch the EMA absorbed

  double raw(std::int64_t e) const {
    if (e < warmup_epochs) return 0.0;
    if (e < warmup_epochs + ramp_epochs)
      return w_max * static_cast<double>(e - warmup_epochs) / static_cast<double>(ramp_epochs);
    const std::int64_t decay_span = (total_epochs - 1) - (warmup_epochs + ramp_epochs);
    if (decay_span <= 0) return w_max;
    return w_max - (w_max - w_min) * static_cast<double>(e - warmup_epochs - ramp_epochs) /
                       static_cast<double>(decay_span);
  }

  // Advances to epoch e (strictly sequential) and returns the smoothed weight.
  double advance(std::int64_t e) {
    if (e < 0) throw std::invalid_argument("LossSchedule: epoch must be >= 0");
    if (e != epoch + 1)
      throw std::logic_error("LossSchedule: epochs must advance sequentially (got " +
                             std::to_string(e) + " after " + std::to_string(epoch) + ")");
    epoch = e;
    // volatile stores pin one IEEE rounding per term so the trace is
    // reproducible against an independent transcription of this recurrence.
    volatile double carry = ema_beta * ema_state;
    volatile double inject = (1.0 - ema_beta) * raw(e);
    ema_state = carry + inject;
    return ema_state;
  }

  double current() const { return ema_state; }
};

// --- metrics -------------------------------------------------------------------

// Per-class Dice and IoU from pixel confusion counts. Means cover the classes
// present in the ground truth; a class absent from both prediction and ground
// truth contributes no evidence and is excluded.
struct MetricReport {
  std::vector<double> dice, iou;      // per class; 0 for excluded classes
  std::vector<bool> counted;          // class entered the means
  std::vector<std::int64_t> gt_pixels;
  double mean_dice = 0.0;  // DSC
  double mean_iou = 0.0;   // MIoU
};

inline MetricReport metrics(const LabelMap& pred, const LabelMap& gt, std::int64_t num_classes) {
  if (!(pred.batch == gt.batch && pred.height == gt.height && pred.width == gt.width))
    throw std::invalid_argument("metrics: prediction and ground truth shapes differ");
  std::vector<std::int64_t> tp(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::int64_t> fp(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::int64_t> fn(static_cast<std::size_t>(num_classes), 0);
  MetricReport rep;
  rep.gt_pixels.assign(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    const std::int32_t p = pred.v[i], g = gt.v[i];
    if (p < 0 || p >= num_classes || g < 0 || g >= num_classes)
      throw std::invalid_argument("metrics: class index out of range");
    rep.gt_pixels[static_cast<std::size_t>(g)]++;
    if (p == g) {
      tp[static_cast<std::size_t>(p)]++;
    } else {
      fp[static_cast<std::size_t>(p)]++;
      fn[static_cast<std::size_t>(g)]++;
    }
  }
  rep.dice.assign(static_cast<std::size_t>(num_classes), 0.0);
  rep.iou.assign(static_cast<std::size_t>(num_classes), 0.0);
  rep.counted.assign(static_cast<std::size_t>(num_classes), false);
  double dsum = 0, isum = 0;
  std::int64_t counted = 0;
  for (std::int64_t c = 0; c < num_classes; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    const std::int64_t denom_d = 2 * tp[ci] + fp[ci] + fn[ci];
    const std::int64_t denom_i = tp[ci] + fp[ci] + fn[ci];
    if (denom_d > 0) {
      rep.dice[ci] = 2.0 * static_cast<double>(tp[ci]) / static_cast<double>(denom_d);
      rep.iou[ci] = static_cast<double>(tp[ci]) / static_cast<double>(denom_i);
    }
    if (rep.gt_pixels[ci] > 0) {
      rep.counted[ci] = true;
      dsum += rep.dice[ci];
      isum += rep.iou[ci];
      ++counted;
    }
  }
  if (counted > 0) {
    rep.mean_dice = dsum / static_cast<double>(counted);
    rep.mean_iou = isum / static_cast<double>(counted);
  }
  return rep;
}

}  // namespace farmamba
