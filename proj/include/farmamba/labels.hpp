#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "farmamba/tensor.hpp"

namespace farmamba {

// Integer class-index map [B, H, W]; the ground-truth / prediction currency.
struct LabelMap {
  std::int64_t batch = 0, height = 0, width = 0;
  std::vector<std::int32_t> v;

  LabelMap() = default;
  LabelMap(std::int64_t b, std::int64_t h, std::int64_t w)
      : batch(b), height(h), width(w), v(static_cast<std::size_t>(b * h * w), 0) {}

  std::int32_t& at(std::int64_t b, std::int64_t y, std::int64_t x) {
    return v[static_cast<std::size_t>((b * height + y) * width + x)];
  }
  std::int32_t at(std::int64_t b, std::int64_t y, std::int64_t x) const {
    return v[static_cast<std::size_t>((b * height + y) * width + x)];
  }
  std::int64_t numel() const { return batch * height * width; }

  bool operator==(const LabelMap& o) const {
    return batch == o.batch && height == o.height && width == o.width && v == o.v;
  }
};

// One-hot [B, K, H, W] constant tensor; throws on out-of-range labels.
template <class R>
Tensor<R> one_hot(const LabelMap& labels, std::int64_t num_classes) {
  auto out = Tensor<R>::zeros({labels.batch, num_classes, labels.height, labels.width});
  auto ov = out.mutable_values();
  const std::int64_t hw = labels.height * labels.width;
  for (std::int64_t b = 0; b < labels.batch; ++b)
    for (std::int64_t i = 0; i < hw; ++i) {
      const std::int32_t c = labels.v[static_cast<std::size_t>(b * hw + i)];
      if (c < 0 || c >= num_classes)
        throw std::invalid_argument("label " + std::to_string(c) + " out of range [0," +
                                    std::to_string(num_classes) + ")");
      ov[static_cast<std::size_t>((b * num_classes + c) * hw + i)] = R(1);
    }
  return out;
}

inline LabelMap resize_labels_nearest(const LabelMap& labels, std::int64_t out_h,
                                      std::int64_t out_w) {
  LabelMap out(labels.batch, out_h, out_w);
  for (std::int64_t b = 0; b < labels.batch; ++b)
    for (std::int64_t y = 0; y < out_h; ++y)
      for (std::int64_t x = 0; x < out_w; ++x) {
        const std::int64_t sy = y * labels.height / out_h;
        const std::int64_t sx = x * labels.width / out_w;
        out.at(b, y, x) = labels.at(b, sy, sx);
      }
  return out;
}

// Argmax over the class axis of [B, K, H, W] logits.
template <class R>
LabelMap argmax_labels(const Tensor<R>& logits) {
  const std::int64_t B = logits.extent(0), K = logits.extent(1), H = logits.extent(2),
                     W = logits.extent(3);
  LabelMap out(B, H, W);
  const std::int64_t hw = H * W;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < hw; ++i) {
      std::int32_t arg = 0;
      R best = logits[(b * K) * hw + i];
      for (std::int64_t k = 1; k < K; ++k) {
        const R v = logits[(b * K + k) * hw + i];
        if (v > best) {
          best = v;
          arg = static_cast<std::int32_t>(k);
        }
      }
      out.v[static_cast<std::size_t>(b * hw + i)] = arg;
    }
  return out;
}

}  // namespace farmamba
