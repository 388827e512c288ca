#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "eac/common.hpp"
#include "eac/data.hpp"
#include "eac/model.hpp"
#include "eac/tensor.hpp"

namespace eac {

/// Ablation switches. `full` is the method; the middle three each remove
/// one module; `baseline` is plain cross-entropy on augmented images.
enum class EacVariant { full, no_flip_consistency, no_imbalance, no_erasing, baseline };

inline const char* to_string(EacVariant v) {
  switch (v) {
    case EacVariant::full: return "full";
    case EacVariant::no_flip_consistency: return "no_flip_consistency";
    case EacVariant::no_imbalance: return "no_imbalance";
    case EacVariant::no_erasing: return "no_erasing";
    case EacVariant::baseline: return "baseline";
  }
  throw ContractError("bad EacVariant");
}

inline EacVariant parse_variant(const std::string& s) {
  for (EacVariant v : {EacVariant::full, EacVariant::no_flip_consistency,
                       EacVariant::no_imbalance, EacVariant::no_erasing,
                       EacVariant::baseline})
    if (s == to_string(v)) return v;
  throw ConfigError(msg("unknown variant '", s,
                        "' (want full, no_flip_consistency, no_imbalance, "
                        "no_erasing, or baseline)"));
}

/// One batch's loss components. `lambda` is the effective weight actually
/// applied, so l_total == l_cls + lambda * l_c holds exactly in double
/// arithmetic for every variant.
struct LossBundle {
  double l_cls = 0.0;
  double l_c = 0.0;
  double lambda = 0.0;
  double l_total = 0.0;
};

/// Mean cross-entropy, -log softmax(logits[i])[labels[i]], in the stable
/// log-sum-exp form. Optionally emits per-sample losses and accumulates
/// grad_coeff * d(mean loss)/d(logits) into d_logits.
template <typename T>
double classification_loss(const Tensor<T>& logits, const std::vector<int>& labels,
                           std::vector<double>* per_sample = nullptr,
                           Tensor<T>* d_logits = nullptr, double grad_coeff = 1.0) {
  if (logits.ndim() != 2)
    throw ContractError(msg("classification_loss: logits must be NxL, got rank ",
                            logits.ndim()));
  const std::size_t n = logits.size(0), l = logits.size(1);
  if (labels.size() != n)
    throw ContractError(msg("classification_loss: ", labels.size(), " labels for ",
                            n, " rows"));
  if (d_logits != nullptr && !d_logits->same_shape(logits))
    throw ContractError("classification_loss: gradient shape mismatch");
  if (per_sample != nullptr) per_sample->resize(n);
  double total = 0.0;
  std::vector<double> p(l);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= l)
      throw DataError(msg("sample ", i, ": label ", labels[i], " outside [0,", l, ")"));
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < l; ++j)
      hi = std::max(hi, static_cast<double>(logits(i, j)));
    double z = 0.0;
    for (std::size_t j = 0; j < l; ++j) {
      p[j] = std::exp(static_cast<double>(logits(i, j)) - hi);
      z += p[j];
    }
    const double lse = hi + std::log(z);
    const double loss_i = lse - static_cast<double>(logits(i, std::size_t(labels[i])));
    if (per_sample != nullptr) (*per_sample)[i] = loss_i;
    total += loss_i;
    if (d_logits != nullptr) {
      const double scale = grad_coeff / static_cast<double>(n);
      for (std::size_t j = 0; j < l; ++j) {
        double g = p[j] / z;
        if (j == std::size_t(labels[i])) g -= 1.0;
        (*d_logits)(i, j) += static_cast<T>(g * scale);
      }
    }
  }
  return total / static_cast<double>(n);
}

/// Attention consistency: mean over every (i,j,h,w) of
/// (M[i,j,h,w] - Flip(M')[i,j,h,w])^2. Optionally accumulates
/// grad_coeff * gradients into d_m and d_m_prime (both branches).
template <typename T>
double consistency_loss(const Tensor<T>& m, const Tensor<T>& m_prime,
                        Tensor<T>* d_m = nullptr, Tensor<T>* d_m_prime = nullptr,
                        double grad_coeff = 1.0) {
  if (!m.same_shape(m_prime))
    throw ContractError("consistency_loss: attention maps differ in shape");
  if (m.ndim() != 4)
    throw ContractError(msg("consistency_loss: want NxLxHxW maps, got rank ", m.ndim()));
  const std::size_t width = m.size(3);
  const std::size_t rows = m.numel() / width;
  const double inv = 1.0 / static_cast<double>(m.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* a = m.data() + r * width;
    const T* b = m_prime.data() + r * width;
    T* da = d_m != nullptr ? d_m->data() + r * width : nullptr;
    T* db = d_m_prime != nullptr ? d_m_prime->data() + r * width : nullptr;
    for (std::size_t w = 0; w < width; ++w) {
      const double diff = static_cast<double>(a[w]) - static_cast<double>(b[width - 1 - w]);
      total += diff * diff;
      const double g = 2.0 * inv * grad_coeff * diff;
      if (da != nullptr) da[w] += static_cast<T>(g);
      if (db != nullptr) db[width - 1 - w] -= static_cast<T>(g);
    }
  }
  return total * inv;
}

/// Reusable forward/backward buffers for one batch. After eac_batch_loss,
/// `logits` holds the original branch's logits (for accuracy bookkeeping).
template <typename T>
struct BatchWork {
  BackboneTrace<T> trace_orig, trace_flip;
  Tensor<T> d_feat_orig, d_feat_flip;
  Tensor<T> d_logits_orig, d_logits_flip;
  Tensor<T> d_maps_orig, d_maps_flip;
  Tensor<T> logits;
};

namespace detail {

template <typename T>
void zero_like(Tensor<T>& buf, const Tensor<T>& ref) {
  ensure_shape(buf, ref.shape());
  buf.fill(T{0});
}

} // namespace detail

/// The EAC objective on one batch. `images` carries the augmented original
/// branch; `flipped` must be its horizontal mirror (unused for baseline).
/// When with_grad is set, parameter gradients are accumulated into the
/// model. Classification loss is computed on the original branch only
/// (except no_imbalance); the consistency loss propagates into both
/// branches and the head weights.
template <typename T>
LossBundle eac_batch_loss(Model<T>& model, const Tensor<T>& images,
                          const Tensor<T>& flipped, const std::vector<int>& labels,
                          double lambda, EacVariant variant, bool with_grad,
                          BatchWork<T>& work, std::vector<double>* per_sample = nullptr) {
  if (lambda < 0.0) throw ConfigError(msg("lambda must be >= 0, got ", lambda));
  const bool dual_branch = variant != EacVariant::baseline;
  if (dual_branch && !flipped.same_shape(images))
    throw ContractError("eac_batch_loss: flipped branch shape differs from images");
  LossBundle bundle;
  const Tensor<T>& feat = model.backbone.forward(images, work.trace_orig);
  auto [pooled, logits] = pool_and_logits(model.head, feat);
  work.logits = logits;
  const bool grad_cls = with_grad;
  if (grad_cls) detail::zero_like(work.d_logits_orig, logits);

  if (variant == EacVariant::baseline) {
    bundle.l_cls = classification_loss(logits, labels, per_sample,
                                       grad_cls ? &work.d_logits_orig : nullptr);
    bundle.lambda = 0.0;
    bundle.l_c = 0.0;
  } else {
    const Tensor<T>& feat_flip = model.backbone.forward(flipped, work.trace_flip);
    const Tensor<T> maps = cam(model.head, feat);
    const Tensor<T> maps_flip = cam(model.head, feat_flip);
    const bool grad_cons = with_grad && variant != EacVariant::no_flip_consistency;
    if (grad_cons) {
      detail::zero_like(work.d_maps_orig, maps);
      detail::zero_like(work.d_maps_flip, maps_flip);
    }
    const double lambda_eff = variant == EacVariant::no_flip_consistency ? 0.0 : lambda;
    bundle.l_c = consistency_loss(maps, maps_flip,
                                  grad_cons ? &work.d_maps_orig : nullptr,
                                  grad_cons ? &work.d_maps_flip : nullptr, lambda_eff);
    bundle.lambda = lambda_eff;
    if (variant == EacVariant::no_imbalance) {
      auto [pooled_flip, logits_flip] = pool_and_logits(model.head, feat_flip);
      if (grad_cls) detail::zero_like(work.d_logits_flip, logits_flip);
      const double ce_orig = classification_loss(logits, labels, per_sample,
                                                 grad_cls ? &work.d_logits_orig : nullptr, 0.5);
      const double ce_flip = classification_loss(logits_flip, labels, nullptr,
                                                 grad_cls ? &work.d_logits_flip : nullptr, 0.5);
      bundle.l_cls = 0.5 * (ce_orig + ce_flip);
      if (with_grad) {
        detail::zero_like(work.d_feat_flip, feat_flip);
        pool_and_logits_backward(model.head, pooled_flip, work.d_logits_flip,
                                 work.d_feat_flip);
      }
    } else {
      bundle.l_cls = classification_loss(logits, labels, per_sample,
                                         grad_cls ? &work.d_logits_orig : nullptr);
    }
    if (with_grad) {
      if (variant != EacVariant::no_imbalance) detail::zero_like(work.d_feat_flip, feat_flip);
      if (grad_cons) {
        cam_backward(model.head, feat_flip, work.d_maps_flip, work.d_feat_flip);
      }
    }
    if (std::isnan(bundle.l_c) || std::isinf(bundle.l_c))
      throw NumericError(msg("consistency loss is ", bundle.l_c, " (variant ",
                             to_string(variant), ", lambda ", lambda, ", batch ",
                             images.size(0), ")"));
  }

  if (std::isnan(bundle.l_cls) || std::isinf(bundle.l_cls))
    throw NumericError(msg("classification loss is ", bundle.l_cls, " (variant ",
                           to_string(variant), ", batch ", images.size(0), ")"));
  bundle.l_total = bundle.l_cls + bundle.lambda * bundle.l_c;

  if (with_grad) {
    detail::zero_like(work.d_feat_orig, feat);
    pool_and_logits_backward(model.head, pooled, work.d_logits_orig, work.d_feat_orig);
    if (dual_branch && bundle.lambda != 0.0)
      cam_backward(model.head, feat, work.d_maps_orig, work.d_feat_orig);
    model.backbone.backward(work.trace_orig, work.d_feat_orig);
    const bool flip_branch_has_grads =
        dual_branch && (bundle.lambda != 0.0 || variant == EacVariant::no_imbalance);
    if (flip_branch_has_grads)
      model.backbone.backward(work.trace_flip, work.d_feat_flip);
  }
  return bundle;
}

template <typename T>
LossBundle eac_batch_loss(Model<T>& model, const Tensor<T>& images,
                          const Tensor<T>& flipped, const std::vector<int>& labels,
                          double lambda, EacVariant variant, bool with_grad = false) {
  BatchWork<T> work;
  return eac_batch_loss(model, images, flipped, labels, lambda, variant, with_grad, work);
}

} // namespace eac
