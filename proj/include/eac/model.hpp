#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eac/common.hpp"
#include "eac/rng.hpp"
#include "eac/tensor.hpp"

namespace eac {

/// Architecture of the convolutional feature extractor. Each stage is one
/// odd-sized convolution (same padding) followed by ReLU; strides default to
/// 1 for the first stage and 2 afterwards, so the stock 32/64/128 net maps
/// 32x32 inputs to a 128 x 8 x 8 feature map.
struct BackboneConfig {
  int in_channels = 3;
  int input_height = 32;
  int input_width = 32;
  std::vector<int> stage_widths{32, 64, 128};
  std::vector<int> stage_strides{}; // empty = derived (1, 2, 2, ...)
  int kernel_size = 3;

  std::vector<int> effective_strides() const {
    if (!stage_strides.empty()) return stage_strides;
    std::vector<int> s(stage_widths.size(), 2);
    if (!s.empty()) s[0] = 1;
    return s;
  }

  void validate() const {
    if (in_channels < 1 || input_height < 1 || input_width < 1)
      throw ConfigError(msg("backbone: bad input dims ", in_channels, "x",
                            input_height, "x", input_width));
    if (stage_widths.empty()) throw ConfigError("backbone: no conv stages");
    for (int w : stage_widths)
      if (w < 1) throw ConfigError(msg("backbone: stage width ", w, " < 1"));
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw ConfigError(msg("backbone: kernel size must be odd, got ", kernel_size));
    if (!stage_strides.empty() && stage_strides.size() != stage_widths.size())
      throw ConfigError(msg("backbone: ", stage_strides.size(), " strides for ",
                            stage_widths.size(), " stages"));
    for (int s : effective_strides())
      if (s < 1) throw ConfigError(msg("backbone: stride ", s, " < 1"));
  }

  friend bool operator==(const BackboneConfig& a, const BackboneConfig& b) {
    return a.in_channels == b.in_channels && a.input_height == b.input_height &&
           a.input_width == b.input_width && a.stage_widths == b.stage_widths &&
           a.stage_strides == b.stage_strides && a.kernel_size == b.kernel_size;
  }
};

/// Named handle onto one parameter tensor and its gradient accumulator.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

namespace detail {

/// Reallocates only when the shape actually changes; contents are then
/// unspecified and must be fully overwritten by the caller.
template <typename T>
void ensure_shape(Tensor<T>& t, const std::vector<std::size_t>& shape) {
  if (t.shape() != shape) t = Tensor<T>(shape);
}

/// im2col for one image of a batch. Writes the (C*KH*KW) x (OH*OW) patch
/// block of image `img` into a column matrix whose rows span the whole
/// batch: entry (r, p) of the block lands at col[r * row_stride + offset + p].
template <typename T>
void im2col(const T* x, int channels, int height, int width, int kernel, int stride,
            int pad, int out_h, int out_w, T* col, std::size_t row_stride,
            std::size_t offset) {
  for (int c = 0; c < channels; ++c) {
    for (int kh = 0; kh < kernel; ++kh) {
      for (int kw = 0; kw < kernel; ++kw) {
        const std::size_t r = (std::size_t(c) * kernel + kh) * kernel + kw;
        T* row = col + r * row_stride + offset;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= height) {
            for (int ow = 0; ow < out_w; ++ow) row[oh * out_w + ow] = T{0};
            continue;
          }
          const T* xrow = x + (c * height + ih) * width;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - pad + kw;
            row[oh * out_w + ow] = (iw < 0 || iw >= width) ? T{0} : xrow[iw];
          }
        }
      }
    }
  }
}

/// Scatter-add transpose of im2col, same addressing scheme.
template <typename T>
void col2im_accumulate(const T* col, int channels, int height, int width, int kernel,
                       int stride, int pad, int out_h, int out_w, T* x,
                       std::size_t row_stride, std::size_t offset) {
  for (int c = 0; c < channels; ++c) {
    for (int kh = 0; kh < kernel; ++kh) {
      for (int kw = 0; kw < kernel; ++kw) {
        const std::size_t r = (std::size_t(c) * kernel + kh) * kernel + kw;
        const T* row = col + r * row_stride + offset;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= height) continue;
          T* xrow = x + (c * height + ih) * width;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - pad + kw;
            if (iw >= 0 && iw < width) xrow[iw] += row[oh * out_w + ow];
          }
        }
      }
    }
  }
}

} // namespace detail

/// Per-branch forward cache: everything backward needs. One trace per branch
/// per batch; buffers are reused across batches.
template <typename T>
struct BackboneTrace {
  std::vector<Tensor<T>> cols; // im2col of each layer input, (kk, N*patch)
  std::vector<Tensor<T>> acts; // post-ReLU outputs, (N, OC, OH, OW)
  std::size_t batch = 0;
};

/// Convolutional feature extractor. Forward is a pure function of
/// (parameters, input); all randomness is confined to construction.
template <typename T>
class Backbone {
public:
  Backbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const auto strides = cfg_.effective_strides();
    Rng rng(derive_seed(seed, 0xbacb07e));
    int in_c = cfg_.in_channels;
    int h = cfg_.input_height;
    int w = cfg_.input_width;
    const int k = cfg_.kernel_size;
    const int pad = k / 2;
    for (std::size_t i = 0; i < cfg_.stage_widths.size(); ++i) {
      Layer layer;
      layer.in_channels = in_c;
      layer.out_channels = cfg_.stage_widths[i];
      layer.stride = strides[i];
      layer.in_h = h;
      layer.in_w = w;
      layer.out_h = (h + 2 * pad - k) / layer.stride + 1;
      layer.out_w = (w + 2 * pad - k) / layer.stride + 1;
      if (layer.out_h < 1 || layer.out_w < 1)
        throw ConfigError(msg("backbone: stage ", i, " collapses spatial dims to ",
                              layer.out_h, "x", layer.out_w));
      const std::size_t oc = static_cast<std::size_t>(layer.out_channels);
      const std::size_t ic = static_cast<std::size_t>(in_c);
      layer.weight = Tensor<T>({oc, ic, std::size_t(k), std::size_t(k)});
      layer.bias = Tensor<T>({oc});
      layer.grad_weight = Tensor<T>({oc, ic, std::size_t(k), std::size_t(k)});
      layer.grad_bias = Tensor<T>({oc});
      // uniform fan-in init, biases start at zero
      const double bound = 1.0 / std::sqrt(static_cast<double>(ic) * k * k);
      for (std::size_t p = 0; p < layer.weight.numel(); ++p)
        layer.weight.flat(p) = static_cast<T>(rng.uniform(-bound, bound));
      in_c = layer.out_channels;
      h = layer.out_h;
      w = layer.out_w;
      layers_.push_back(std::move(layer));
    }
  }

  const BackboneConfig& config() const { return cfg_; }
  int out_channels() const { return layers_.back().out_channels; }
  int out_height() const { return layers_.back().out_h; }
  int out_width() const { return layers_.back().out_w; }

  /// Images (N, C, H, W) -> feature map (N, out_channels, out_h, out_w).
  const Tensor<T>& forward(const Tensor<T>& images, BackboneTrace<T>& trace) const {
    check_input(images);
    const std::size_t n = images.size(0);
    const int k = cfg_.kernel_size;
    const int pad = k / 2;
    trace.cols.resize(layers_.size());
    trace.acts.resize(layers_.size());
    trace.batch = n;
    const Tensor<T>* x = &images;
    Tensor<T> scratch; // (OC, patch) single-sample gemm output
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const Layer& layer = layers_[li];
      const std::size_t patch = std::size_t(layer.out_h) * layer.out_w;
      const std::size_t kk = std::size_t(layer.in_channels) * k * k;
      const std::size_t in_sz = std::size_t(layer.in_channels) * layer.in_h * layer.in_w;
      detail::ensure_shape(trace.cols[li], {kk, n * patch});
      detail::ensure_shape(trace.acts[li],
                           {n, std::size_t(layer.out_channels),
                            std::size_t(layer.out_h), std::size_t(layer.out_w)});
      detail::ensure_shape(scratch, {std::size_t(layer.out_channels), patch});
      // one gemm per image keeps each sample's arithmetic (and thus its bits)
      // independent of whatever else shares the batch
      Tensor<T>& act = trace.acts[li];
      for (std::size_t img = 0; img < n; ++img) {
        detail::im2col(x->data() + img * in_sz, layer.in_channels, layer.in_h,
                       layer.in_w, k, layer.stride, pad, layer.out_h, layer.out_w,
                       trace.cols[li].data(), n * patch, img * patch);
        linalg::gemm_strided<T>(std::size_t(layer.out_channels), patch, kk, T{1},
                                layer.weight.data(), kk,
                                trace.cols[li].data() + img * patch, n * patch, T{0},
                                scratch.data(), patch);
        for (std::size_t oc = 0; oc < std::size_t(layer.out_channels); ++oc) {
          const T b = layer.bias.flat(oc);
          T* dst = act.data() + (img * layer.out_channels + oc) * patch;
          const T* s = scratch.data() + oc * patch;
          for (std::size_t p = 0; p < patch; ++p) {
            const T v = s[p] + b;
            dst[p] = v > T{0} ? v : T{0};
          }
        }
      }
      x = &act;
    }
    return trace.acts.back();
  }

  Tensor<T> forward(const Tensor<T>& images) const {
    BackboneTrace<T> trace;
    return forward(images, trace);
  }

  /// Accumulates parameter gradients given d_feature = dL/d(feature map).
  /// Optionally emits dL/d(images). The trace must come from a forward()
  /// call under the current parameters.
  void backward(const BackboneTrace<T>& trace, const Tensor<T>& d_feature,
                Tensor<T>* d_input = nullptr) {
    const std::size_t n = trace.batch;
    const int k = cfg_.kernel_size;
    const int pad = k / 2;
    if (!d_feature.same_shape(trace.acts.back()))
      throw ContractError("backbone backward: feature gradient shape mismatch");
    Tensor<T> d_act = d_feature; // dL/d(post-ReLU act) of current layer
    Tensor<T> scratch;           // (OC, N*patch) reordering of d(preact)
    Tensor<T> d_col;
    for (std::size_t li = layers_.size(); li-- > 0;) {
      Layer& layer = layers_[li];
      const std::size_t patch = std::size_t(layer.out_h) * layer.out_w;
      const std::size_t kk = std::size_t(layer.in_channels) * k * k;
      const Tensor<T>& act = trace.acts[li];
      // ReLU mask: post-activation is zero exactly where the unit was off
      for (std::size_t i = 0; i < d_act.numel(); ++i)
        if (act.flat(i) <= T{0}) d_act.flat(i) = T{0};
      // bias grads and (n, OC, patch) -> (OC, n*patch) reorder
      detail::ensure_shape(scratch, {std::size_t(layer.out_channels), n * patch});
      for (std::size_t oc = 0; oc < std::size_t(layer.out_channels); ++oc) {
        T* dst = scratch.data() + oc * n * patch;
        double bsum = 0.0;
        for (std::size_t img = 0; img < n; ++img) {
          const T* src = d_act.data() + (img * layer.out_channels + oc) * patch;
          for (std::size_t p = 0; p < patch; ++p) {
            dst[img * patch + p] = src[p];
            bsum += static_cast<double>(src[p]);
          }
        }
        layer.grad_bias.flat(oc) += static_cast<T>(bsum);
      }
      linalg::gemm<T>(false, true, std::size_t(layer.out_channels), kk, n * patch,
                      T{1}, scratch.data(), trace.cols[li].data(), T{1},
                      layer.grad_weight.data());
      if (li == 0 && d_input == nullptr) break;
      detail::ensure_shape(d_col, {kk, n * patch});
      linalg::gemm<T>(true, false, kk, n * patch, std::size_t(layer.out_channels),
                      T{1}, layer.weight.data(), scratch.data(), T{0}, d_col.data());
      Tensor<T> d_in({n, std::size_t(layer.in_channels), std::size_t(layer.in_h),
                      std::size_t(layer.in_w)});
      const std::size_t in_sz = std::size_t(layer.in_channels) * layer.in_h * layer.in_w;
      for (std::size_t img = 0; img < n; ++img)
        detail::col2im_accumulate(d_col.data(), layer.in_channels, layer.in_h,
                                  layer.in_w, k, layer.stride, pad, layer.out_h,
                                  layer.out_w, d_in.data() + img * in_sz, n * patch,
                                  img * patch);
      d_act = std::move(d_in);
    }
    if (d_input != nullptr) *d_input = std::move(d_act);
  }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> refs;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      refs.push_back({msg("conv", i, ".weight"), &layers_[i].weight, &layers_[i].grad_weight});
      refs.push_back({msg("conv", i, ".bias"), &layers_[i].bias, &layers_[i].grad_bias});
    }
    return refs;
  }

  void zero_grads() {
    for (auto& layer : layers_) {
      layer.grad_weight.fill(T{0});
      layer.grad_bias.fill(T{0});
    }
  }

private:
  struct Layer {
    Tensor<T> weight, bias;
    Tensor<T> grad_weight, grad_bias;
    int in_channels = 0, out_channels = 0, stride = 1;
    int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  };

  void check_input(const Tensor<T>& images) const {
    if (images.ndim() != 4 || images.size(1) != std::size_t(cfg_.in_channels) ||
        images.size(2) != std::size_t(cfg_.input_height) ||
        images.size(3) != std::size_t(cfg_.input_width)) {
      std::string got = msg("rank-", images.ndim());
      if (images.ndim() == 4)
        got = msg(images.size(0), "x", images.size(1), "x", images.size(2), "x",
                  images.size(3));
      throw ConfigError(msg("backbone input must be Nx", cfg_.in_channels, "x",
                            cfg_.input_height, "x", cfg_.input_width, ", got ", got));
    }
  }

  std::vector<Layer> layers_;
  BackboneConfig cfg_;
};

/// Linear classifier over pooled features. The weight matrix is shared
/// between logit computation and attention-map computation; the bias, when
/// present, feeds logits only.
template <typename T>
class ClassifierHead {
public:
  ClassifierHead(int classes, int channels, bool with_bias, std::uint64_t seed)
      : classes_(classes), channels_(channels), with_bias_(with_bias) {
    if (classes < 1 || channels < 1)
      throw ConfigError(msg("classifier head: bad dims L=", classes, " C=", channels));
    weight_ = Tensor<T>({std::size_t(classes), std::size_t(channels)});
    grad_weight_ = Tensor<T>({std::size_t(classes), std::size_t(channels)});
    bias_ = Tensor<T>({std::size_t(classes)});
    grad_bias_ = Tensor<T>({std::size_t(classes)});
    Rng rng(derive_seed(seed, 0x4ead));
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    for (std::size_t p = 0; p < weight_.numel(); ++p)
      weight_.flat(p) = static_cast<T>(rng.uniform(-bound, bound));
  }

  int classes() const { return classes_; }
  int channels() const { return channels_; }
  bool with_bias() const { return with_bias_; }
  Tensor<T>& weight() { return weight_; }
  const Tensor<T>& weight() const { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& bias() const { return bias_; }

  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> refs;
    refs.push_back({"head.weight", &weight_, &grad_weight_});
    if (with_bias_) refs.push_back({"head.bias", &bias_, &grad_bias_});
    return refs;
  }

  void zero_grads() {
    grad_weight_.fill(T{0});
    grad_bias_.fill(T{0});
  }

  Tensor<T>& grad_weight() { return grad_weight_; }
  Tensor<T>& grad_bias() { return grad_bias_; }

private:
  Tensor<T> weight_, bias_, grad_weight_, grad_bias_;
  int classes_, channels_;
  bool with_bias_;
};

/// Global average pooling followed by the linear head.
/// Returns (features f: N x C, logits: N x L).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> pool_and_logits(const ClassifierHead<T>& head,
                                                const Tensor<T>& feature) {
  if (feature.ndim() != 4)
    throw ConfigError(msg("pool_and_logits: feature map must be rank 4, got rank ",
                          feature.ndim()));
  const std::size_t n = feature.size(0), c = feature.size(1);
  const std::size_t hw = feature.size(2) * feature.size(3);
  if (c != std::size_t(head.channels()))
    throw ConfigError(msg("pool_and_logits: head expects C=", head.channels(),
                          ", feature map has C=", c));
  Tensor<T> pooled({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = feature.data() + (i * c + ch) * hw;
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) acc += static_cast<double>(src[p]);
      pooled(i, ch) = static_cast<T>(acc / static_cast<double>(hw));
    }
  const std::size_t l = std::size_t(head.classes());
  Tensor<T> logits({n, l});
  // logits = f * W^T (+ bias)
  linalg::gemm<T>(false, true, n, l, c, T{1}, pooled.data(), head.weight().data(),
                  T{0}, logits.data());
  if (head.with_bias())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < l; ++j) logits(i, j) += head.bias().flat(j);
  return {std::move(pooled), std::move(logits)};
}

/// Backward of pool_and_logits: accumulates head gradients and adds the
/// feature-map gradient into d_feature (which must be pre-sized and may
/// already hold contributions from other loss terms).
template <typename T>
void pool_and_logits_backward(ClassifierHead<T>& head, const Tensor<T>& pooled,
                              const Tensor<T>& d_logits, Tensor<T>& d_feature) {
  const std::size_t n = pooled.size(0), c = pooled.size(1);
  const std::size_t l = std::size_t(head.classes());
  const std::size_t hw = d_feature.size(2) * d_feature.size(3);
  // dW += dLogits^T * f
  linalg::gemm<T>(true, false, l, c, n, T{1}, d_logits.data(), pooled.data(), T{1},
                  head.grad_weight().data());
  if (head.with_bias())
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < l; ++j) head.grad_bias().flat(j) += d_logits(i, j);
  // df = dLogits * W, spread uniformly over the pooled window
  Tensor<T> d_pooled({n, c});
  linalg::gemm<T>(false, false, n, c, l, T{1}, d_logits.data(), head.weight().data(),
                  T{0}, d_pooled.data());
  const T inv = T{1} / static_cast<T>(hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T g = d_pooled(i, ch) * inv;
      T* dst = d_feature.data() + (i * c + ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] += g;
    }
}

/// Class attention maps: M[i,j,h,w] = sum_c W[j,c] * F[i,c,h,w].
/// The head bias never participates. Maps are returned raw (no ReLU, no
/// normalization).
template <typename T>
Tensor<T> cam(const ClassifierHead<T>& head, const Tensor<T>& feature) {
  if (feature.ndim() != 4)
    throw ConfigError(msg("cam: feature map must be rank 4, got rank ", feature.ndim()));
  const std::size_t n = feature.size(0), c = feature.size(1);
  const std::size_t h = feature.size(2), w = feature.size(3);
  if (c != std::size_t(head.channels()))
    throw ConfigError(msg("cam: head expects C=", head.channels(),
                          ", feature map has C=", c));
  const std::size_t l = std::size_t(head.classes());
  Tensor<T> maps({n, l, h, w});
  const std::size_t hw = h * w;
  for (std::size_t i = 0; i < n; ++i)
    linalg::gemm<T>(false, false, l, hw, c, T{1}, head.weight().data(),
                    feature.data() + i * c * hw, T{0}, maps.data() + i * l * hw);
  return maps;
}

/// Backward of cam: accumulates dW and adds the feature gradient into
/// d_feature (pre-sized, accumulating).
template <typename T>
void cam_backward(ClassifierHead<T>& head, const Tensor<T>& feature,
                  const Tensor<T>& d_maps, Tensor<T>& d_feature) {
  const std::size_t n = feature.size(0), c = feature.size(1);
  const std::size_t hw = feature.size(2) * feature.size(3);
  const std::size_t l = std::size_t(head.classes());
  for (std::size_t i = 0; i < n; ++i) {
    // dW += dM_i * F_i^T
    linalg::gemm<T>(false, true, l, c, hw, T{1}, d_maps.data() + i * l * hw,
                    feature.data() + i * c * hw, T{1}, head.grad_weight().data());
    // dF_i += W^T * dM_i
    linalg::gemm<T>(true, false, c, hw, l, T{1}, head.weight().data(),
                    d_maps.data() + i * l * hw, T{1}, d_feature.data() + i * c * hw);
  }
}

/// Backbone plus head: the trainable unit the trainer and the diagnostics
/// operate on.
template <typename T>
struct Model {
  Backbone<T> backbone;
  ClassifierHead<T> head;

  Model(const BackboneConfig& cfg, int classes, bool head_bias, std::uint64_t seed)
      : backbone(cfg, seed),
        head(classes, probe_channels(cfg), head_bias, derive_seed(seed, 0x6ead)) {}

  std::vector<ParamRef<T>> parameters() {
    auto refs = backbone.parameters();
    for (auto& r : head.parameters()) refs.push_back(r);
    return refs;
  }

  void zero_grads() {
    backbone.zero_grads();
    head.zero_grads();
  }

private:
  static int probe_channels(const BackboneConfig& cfg) {
    cfg.validate();
    return cfg.stage_widths.back();
  }
};

} // namespace eac
