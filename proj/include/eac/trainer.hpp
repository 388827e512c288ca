#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#if defined(__SSE2__)
#include <pmmintrin.h>
#endif

#include "eac/checkpoint.hpp"
#include "eac/common.hpp"
#include "eac/data.hpp"
#include "eac/loss.hpp"
#include "eac/model.hpp"
#include "eac/rng.hpp"

namespace eac {

enum class WeightDecayMode { coupled, decoupled };

inline const char* to_string(WeightDecayMode m) {
  return m == WeightDecayMode::coupled ? "coupled" : "decoupled";
}

inline WeightDecayMode parse_weight_decay_mode(const std::string& s) {
  if (s == "coupled") return WeightDecayMode::coupled;
  if (s == "decoupled") return WeightDecayMode::decoupled;
  throw ConfigError(msg("unknown weight_decay_mode '", s, "' (want coupled or decoupled)"));
}

struct ExperimentConfig {
  // dataset
  std::string train_path, test_path;
  DatasetFormat format = DatasetFormat::cifar_binary;
  int classes = 10;
  std::size_t train_subset = 0, test_subset = 0;
  // noise
  NoiseSpec noise{};
  // erase
  EraseSpec erase{};
  // model
  BackboneConfig backbone{};
  bool head_bias = true;
  std::uint64_t model_seed = 1;
  // train
  EacVariant variant = EacVariant::full;
  double lambda = 5.0;
  int batch_size = 64;
  int epochs = 60;
  double lr = 2e-4;
  double lr_gamma = 0.9;
  double weight_decay = 1e-4;
  WeightDecayMode weight_decay_mode = WeightDecayMode::coupled;
  double flip_probability = 0.5;
  std::uint64_t data_seed = 2;
  int eval_every = 1;
  int checkpoint_every = 0; // 0 = only at the end
  bool deterministic = false;
  int final_window = 5;

  void validate() const {
    if (train_path.empty()) throw ConfigError("dataset.train_path is required");
    if (test_path.empty()) throw ConfigError("dataset.test_path is required");
    if (format == DatasetFormat::cifar_binary && classes < 1)
      throw ConfigError("dataset.classes must be >= 1 for cifar_binary");
    if (epochs < 1) throw ConfigError(msg("train.epochs must be >= 1, got ", epochs));
    if (batch_size < 1)
      throw ConfigError(msg("train.batch_size must be >= 1, got ", batch_size));
    if (!(lr > 0.0)) throw ConfigError(msg("train.lr must be > 0, got ", lr));
    if (!(lr_gamma > 0.0 && lr_gamma <= 1.0))
      throw ConfigError(msg("train.lr_gamma must be in (0,1], got ", lr_gamma));
    if (lambda < 0.0) throw ConfigError(msg("train.lambda must be >= 0, got ", lambda));
    if (weight_decay < 0.0)
      throw ConfigError(msg("train.weight_decay must be >= 0, got ", weight_decay));
    if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
      throw ConfigError(msg("train.flip_probability outside [0,1]: ", flip_probability));
    if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
    if (final_window < 1) throw ConfigError("train.final_window must be >= 1");
    noise.validate();
    erase.validate();
    backbone.validate();
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline double lr_at(int epoch, double lr0, double gamma) {
  if (epoch < 0) throw ContractError(msg("lr_at: epoch ", epoch, " < 0"));
  return lr0 * std::pow(gamma, epoch);
}

/// Adam with the usual bias correction. Weight decay defaults to the
/// optimizer-coupled convention (decay folded into the gradient before the
/// moment updates); decoupled mode applies it as a separate shrink step.
template <typename T>
class Adam {
public:
  Adam(std::vector<ParamRef<T>> params, double lr, double weight_decay = 0.0,
       WeightDecayMode mode = WeightDecayMode::coupled, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), mode_(mode),
        beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(Tensor<T>::zeros(p.value->shape()));
      v_.emplace_back(Tensor<T>::zeros(p.value->shape()));
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::int64_t steps() const { return step_; }

  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      Tensor<T>& value = *params_[pi].value;
      const Tensor<T>& grad = *params_[pi].grad;
      Tensor<T>& m = m_[pi];
      Tensor<T>& v = v_[pi];
      for (std::size_t i = 0; i < value.numel(); ++i) {
        double g = static_cast<double>(grad.flat(i));
        const double w = static_cast<double>(value.flat(i));
        if (mode_ == WeightDecayMode::coupled) g += wd_ * w;
        const double mi = beta1_ * static_cast<double>(m.flat(i)) + (1.0 - beta1_) * g;
        const double vi = beta2_ * static_cast<double>(v.flat(i)) + (1.0 - beta2_) * g * g;
        m.flat(i) = static_cast<T>(mi);
        v.flat(i) = static_cast<T>(vi);
        double update = lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
        if (mode_ == WeightDecayMode::decoupled) update += lr_ * wd_ * w;
        value.flat(i) = static_cast<T>(w - update);
      }
    }
  }

  /// Checkpoint plumbing: moments are exported as adam.m.<param>,
  /// adam.v.<param>; the step count goes into the metadata.
  void export_state(std::vector<std::pair<std::string, const Tensor<T>*>>& tensors,
                    nlohmann::json& meta) const {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      tensors.emplace_back("adam.m." + params_[pi].name, &m_[pi]);
      tensors.emplace_back("adam.v." + params_[pi].name, &v_[pi]);
    }
    meta["adam_step"] = step_;
  }

  void import_state(const Checkpoint<T>& ckpt) {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      const Tensor<T>& m = ckpt.tensor("adam.m." + params_[pi].name);
      const Tensor<T>& v = ckpt.tensor("adam.v." + params_[pi].name);
      if (!m.same_shape(m_[pi]) || !v.same_shape(v_[pi]))
        throw IoError(msg("checkpoint: optimizer state shape mismatch for '",
                          params_[pi].name, "'"));
      m_[pi] = m;
      v_[pi] = v;
    }
    step_ = ckpt.meta.at("adam_step").template get<std::int64_t>();
  }

private:
  std::vector<ParamRef<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  double lr_, wd_;
  WeightDecayMode mode_;
  double beta1_, beta2_, eps_;
  std::int64_t step_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double l_cls = 0.0, l_c = 0.0, l_total = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = std::numeric_limits<double>::quiet_NaN(); // NaN = not evaluated
  double seconds = 0.0;
};

using TrainHistory = std::vector<EpochRecord>;

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch},       {"lr", r.lr},
                   {"l_cls", r.l_cls},       {"l_c", r.l_c},
                   {"l_total", r.l_total},   {"train_accuracy", r.train_accuracy},
                   {"seconds", r.seconds}};
  if (std::isnan(r.test_accuracy)) j["test_accuracy"] = nullptr;
  else j["test_accuracy"] = r.test_accuracy;
  return j;
}

inline EpochRecord epoch_record_from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.lr = j.at("lr").get<double>();
  r.l_cls = j.at("l_cls").get<double>();
  r.l_c = j.at("l_c").get<double>();
  r.l_total = j.at("l_total").get<double>();
  r.train_accuracy = j.at("train_accuracy").get<double>();
  r.seconds = j.at("seconds").get<double>();
  if (!j.at("test_accuracy").is_null()) r.test_accuracy = j.at("test_accuracy").get<double>();
  return r;
}

inline void save_history(const std::filesystem::path& path, const TrainHistory& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(msg("cannot write history '", path.string(), "'"));
  for (const auto& r : history) out << to_json(r).dump() << "\n";
}

inline TrainHistory load_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(msg("cannot open history '", path.string(), "'"));
  TrainHistory history;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      history.push_back(epoch_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(msg("bad history line in '", path.string(), "': ", e.what()));
    }
  }
  return history;
}

template <typename T>
struct TrainingBatch {
  Tensor<T> images, flipped;
  std::vector<int> labels;
  std::vector<std::size_t> ids;
};

/// Assembles one augmented batch. Augmentation randomness is keyed by
/// (data seed, epoch, sample id), never by batch position, so the stream
/// is independent of batch composition. Non-baseline variants get the
/// erased originals plus their exact mirrors; the baseline variant gets
/// erase plus per-sample random flip as plain augmentation.
template <typename T>
TrainingBatch<T> make_training_batch(const Dataset<T>& ds,
                                     const std::vector<std::size_t>& indices,
                                     EacVariant variant, const EraseSpec& erase,
                                     std::uint64_t data_seed, std::uint64_t epoch,
                                     double flip_probability) {
  if (indices.empty()) throw ContractError("make_training_batch: empty index list");
  const std::size_t n = indices.size();
  const auto c = std::size_t(ds.channels), h = std::size_t(ds.height), w = std::size_t(ds.width);
  TrainingBatch<T> batch;
  batch.images = Tensor<T>({n, c, h, w});
  batch.labels.resize(n);
  batch.ids.resize(n);
  Tensor<T> pixels({c, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    const LabeledImage<T>& s = ds.samples[indices[i]];
    batch.labels[i] = s.given_label;
    batch.ids[i] = s.id;
    std::copy(s.pixels.data(), s.pixels.data() + pixels.numel(), pixels.data());
    if (variant != EacVariant::no_erasing) {
      Rng rng(derive_seed(data_seed, 0xe7a5e, epoch, s.id));
      random_erase_inplace(pixels, erase, rng);
    }
    if (variant == EacVariant::baseline) {
      Rng rng(derive_seed(data_seed, 0xf11b, epoch, s.id));
      if (rng.uniform() < flip_probability) pixels = flip_last_axis(pixels);
    }
    std::copy(pixels.data(), pixels.data() + pixels.numel(),
              batch.images.data() + i * pixels.numel());
  }
  if (variant != EacVariant::baseline) batch.flipped = flip_last_axis(batch.images);
  return batch;
}

/// Accuracy of argmax(logits) against true labels, unaugmented; ties go to
/// the lowest class index.
template <typename T>
double evaluate(Model<T>& model, const Dataset<T>& ds, std::size_t batch_size = 256) {
  if (ds.samples.empty()) throw ConfigError("evaluate: empty dataset");
  const auto c = std::size_t(ds.channels), h = std::size_t(ds.height), w = std::size_t(ds.width);
  BackboneTrace<T> trace;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, ds.samples.size() - start);
    Tensor<T> images({n, c, h, w});
    for (std::size_t i = 0; i < n; ++i) {
      const auto& pix = ds.samples[start + i].pixels;
      std::copy(pix.data(), pix.data() + pix.numel(), images.data() + i * pix.numel());
    }
    const Tensor<T>& feat = model.backbone.forward(images, trace);
    auto [pooled, logits] = pool_and_logits(model.head, feat);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.size(1); ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      if (static_cast<int>(best) == ds.samples[start + i].true_label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.samples.size());
}

namespace detail {

inline nlohmann::json backbone_to_json(const BackboneConfig& cfg) {
  return {{"in_channels", cfg.in_channels},     {"input_height", cfg.input_height},
          {"input_width", cfg.input_width},     {"stage_widths", cfg.stage_widths},
          {"stage_strides", cfg.stage_strides}, {"kernel_size", cfg.kernel_size}};
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j) {
  BackboneConfig cfg;
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.input_height = j.at("input_height").get<int>();
  cfg.input_width = j.at("input_width").get<int>();
  cfg.stage_widths = j.at("stage_widths").get<std::vector<int>>();
  cfg.stage_strides = j.at("stage_strides").get<std::vector<int>>();
  cfg.kernel_size = j.at("kernel_size").get<int>();
  return cfg;
}

} // namespace detail

/// Writes model parameters (and optionally optimizer state) into the
/// versioned container, together with the architecture needed to rebuild
/// the model from the file alone.
template <typename T>
void save_model_checkpoint(const std::filesystem::path& path, Model<T>& model,
                           nlohmann::json meta, Adam<T>* optimizer = nullptr) {
  meta["arch"] = {{"backbone", detail::backbone_to_json(model.backbone.config())},
                  {"classes", model.head.classes()},
                  {"head_bias", model.head.with_bias()}};
  std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
  for (const auto& p : model.parameters()) tensors.emplace_back(p.name, p.value);
  if (optimizer != nullptr) optimizer->export_state(tensors, meta);
  save_checkpoint<T>(path, meta, tensors);
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint<T>& ckpt) {
  const auto& arch = ckpt.meta.at("arch");
  Model<T> model(detail::backbone_from_json(arch.at("backbone")),
                 arch.at("classes").template get<int>(),
                 arch.at("head_bias").template get<bool>(), 0);
  for (auto& p : model.parameters()) {
    const Tensor<T>& stored = ckpt.tensor(p.name);
    if (!stored.same_shape(*p.value))
      throw IoError(msg("checkpoint: parameter '", p.name, "' shape mismatch"));
    *p.value = stored;
  }
  return model;
}

template <typename T>
Model<T> load_model_checkpoint(const std::filesystem::path& path) {
  return model_from_checkpoint(load_checkpoint<T>(path));
}

template <typename T>
struct FitResult {
  Model<T> model;
  TrainHistory history;
  NoiseManifest manifest;
};

struct FitOptions {
  std::filesystem::path out_dir; // empty = no files written
  bool resume = false;
  std::ostream* log = nullptr;
};

/// The training loop: noise injection, per-epoch shuffle, augmentation,
/// the EAC objective, Adam with the exponential schedule. Fully
/// reproducible from the three seeds; resumable at epoch granularity from
/// checkpoint_latest.eac because all augmentation randomness is keyed
/// (seed, epoch, id) rather than drawn from a running stream.
template <typename T>
FitResult<T> fit(const ExperimentConfig& cfg, const FitOptions& opts = {}) {
  cfg.validate();
  set_deterministic_mode(cfg.deterministic);
#if defined(__SSE2__)
  // flush denormals: decayed weights otherwise drift subnormal and the gemm
  // kernels hit the slow path, inflating late epochs several-fold
  _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
  _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
  Dataset<T> train = load_dataset<T>(cfg.train_path, cfg.format, cfg.classes, cfg.train_subset);
  Dataset<T> test = load_dataset<T>(cfg.test_path, cfg.format, cfg.classes, cfg.test_subset);
  if (train.classes != test.classes)
    throw DataError(msg("train set has ", train.classes, " classes, test set ", test.classes));
  if (train.channels != test.channels || train.height != test.height ||
      train.width != test.width)
    throw DataError("train/test image dimensions differ");
  NoiseManifest manifest = inject_noise(train, cfg.noise);

  BackboneConfig arch = cfg.backbone;
  arch.in_channels = train.channels;
  arch.input_height = train.height;
  arch.input_width = train.width;
  Model<T> model(arch, train.classes, cfg.head_bias, cfg.model_seed);
  Adam<T> adam(model.parameters(), cfg.lr, cfg.weight_decay, cfg.weight_decay_mode);

  const bool persist = !opts.out_dir.empty();
  std::filesystem::path latest, final_path, history_path;
  if (persist) {
    std::filesystem::create_directories(opts.out_dir);
    latest = opts.out_dir / "checkpoint_latest.eac";
    final_path = opts.out_dir / "checkpoint_final.eac";
    history_path = opts.out_dir / "history.jsonl";
    save_manifest(opts.out_dir / "noise_manifest.csv", manifest);
  }

  TrainHistory history;
  int start_epoch = 0;
  if (persist && opts.resume && std::filesystem::exists(latest)) {
    Checkpoint<T> ckpt = load_checkpoint<T>(latest);
    start_epoch = ckpt.meta.at("epoch_next").template get<int>();
    for (auto& p : model.parameters()) {
      const Tensor<T>& stored = ckpt.tensor(p.name);
      if (!stored.same_shape(*p.value))
        throw IoError(msg("resume: parameter '", p.name, "' shape mismatch"));
      *p.value = stored;
    }
    adam.import_state(ckpt);
    if (std::filesystem::exists(history_path)) {
      for (auto& r : load_history(history_path))
        if (r.epoch < start_epoch) history.push_back(r);
    }
    if (opts.log)
      *opts.log << "resuming at epoch " << start_epoch << " from " << latest << "\n";
  }
  if (persist) save_history(history_path, history);

  const std::size_t n_train = train.samples.size();
  BatchWork<T> work;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    adam.set_lr(lr_at(epoch, cfg.lr, cfg.lr_gamma));
    double sum_cls = 0.0, sum_c = 0.0, sum_total = 0.0;
    std::size_t train_correct = 0;
    const auto batches = make_batches(n_train, std::size_t(cfg.batch_size), cfg.data_seed,
                                      std::uint64_t(epoch));
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      TrainingBatch<T> batch =
          make_training_batch(train, batches[bi], cfg.variant, cfg.erase, cfg.data_seed,
                              std::uint64_t(epoch), cfg.flip_probability);
      model.zero_grads();
      LossBundle bundle;
      try {
        bundle = eac_batch_loss(model, batch.images, batch.flipped, batch.labels,
                                cfg.lambda, cfg.variant, true, work);
      } catch (const NumericError& e) {
        throw NumericError(msg("epoch ", epoch, " batch ", bi, ": ", e.what()));
      }
      adam.step();
      const auto bsz = static_cast<double>(batch.labels.size());
      sum_cls += bundle.l_cls * bsz;
      sum_c += bundle.l_c * bsz;
      sum_total += bundle.l_total * bsz;
      for (std::size_t i = 0; i < batch.labels.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < work.logits.size(1); ++j)
          if (work.logits(i, j) > work.logits(i, best)) best = j;
        if (static_cast<int>(best) == batch.labels[i]) ++train_correct;
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr();
    rec.l_cls = sum_cls / static_cast<double>(n_train);
    rec.l_c = sum_c / static_cast<double>(n_train);
    rec.l_total = sum_total / static_cast<double>(n_train);
    rec.train_accuracy = static_cast<double>(train_correct) / static_cast<double>(n_train);
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs - 1)
      rec.test_accuracy = evaluate(model, test);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(rec);
    if (persist) {
      std::ofstream out(history_path, std::ios::app);
      if (!out) throw IoError(msg("cannot append history '", history_path.string(), "'"));
      out << to_json(rec).dump() << "\n";
    }
    if (opts.log) {
      auto& log = *opts.log;
      log << "epoch " << epoch << " lr " << rec.lr << " l_cls " << rec.l_cls << " l_c "
          << rec.l_c << " l_total " << rec.l_total << " train " << rec.train_accuracy;
      if (!std::isnan(rec.test_accuracy)) log << " test " << rec.test_accuracy;
      log << " (" << rec.seconds << "s)" << std::endl;
    }
    const bool last = epoch == cfg.epochs - 1;
    if (persist && ((cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) || last)) {
      nlohmann::json meta{{"epoch_next", epoch + 1}};
      save_model_checkpoint(latest, model, meta, &adam);
      if (last) save_model_checkpoint(final_path, model, meta, &adam);
    }
  }
  return FitResult<T>{std::move(model), std::move(history), std::move(manifest)};
}

} // namespace eac
