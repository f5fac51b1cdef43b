#pragma once

// Differentiable non-intrusive quality predictor: waveform -> (SIG, BAK, OVRL).
//
// Features are log(1e-8 + |STFT|) over the shared StftConfig, followed by two
// conv3x3 (same padding) + relu + 2x2 mean-pool blocks with 16 and 32
// filters, a global mean over time and frequency, a 32 -> 32 relu layer and
// an affine 32 -> 3 head. The head is not clamped.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mosguard/adam.hpp"
#include "mosguard/autodiff.hpp"
#include "mosguard/error.hpp"
#include "mosguard/parallel.hpp"
#include "mosguard/rng.hpp"
#include "mosguard/signal.hpp"
#include "mosguard/spectral.hpp"

namespace mosguard {

/// MOS-scale subscores. Not clamped to [1, 5].
struct QualityScore {
  double sig = 0.0;
  double bak = 0.0;
  double ovrl = 0.0;

  static constexpr std::size_t kCount = 3;
  static constexpr std::array<const char*, kCount> kNames{"SIG", "BAK", "OVRL"};

  std::array<double, kCount> values() const { return {sig, bak, ovrl}; }
  double operator[](std::size_t j) const { return values().at(j); }

  static QualityScore from(std::span<const double> v) {
    if (v.size() != kCount) throw dimension_error("QualityScore needs exactly 3 values");
    return {v[0], v[1], v[2]};
  }

  bool finite() const { return std::isfinite(sig) && std::isfinite(bak) && std::isfinite(ovrl); }

  friend bool operator==(const QualityScore&, const QualityScore&) = default;
};

/// Sum of absolute subscore differences.
inline double l1_distance(const QualityScore& a, const QualityScore& b) {
  return std::abs(a.sig - b.sig) + std::abs(a.bak - b.bak) + std::abs(a.ovrl - b.ovrl);
}

/// Synthetic labelling rule for generated clips. BAK rises linearly from 1 at
/// 0 dB SNR to 5 at 40 dB; SIG is 5 for an unprocessed speech-like carrier
/// and 1 otherwise; OVRL is the mean of the two.
inline QualityScore surrogate_label(double snr_db, bool clean_is_speechlike) {
  if (!std::isfinite(snr_db)) throw domain_error("surrogate_label: non-finite SNR");
  const double bak = std::clamp(1.0 + 4.0 * snr_db / 40.0, 1.0, 5.0);
  const double sig = clean_is_speechlike ? 5.0 : 1.0;
  return {sig, bak, (sig + bak) / 2.0};
}

struct ParamSpec {
  std::string name;
  Shape shape;
};

class PredictorModel {
 public:
  static constexpr double kLogFloor = 1e-8;
  static constexpr std::size_t kConv1Filters = 16;
  static constexpr std::size_t kConv2Filters = 32;
  static constexpr std::size_t kHidden = 32;

  static const std::vector<ParamSpec>& architecture() {
    static const std::vector<ParamSpec> specs{
        {"conv1.weight", {kConv1Filters, 1, 3, 3}},
        {"conv1.bias", {kConv1Filters}},
        {"conv2.weight", {kConv2Filters, kConv1Filters, 3, 3}},
        {"conv2.bias", {kConv2Filters}},
        {"dense.weight", {kHidden, kConv2Filters}},
        {"dense.bias", {kHidden}},
        {"head.weight", {QualityScore::kCount, kHidden}},
        {"head.bias", {QualityScore::kCount}},
    };
    return specs;
  }

  /// He-normal weights, zero biases, head bias at the scale midpoint.
  static PredictorModel initialize(std::uint64_t seed, StftConfig cfg = {}) {
    Rng rng(seed);
    std::vector<Tensor> params;
    for (const auto& spec : architecture()) {
      Tensor t(spec.shape);
      if (spec.shape.size() > 1) {
        const std::size_t fan_in = shape_size(spec.shape) / spec.shape[0];
        const double gain = spec.name.starts_with("head") ? 1.0 : 2.0;
        const double sd = std::sqrt(gain / static_cast<double>(fan_in));
        for (double& v : t.data()) v = sd * rng.normal();
      } else if (spec.name == "head.bias") {
        for (double& v : t.data()) v = 3.0;
      }
      params.push_back(std::move(t));
    }
    return PredictorModel(std::move(params), cfg);
  }

  PredictorModel(std::vector<Tensor> params, StftConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    const auto& arch = architecture();
    if (params_.size() != arch.size()) {
      throw incompatible_model_error("predictor expects " + std::to_string(arch.size()) + " parameter tensors, got " +
                                     std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < arch.size(); ++i) {
      if (params_[i].shape() != arch[i].shape) {
        throw incompatible_model_error("parameter " + arch[i].name + " has shape " +
                                       shape_string(params_[i].shape()) + ", expected " +
                                       shape_string(arch[i].shape));
      }
    }
  }

  const std::vector<Tensor>& parameters() const { return params_; }
  std::vector<Tensor>& parameters() { return params_; }
  const StftConfig& stft_config() const { return cfg_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  /// Places the parameters on a tape, as leaves or as constants.
  std::vector<ad::Var> bind(ad::Tape& tape, bool differentiable) const {
    std::vector<ad::Var> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(differentiable ? tape.leaf(p) : tape.constant(p));
    return vars;
  }

  /// Network output [3] from an STFT node [frames, bins, 2].
  ad::Var forward_spectrum(const ad::Var& spectrum, std::span<const ad::Var> p) const {
    if (p.size() != params_.size()) throw contract_error("forward: wrong number of bound parameters");
    const std::size_t frames = spectrum.shape()[0];
    const std::size_t bins = spectrum.shape()[1];
    ad::Var h = ad::log(ad::shift(ad::complex_modulus(spectrum), kLogFloor));
    h = ad::reshape(h, Shape{1, frames, bins});
    h = ad::mean_pool2d(ad::relu(ad::conv2d(h, p[0], p[1], 1)));
    h = ad::mean_pool2d(ad::relu(ad::conv2d(h, p[2], p[3], 1)));
    h = ad::spatial_mean(h);
    h = ad::relu(ad::dense(h, p[4], p[5]));
    return ad::dense(h, p[6], p[7]);
  }

  /// Network output [3] from a waveform node [T].
  ad::Var forward(const ad::Var& signal, std::span<const ad::Var> p) const {
    return forward_spectrum(ad::stft(signal, cfg_), p);
  }

  QualityScore predict(const Waveform& x) const {
    ad::Tape tape;
    const auto p = bind(tape, false);
    const ad::Var in = tape.constant(Tensor::vector(std::vector<double>(x.samples().begin(), x.samples().end())));
    return QualityScore::from(forward(in, p).value().data());
  }

  /// Layer shapes plus the feature front end, used to pin saved weights to
  /// this architecture.
  std::vector<std::vector<std::uint32_t>> fingerprint() const {
    std::vector<std::vector<std::uint32_t>> fp;
    fp.push_back({static_cast<std::uint32_t>(cfg_.n_fft), static_cast<std::uint32_t>(cfg_.window_length),
                  static_cast<std::uint32_t>(cfg_.hop)});
    for (const auto& spec : architecture()) {
      std::vector<std::uint32_t> dims;
      for (std::size_t d : spec.shape) dims.push_back(static_cast<std::uint32_t>(d));
      fp.push_back(std::move(dims));
    }
    return fp;
  }

  friend bool operator==(const PredictorModel&, const PredictorModel&) = default;

 private:
  std::vector<Tensor> params_;
  StftConfig cfg_;
};

struct LabeledClip {
  Waveform audio;
  QualityScore label;
};

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct TrainResult {
  PredictorModel model;
  std::vector<double> step_losses;   // minibatch mean squared error, per optimizer step
  std::vector<double> epoch_losses;  // mean of step losses within each epoch
};

namespace detail {

struct SampleGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

/// Squared error ||model(x) - label||^2 / 3 and its gradient wrt every parameter.
inline SampleGrad sample_gradient(const PredictorModel& model, const Waveform& x, const QualityScore& label) {
  ad::Tape tape;
  const auto p = model.bind(tape, true);
  const ad::Var in = tape.constant(Tensor::vector(std::vector<double>(x.samples().begin(), x.samples().end())));
  const ad::Var out = model.forward(in, p);
  const auto lv = label.values();
  const ad::Var target = tape.constant(Tensor::vector({lv[0], lv[1], lv[2]}));
  const ad::Var loss = ad::scale(ad::l2_norm_sq(ad::sub(out, target)), 1.0 / QualityScore::kCount);
  const auto g = tape.backward(loss);
  SampleGrad r;
  r.loss = loss.value().item();
  for (const auto& v : p) r.grads.push_back(g[v]);
  return r;
}

/// Minibatch Adam on the mean per-sample squared error. Deterministic for a
/// fixed seed regardless of worker count: per-sample gradients are reduced in
/// sample order.
inline TrainResult fit(PredictorModel model, std::span<const LabeledClip> data, const TrainConfig& cfg,
                       const std::function<void(int epoch, const PredictorModel&)>& on_epoch_start = {}) {
  if (data.empty()) throw data_error("training set is empty");
  if (cfg.epochs < 0 || cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0)) {
    throw domain_error("invalid training config");
  }
  std::vector<AdamState> states;
  for (const auto& p : model.parameters()) states.emplace_back(p.shape(), AdamConfig{cfg.learning_rate});

  TrainResult result{model, {}, {}};
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (on_epoch_start) on_epoch_start(epoch, model);
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    shuffle(order, rng);
    double epoch_acc = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      std::vector<SampleGrad> per(count);
      parallel_for(count, cfg.workers, [&](std::size_t i) {
        const auto& item = data[order[start + i]];
        per[i] = sample_gradient(model, item.audio, item.label);
      });
      double loss = 0.0;
      std::vector<Tensor> grad = per[0].grads;
      for (auto& g : grad) {
        for (double& v : g.data()) v = 0.0;
      }
      for (const auto& s : per) {
        loss += s.loss;
        for (std::size_t k = 0; k < grad.size(); ++k) {
          for (std::size_t i = 0; i < grad[k].size(); ++i) grad[k][i] += s.grads[k][i];
        }
      }
      const double inv = 1.0 / static_cast<double>(count);
      loss *= inv;
      if (!std::isfinite(loss)) throw training_error("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      for (std::size_t k = 0; k < grad.size(); ++k) {
        for (double& v : grad[k].data()) v *= inv;
        states[k].step(model.parameters()[k], grad[k]);
        if (!model.parameters()[k].all_finite()) throw training_error("training diverged: non-finite weights");
      }
      result.step_losses.push_back(loss);
      epoch_acc += loss;
      ++steps;
    }
    result.epoch_losses.push_back(epoch_acc / static_cast<double>(steps));
  }
  result.model = std::move(model);
  return result;
}

}  // namespace detail

/// Fits a freshly initialised predictor to labelled clips by minimising the
/// mean squared error over the three subscores.
inline TrainResult train_predictor(std::span<const LabeledClip> corpus, const TrainConfig& cfg,
                                   const StftConfig& stft_cfg = {}) {
  if (corpus.empty()) throw data_error("train_predictor: corpus is empty");
  return detail::fit(PredictorModel::initialize(cfg.seed, stft_cfg), corpus, cfg);
}

}  // namespace mosguard
