#pragma once

// Targeted adversarial perturbations against a quality predictor.
//
// Minimises  ||STFT(x + d) - STFT(x)||_1 + c ||f(x + d) - y_target||_1
// over the latent z of d = A tanh(z). The loudness budget is carried by A:
// every iterate satisfies |d_t| < A, so no projection or penalty is needed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mosguard/adam.hpp"
#include "mosguard/autodiff.hpp"
#include "mosguard/corpus.hpp"
#include "mosguard/error.hpp"
#include "mosguard/parallel.hpp"
#include "mosguard/predictor.hpp"
#include "mosguard/signal.hpp"
#include "mosguard/spectral.hpp"
#include "mosguard/wav.hpp"

namespace mosguard {

struct AttackConfig {
  double c = 10.0;
  double amplitude = 0.03;
  int max_iters = 500;
  double learning_rate = 5e-3;
  double target_tolerance = 0.1;  // L1 over the three subscores
  std::uint64_t seed = 0;         // recorded for provenance; the solver is deterministic from z = 0

  void validate() const {
    if (!(c > 0.0) || !(amplitude > 0.0) || max_iters < 1 || !(learning_rate > 0.0) || !(target_tolerance >= 0.0)) {
      throw domain_error("invalid attack config: need c > 0, amplitude > 0, max_iters >= 1, learning_rate > 0");
    }
  }
};

struct AdversarialResult {
  Perturbation perturbation;
  QualityScore y_orig;
  QualityScore y_target;
  QualityScore y_achieved;
  double db = 0.0;
  int iterations_used = 0;
  std::vector<double> objective_trace;
  std::vector<double> deviation_trace;  // ||f(x + d_k) - y_target||_1 per iterate
  bool success = false;

  double initial_deviation() const { return l1_distance(y_orig, y_target); }
  double final_deviation() const { return l1_distance(y_achieved, y_target); }
};

/// Relabelling rule: each subscore in [1, 3] maps to 5, in (3, 5] to 1.
/// Scores outside [1, 5] are clamped into range first.
inline QualityScore target_from_score(const QualityScore& y) {
  if (!y.finite()) throw domain_error("target_from_score: non-finite score");
  const auto flip = [](double v) { return std::clamp(v, 1.0, 5.0) <= 3.0 ? 5.0 : 1.0; };
  return {flip(y.sig), flip(y.bak), flip(y.ovrl)};
}

/// The attack objective for one clip, target and model.
class AttackObjective {
 public:
  struct Nodes {
    ad::Var objective;
    ad::Var prediction;
  };

  AttackObjective(const Waveform& x, const PredictorModel& model, const QualityScore& y_target, const AttackConfig& cfg)
      : x_(x.samples().begin(), x.samples().end()),
        model_(model),
        target_(y_target),
        cfg_(cfg),
        clean_spectrum_(Shape{1}) {
    cfg_.validate();
    const auto& sc = model_.stft_config();
    const std::size_t frames = sc.frame_count(x_.size());
    clean_spectrum_ = Tensor(Shape{frames, sc.bins(), 2}, detail::stft_interleaved(x_, sc));
  }

  std::size_t size() const { return x_.size(); }

  /// Records the objective for latent z on `tape`.
  Nodes record(ad::Tape& tape, const ad::Var& z) const {
    if (z.size() != x_.size()) throw dimension_error("attack objective: latent length does not match the clip");
    const auto params = model_.bind(tape, false);
    const ad::Var x = tape.constant(Tensor::vector(x_));
    const ad::Var x_adv = ad::add(x, ad::scale(ad::tanh(z), cfg_.amplitude));
    const ad::Var spectrum = ad::stft(x_adv, model_.stft_config());
    const ad::Var similarity = ad::spectral_l1(spectrum, tape.constant(clean_spectrum_));
    const ad::Var prediction = model_.forward_spectrum(spectrum, params);
    const auto tv = target_.values();
    const ad::Var deviation = ad::l1_norm(ad::sub(prediction, tape.constant(Tensor::vector({tv[0], tv[1], tv[2]}))));
    return {ad::add(similarity, ad::scale(deviation, cfg_.c)), prediction};
  }

  double value(const Tensor& z) const {
    ad::Tape tape;
    return record(tape, tape.constant(z)).objective.value().item();
  }

 private:
  std::vector<double> x_;
  const PredictorModel& model_;
  QualityScore target_;
  AttackConfig cfg_;
  Tensor clean_spectrum_;
};

/// Adam on z from z = 0. Reports the iterate with the smallest target
/// deviation and stops once that deviation is within tolerance.
inline AdversarialResult run_attack(const Waveform& x, const PredictorModel& model, const AttackConfig& cfg) {
  cfg.validate();
  if (std::abs(x.peak() - 1.0) > 1e-12) throw contract_error("run_attack: input must be peak-normalized");
  const auto& sc = model.stft_config();
  if (x.size() < sc.window_length) {
    throw length_error("run_attack: clip of " + std::to_string(x.size()) + " samples is shorter than one window");
  }

  AdversarialResult r;
  r.y_orig = model.predict(x);
  r.y_target = target_from_score(r.y_orig);
  const AttackObjective objective(x, model, r.y_target, cfg);

  Tensor z(Shape{x.size()}, 0.0);
  AdamState adam(z.shape(), AdamConfig{cfg.learning_rate});
  Tensor best_z = z;
  double best_dev = std::numeric_limits<double>::infinity();

  for (int it = 0; it < cfg.max_iters; ++it) {
    ad::Tape tape;
    const ad::Var zv = tape.leaf(z);
    ad::Var obj, pred;
    try {
      const auto nodes = objective.record(tape, zv);
      obj = nodes.objective;
      pred = nodes.prediction;
    } catch (const numeric_error& e) {
      throw attack_error(std::string("attack aborted at iteration ") + std::to_string(it) + ": " + e.what());
    }
    const double value = obj.value().item();
    if (!std::isfinite(value)) throw attack_error("attack aborted: non-finite objective at iteration " + std::to_string(it));
    const QualityScore y = QualityScore::from(pred.value().data());
    const double dev = l1_distance(y, r.y_target);
    r.objective_trace.push_back(value);
    r.deviation_trace.push_back(dev);
    if (dev < best_dev) {
      best_dev = dev;
      best_z = z;
      r.y_achieved = y;
    }
    if (dev <= cfg.target_tolerance) break;
    const auto grads = tape.backward(obj);
    adam.step(z, grads[zv]);
    if (!z.all_finite()) throw attack_error("attack aborted: non-finite latent at iteration " + std::to_string(it));
  }

  r.iterations_used = static_cast<int>(r.objective_trace.size());
  r.perturbation = Perturbation{best_z.values(), cfg.amplitude};
  r.db = db_distortion(x, materialize(r.perturbation));
  r.success = best_dev <= cfg.target_tolerance;
  return r;
}

// ---- batches --------------------------------------------------------------

struct NamedClip {
  std::string clip_id;
  Waveform audio;
};

struct BatchItem {
  std::string clip_id;
  std::optional<AdversarialResult> result;
  std::string error;  // set when result is empty
};

struct BatchSummary {
  std::size_t clips = 0;
  std::size_t completed = 0;
  std::size_t succeeded = 0;
  double success_rate = 0.0;
  double mean_db = 0.0;
  double mean_initial_deviation = 0.0;
  double mean_final_deviation = 0.0;
};

inline BatchSummary summarize(const std::vector<BatchItem>& items) {
  BatchSummary s;
  s.clips = items.size();
  for (const auto& it : items) {
    if (!it.result) continue;
    ++s.completed;
    s.succeeded += it.result->success ? 1 : 0;
    s.mean_db += it.result->db;
    s.mean_initial_deviation += it.result->initial_deviation();
    s.mean_final_deviation += it.result->final_deviation();
  }
  if (s.completed > 0) {
    const double n = static_cast<double>(s.completed);
    s.success_rate = static_cast<double>(s.succeeded) / n;
    s.mean_db /= n;
    s.mean_initial_deviation /= n;
    s.mean_final_deviation /= n;
  }
  return s;
}

/// Attacks every clip; results are in input order whatever the worker count.
/// A failing clip is recorded and the batch continues.
template <typename LoadClip>
std::vector<BatchItem> batch_attack_with(std::size_t n, LoadClip&& load, const PredictorModel& model,
                                         const AttackConfig& cfg, std::size_t workers) {
  cfg.validate();
  std::vector<BatchItem> items(n);
  parallel_for(n, workers, [&](std::size_t i) {
    try {
      NamedClip clip = load(i);
      items[i].clip_id = clip.clip_id;
      items[i].result = run_attack(clip.audio, model, cfg);
    } catch (const std::exception& e) {
      items[i].error = e.what();
    }
  });
  return items;
}

inline std::vector<BatchItem> batch_attack(const std::vector<NamedClip>& clips, const PredictorModel& model,
                                           const AttackConfig& cfg, std::size_t workers = 1) {
  return batch_attack_with(clips.size(), [&](std::size_t i) { return clips[i]; }, model, cfg, workers);
}

/// Attacks the manifest entries of one split, loading and peak-normalizing each clip.
inline std::vector<BatchItem> batch_attack(const Manifest& manifest, Split split, const PredictorModel& model,
                                           const AttackConfig& cfg, std::size_t workers = 1) {
  const auto entries = manifest.split(split);
  auto items = batch_attack_with(
      entries.size(), [&](std::size_t i) { return NamedClip{entries[i].clip_id, load_clip(manifest, entries[i])}; },
      model, cfg, workers);
  for (std::size_t i = 0; i < items.size(); ++i) items[i].clip_id = entries[i].clip_id;
  return items;
}

// ---- serialization --------------------------------------------------------

inline nlohmann::json score_json(const QualityScore& s) { return {{"sig", s.sig}, {"bak", s.bak}, {"ovrl", s.ovrl}}; }

inline QualityScore score_from_json(const nlohmann::json& j) {
  return {j.at("sig").get<double>(), j.at("bak").get<double>(), j.at("ovrl").get<double>()};
}

inline nlohmann::json to_json(const AdversarialResult& r) {
  return {{"perturbation", {{"amplitude", r.perturbation.amplitude}, {"latent", r.perturbation.latent}}},
          {"y_orig", score_json(r.y_orig)},
          {"y_target", score_json(r.y_target)},
          {"y_achieved", score_json(r.y_achieved)},
          {"db", std::isfinite(r.db) ? nlohmann::json(r.db) : nlohmann::json(nullptr)},  // null: zero perturbation
          {"iterations_used", r.iterations_used},
          {"objective_trace", r.objective_trace},
          {"deviation_trace", r.deviation_trace},
          {"success", r.success}};
}

inline AdversarialResult result_from_json(const nlohmann::json& j) {
  try {
    AdversarialResult r;
    r.perturbation.amplitude = j.at("perturbation").at("amplitude").get<double>();
    r.perturbation.latent = j.at("perturbation").at("latent").get<std::vector<double>>();
    r.y_orig = score_from_json(j.at("y_orig"));
    r.y_target = score_from_json(j.at("y_target"));
    r.y_achieved = score_from_json(j.at("y_achieved"));
    r.db = j.at("db").is_null() ? -std::numeric_limits<double>::infinity() : j.at("db").get<double>();
    r.iterations_used = j.at("iterations_used").get<int>();
    r.objective_trace = j.at("objective_trace").get<std::vector<double>>();
    r.deviation_trace = j.value("deviation_trace", std::vector<double>{});
    r.success = j.at("success").get<bool>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("adversarial result: ") + e.what());
  }
}

inline AdversarialResult read_result(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path.string());
  try {
    return result_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(path.string() + ": " + e.what());
  }
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// clip_id, y_orig(3), y_target(3), y_achieved(3), db, iters, success.
/// Failed clips keep their row with empty numeric fields.
inline std::string summary_csv(const std::vector<BatchItem>& items) {
  std::string out =
      "clip_id,y_orig_sig,y_orig_bak,y_orig_ovrl,y_target_sig,y_target_bak,y_target_ovrl,"
      "y_achieved_sig,y_achieved_bak,y_achieved_ovrl,db,iters,success\n";
  for (const auto& it : items) {
    out += it.clip_id;
    if (!it.result) {
      out += ",,,,,,,,,,,,0\n";
      continue;
    }
    const auto& r = *it.result;
    for (const auto& s : {r.y_orig, r.y_target, r.y_achieved}) {
      for (double v : s.values()) out += "," + format_double(v);
    }
    out += "," + format_double(r.db) + "," + std::to_string(r.iterations_used) + "," + (r.success ? "1" : "0") + "\n";
  }
  return out;
}

}  // namespace mosguard
