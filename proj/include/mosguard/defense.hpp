#pragma once

// Teacher-labelled datasets, adversarial retraining, and robustness metrics.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "mosguard/attack.hpp"
#include "mosguard/error.hpp"
#include "mosguard/parallel.hpp"
#include "mosguard/predictor.hpp"
#include "mosguard/signal.hpp"

namespace mosguard {

struct LabeledEntry {
  std::string clip_id;
  Waveform audio;
  QualityScore label;
};

/// D: clips with one label each, by default the teacher's prediction.
struct LabeledSet {
  std::vector<LabeledEntry> entries;
  std::vector<std::string> failures;  // "<clip_id>: <reason>"
};

struct AdversarialEntry {
  std::string clip_id;
  std::size_t source = 0;         // index into the originating LabeledSet
  std::vector<double> delta;      // materialized perturbation
  Waveform audio;                 // source audio + delta
  QualityScore label;             // the source label, never the attack target
  AdversarialResult attack;
};

/// AD: perturbed clips carrying their source labels.
struct AdversarialSet {
  std::vector<AdversarialEntry> entries;
  std::vector<std::string> failures;
};

/// Labels every clip with f's prediction, or with an external label where
/// `external` supplies one for that clip id.
inline LabeledSet build_labeled(const std::vector<NamedClip>& clips, const PredictorModel& f,
                                const std::map<std::string, QualityScore>& external = {}, std::size_t workers = 1) {
  std::vector<std::optional<LabeledEntry>> slots(clips.size());
  std::vector<std::string> errors(clips.size());
  parallel_for(clips.size(), workers, [&](std::size_t i) {
    try {
      const auto it = external.find(clips[i].clip_id);
      const QualityScore y = it != external.end() ? it->second : f.predict(clips[i].audio);
      if (!y.finite()) throw domain_error("non-finite label");
      slots[i] = LabeledEntry{clips[i].clip_id, clips[i].audio, y};
    } catch (const std::exception& e) {
      errors[i] = clips[i].clip_id + ": " + e.what();
    }
  });
  LabeledSet d;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (slots[i]) d.entries.push_back(std::move(*slots[i]));
    else d.failures.push_back(errors[i]);
  }
  return d;
}

inline AdversarialEntry make_adversarial_entry(const LabeledSet& d, std::size_t source, AdversarialResult attack) {
  const auto& src = d.entries.at(source);
  auto delta = materialize(attack.perturbation);
  Waveform audio = mosguard::apply(src.audio, delta);
  return AdversarialEntry{src.clip_id, source, std::move(delta), std::move(audio), src.label, std::move(attack)};
}

/// One attack per source clip, each labelled with the source label.
/// Unsuccessful attacks are kept (their result has success = false).
inline AdversarialSet build_adversarial_set(const LabeledSet& d, const PredictorModel& f, const AttackConfig& cfg,
                                            std::size_t workers = 1) {
  std::vector<std::optional<AdversarialResult>> results(d.entries.size());
  std::vector<std::string> errors(d.entries.size());
  parallel_for(d.entries.size(), workers, [&](std::size_t i) {
    try {
      results[i] = run_attack(d.entries[i].audio, f, cfg);
    } catch (const std::exception& e) {
      errors[i] = d.entries[i].clip_id + ": " + e.what();
    }
  });
  AdversarialSet ad;
  for (std::size_t i = 0; i < d.entries.size(); ++i) {
    if (results[i]) ad.entries.push_back(make_adversarial_entry(d, i, std::move(*results[i])));
    else ad.failures.push_back(errors[i]);
  }
  return ad;
}

struct AdvTrainConfig {
  int epochs = 20;
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct AdvTrainEpoch {
  int epoch = 0;
  double adversarial_loss = 0.0;  // mean ||g(x + d) - f(x)||^2 over AD
  double forgetting_loss = 0.0;   // mean ||g(x) - f(x)||^2 over D
};

struct AdvTrainResult {
  PredictorModel model;
  std::vector<AdvTrainEpoch> log;  // one row per epoch start, plus a final row after training
  std::vector<double> step_losses;
};

namespace detail {

inline double mean_sq_error(const PredictorModel& g, const std::vector<LabeledClip>& items, std::size_t workers) {
  if (items.empty()) return 0.0;
  std::vector<double> per(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    const auto y = g.predict(items[i].audio).values();
    const auto t = items[i].label.values();
    double acc = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) acc += (y[j] - t[j]) * (y[j] - t[j]);
    per[i] = acc;
  });
  double acc = 0.0;
  for (double v : per) acc += v;
  return acc / static_cast<double>(items.size());
}

}  // namespace detail

/// Retrains a copy of f on D and AD jointly with the squared-error loss
/// against the teacher labels. f itself is never modified. Both loss
/// components are logged at the start of every epoch and once at the end.
inline AdvTrainResult adv_train(const PredictorModel& f, const LabeledSet& d, const AdversarialSet& ad,
                                const AdvTrainConfig& cfg) {
  if (d.entries.empty()) throw data_error("adv_train: labelled set is empty");
  for (const auto& e : ad.entries) {
    if (e.source >= d.entries.size() || d.entries[e.source].clip_id != e.clip_id) {
      throw contract_error("adv_train: adversarial entry '" + e.clip_id + "' does not reference the labelled set");
    }
    if (!(e.label == d.entries[e.source].label)) {
      throw contract_error("adv_train: adversarial entry '" + e.clip_id + "' is not labelled with its source label");
    }
  }
  std::vector<LabeledClip> clean, perturbed, joint;
  for (const auto& e : d.entries) clean.push_back({e.audio, e.label});
  for (const auto& e : ad.entries) perturbed.push_back({e.audio, e.label});
  joint = clean;
  joint.insert(joint.end(), perturbed.begin(), perturbed.end());

  TrainConfig tc{cfg.epochs, cfg.learning_rate, cfg.batch_size, cfg.seed, cfg.workers};
  std::vector<AdvTrainEpoch> log;
  const auto record = [&](int epoch, const PredictorModel& g) {
    log.push_back({epoch, detail::mean_sq_error(g, perturbed, cfg.workers), detail::mean_sq_error(g, clean, cfg.workers)});
  };
  auto fit = detail::fit(f, joint, tc, record);
  record(cfg.epochs, fit.model);
  return AdvTrainResult{std::move(fit.model), std::move(log), std::move(fit.step_losses)};
}

// ---- robustness metrics ---------------------------------------------------

struct PerturbedClip {
  std::string clip_id;
  Waveform audio;
  std::vector<double> delta;
};

struct SubscoreErrors {
  double e_f = 0.0;  // mean |f_j(x + d) - f_j(x)|
  double e_g = 0.0;  // mean |g_j(x + d) - f_j(x)|
  double f_g = 0.0;  // mean |g_j(x) - f_j(x)|
  std::size_t pass_count = 0;  // samples with |g_j(x+d) - f_j(x)| < |f_j(x+d) - f_j(x)|
};

struct RobustnessReport {
  std::size_t n = 0;
  std::array<SubscoreErrors, QualityScore::kCount> per_subscore{};
  std::size_t all_pass_count = 0;  // samples passing for all three subscores

  double pass_rate(std::size_t j) const {
    return n ? static_cast<double>(per_subscore[j].pass_count) / static_cast<double>(n) : 0.0;
  }
};

/// E_f, E_g, F_g and the per-sample robustness criterion over a perturbed test set.
inline RobustnessReport compute_errors(const PredictorModel& f, const PredictorModel& g,
                                       const std::vector<PerturbedClip>& test, std::size_t workers = 1) {
  if (test.empty()) throw data_error("compute_errors: empty test set");
  struct Row {
    std::array<double, 3> f_clean, f_adv, g_clean, g_adv;
  };
  std::vector<Row> rows(test.size());
  parallel_for(test.size(), workers, [&](std::size_t i) {
    const Waveform adv = mosguard::apply(test[i].audio, test[i].delta);
    rows[i] = Row{f.predict(test[i].audio).values(), f.predict(adv).values(), g.predict(test[i].audio).values(),
                  g.predict(adv).values()};
  });
  RobustnessReport r;
  r.n = test.size();
  for (const auto& row : rows) {
    bool all = true;
    for (std::size_t j = 0; j < QualityScore::kCount; ++j) {
      auto& s = r.per_subscore[j];
      const double ef = std::abs(row.f_adv[j] - row.f_clean[j]);
      const double eg = std::abs(row.g_adv[j] - row.f_clean[j]);
      s.e_f += ef;
      s.e_g += eg;
      s.f_g += std::abs(row.g_clean[j] - row.f_clean[j]);
      const bool pass = eg < ef;
      s.pass_count += pass ? 1 : 0;
      all = all && pass;
    }
    r.all_pass_count += all ? 1 : 0;
  }
  const double n = static_cast<double>(r.n);
  for (auto& s : r.per_subscore) {
    s.e_f /= n;
    s.e_g /= n;
    s.f_g /= n;
  }
  return r;
}

inline nlohmann::json to_json(const RobustnessReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t j = 0; j < QualityScore::kCount; ++j) {
    const auto& s = r.per_subscore[j];
    per[QualityScore::kNames[j]] = {{"E_f", s.e_f}, {"E_g", s.e_g}, {"F_g", s.f_g}, {"pass_count", s.pass_count},
                                    {"pass_rate", r.pass_rate(j)}};
  }
  return {{"n", r.n}, {"subscores", per}, {"all_pass_count", r.all_pass_count}};
}

/// One row per subscore: E_f, E_g, F_g, pass_rate.
inline std::string report_csv(const RobustnessReport& r) {
  std::string out = "subscore,E_f,E_g,F_g,pass_rate\n";
  for (std::size_t j = 0; j < QualityScore::kCount; ++j) {
    const auto& s = r.per_subscore[j];
    out += std::string(QualityScore::kNames[j]) + "," + format_double(s.e_f) + "," + format_double(s.e_g) + "," +
           format_double(s.f_g) + "," + format_double(r.pass_rate(j)) + "\n";
  }
  return out;
}

}  // namespace mosguard
