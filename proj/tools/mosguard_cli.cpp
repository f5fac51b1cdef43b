#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mosguard/mosguard.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mosguard;

namespace {

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct KeySpec {
  std::string name;
  json fallback;
  std::string help;
  std::set<std::string> commands;  // empty: every command
};

std::size_t processor_count() { return std::max(1u, std::thread::hardware_concurrency()); }

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      {"seed", 0, "global seed", {}},
      {"workers", processor_count(), "worker threads", {}},
      {"synth.n_train", 64, "training clips", {"synth"}},
      {"synth.n_test", 16, "test clips", {"synth"}},
      {"synth.clip_seconds", 2.0, "clip duration in seconds", {"synth"}},
      {"synth.sample_rate_hz", 16000, "sample rate", {"synth"}},
      {"synth.snr_min_db", 0.0, "lowest mixture SNR", {"synth"}},
      {"synth.snr_max_db", 40.0, "highest mixture SNR", {"synth"}},
      {"synth.corpus_id", "synth", "corpus id and directory name", {"synth"}},
      {"manifest", "", "corpus manifest (JSON lines)", {"train-predictor", "attack", "advtrain", "eval"}},
      {"split", "test", "manifest split to attack", {"attack"}},
      {"model", "", "predictor bundle", {"attack", "advtrain"}},
      {"teacher", "", "original predictor bundle f", {"eval"}},
      {"student", "", "retrained predictor bundle g", {"eval"}},
      {"attacks", "", "directory of attack sidecars to reuse", {"advtrain", "eval"}},
      {"train.epochs", 30, "training epochs", {"train-predictor"}},
      {"train.lr", 1e-3, "training learning rate", {"train-predictor"}},
      {"train.batch_size", 8, "minibatch size", {"train-predictor"}},
      {"attack.c", 10.0, "target term weight", {"attack", "advtrain", "eval"}},
      {"attack.amplitude", 0.03, "perturbation amplitude A", {"attack", "advtrain", "eval"}},
      {"attack.max_iters", 500, "optimizer iterations", {"attack", "advtrain", "eval"}},
      {"attack.lr", 5e-3, "attack learning rate", {"attack", "advtrain", "eval"}},
      {"attack.tolerance", 0.1, "early-stop target deviation", {"attack", "advtrain", "eval"}},
      {"advtrain.epochs", 20, "retraining epochs", {"advtrain"}},
      {"advtrain.lr", 1e-4, "retraining learning rate", {"advtrain"}},
      {"advtrain.batch_size", 8, "retraining minibatch size", {"advtrain"}},
      {"table", "", "human study response CSV", {"stats"}},
      {"wav", "", "input WAV file", {"spectrogram-dump"}},
      {"normalize", 0, "peak-normalize before the transform (0 or 1)", {"spectrogram-dump"}},
  };
  return specs;
}

bool applies(const KeySpec& k, const std::string& cmd) { return k.commands.empty() || k.commands.count(cmd) > 0; }

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : key_specs()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

json coerce(const KeySpec& k, const std::string& text) {
  try {
    std::size_t used = 0;
    if (k.fallback.is_number_integer()) {
      const long long v = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing characters");
      if (v < 0) throw std::invalid_argument("negative");
      return static_cast<std::uint64_t>(v);
    }
    if (k.fallback.is_number()) {
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing characters");
      return v;
    }
  } catch (const std::exception&) {
    throw usage_error("invalid value '" + text + "' for " + k.name);
  }
  return text;
}

json coerce(const KeySpec& k, const json& value) {
  if (k.fallback.is_number_integer()) {
    if (!value.is_number_integer() || value.get<long long>() < 0) {
      throw usage_error("config key " + k.name + " needs a non-negative integer");
    }
    return value;
  }
  if (k.fallback.is_number()) {
    if (!value.is_number()) throw usage_error("config key " + k.name + " needs a number");
    return value.get<double>();
  }
  if (!value.is_string()) throw usage_error("config key " + k.name + " needs a string");
  return value;
}

class RunConfig {
 public:
  explicit RunConfig(std::string command) : command_(std::move(command)) {
    for (const auto& k : key_specs()) {
      if (applies(k, command_)) values_[k.name] = k.fallback;
    }
  }

  void load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw usage_error("cannot open config " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw usage_error("config " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw usage_error("config " + path.string() + " must be a flat JSON object");
    for (const auto& [key, value] : j.items()) {
      if (key == "command" || key == "out") continue;
      const KeySpec* k = find_key(key);
      if (!k) throw usage_error("unknown config key '" + key + "'");
      if (applies(*k, command_)) values_[key] = coerce(*k, value);
    }
  }

  void set_flag(const std::string& key, const std::string& text) { values_[key] = coerce(*find_key(key), text); }

  double real(const std::string& key) const { return values_.at(key).get<double>(); }
  std::uint64_t u64(const std::string& key) const { return values_.at(key).get<std::uint64_t>(); }
  int integer(const std::string& key) const { return static_cast<int>(values_.at(key).get<std::uint64_t>()); }
  std::string text(const std::string& key) const { return values_.at(key).get<std::string>(); }

  std::string require_path(const std::string& key) const {
    const auto v = text(key);
    if (v.empty()) throw usage_error(command_ + " needs --" + key);
    return v;
  }

  json echo(const fs::path& out) const {
    json j = json::object();
    j["command"] = command_;
    j["out"] = out.string();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

 private:
  std::string command_;
  std::map<std::string, json> values_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot write " + path.string());
  out << text;
  if (!out) throw io_error("write failed for " + path.string());
}

AttackConfig attack_config(const RunConfig& c) {
  AttackConfig a;
  a.c = c.real("attack.c");
  a.amplitude = c.real("attack.amplitude");
  a.max_iters = c.integer("attack.max_iters");
  a.learning_rate = c.real("attack.lr");
  a.target_tolerance = c.real("attack.tolerance");
  a.seed = c.u64("seed");
  a.validate();
  return a;
}

std::vector<NamedClip> load_split(const Manifest& m, Split s) {
  std::vector<NamedClip> clips;
  for (const auto& e : m.split(s)) clips.push_back({e.clip_id, load_clip(m, e)});
  return clips;
}

void write_attack_outputs(const std::vector<BatchItem>& items, const std::vector<NamedClip>& clips,
                          const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!items[i].result) continue;
    const auto& r = *items[i].result;
    save_wav(mosguard::apply(clips[i].audio, materialize(r.perturbation)), dir / (items[i].clip_id + ".adv.wav"));
    write_text(dir / (items[i].clip_id + ".json"), to_json(r).dump() + "\n");
  }
  write_text(dir / "summary.csv", summary_csv(items));
  const auto s = summarize(items);
  json failures = json::array();
  for (const auto& it : items) {
    if (!it.result) failures.push_back({{"clip_id", it.clip_id}, {"error", it.error}});
  }
  write_text(dir / "summary.json", json{{"clips", s.clips},
                                        {"completed", s.completed},
                                        {"succeeded", s.succeeded},
                                        {"success_rate", s.success_rate},
                                        {"mean_db", s.mean_db},
                                        {"mean_initial_deviation", s.mean_initial_deviation},
                                        {"mean_final_deviation", s.mean_final_deviation},
                                        {"failures", failures}}
                                           .dump(2) + "\n");
}

/// Attack results for `clips`, from stored sidecars when `dir` is set, otherwise freshly computed.
std::vector<BatchItem> obtain_attacks(const std::vector<NamedClip>& clips, const PredictorModel& f,
                                      const AttackConfig& cfg, const std::string& dir, std::size_t workers) {
  if (dir.empty()) return batch_attack(clips, f, cfg, workers);
  std::vector<BatchItem> items;
  for (const auto& c : clips) {
    BatchItem it{c.clip_id, std::nullopt, ""};
    const fs::path sidecar = fs::path(dir) / (c.clip_id + ".json");
    if (!fs::exists(sidecar)) throw io_error("missing attack sidecar " + sidecar.string());
    auto r = read_result(sidecar);
    if (r.perturbation.latent.size() != c.audio.size()) {
      throw dimension_error(sidecar.string() + ": perturbation length does not match the clip");
    }
    it.result = std::move(r);
    items.push_back(std::move(it));
  }
  return items;
}

int cmd_synth(const RunConfig& c, const fs::path& out) {
  SynthSpec spec;
  spec.n_train = c.u64("synth.n_train");
  spec.n_test = c.u64("synth.n_test");
  spec.clip_seconds = c.real("synth.clip_seconds");
  spec.sample_rate_hz = c.integer("synth.sample_rate_hz");
  spec.snr_min_db = c.real("synth.snr_min_db");
  spec.snr_max_db = c.real("synth.snr_max_db");
  spec.corpus_id = c.text("synth.corpus_id");
  spec.seed = c.u64("seed");
  const auto m = synth_corpus(spec, out, c.u64("workers"));
  std::cout << "wrote " << m.entries.size() << " clips to " << (out / spec.corpus_id).string() << "\n";
  std::cout << "manifest " << (out / spec.corpus_id / "manifest.jsonl").string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& c, const fs::path& out) {
  const auto m = read_manifest(c.require_path("manifest"));
  std::vector<LabeledClip> data;
  for (const auto& e : m.split(Split::train)) {
    if (!e.label) throw data_error("manifest entry '" + e.clip_id + "' has no label");
    data.push_back({load_clip(m, e), *e.label});
  }
  TrainConfig tc;
  tc.epochs = c.integer("train.epochs");
  tc.learning_rate = c.real("train.lr");
  tc.batch_size = c.u64("train.batch_size");
  tc.seed = c.u64("seed");
  tc.workers = c.u64("workers");
  const auto r = train_predictor(data, tc);
  const double final_loss = r.epoch_losses.empty() ? 0.0 : r.epoch_losses.back();
  save_model(r.model, out / "model.aqpm", {tc.seed, tc.epochs, m.corpus_id, final_loss});
  std::string csv = "epoch,loss\n";
  for (std::size_t i = 0; i < r.epoch_losses.size(); ++i) csv += std::to_string(i) + "," + format_double(r.epoch_losses[i]) + "\n";
  write_text(out / "loss.csv", csv);
  std::cout << "trained on " << data.size() << " clips, final loss " << final_loss << "\n";
  return 0;
}

int cmd_attack(const RunConfig& c, const fs::path& out) {
  const auto m = read_manifest(c.require_path("manifest"));
  const auto f = load_model(c.require_path("model"));
  const auto cfg = attack_config(c);
  const auto clips = load_split(m, parse_split(c.text("split")));
  const auto items = batch_attack(clips, f, cfg, c.u64("workers"));
  write_attack_outputs(items, clips, out);
  const auto s = summarize(items);
  std::cout << "attacked " << s.clips << " clips: " << s.succeeded << " reached the target, mean dB " << s.mean_db
            << ", mean deviation " << s.mean_initial_deviation << " -> " << s.mean_final_deviation << "\n";
  for (const auto& it : items) {
    if (!it.result) std::cerr << "attack failed for " << it.clip_id << ": " << it.error << "\n";
  }
  return s.completed == s.clips ? 0 : 3;
}

int cmd_advtrain(const RunConfig& c, const fs::path& out) {
  const auto m = read_manifest(c.require_path("manifest"));
  const auto f = load_model(c.require_path("model"));
  const auto cfg = attack_config(c);
  const std::size_t workers = c.u64("workers");
  const auto clips = load_split(m, Split::train);
  const auto d = build_labeled(clips, f, {}, workers);
  for (const auto& e : d.failures) std::cerr << "labelling failed: " << e << "\n";

  std::vector<NamedClip> labeled_clips;
  for (const auto& e : d.entries) labeled_clips.push_back({e.clip_id, e.audio});
  const auto items = obtain_attacks(labeled_clips, f, cfg, c.text("attacks"), workers);
  if (c.text("attacks").empty()) write_attack_outputs(items, labeled_clips, out / "attacks");
  AdversarialSet ad;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].result) ad.entries.push_back(make_adversarial_entry(d, i, *items[i].result));
    else ad.failures.push_back(items[i].clip_id + ": " + items[i].error);
  }
  for (const auto& e : ad.failures) std::cerr << "attack failed: " << e << "\n";

  AdvTrainConfig tc;
  tc.epochs = c.integer("advtrain.epochs");
  tc.learning_rate = c.real("advtrain.lr");
  tc.batch_size = c.u64("advtrain.batch_size");
  tc.seed = c.u64("seed");
  tc.workers = workers;
  const auto r = adv_train(f, d, ad, tc);
  const auto& last = r.log.back();
  save_model(r.model, out / "model.aqpm", {tc.seed, tc.epochs, m.corpus_id, last.adversarial_loss + last.forgetting_loss});
  std::string csv = "epoch,adversarial_loss,forgetting_loss\n";
  for (const auto& row : r.log) {
    csv += std::to_string(row.epoch) + "," + format_double(row.adversarial_loss) + "," + format_double(row.forgetting_loss) + "\n";
  }
  write_text(out / "advtrain_log.csv", csv);
  std::cout << "retrained on " << d.entries.size() << " clean + " << ad.entries.size()
            << " adversarial clips; adversarial loss " << r.log.front().adversarial_loss << " -> "
            << last.adversarial_loss << ", forgetting loss " << last.forgetting_loss << "\n";
  return 0;
}

int cmd_eval(const RunConfig& c, const fs::path& out) {
  const auto m = read_manifest(c.require_path("manifest"));
  const auto f = load_model(c.require_path("teacher"));
  const auto g = load_model(c.require_path("student"));
  const std::size_t workers = c.u64("workers");
  const auto clips = load_split(m, Split::test);
  const auto items = obtain_attacks(clips, f, attack_config(c), c.text("attacks"), workers);
  if (c.text("attacks").empty()) write_attack_outputs(items, clips, out / "attacks");
  std::vector<PerturbedClip> test;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!items[i].result) {
      std::cerr << "attack failed for " << items[i].clip_id << ": " << items[i].error << "\n";
      continue;
    }
    test.push_back({clips[i].clip_id, clips[i].audio, materialize(items[i].result->perturbation)});
  }
  const auto report = compute_errors(f, g, test, workers);
  write_text(out / "report.json", to_json(report).dump(2) + "\n");
  write_text(out / "report.csv", report_csv(report));
  std::cout << report_csv(report);
  return 0;
}

int cmd_stats(const RunConfig& c, const fs::path& out) {
  const auto table = read_human_study_csv(c.require_path("table"));
  const auto s = study_summary(table);
  write_text(out / "study.json", to_json(s).dump(2) + "\n");
  std::string csv = "participant,correct,z,p\n";
  for (const auto& p : s.participants) csv += p.participant + "," + std::to_string(p.correct) + "," + format_double(p.z) + "," + format_double(p.p) + "\n";
  write_text(out / "participants.csv", csv);
  csv = "pair_id,truth,b_count,believing_identical\n";
  for (const auto& p : s.pairs) {
    csv += p.pair_id + "," + (p.truth == PairTruth::identical ? "identical" : "adversarial") + "," +
           std::to_string(p.b_count) + "," + format_double(p.believing_identical) + "\n";
  }
  write_text(out / "pairs.csv", csv);
  double min_identical = 1.0;
  for (const auto& p : s.pairs) min_identical = std::min(min_identical, p.believing_identical);
  std::printf("participants %zu, pairs %zu\n", table.participant_count(), table.pair_count());
  std::printf("max z = %.4f, p = %.2f%%\n", s.max_z, 100.0 * s.min_p);
  std::printf("lowest believing-identical fraction = %.2f%%\n", 100.0 * min_identical);
  return 0;
}

int cmd_spectrogram(const RunConfig& c, const fs::path& out) {
  Waveform x = load_wav(c.require_path("wav"));
  if (c.integer("normalize") != 0) x = peak_normalize(x);
  const auto spec = stft(x);
  write_text(out / "magnitudes.csv", magnitude_csv(spec));
  std::cout << spec.frames << " frames x " << spec.bins << " bins\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  mosguard::retain_freed_memory();
  CLI::App app{"Adversarial attack and defense toolkit for speech-quality predictors"};
  app.require_subcommand(1);
  struct Command {
    std::string name, help;
    int (*run)(const RunConfig&, const fs::path&);
  };
  const std::vector<Command> commands = {
      {"synth", "generate the synthetic corpus", cmd_synth},
      {"train-predictor", "train the toy quality predictor", cmd_train},
      {"attack", "attack every clip of a manifest split", cmd_attack},
      {"advtrain", "adversarially retrain a predictor", cmd_advtrain},
      {"eval", "robustness metrics of a retrained predictor", cmd_eval},
      {"stats", "listening-test statistics", cmd_stats},
      {"spectrogram-dump", "STFT magnitude matrix as CSV", cmd_spectrogram},
  };
  std::string config_path, out_dir = "out";
  std::map<std::string, std::map<std::string, std::string>> flags;
  std::map<std::string, CLI::App*> subs;
  for (const auto& cmd : commands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_path, "flat JSON config; flags take precedence");
    sub->add_option("--out", out_dir, "output directory")->capture_default_str();
    for (const auto& k : key_specs()) {
      if (!applies(k, cmd.name)) continue;
      sub->add_option("--" + k.name, flags[cmd.name][k.name], k.help + " (default " + k.fallback.dump() + ")");
    }
    subs[cmd.name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  for (const auto& cmd : commands) {
    auto* sub = subs[cmd.name];
    if (!sub->parsed()) continue;
    try {
      RunConfig cfg(cmd.name);
      if (!config_path.empty()) cfg.load_file(config_path);
      for (const auto& [key, value] : flags[cmd.name]) {
        if (sub->count("--" + key) > 0) cfg.set_flag(key, value);
      }
      const fs::path out(out_dir);
      fs::create_directories(out);
      write_text(out / "config.json", cfg.echo(out).dump(2) + "\n");
      return cmd.run(cfg, out);
    } catch (const usage_error& e) {
      std::cerr << "usage error: " << e.what() << "\n";
      return 1;
    } catch (const data_error& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return 2;
    } catch (const numeric_error& e) {
      std::cerr << "numeric failure: " << e.what() << "\n";
      return 3;
    } catch (const fs::filesystem_error& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return 2;
    }
  }
  return 1;
}
