#pragma once

// Corpus manifests, the synthetic SNR-controlled corpus, and ingestion of
// external WAV directories.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mosguard/error.hpp"
#include "mosguard/parallel.hpp"
#include "mosguard/predictor.hpp"
#include "mosguard/rng.hpp"
#include "mosguard/signal.hpp"
#include "mosguard/wav.hpp"

namespace mosguard {

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw parse_error("split must be 'train' or 'test', got '" + s + "'");
}

struct ManifestEntry {
  std::string clip_id;
  std::string path;  // relative paths resolve against Manifest::base_dir
  Split split = Split::train;
  std::optional<double> snr_db;
  std::optional<QualityScore> label;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::string corpus_id;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& e) const {
    const std::filesystem::path p(e.path);
    return p.is_absolute() ? p : base_dir / p;
  }

  std::vector<ManifestEntry> split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
      if (e.split == s) out.push_back(e);
    }
    return out;
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
      if (e.clip_id.empty()) throw parse_error("manifest entry with empty clip_id");
      if (!seen.insert(e.clip_id).second) throw parse_error("duplicate clip_id '" + e.clip_id + "' in manifest");
    }
  }
};

inline nlohmann::json to_json(const ManifestEntry& e, const Manifest& m) {
  nlohmann::json j{{"clip_id", e.clip_id}, {"path", e.path}, {"split", to_string(e.split)}};
  j["snr_db"] = e.snr_db ? nlohmann::json(*e.snr_db) : nlohmann::json(nullptr);
  j["label"] = e.label ? nlohmann::json{{"sig", e.label->sig}, {"bak", e.label->bak}, {"ovrl", e.label->ovrl}}
                       : nlohmann::json(nullptr);
  j["corpus_id"] = m.corpus_id;
  j["seed"] = m.seed;
  return j;
}

inline ManifestEntry entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.clip_id = j.at("clip_id").get<std::string>();
  e.path = j.at("path").get<std::string>();
  e.split = parse_split(j.at("split").get<std::string>());
  if (j.contains("snr_db") && !j["snr_db"].is_null()) e.snr_db = j["snr_db"].get<double>();
  if (j.contains("label") && !j["label"].is_null()) {
    const auto& l = j["label"];
    e.label = QualityScore{l.at("sig").get<double>(), l.at("bak").get<double>(), l.at("ovrl").get<double>()};
  }
  return e;
}

/// JSON lines, one entry per line.
inline std::string manifest_jsonl(const Manifest& m) {
  std::string out;
  for (const auto& e : m.entries) out += to_json(e, m).dump() + "\n";
  return out;
}

inline Manifest parse_manifest_jsonl(const std::string& text, std::filesystem::path base_dir = {}) {
  Manifest m;
  m.base_dir = std::move(base_dir);
  std::size_t line_no = 0, pos = 0;
  bool first = true;
  while (pos < text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      m.entries.push_back(entry_from_json(j));
      if (first) {
        m.corpus_id = j.value("corpus_id", std::string{});
        m.seed = j.value("seed", std::uint64_t{0});
        first = false;
      }
    } catch (const nlohmann::json::exception& e) {
      throw parse_error("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  m.validate();
  return m;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path.string());
  out << manifest_jsonl(m);
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open manifest " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_manifest_jsonl(text, path.parent_path());
}

/// Loads and peak-normalizes one clip.
inline Waveform load_clip(const Manifest& m, const ManifestEntry& e) { return peak_normalize(load_wav(m.resolve(e))); }

// ---- synthetic corpus -----------------------------------------------------

struct SynthSpec {
  std::size_t n_train = 64;
  std::size_t n_test = 16;
  double clip_seconds = 2.0;
  int sample_rate_hz = 16000;
  double snr_min_db = 0.0;
  double snr_max_db = 40.0;
  std::uint64_t seed = 0;
  std::string corpus_id = "synth";

  void validate() const {
    if (n_train < 1 || n_test < 1) throw domain_error("synth: n_train and n_test must be at least 1");
    if (!(snr_max_db > snr_min_db)) throw domain_error("synth: SNR range is degenerate");
    if (sample_rate_hz <= 0 || !(clip_seconds > 0.0)) throw domain_error("synth: invalid duration or rate");
    if (corpus_id.empty()) throw domain_error("synth: empty corpus id");
  }

  std::size_t samples_per_clip() const {
    return static_cast<std::size_t>(std::llround(clip_seconds * static_cast<double>(sample_rate_hz)));
  }
};

struct SynthClip {
  std::string clip_id;
  Split split = Split::train;
  std::vector<double> clean;
  std::vector<double> noise;  // already scaled to the drawn SNR
  Waveform mixture;           // clean + noise, peak-normalized
  double snr_db = 0.0;
  QualityScore label;
};

inline std::string synth_clip_id(Split s, std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu", to_string(s), k);
  return buf;
}

/// Clip `index` of the corpus; indices [0, n_train) are training clips, the
/// rest are test clips. Each clip draws from its own stream derived from
/// (spec.seed, index).
inline SynthClip synth_clip(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  const bool is_train = index < spec.n_train;
  const Split split = is_train ? Split::train : Split::test;
  const std::size_t k = is_train ? index : index - spec.n_train;
  Rng rng(derive_seed(spec.seed, index));
  const std::size_t n = spec.samples_per_clip();
  const double fs = static_cast<double>(spec.sample_rate_hz);
  constexpr double two_pi = 2.0 * std::numbers::pi;

  // Harmonic stack with vibrato-like pitch drift and a syllabic envelope.
  const double f0 = rng.uniform(100.0, 220.0);
  const double drift_rate = rng.uniform(2.0, 6.0);
  const double drift_depth = rng.uniform(0.02, 0.06);
  const double drift_phase = rng.uniform(0.0, two_pi);
  const double env_rate = rng.uniform(3.0, 5.0);
  const double env_phase = rng.uniform(0.0, two_pi);
  const std::size_t harmonics = std::max<std::size_t>(1, std::min<std::size_t>(30, static_cast<std::size_t>(0.45 * fs / (f0 * (1.0 + drift_depth)))));
  std::vector<double> clean(n);
  double phase = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double time = static_cast<double>(t) / fs;
    const double f = f0 * (1.0 + drift_depth * std::sin(two_pi * drift_rate * time + drift_phase));
    double v = 0.0;
    for (std::size_t h = 1; h <= harmonics; ++h) v += std::sin(static_cast<double>(h) * phase) / static_cast<double>(h);
    const double s = 0.5 - 0.5 * std::cos(two_pi * env_rate * time + env_phase);
    clean[t] = (0.15 + 0.85 * s * s) * v;
    phase = std::fmod(phase + two_pi * f / fs, two_pi);
  }

  // White/pink mixture; pink via Kellett's filter bank.
  const double white_weight = rng.uniform(0.0, 1.0);
  std::vector<double> white(n), pink(n);
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double w = rng.normal();
    white[t] = w;
    b0 = 0.99886 * b0 + w * 0.0555179;
    b1 = 0.99332 * b1 + w * 0.0750759;
    b2 = 0.96900 * b2 + w * 0.1538520;
    b3 = 0.86650 * b3 + w * 0.3104856;
    b4 = 0.55000 * b4 + w * 0.5329522;
    b5 = -0.7616 * b5 - w * 0.0168980;
    pink[t] = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
    b6 = w * 0.115926;
  }
  const double white_rms = rms(white), pink_rms = rms(pink);
  std::vector<double> noise(n);
  for (std::size_t t = 0; t < n; ++t) {
    noise[t] = white_weight * white[t] / white_rms + (1.0 - white_weight) * pink[t] / pink_rms;
  }

  const double snr_db = rng.uniform(spec.snr_min_db, spec.snr_max_db);
  const double gain = rms(clean) / (rms(noise) * std::pow(10.0, snr_db / 20.0));
  for (double& v : noise) v *= gain;

  std::vector<double> mix(n);
  for (std::size_t t = 0; t < n; ++t) mix[t] = clean[t] + noise[t];
  Waveform mixture = peak_normalize(Waveform(std::move(mix), spec.sample_rate_hz));
  return SynthClip{synth_clip_id(split, k), split,  std::move(clean), std::move(noise), std::move(mixture),
                   snr_db,                  surrogate_label(snr_db, true)};
}

/// Writes <out_dir>/<corpus_id>/{train,test}/<clip_id>.wav and
/// <out_dir>/<corpus_id>/manifest.jsonl.
inline Manifest synth_corpus(const SynthSpec& spec, const std::filesystem::path& out_dir, std::size_t workers = 1) {
  spec.validate();
  const auto root = out_dir / spec.corpus_id;
  std::filesystem::create_directories(root / "train");
  std::filesystem::create_directories(root / "test");
  const std::size_t total = spec.n_train + spec.n_test;
  Manifest m;
  m.corpus_id = spec.corpus_id;
  m.seed = spec.seed;
  m.base_dir = root;
  m.entries.resize(total);
  parallel_for(total, workers, [&](std::size_t i) {
    const SynthClip clip = synth_clip(spec, i);
    const std::string rel = std::string(to_string(clip.split)) + "/" + clip.clip_id + ".wav";
    save_wav(clip.mixture, root / rel);
    m.entries[i] = ManifestEntry{clip.clip_id, rel, clip.split, clip.snr_db, clip.label};
  });
  write_manifest(m, root / "manifest.jsonl");
  return m;
}

// ---- ingestion ------------------------------------------------------------

struct IngestResult {
  Manifest manifest;
  std::vector<std::string> rejected;  // "<file>: <reason>"
  std::vector<std::string> warnings;
};

/// Builds a manifest over the .wav files directly inside `dir`, ordered by
/// filename byte order. Unreadable files are listed in `rejected`.
inline IngestResult ingest_directory(const std::filesystem::path& dir, Split split, std::string corpus_id = "ingested") {
  if (!std::filesystem::is_directory(dir)) throw io_error("not a directory: " + dir.string());
  std::vector<std::string> names;
  for (const auto& de : std::filesystem::directory_iterator(dir)) {
    if (!de.is_regular_file()) continue;
    std::string ext = de.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".wav") names.push_back(de.path().filename().string());
  }
  std::sort(names.begin(), names.end());

  IngestResult r;
  r.manifest.corpus_id = std::move(corpus_id);
  r.manifest.base_dir = dir;
  if (names.empty()) r.warnings.push_back("no WAV files found in " + dir.string());
  std::set<std::string> ids;
  for (const auto& name : names) {
    const std::string id = std::filesystem::path(name).stem().string();
    if (!ids.insert(id).second) {
      r.rejected.push_back(name + ": duplicate clip id '" + id + "'");
      continue;
    }
    try {
      (void)load_wav(dir / name);
    } catch (const data_error& e) {
      r.rejected.push_back(name + ": " + e.what());
      ids.erase(id);
      continue;
    }
    r.manifest.entries.push_back(ManifestEntry{id, name, split, std::nullopt, std::nullopt});
  }
  return r;
}

}  // namespace mosguard
