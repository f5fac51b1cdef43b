#pragma once

// Weight bundles.
//
// Binary layout (little-endian):
//   "AQPM"            magic
//   u32               format version (1)
//   u32               entry count E
//   E x { u32 rank, rank x u32 extent }
//                     entry 0 is the feature front end (n_fft, window, hop);
//                     entries 1..E-1 are the parameter tensor shapes
//   f64 payload       parameters, row-major, in entry order
// A sibling <stem>.json carries the training metadata.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "mosguard/error.hpp"
#include "mosguard/predictor.hpp"

namespace mosguard {

inline constexpr std::uint32_t kBundleVersion = 1;

struct TrainingMetadata {
  std::uint64_t seed = 0;
  int epochs = 0;
  std::string corpus_id;
  double final_loss = 0.0;
};

struct WeightBundle {
  std::uint32_t format_version = kBundleVersion;
  std::vector<std::vector<std::uint32_t>> fingerprint;
  std::vector<double> payload;
  TrainingMetadata metadata;
};

inline std::filesystem::path metadata_path(const std::filesystem::path& bundle) {
  auto p = bundle;
  return p.replace_extension(".json");
}

inline std::string fingerprint_string(const std::vector<std::vector<std::uint32_t>>& fp) {
  std::string s;
  for (std::size_t i = 0; i < fp.size(); ++i) {
    s += i ? " " : "";
    s += "[";
    for (std::size_t k = 0; k < fp[i].size(); ++k) s += (k ? "," : "") + std::to_string(fp[i][k]);
    s += "]";
  }
  return s;
}

inline WeightBundle make_bundle(const PredictorModel& model, TrainingMetadata meta = {}) {
  WeightBundle b;
  b.fingerprint = model.fingerprint();
  for (const auto& p : model.parameters()) b.payload.insert(b.payload.end(), p.data().begin(), p.data().end());
  b.metadata = std::move(meta);
  return b;
}

inline std::vector<unsigned char> encode_bundle(const WeightBundle& b) {
  std::vector<unsigned char> out{'A', 'Q', 'P', 'M'};
  const auto put32 = [&out](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  };
  put32(b.format_version);
  put32(static_cast<std::uint32_t>(b.fingerprint.size()));
  for (const auto& entry : b.fingerprint) {
    put32(static_cast<std::uint32_t>(entry.size()));
    for (auto d : entry) put32(d);
  }
  for (double v : b.payload) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
  }
  return out;
}

inline WeightBundle decode_bundle(const std::vector<unsigned char>& bytes, const std::string& name = "<memory>") {
  std::size_t pos = 0;
  const auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) throw parse_error(name + ": truncated bundle while reading " + what);
  };
  const auto get32 = [&](const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  need(4, "magic");
  if (std::string(bytes.begin(), bytes.begin() + 4) != "AQPM") throw parse_error(name + ": bad magic, not a weight bundle");
  pos = 4;
  WeightBundle b;
  b.format_version = get32("version");
  if (b.format_version != kBundleVersion) {
    throw version_error(name + ": unsupported bundle version " + std::to_string(b.format_version));
  }
  const std::uint32_t entries = get32("entry count");
  if (entries == 0 || entries > 1024) throw parse_error(name + ": implausible entry count " + std::to_string(entries));
  std::size_t payload_count = 0;
  for (std::uint32_t e = 0; e < entries; ++e) {
    const std::uint32_t rank = get32("entry rank");
    if (rank == 0 || rank > 8) throw parse_error(name + ": implausible rank " + std::to_string(rank));
    std::vector<std::uint32_t> dims;
    std::size_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      dims.push_back(get32("entry extent"));
      count *= dims.back();
    }
    if (e > 0) payload_count += count;
    b.fingerprint.push_back(std::move(dims));
  }
  if ((bytes.size() - pos) / 8 < payload_count) throw parse_error(name + ": truncated bundle while reading payload");
  if (bytes.size() - pos != payload_count * 8) throw parse_error(name + ": trailing bytes after payload");
  b.payload.resize(payload_count);
  for (std::size_t i = 0; i < payload_count; ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(bytes[pos + k]) << (8 * k);
    pos += 8;
    b.payload[i] = std::bit_cast<double>(bits);
  }
  return b;
}

/// Rebuilds a predictor; the fingerprint must match this architecture.
inline PredictorModel model_from_bundle(const WeightBundle& b) {
  if (b.fingerprint.empty() || b.fingerprint[0].size() != 3) {
    throw incompatible_model_error("bundle fingerprint lacks the feature front-end entry");
  }
  StftConfig cfg{b.fingerprint[0][0], b.fingerprint[0][1], b.fingerprint[0][2]};
  const auto expected = PredictorModel::initialize(0, cfg).fingerprint();
  if (b.fingerprint != expected) {
    throw incompatible_model_error("architecture fingerprint mismatch: bundle has " + fingerprint_string(b.fingerprint) +
                                   ", this build expects " + fingerprint_string(expected));
  }
  std::vector<Tensor> params;
  std::size_t pos = 0;
  for (const auto& spec : PredictorModel::architecture()) {
    const std::size_t n = shape_size(spec.shape);
    params.emplace_back(spec.shape, std::vector<double>(b.payload.begin() + static_cast<std::ptrdiff_t>(pos),
                                                        b.payload.begin() + static_cast<std::ptrdiff_t>(pos + n)));
    pos += n;
  }
  return PredictorModel(std::move(params), cfg);
}

inline nlohmann::json metadata_json(const WeightBundle& b) {
  return {{"format_version", b.format_version},
          {"fingerprint", b.fingerprint},
          {"seed", b.metadata.seed},
          {"epochs", b.metadata.epochs},
          {"corpus_id", b.metadata.corpus_id},
          {"final_loss", b.metadata.final_loss}};
}

inline void save_model(const PredictorModel& model, const std::filesystem::path& path, TrainingMetadata meta = {}) {
  const auto bundle = make_bundle(model, std::move(meta));
  const auto bytes = encode_bundle(bundle);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("write failed for " + path.string());
  }
  std::ofstream meta_out(metadata_path(path), std::ios::trunc);
  if (!meta_out) throw io_error("cannot write " + metadata_path(path).string());
  meta_out << metadata_json(bundle).dump(2) << '\n';
}

inline WeightBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto b = decode_bundle(bytes, path.string());
  if (std::ifstream meta_in{metadata_path(path)}) {
    try {
      const auto j = nlohmann::json::parse(meta_in);
      b.metadata.seed = j.value("seed", std::uint64_t{0});
      b.metadata.epochs = j.value("epochs", 0);
      b.metadata.corpus_id = j.value("corpus_id", std::string{});
      b.metadata.final_loss = j.value("final_loss", 0.0);
    } catch (const nlohmann::json::exception& e) {
      throw parse_error(metadata_path(path).string() + ": " + e.what());
    }
  }
  return b;
}

inline PredictorModel load_model(const std::filesystem::path& path) { return model_from_bundle(load_bundle(path)); }

}  // namespace mosguard
