#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>

#include "helpers.hpp"
#include "mosguard/signal.hpp"
#include "mosguard/wav.hpp"

using namespace mosguard;
namespace ts = testing_support;

TEST(Waveform, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(Waveform({}, 16000), empty_signal_error);
  EXPECT_THROW(Waveform({0.1, NAN}, 16000), domain_error);
  EXPECT_THROW(Waveform({0.1}, 0), domain_error);
}

TEST(PeakNormalize, DividesByPeak) {
  const auto a = peak_normalize(Waveform({0.5, -0.25}, 8000));
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(a[1], -0.5);
  const auto b = peak_normalize(Waveform({-0.8, 0.4}, 8000));
  EXPECT_EQ(b[0], -1.0);
  EXPECT_EQ(b[1], 0.5);
  EXPECT_EQ(b.sample_rate_hz(), 8000);
}

TEST(PeakNormalize, RejectsSilence) { EXPECT_THROW(peak_normalize(Waveform({0.0, 0.0}, 8000)), empty_signal_error); }

TEST(PeakNormalize, IdempotentAndScaleInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Waveform x(ts::random_samples(257, seed, 0.3), 16000);
    const auto n = peak_normalize(x);
    EXPECT_EQ(n.peak(), 1.0);
    EXPECT_EQ(peak_normalize(n), n);
    std::vector<double> scaled(x.samples().begin(), x.samples().end());
    for (double& s : scaled) s *= 4.0;  // power of two keeps the division exact
    EXPECT_EQ(peak_normalize(Waveform(scaled, 16000)), n);
  }
}

TEST(DbDistortion, ReferenceValues) {
  const Waveform x({1.0, -0.5, 0.25}, 16000);
  EXPECT_DOUBLE_EQ(db_distortion(x, std::vector<double>{0.0, -1.0, 0.0}), 0.0);
  EXPECT_NEAR(db_distortion(x, std::vector<double>{0.1, 0.0, 0.0}), -20.0, 1e-12);
  EXPECT_EQ(db_distortion(x, std::vector<double>(3, 0.0)), -std::numeric_limits<double>::infinity());
  EXPECT_THROW(db_distortion(x, std::vector<double>(2, 0.0)), dimension_error);
}

TEST(DbDistortion, ScalesByTwentyLogC) {
  const auto x = ts::random_clip(300, 1);
  const auto d = ts::random_samples(300, 2, 0.01);
  for (double c : {0.5, 2.0, 7.25}) {
    std::vector<double> cd(d);
    for (double& v : cd) v *= c;
    EXPECT_NEAR(db_distortion(x, cd), db_distortion(x, d) + 20.0 * std::log10(c), 1e-10);
  }
}

TEST(Materialize, ZeroLatentGivesZero) {
  const auto d = materialize({std::vector<double>(16, 0.0), 0.03});
  for (double v : d) EXPECT_EQ(v, 0.0);
}

TEST(Materialize, StrictBoundEvenWhenSaturated) {
  const auto d = materialize({{1e3, -1e3, 40.0, -40.0, 19.0}, 0.03});
  for (double v : d) EXPECT_LT(std::abs(v), 0.03);
  EXPECT_GT(d[0], 0.03 * (1.0 - 1e-11));
}

TEST(Materialize, DbBoundHoldsForAnyLatent) {
  const double bound = 20.0 * std::log10(0.03);
  EXPECT_NEAR(bound, -30.4576, 1e-4);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto x = ts::random_clip(128, seed);
    const auto z = ts::random_samples(128, seed + 1000, 50.0);
    EXPECT_LT(db_distortion(x, materialize({z, 0.03})), bound);
  }
}

TEST(Apply, UnclampedSumAndInverse) {
  const Waveform x({0.99}, 16000);
  EXPECT_DOUBLE_EQ(mosguard::apply(x, std::vector<double>{0.03})[0], 1.02);
  const auto y = ts::random_clip(64, 5);
  const auto d = ts::random_samples(64, 6, 0.03);
  std::vector<double> neg(d);
  for (double& v : neg) v = -v;
  const auto back = mosguard::apply(mosguard::apply(y, d), neg);
  for (std::size_t t = 0; t < y.size(); ++t) EXPECT_NEAR(back[t], y[t], 1e-15);
  EXPECT_THROW(mosguard::apply(y, std::vector<double>(3, 0.0)), dimension_error);
}

TEST(Wav, DecodesPcm16Scaling) {
  const auto bytes = ts::wav_bytes(1, 1, 16000, 16, ts::pcm16_payload({32767, -32768, 0, 16384}));
  const auto x = decode_wav(bytes);
  ASSERT_EQ(x.size(), 4u);
  EXPECT_EQ(x[0], 32767.0 / 32768.0);
  EXPECT_EQ(x[1], -1.0);
  EXPECT_EQ(x[3], 0.5);
  EXPECT_EQ(x.sample_rate_hz(), 16000);
}

TEST(Wav, DecodesFloat32) {
  std::vector<unsigned char> payload;
  for (float f : {0.25f, -0.75f}) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) payload.push_back((u >> (8 * i)) & 0xFF);
  }
  const auto x = decode_wav(ts::wav_bytes(3, 1, 22050, 32, payload));
  EXPECT_EQ(x[0], 0.25);
  EXPECT_EQ(x[1], -0.75);
  EXPECT_EQ(x.sample_rate_hz(), 22050);
}

TEST(Wav, OneSecondLength) {
  const auto x = decode_wav(ts::wav_bytes(1, 1, 16000, 16, ts::pcm16_payload(std::vector<std::int16_t>(16000, 7))));
  EXPECT_EQ(x.size(), 16000u);
}

TEST(Wav, RejectsStereo) {
  EXPECT_THROW(decode_wav(ts::wav_bytes(1, 2, 16000, 16, ts::pcm16_payload({1, 2, 3, 4}))), channel_count_error);
}

TEST(Wav, RejectsUnsupportedEncoding) {
  try {
    decode_wav(ts::wav_bytes(1, 1, 16000, 24, std::vector<unsigned char>(6, 0)));
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_NE(std::string(e.what()).find("'fmt '"), std::string::npos);
  }
}

TEST(Wav, RejectsEmptyPayloadAndMissingChunks) {
  EXPECT_THROW(decode_wav(ts::wav_bytes(1, 1, 16000, 16, {})), empty_signal_error);
  try {
    decode_wav(ts::wav_bytes(1, 1, 16000, 16, {}, false));
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_NE(std::string(e.what()).find("'data'"), std::string::npos);
  }
  EXPECT_THROW(decode_wav({'R', 'I', 'F', 'F'}), format_error);
}

TEST(Wav, RoundTripWithinOneStep) {
  const auto dir = ts::scratch_dir("wav_roundtrip");
  const Waveform x(ts::random_samples(1000, 11, 0.999), 16000);
  save_wav(x, dir / "x.wav");
  const auto y = load_wav(dir / "x.wav");
  ASSERT_EQ(y.size(), x.size());
  for (std::size_t t = 0; t < x.size(); ++t) EXPECT_LE(std::abs(y[t] - x[t]), 1.0 / 32768.0);
}

TEST(Wav, ExportClampsOutOfRange) {
  const auto bytes = encode_wav(Waveform({1.02, -1.5}, 16000));
  const auto y = decode_wav(bytes);
  EXPECT_EQ(y[0], 32767.0 / 32768.0);
  EXPECT_EQ(y[1], -1.0);
}

TEST(Wav, MissingFileIsIoError) { EXPECT_THROW(load_wav("/nonexistent/x.wav"), io_error); }
