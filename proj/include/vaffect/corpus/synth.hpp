#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "vaffect/corpus/annotation.hpp"
#include "vaffect/corpus/image.hpp"

namespace vaffect::corpus {

/// Smooth label curve: offset plus three sinusoids, clamped to the label range.
struct LabelCurve {
  double offset = 0.0;
  std::array<double, 3> amplitude{};
  std::array<double, 3> period{};  // seconds
  std::array<double, 3> phase{};

  double at(double t) const {
    double v = offset;
    for (std::size_t j = 0; j < 3; ++j) v += amplitude[j] * std::sin(2.0 * std::numbers::pi * t / period[j] + phase[j]);
    return std::clamp(v, static_cast<double>(kLabelMin), static_cast<double>(kLabelMax));
  }

  static LabelCurve random(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    LabelCurve c;
    c.offset = -250.0 + 500.0 * u(rng);
    const std::array<std::pair<double, double>, 3> amp{{{250, 450}, {100, 250}, {50, 120}}};
    for (std::size_t j = 0; j < 3; ++j) {
      c.amplitude[j] = amp[j].first + (amp[j].second - amp[j].first) * u(rng);
      c.period[j] = 2.0 + 8.0 * u(rng);
      c.phase[j] = 2.0 * std::numbers::pi * u(rng);
    }
    return c;
  }
};

/// Everything needed to render one synthetic video deterministically.
///
/// Frame brightness follows valence: the background level is
/// 128 + 0.1 * valence. Arousal is motion energy: a sinusoidal grating
/// drifts at 20 * (arousal + 1000) / 2000 pixels per frame and each frame
/// integrates it over the exposure, so fast drift washes the pattern out
/// while slow drift leaves it crisp.
struct SynthVideoSpec {
  std::string id;
  std::size_t frames = 300;
  std::size_t size = 96;
  std::uint64_t seed = 0;
  LabelCurve valence;
  LabelCurve arousal;
  std::array<double, 3> tint{};
  double gradient_angle = 0.0;
  double gradient_amplitude = 0.0;
  double heading = 0.0;    // drift direction, radians
  double turn_rate = 0.0;  // radians per second
  double phase = 0.0;

  static constexpr double kWavelength = 24.0;  // pixels
  static constexpr double kContrast = 50.0;

  static SynthVideoSpec random(std::string id, std::size_t frames, std::size_t size, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SynthVideoSpec s;
    s.id = std::move(id);
    s.frames = frames;
    s.size = size;
    s.seed = rng();
    s.valence = LabelCurve::random(rng);
    s.arousal = LabelCurve::random(rng);
    for (auto& t : s.tint) t = -6.0 + 12.0 * u(rng);
    s.gradient_angle = 2.0 * std::numbers::pi * u(rng);
    s.gradient_amplitude = 15.0 * u(rng);
    s.heading = 2.0 * std::numbers::pi * u(rng);
    s.turn_rate = -0.3 + 0.6 * u(rng);
    s.phase = 2.0 * std::numbers::pi * u(rng);
    return s;
  }

  double time_of(std::size_t k) const { return static_cast<double>(k) * kFrameInterval; }
  double valence_at_frame(std::size_t k) const { return valence.at(time_of(k)); }
  double arousal_at_frame(std::size_t k) const { return arousal.at(time_of(k)); }

  static double speed_for(double arousal) { return 20.0 * (arousal - kLabelMin) / (kLabelMax - kLabelMin); }
};

/// Grating state at the end of each frame's exposure.
struct GratingState {
  double phase;    // radians
  double heading;  // radians
};

/// Grating states for frames 0..frames (index 0 is the pre-roll state).
inline std::vector<GratingState> trajectory(const SynthVideoSpec& s) {
  std::vector<GratingState> out(s.frames + 1);
  double phase = s.phase, heading = s.heading;
  out[0] = {phase, heading};
  for (std::size_t k = 1; k <= s.frames; ++k) {
    heading += s.turn_rate * kFrameInterval;
    phase += 2.0 * std::numbers::pi * SynthVideoSpec::speed_for(s.arousal_at_frame(k)) / SynthVideoSpec::kWavelength;
    out[k] = {phase, heading};
  }
  return out;
}

/// Renders frame k (1-based) given the precomputed trajectory.
inline Image render_frame(const SynthVideoSpec& s, const std::vector<GratingState>& traj, std::size_t k) {
  constexpr int kSub = 12;
  const std::size_t n = s.size;
  const double base = 128.0 + 0.1 * s.valence_at_frame(k);
  const auto& a = traj[k - 1];
  const auto& b = traj[k];
  const double kx = 2.0 * std::numbers::pi / SynthVideoSpec::kWavelength * std::cos(b.heading);
  const double ky = 2.0 * std::numbers::pi / SynthVideoSpec::kWavelength * std::sin(b.heading);
  std::array<double, kSub> phases{};
  for (int j = 0; j < kSub; ++j) phases[j] = a.phase + (b.phase - a.phase) * (j + 0.5) / kSub;

  std::mt19937_64 noise_rng(s.seed ^ (0x9e3779b97f4a7c15ULL * (k + 1)));
  std::normal_distribution<double> noise(0.0, 3.0);
  Image img(n, n);
  const double gx = std::cos(s.gradient_angle), gy = std::sin(s.gradient_angle);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double ramp = s.gradient_amplitude * ((fx / n - 0.5) * gx + (fy / n - 0.5) * gy);
      double pattern = 0.0;
      for (double ph : phases) pattern += std::sin(kx * fx + ky * fy - ph);
      pattern *= SynthVideoSpec::kContrast / kSub;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = base + s.tint[c] + ramp + pattern + noise(noise_rng);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  return img;
}

/// Auxiliary texture-attribute task used to pretrain backbones: each image
/// is a noisy oriented grating whose class encodes its brightness band (3)
/// and contrast level (4).
struct TextureSample {
  Image image;
  std::size_t label = 0;
};

inline constexpr std::size_t kTextureClasses = 12;

inline TextureSample texture_sample(std::mt19937_64& rng, std::size_t size = 96) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  constexpr std::array<double, 4> kLevels{0.0, 10.0, 22.0, 45.0};
  const std::size_t band = rng() % 3, level = rng() % 4;
  const double base = 40.0 + 60.0 * (static_cast<double>(band) + u(rng));
  const double contrast = kLevels[level] * (0.85 + 0.3 * u(rng));
  const double wavelength = 10.0 + 30.0 * u(rng);
  const double angle = 2.0 * std::numbers::pi * u(rng), phase = 2.0 * std::numbers::pi * u(rng);
  const double kx = 2.0 * std::numbers::pi / wavelength * std::cos(angle), ky = 2.0 * std::numbers::pi / wavelength * std::sin(angle);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = -6.0 + 12.0 * u(rng);
  std::normal_distribution<double> noise(0.0, 3.0);
  TextureSample out{Image(size, size), band * 4 + level};
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double pattern = contrast * std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = base + tint[c] + pattern + noise(rng);
        out.image.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  return out;
}

/// Annotator-style samples of a label curve at irregular times covering
/// the whole video.
inline AnnotationTrack sample_track(const LabelCurve& curve, Dimension dim, std::size_t frames, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> gap(0.015, 0.045);
  AnnotationTrack track;
  track.dimension = dim;
  const double end = static_cast<double>(frames) * kFrameInterval + 0.05;
  for (double t = 0.005 + gap(rng) / 3.0; t < end; t += gap(rng)) {
    const double rounded = std::round(t * 1000.0) / 1000.0;
    if (!track.samples.empty() && rounded <= track.samples.back().time) continue;
    track.samples.push_back({rounded, static_cast<int>(std::lround(curve.at(rounded)))});
  }
  return track;
}

struct SynthOptions {
  std::size_t videos = 8;
  std::size_t frames = 300;
  std::size_t size = 96;
  std::uint64_t seed = 1;
};

struct SynthVideoInfo {
  SynthVideoSpec spec;
  std::string gender;
  std::string subject;
};

inline std::vector<SynthVideoInfo> plan_synthetic_corpus(const SynthOptions& opt) {
  std::mt19937_64 rng(opt.seed);
  std::vector<SynthVideoInfo> out;
  for (std::size_t v = 0; v < opt.videos; ++v) {
    char id[32];
    std::snprintf(id, sizeof id, "video%03zu", v + 1);
    SynthVideoInfo info;
    info.spec = SynthVideoSpec::random(id, opt.frames, opt.size, rng);
    info.gender = (rng() & 1) ? "female" : "male";
    info.subject = std::string("subject") + std::to_string(v + 1);
    out.push_back(std::move(info));
  }
  return out;
}

/// Writes <out>/videos/<id>/frames/<k>.ppm, valence.txt, arousal.txt and
/// <out>/meta.csv ("video_id,frames,fps,gender,subject_id,category").
inline std::vector<SynthVideoInfo> write_synthetic_corpus(const std::filesystem::path& out, const SynthOptions& opt) {
  namespace fs = std::filesystem;
  auto plan = plan_synthetic_corpus(opt);
  std::mt19937_64 track_rng(opt.seed ^ 0x5eedULL);
  fs::create_directories(out / "videos");
  std::ofstream meta(out / "meta.csv");
  meta << "video_id,frames,fps,gender,subject_id,category\n";
  for (const auto& info : plan) {
    const auto& s = info.spec;
    const fs::path dir = out / "videos" / s.id;
    fs::create_directories(dir / "frames");
    const auto traj = trajectory(s);
    for (std::size_t k = 1; k <= s.frames; ++k) write_ppm(dir / "frames" / (std::to_string(k) + ".ppm"), render_frame(s, traj, k));
    write_track(dir / "valence.txt", sample_track(s.valence, Dimension::Valence, s.frames, track_rng));
    write_track(dir / "arousal.txt", sample_track(s.arousal, Dimension::Arousal, s.frames, track_rng));
    meta << s.id << ',' << s.frames << ",30," << info.gender << ',' << info.subject << ",\n";
  }
  return plan;
}

}  // namespace vaffect::corpus
