#pragma once

// Waveform -> log-mel spectrogram, plus length fitting and standardization.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "reprog/bytes.hpp"
#include "reprog/error.hpp"
#include "reprog/tensor.hpp"

namespace reprog {

/// Floor applied to mel energies before the log.
inline constexpr double kLogFloorEnergy = 1e-10;

inline double log_floor_value() { return std::log(kLogFloorEnergy); }

struct FrontendParams {
  std::size_t n_mels = 128;
  double win_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t target_frames = 1024;
  double norm_mean = 0.0;
  double norm_std = 1.0;
  double sample_rate = 16000.0;

  void validate() const {
    if (n_mels == 0) throw Error(ErrorCode::kConfigInvalid, "frontend.n_mels must be positive");
    if (!(hop_ms > 0) || !(win_ms > 0)) throw Error(ErrorCode::kConfigInvalid, "frontend.win_ms/hop_ms must be positive");
    if (hop_ms > win_ms) throw Error(ErrorCode::kConfigInvalid, "frontend.hop_ms must not exceed frontend.win_ms");
    if (target_frames == 0) throw Error(ErrorCode::kConfigInvalid, "frontend.target_frames must be positive");
    if (!(norm_std > 0)) throw Error(ErrorCode::kConfigInvalid, "frontend.norm_std must be positive");
    if (!(sample_rate > 0)) throw Error(ErrorCode::kConfigInvalid, "frontend.sample_rate must be positive");
  }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Center frequency of mel band `m` for a filterbank spanning 0 Hz to Nyquist.
inline double mel_band_center_hz(std::size_t m, std::size_t n_mels, double sample_rate) {
  const double top = hz_to_mel(sample_rate / 2.0);
  return mel_to_hz(top * static_cast<double>(m + 1) / static_cast<double>(n_mels + 1));
}

/// Triangular filters on the FFT bin grid, n_mels x (n_fft/2 + 1).
inline Matrix<double> mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate) {
  const std::size_t bins = n_fft / 2 + 1;
  Matrix<double> fb(n_mels, bins);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = i == 0 ? 0.0 : mel_band_center_hz(i - 1, n_mels, sample_rate);
  }
  edges.back() = sample_rate / 2.0;
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      const double up = (f - lo) / (mid - lo);
      const double down = (hi - f) / (hi - mid);
      fb(m, k) = std::max(0.0, std::min(up, down));
    }
  }
  return fb;
}

/// Symmetric Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  if (n == 1) {
    w[0] = 1.0;
    return w;
  }
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  return w;
}

struct FrameGeometry {
  std::size_t win = 0;
  std::size_t hop = 0;
  std::size_t n_fft = 0;
};

inline FrameGeometry frame_geometry(double sample_rate, const FrontendParams& p) {
  FrameGeometry g;
  g.win = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(p.win_ms * sample_rate / 1000.0)));
  g.hop = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(p.hop_ms * sample_rate / 1000.0)));
  g.n_fft = 1;
  while (g.n_fft < g.win) g.n_fft <<= 1;
  return g;
}

/// Frame count: one frame per complete hop (at least one). Frame i covers samples
/// [i*hop, i*hop + win), zero-padded past the end of the signal.
inline std::size_t frame_count(std::size_t n_samples, std::size_t hop) {
  return std::max<std::size_t>(1, n_samples / hop);
}

namespace detail {
struct FftwPlan {
  double* in = nullptr;
  fftw_complex* out = nullptr;
  fftw_plan plan = nullptr;

  explicit FftwPlan(std::size_t n) {
    in = fftw_alloc_real(n);
    out = fftw_alloc_complex(n / 2 + 1);
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
  }
  ~FftwPlan() {
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);
  }
  FftwPlan(const FftwPlan&) = delete;
  FftwPlan& operator=(const FftwPlan&) = delete;
};
}  // namespace detail

template <typename T = double>
Spectrogram<T> compute_logmel(std::span<const double> waveform, double sample_rate, const FrontendParams& p) {
  p.validate();
  if (waveform.empty()) throw Error(ErrorCode::kEmptyAudio, "waveform has no samples");
  if (!(sample_rate > 0)) throw Error(ErrorCode::kConfigInvalid, "sample rate must be positive");
  for (double s : waveform) {
    if (!std::isfinite(s)) throw Error(ErrorCode::kNonFiniteSamples, "waveform contains non-finite samples");
  }
  const auto g = frame_geometry(sample_rate, p);
  const std::size_t frames = frame_count(waveform.size(), g.hop);
  const std::size_t bins = g.n_fft / 2 + 1;
  const auto window = hann_window(g.win);
  const auto fb = mel_filterbank(p.n_mels, g.n_fft, sample_rate);
  detail::FftwPlan fft(g.n_fft);
  std::vector<double> power(bins);
  Matrix<T> out(frames, p.n_mels);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t start = t * g.hop;
    for (std::size_t i = 0; i < g.n_fft; ++i) {
      const std::size_t idx = start + i;
      fft.in[i] = (i < g.win && idx < waveform.size()) ? waveform[idx] * window[i] : 0.0;
    }
    fftw_execute(fft.plan);
    for (std::size_t k = 0; k < bins; ++k) power[k] = fft.out[k][0] * fft.out[k][0] + fft.out[k][1] * fft.out[k][1];
    for (std::size_t m = 0; m < p.n_mels; ++m) {
      double e = 0;
      for (std::size_t k = 0; k < bins; ++k) e += fb(m, k) * power[k];
      out(t, m) = static_cast<T>(std::log(std::max(e, kLogFloorEnergy)));
    }
  }
  return Spectrogram<T>(std::move(out), p.hop_ms);
}

/// Truncates or pads (with the log-floor value) to exactly `target_frames` rows.
template <typename T>
Spectrogram<T> fit_to_length(const Spectrogram<T>& s, std::size_t target_frames) {
  Matrix<T> out(target_frames, s.n_mels(), static_cast<T>(log_floor_value()));
  const std::size_t keep = std::min(target_frames, s.frames());
  std::copy(s.values.data(), s.values.data() + keep * s.n_mels(), out.data());
  return Spectrogram<T>(std::move(out), s.frame_hop_ms);
}

template <typename T>
Spectrogram<T> normalize(const Spectrogram<T>& s, double mean, double std_dev) {
  if (!(std_dev > 0)) throw Error(ErrorCode::kZeroStd, "normalization std must be positive");
  Matrix<T> out = s.values;
  for (auto& v : out.span()) v = static_cast<T>((static_cast<double>(v) - mean) / std_dev);
  return Spectrogram<T>(std::move(out), s.frame_hop_ms);
}

/// Inverse of normalize.
template <typename T>
Spectrogram<T> denormalize(const Spectrogram<T>& s, double mean, double std_dev) {
  if (!(std_dev > 0)) throw Error(ErrorCode::kZeroStd, "normalization std must be positive");
  Matrix<T> out = s.values;
  for (auto& v : out.span()) v = static_cast<T>(static_cast<double>(v) * std_dev + mean);
  return Spectrogram<T>(std::move(out), s.frame_hop_ms);
}

/// Full pipeline used for dataset clips: log-mel, fixed length, standardization.
template <typename T>
Spectrogram<T> frontend_pipeline(std::span<const double> waveform, double sample_rate, const FrontendParams& p) {
  auto s = compute_logmel<T>(waveform, sample_rate, p);
  return normalize(fit_to_length(s, p.target_frames), p.norm_mean, p.norm_std);
}

struct Audio {
  std::vector<double> samples;  // mono
  double sample_rate = 0;
};

/// Linear-interpolation resampler.
inline Audio resample_linear(const Audio& in, double target_rate) {
  if (in.sample_rate == target_rate || in.samples.empty()) return in;
  const double ratio = in.sample_rate / target_rate;
  const auto n = static_cast<std::size_t>(std::floor(static_cast<double>(in.samples.size()) / ratio));
  Audio out{std::vector<double>(std::max<std::size_t>(n, 1)), target_rate};
  for (std::size_t i = 0; i < out.samples.size(); ++i) {
    const double src = static_cast<double>(i) * ratio;
    const auto i0 = static_cast<std::size_t>(src);
    const std::size_t i1 = std::min(i0 + 1, in.samples.size() - 1);
    const double f = src - static_cast<double>(i0);
    out.samples[i] = (1 - f) * in.samples[std::min(i0, in.samples.size() - 1)] + f * in.samples[i1];
  }
  return out;
}

/// Uncompressed RIFF/WAVE reader (PCM 8/16/24/32-bit integer or 32/64-bit float),
/// downmixed to mono.
inline Audio read_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::kUnresolvedAudio, "cannot open '" + path.string() + "'");
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  ByteReader r(raw);
  auto tag = [&r] {
    std::string s(4, '\0');
    for (auto& c : s) c = static_cast<char>(r.get<std::uint8_t>());
    return s;
  };
  if (tag() != "RIFF") throw Error(ErrorCode::kUnresolvedAudio, path.string() + ": not a RIFF file");
  r.get<std::uint32_t>();
  if (tag() != "WAVE") throw Error(ErrorCode::kUnresolvedAudio, path.string() + ": not a WAVE file");
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (r.ok() && r.remaining() >= 8) {
    const std::string id = tag();
    const auto size = r.get<std::uint32_t>();
    const std::size_t body = r.position();
    if (size > r.remaining()) break;
    if (id == "fmt ") {
      format = r.get<std::uint16_t>();
      channels = r.get<std::uint16_t>();
      rate = r.get<std::uint32_t>();
      r.get<std::uint32_t>();
      r.get<std::uint16_t>();
      bits = r.get<std::uint16_t>();
      if (format == 0xFFFE && size >= 26) {
        r.get<std::uint16_t>();
        r.get<std::uint16_t>();
        r.get<std::uint32_t>();
        format = r.get<std::uint16_t>();
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt || channels == 0 || bits == 0) {
        throw Error(ErrorCode::kUnresolvedAudio, path.string() + ": data chunk before fmt chunk");
      }
      const std::size_t bytes_per = bits / 8;
      const std::size_t frames = size / (bytes_per * channels);
      Audio a{std::vector<double>(frames, 0.0), static_cast<double>(rate)};
      const unsigned char* p = raw.data() + body;
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0;
        for (std::size_t ch = 0; ch < channels; ++ch, p += bytes_per) {
          double v = 0;
          if (format == 1) {
            std::int64_t s = 0;
            for (std::size_t b = 0; b < bytes_per; ++b) s |= static_cast<std::int64_t>(p[b]) << (8 * b);
            if (bytes_per == 1) {
              v = (static_cast<double>(s) - 128.0) / 128.0;
            } else {
              const int shift = static_cast<int>(64 - 8 * bytes_per);
              s = (s << shift) >> shift;
              v = static_cast<double>(s) / std::ldexp(1.0, static_cast<int>(8 * bytes_per - 1));
            }
          } else if (format == 3 && bytes_per == 4) {
            float fv;
            std::memcpy(&fv, p, 4);
            v = fv;
          } else if (format == 3 && bytes_per == 8) {
            std::memcpy(&v, p, 8);
          } else {
            throw Error(ErrorCode::kUnresolvedAudio, path.string() + ": unsupported sample format");
          }
          acc += v;
        }
        a.samples[i] = acc / channels;
      }
      return a;
    }
    r.seek(std::min(raw.size(), body + size + (size & 1)));  // chunks are word aligned
  }
  throw Error(ErrorCode::kUnresolvedAudio, path.string() + ": no data chunk");
}

/// 16-bit PCM mono writer, used for fixtures and tooling.
inline void write_wav(const std::filesystem::path& path, std::span<const double> samples, std::uint32_t rate) {
  ByteWriter w;
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  for (char c : std::string("RIFF")) w.put(c);
  w.put<std::uint32_t>(36 + data_bytes);
  for (char c : std::string("WAVEfmt ")) w.put(c);
  w.put<std::uint32_t>(16);
  w.put<std::uint16_t>(1);
  w.put<std::uint16_t>(1);
  w.put<std::uint32_t>(rate);
  w.put<std::uint32_t>(rate * 2);
  w.put<std::uint16_t>(2);
  w.put<std::uint16_t>(16);
  for (char c : std::string("data")) w.put(c);
  w.put<std::uint32_t>(data_bytes);
  for (double s : samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    w.put(static_cast<std::int16_t>(std::lround(c * 32767.0)));
  }
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
  if (!f) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
}

/// Extension -> decoder. ".wav" is built in; compressed formats plug in here.
class AudioDecoders {
 public:
  using Decoder = std::function<Audio(const std::filesystem::path&)>;

  static AudioDecoders& instance() {
    static AudioDecoders registry;
    return registry;
  }

  void add(const std::string& extension, Decoder d) { decoders_[extension] = std::move(d); }
  bool supports(const std::string& extension) const { return decoders_.count(extension) > 0; }

  Audio decode(const std::filesystem::path& path) const {
    auto it = decoders_.find(path.extension().string());
    if (it == decoders_.end()) {
      throw Error(ErrorCode::kUnresolvedAudio, "no decoder registered for '" + path.extension().string() + "'");
    }
    return it->second(path);
  }

 private:
  AudioDecoders() { decoders_[".wav"] = read_wav; }
  std::map<std::string, Decoder> decoders_;
};

}  // namespace reprog
