#pragma once

// Tracking protocol shared by PAEGAN and the particle filter, per-step MSE
// curves against ground truth, CSV export and frame strips.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "paegan/io/pgm.hpp"
#include "paegan/model/sampler.hpp"
#include "paegan/pf/particle_filter.hpp"
#include "paegan/world/dataset.hpp"

namespace paegan::eval {

using Image = std::vector<float>;
using nn::Tensor;

struct ProtocolConfig {
  std::size_t warmup_obs = 8;
  std::size_t horizon = 160;
  double obs_probability = 0.0;  // chance of an observation per step after warm-up
  std::size_t num_eval_episodes = 100;
  std::uint64_t seed = 0;

  std::size_t length() const { return warmup_obs + horizon; }

  void validate() const {
    if (warmup_obs < 1) throw std::invalid_argument("protocol: warmup_obs must be >= 1");
    if (horizon < 1) throw std::invalid_argument("protocol: horizon must be >= 1");
    if (!(obs_probability >= 0 && obs_probability <= 1)) throw std::invalid_argument("protocol: obs_probability in [0,1]");
    if (num_eval_episodes < 1) throw std::invalid_argument("protocol: num_eval_episodes must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProtocolConfig, warmup_obs, horizon, obs_probability, num_eval_episodes,
                                                seed)

/// Pixelwise mean over every frame of every episode.
inline Image uninformed_baseline(const world::EpisodeSet& data) {
  if (data.num_frames() == 0) throw std::invalid_argument("uninformed_baseline: empty dataset");
  const std::size_t px = data.frame_size();
  std::vector<double> acc(px, 0.0);
  for (std::size_t f = 0; f < data.num_frames(); ++f)
    for (std::size_t p = 0; p < px; ++p) acc[p] += data.frames[f * px + p];
  Image out(px);
  for (std::size_t p = 0; p < px; ++p) out[p] = static_cast<float>(acc[p] / static_cast<double>(data.num_frames()));
  return out;
}

inline double squared_error(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw std::invalid_argument("squared_error: image sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

/// Mean binary entropy (nats) of the pixel intensities. Crisp 0/1 images
/// score 0; blur spreads mass into intermediate values and raises it.
inline double pixel_entropy(std::span<const float> img) {
  double h = 0.0;
  for (float v : img) {
    const double x = std::clamp(static_cast<double>(v), 0.0, 1.0);
    if (x > 0.0 && x < 1.0) h -= x * std::log(x) + (1.0 - x) * std::log(1.0 - x);
  }
  return img.empty() ? 0.0 : h / static_cast<double>(img.size());
}

/// Observation availability for one episode: warm-up steps always observed,
/// later steps observed with probability obs_probability.
inline std::vector<bool> make_schedule(const ProtocolConfig& p, Rng& rng) {
  std::vector<bool> s(p.length(), true);
  for (std::size_t t = p.warmup_obs; t < s.size(); ++t) s[t] = rng.bernoulli(p.obs_probability);
  return s;
}

/// Everything recorded at one post-warm-up step; t runs 1..horizon.
struct StepRecord {
  std::size_t t = 0;
  bool observed = false;
  Image truth;
  Image pf_expected;
  Image pf_sample;
  Image paegan_expected;
  Image paegan_sample;
};

using EpisodeRecords = std::vector<StepRecord>;

struct PaeganModels {
  const model::Pae<float>* pae = nullptr;
  const model::Sampler<float>* sampler = nullptr;  // optional; sample rows stay empty without it
};

/// Per-episode random streams, all derived from the protocol seed.
struct EpisodeStreams {
  Rng schedule, measurement, filter, sampler;
  EpisodeStreams(std::uint64_t seed, std::size_t e)
      : schedule(seed, {e, 0}), measurement(seed, {e, 1}), filter(seed, {e, 2}), sampler(seed, {e, 3}) {}
};

/// Runs both trackers over episodes [0, count) of `data` with one shared
/// availability schedule per episode. PAEGAN sees the clean frames; the PF
/// sees noisy position measurements of the same steps. Passing a null PAE
/// runs the PF alone (and vice versa with pf == nullopt).
inline std::vector<EpisodeRecords> run_tracking(const ProtocolConfig& protocol, const world::EpisodeSet& data,
                                                const PaeganModels& models, const std::optional<pf::PFConfig>& pf_cfg,
                                                std::vector<std::vector<bool>>* schedules_out = nullptr) {
  protocol.validate();
  const std::size_t E = std::min(protocol.num_eval_episodes, data.episodes);
  if (E == 0) throw std::invalid_argument("run_tracking: no evaluation episodes");
  if (data.steps < protocol.length()) {
    throw std::invalid_argument("run_tracking: episodes have " + std::to_string(data.steps) + " steps, protocol needs " +
                                std::to_string(protocol.length()));
  }
  if (pf_cfg && !data.has_states()) throw std::invalid_argument("run_tracking: the particle filter needs ground-truth states");
  const std::size_t px = data.frame_size(), W = protocol.warmup_obs, L = protocol.length();
  if (models.pae && models.pae->cfg.pixels() != px) throw std::invalid_argument("run_tracking: model/dataset image size mismatch");
  if (pf_cfg) pf_cfg->validate();

  std::vector<EpisodeStreams> streams;
  std::vector<std::vector<bool>> schedules;
  for (std::size_t e = 0; e < E; ++e) {
    streams.emplace_back(protocol.seed, e);
    schedules.push_back(make_schedule(protocol, streams.back().schedule));
  }
  std::vector<EpisodeRecords> records(E);
  for (std::size_t e = 0; e < E; ++e) {
    records[e].resize(protocol.horizon);
    for (std::size_t k = 0; k < protocol.horizon; ++k) {
      auto& r = records[e][k];
      r.t = k + 1;
      r.observed = schedules[e][W + k];
      const auto f = data.frame(e, W + k);
      r.truth.assign(f.begin(), f.end());
    }
  }

  // PAEGAN: all episodes advance together as one batch.
  if (models.pae) {
    const auto& pae = *models.pae;
    Tensor<float> h = model::zero_belief(pae, E);
    for (std::size_t t = 0; t < L; ++t) {
      Tensor<float> frames({E, px});
      for (std::size_t e = 0; e < E; ++e) {
        if (!schedules[e][t]) continue;
        const auto f = data.frame(e, t);
        std::copy(f.begin(), f.end(), frames.data() + e * px);
      }
      h = model::propagate(pae, h, frames);
      if (t < W) continue;
      const Tensor<float> expect = model::decode(pae, h);
      Tensor<float> sample;
      if (models.sampler) {
        Tensor<float> z({E, static_cast<std::size_t>(models.sampler->cfg.noise_dim)});
        for (std::size_t e = 0; e < E; ++e)
          for (std::size_t j = 0; j < z.dim(1); ++j) z[e * z.dim(1) + j] = static_cast<float>(streams[e].sampler.normal());
        sample = model::decode(pae, model::sample_states(*models.sampler, h, z));
      }
      for (std::size_t e = 0; e < E; ++e) {
        auto& r = records[e][t - W];
        r.paegan_expected.assign(expect.data() + e * px, expect.data() + (e + 1) * px);
        if (models.sampler) r.paegan_sample.assign(sample.data() + e * px, sample.data() + (e + 1) * px);
      }
    }
  }

  if (pf_cfg) {
    for (std::size_t e = 0; e < E; ++e) {
      auto& st = streams[e];
      pf::ParticleSet ps;
      for (std::size_t t = 0; t < L; ++t) {
        if (t > 0) ps = pf::pf_predict(ps, *pf_cfg, st.filter);
        if (schedules[e][t]) {
          const auto z = world::measure(data.state(e, t), data.cfg, st.measurement);
          ps = t == 0 ? pf::pf_init_from_measurement(*pf_cfg, z, st.filter) : pf::pf_update(ps, z, *pf_cfg, st.filter);
        }
        if (t < W) continue;
        auto& r = records[e][t - W];
        r.pf_expected = pf::pf_expected_observation(ps, *pf_cfg).pixels;
        r.pf_sample = pf::pf_sample_observation(ps, *pf_cfg, st.filter).pixels;
      }
    }
  }
  if (schedules_out) *schedules_out = std::move(schedules);
  return records;
}

struct MseCurve {
  std::vector<double> mse_paegan, mse_pf, mse_baseline;

  std::size_t size() const { return mse_baseline.size(); }
};

/// Per-step mean over episodes of the summed squared pixel error. A column
/// whose predictions were not recorded is filled with NaN.
inline MseCurve mse_curve(const std::vector<EpisodeRecords>& episodes, const Image& baseline) {
  if (episodes.empty()) throw std::invalid_argument("mse_curve: no episodes");
  const std::size_t T = episodes.front().size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  MseCurve c{std::vector<double>(T, 0.0), std::vector<double>(T, 0.0), std::vector<double>(T, 0.0)};
  const double inv = 1.0 / static_cast<double>(episodes.size());
  for (const auto& ep : episodes) {
    if (ep.size() != T) throw std::invalid_argument("mse_curve: episodes differ in length");
    for (std::size_t k = 0; k < T; ++k) {
      const auto& r = ep[k];
      c.mse_paegan[k] += r.paegan_expected.empty() ? nan : squared_error(r.paegan_expected, r.truth) * inv;
      c.mse_pf[k] += r.pf_expected.empty() ? nan : squared_error(r.pf_expected, r.truth) * inv;
      c.mse_baseline[k] += squared_error(baseline, r.truth) * inv;
    }
  }
  return c;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Least-squares slope of v against t = 1..n.
inline double trend_slope(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  if (v.size() < 2) return 0.0;
  const double tm = (n + 1) / 2, vm = mean_of(v);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double dt = static_cast<double>(i + 1) - tm;
    num += dt * (v[i] - vm);
    den += dt * dt;
  }
  return num / den;
}

inline std::string format_csv(const MseCurve& c) {
  std::string out = "t,mse_paegan,mse_pf,mse_baseline\n";
  char buf[128];
  for (std::size_t k = 0; k < c.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", k + 1, c.mse_paegan[k], c.mse_pf[k], c.mse_baseline[k]);
    out += buf;
  }
  return out;
}

inline void write_csv(const MseCurve& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << format_csv(c);
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

struct Strip {
  int width = 0, height = 0;
  std::vector<float> pixels;
};

/// Rows: ground truth, PF expectation, PF sample, PAEGAN expectation,
/// PAEGAN sample. Columns: steps 1, 1 + stride, ... Missing images stay black.
inline Strip render_strip(const EpisodeRecords& records, std::size_t stride, int image_size) {
  if (stride < 1) throw std::invalid_argument("render_strip: stride must be >= 1");
  if (records.empty()) throw std::invalid_argument("render_strip: no records");
  const std::size_t S = static_cast<std::size_t>(image_size);
  const std::size_t cols = (records.size() + stride - 1) / stride;
  Strip s;
  s.width = static_cast<int>(cols * S);
  s.height = static_cast<int>(5 * S);
  s.pixels.assign(static_cast<std::size_t>(s.width) * static_cast<std::size_t>(s.height), 0.0f);
  for (std::size_t c = 0; c < cols; ++c) {
    const StepRecord& r = records[c * stride];
    const Image* rows[5] = {&r.truth, &r.pf_expected, &r.pf_sample, &r.paegan_expected, &r.paegan_sample};
    for (std::size_t row = 0; row < 5; ++row) {
      const Image& img = *rows[row];
      if (img.empty()) continue;
      if (img.size() != S * S) throw std::invalid_argument("render_strip: image size mismatch");
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x)
          s.pixels[(row * S + y) * static_cast<std::size_t>(s.width) + c * S + x] = img[y * S + x];
    }
  }
  return s;
}

inline void write_strip(const Strip& s, const std::filesystem::path& path) { io::write_pgm(path, s.width, s.height, s.pixels); }

// ---------------------------------------------------------------------------
// Records file: the recorded images of a run, for later rendering.

inline constexpr const char* kRecordsFormat = "paegan-records/1";

inline void save_records(const std::vector<EpisodeRecords>& eps, int image_size, const std::filesystem::path& path) {
  nlohmann::json header = {{"format", kRecordsFormat},
                           {"episodes", eps.size()},
                           {"steps", eps.empty() ? 0 : eps.front().size()},
                           {"image_size", image_size}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << header.dump() << '\n';
  const std::size_t px = static_cast<std::size_t>(image_size) * static_cast<std::size_t>(image_size);
  const Image blank(px, 0.0f);
  for (const auto& ep : eps)
    for (const auto& r : ep) {
      const std::uint8_t flags = static_cast<std::uint8_t>((r.observed ? 1 : 0) | (r.pf_expected.empty() ? 0 : 2) |
                                                           (r.pf_sample.empty() ? 0 : 4) |
                                                           (r.paegan_expected.empty() ? 0 : 8) |
                                                           (r.paegan_sample.empty() ? 0 : 16));
      out.put(static_cast<char>(flags));
      for (const Image* img : {&r.truth, &r.pf_expected, &r.pf_sample, &r.paegan_expected, &r.paegan_sample}) {
        const Image& src = img->empty() ? blank : *img;
        out.write(reinterpret_cast<const char*>(src.data()), static_cast<std::streamsize>(px * sizeof(float)));
      }
    }
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

inline std::vector<EpisodeRecords> load_records(const std::filesystem::path& path, int* image_size_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("'" + path.string() + "' is not a records file");
  }
  if (header.value("format", "") != kRecordsFormat) throw std::runtime_error("'" + path.string() + "' is not a records file");
  const std::size_t E = header.at("episodes"), T = header.at("steps");
  const int S = header.at("image_size");
  const std::size_t px = static_cast<std::size_t>(S) * static_cast<std::size_t>(S);
  std::vector<EpisodeRecords> eps(E, EpisodeRecords(T));
  for (auto& ep : eps)
    for (std::size_t k = 0; k < T; ++k) {
      auto& r = ep[k];
      r.t = k + 1;
      char flags = 0;
      if (!in.get(flags)) throw std::runtime_error("records file '" + path.string() + "' is truncated");
      r.observed = flags & 1;
      const int bits[5] = {0, 2, 4, 8, 16};
      Image* imgs[5] = {&r.truth, &r.pf_expected, &r.pf_sample, &r.paegan_expected, &r.paegan_sample};
      for (int i = 0; i < 5; ++i) {
        Image buf(px);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(px * sizeof(float)));
        if (!in) throw std::runtime_error("records file '" + path.string() + "' is truncated");
        if (i == 0 || (flags & bits[i])) *imgs[i] = std::move(buf);
      }
    }
  if (image_size_out) *image_size_out = S;
  return eps;
}

}  // namespace paegan::eval
