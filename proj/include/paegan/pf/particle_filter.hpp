#pragma once

// Sequential Monte Carlo tracker that uses the true world dynamics and a
// Gaussian position likelihood.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "paegan/rng.hpp"
#include "paegan/world/simulate.hpp"

namespace paegan::pf {

using world::EnvState;
using world::Observation;
using world::PositionMeasurement;
using world::Vec2;
using world::WorldConfig;

struct PFConfig {
  std::size_t num_particles = 1000;
  double likelihood_sigma = 0.5;    // matched to the world's measurement noise by default
  double resample_threshold = 0.5;  // resample when ESS < threshold * n
  WorldConfig world;

  /// Filter whose likelihood matches the world's sensor.
  static PFConfig matched(const WorldConfig& w, std::size_t n = 1000) {
    PFConfig c;
    c.num_particles = n;
    c.likelihood_sigma = w.measurement_noise_sigma;
    c.world = w;
    return c;
  }

  void validate() const {
    if (num_particles < 1) throw std::invalid_argument("pf config: num_particles must be >= 1");
    if (!(likelihood_sigma > 0) || !std::isfinite(likelihood_sigma)) {
      throw std::invalid_argument("pf config: likelihood_sigma must be positive");
    }
    if (!(resample_threshold > 0 && resample_threshold <= 1)) {
      throw std::invalid_argument("pf config: resample_threshold must lie in (0, 1]");
    }
    world.validate();
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PFConfig, num_particles, likelihood_sigma, resample_threshold, world)

struct ParticleSet {
  std::vector<EnvState> particles;
  std::vector<double> weights;

  std::size_t size() const { return particles.size(); }
};

/// Effective sample size 1 / sum(w^2) of normalised weights.
inline double effective_sample_size(const ParticleSet& ps) {
  double s = 0.0;
  for (double w : ps.weights) s += w * w;
  return s > 0 ? 1.0 / s : 0.0;
}

inline ParticleSet pf_init(const PFConfig& cfg, Rng& rng) {
  cfg.validate();
  ParticleSet ps;
  ps.particles.reserve(cfg.num_particles);
  for (std::size_t i = 0; i < cfg.num_particles; ++i) ps.particles.push_back(world::sample_initial_state(cfg.world, rng));
  ps.weights.assign(cfg.num_particles, 1.0 / static_cast<double>(cfg.num_particles));
  return ps;
}

/// Advances every particle one step with the world dynamics; draws are
/// taken particle by particle from `rng`.
inline ParticleSet pf_predict(const ParticleSet& ps, const PFConfig& cfg, Rng& rng) {
  ParticleSet out;
  out.particles.reserve(ps.size());
  for (const auto& p : ps.particles) out.particles.push_back(world::step(p, cfg.world, rng));
  out.weights = ps.weights;
  return out;
}

/// Systematic resampling: one uniform offset, n evenly spaced pointers.
inline ParticleSet pf_resample(const ParticleSet& ps, Rng& rng) {
  const std::size_t n = ps.size();
  ParticleSet out;
  out.particles.reserve(n);
  const double step = 1.0 / static_cast<double>(n);
  double u = rng.uniform() * step;
  double cum = ps.weights.empty() ? 0.0 : ps.weights[0];
  std::size_t i = 0;
  for (std::size_t k = 0; k < n; ++k) {
    while (u > cum && i + 1 < n) cum += ps.weights[++i];
    out.particles.push_back(ps.particles[i]);
    u += step;
  }
  out.weights.assign(n, step);
  return out;
}

/// Smallest summed squared distance between the particle's balls and the
/// measured positions over all ball-to-measurement assignments.
inline double min_assignment_sq_distance(const EnvState& s, const PositionMeasurement& z) {
  const std::size_t n = s.num_balls();
  if (z.measured_positions.size() != n) throw std::invalid_argument("pf_update: measurement/ball count mismatch");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double d = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const Vec2 diff = s.positions[b] - z.measured_positions[perm[b]];
      d += diff.dot(diff);
    }
    best = std::min(best, d);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

struct UpdateInfo {
  double ess = 0.0;      // after reweighting, before any resampling
  bool resampled = false;
  bool diverged = false;  // every likelihood underflowed; weights were reset
};

/// Reweights by the measurement likelihood in log space, renormalises and
/// resamples when the ESS drops below threshold * n.
inline ParticleSet pf_update(const ParticleSet& ps, const PositionMeasurement& z, const PFConfig& cfg, Rng& rng,
                             UpdateInfo* info = nullptr) {
  const std::size_t n = ps.size();
  const double inv2s2 = 1.0 / (2.0 * cfg.likelihood_sigma * cfg.likelihood_sigma);
  std::vector<double> logw(n);
  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const double prior = ps.weights[i];
    const double lw = (prior > 0 ? std::log(prior) : -std::numeric_limits<double>::infinity()) -
                      min_assignment_sq_distance(ps.particles[i], z) * inv2s2;
    logw[i] = std::isnan(lw) ? -std::numeric_limits<double>::infinity() : lw;
    max_log = std::max(max_log, logw[i]);
  }
  ParticleSet out{ps.particles, std::vector<double>(n)};
  UpdateInfo local;
  if (!std::isfinite(max_log)) {
    local.diverged = true;
    std::fill(out.weights.begin(), out.weights.end(), 1.0 / static_cast<double>(n));
  } else {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += out.weights[i] = std::exp(logw[i] - max_log);
    for (double& w : out.weights) w /= total;
  }
  local.ess = effective_sample_size(out);
  if (local.ess < cfg.resample_threshold * static_cast<double>(n)) {
    out = pf_resample(out, rng);
    local.resampled = true;
  }
  if (info) *info = local;
  return out;
}

/// Particle set after the first measurement, drawn directly from the
/// posterior instead of reweighting prior draws. Positions come from the
/// likelihood truncated to the arena (ball b near z_b), velocities from the
/// prior. Under the uniform position prior this proposal is exact up to the
/// ball-to-measurement assignment, which the weights correct for. Starting
/// from pf_init and pf_update instead leaves a handful of survivors out of n
/// and almost no velocity diversity.
inline ParticleSet pf_init_from_measurement(const PFConfig& cfg, const PositionMeasurement& z, Rng& rng,
                                            UpdateInfo* info = nullptr) {
  cfg.validate();
  const auto& w = cfg.world;
  const std::size_t nb = static_cast<std::size_t>(w.num_balls);
  if (z.measured_positions.size() != nb) throw std::invalid_argument("pf_init_from_measurement: measurement/ball count mismatch");
  const double s = cfg.likelihood_sigma, inv2s2 = 1.0 / (2.0 * s * s);
  ParticleSet ps;
  ps.particles.reserve(cfg.num_particles);
  std::vector<double> logw(cfg.num_particles);
  for (std::size_t i = 0; i < cfg.num_particles; ++i) {
    EnvState st;
    for (std::size_t b = 0; b < nb; ++b) {
      Vec2 p;
      for (int attempt = 0;; ++attempt) {
        // A measurement far outside the arena leaves the prior as the only option.
        if (attempt > 10000) {
          p = {rng.uniform(w.lo(), w.hi()), rng.uniform(w.lo(), w.hi())};
        } else {
          p = {z.measured_positions[b].x + s * rng.normal(), z.measured_positions[b].y + s * rng.normal()};
          if (p.x < w.lo() || p.x > w.hi() || p.y < w.lo() || p.y > w.hi()) continue;
        }
        if (w.collision_mode != world::CollisionMode::bounce) break;
        const bool clear = std::all_of(st.positions.begin(), st.positions.end(),
                                       [&](Vec2 q) { return (p - q).norm() >= 2 * w.ball_radius; });
        if (clear || attempt > 20000) break;
      }
      const double angle = rng.uniform(0.0, 2 * std::numbers::pi);
      st.positions.push_back(p);
      st.velocities.push_back({w.speed * std::cos(angle), w.speed * std::sin(angle)});
    }
    double identity = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      const Vec2 d = st.positions[b] - z.measured_positions[b];
      identity += d.dot(d);
    }
    logw[i] = (identity - min_assignment_sq_distance(st, z)) * inv2s2;
    ps.particles.push_back(std::move(st));
  }
  const double max_log = *std::max_element(logw.begin(), logw.end());
  double total = 0.0;
  ps.weights.resize(cfg.num_particles);
  for (std::size_t i = 0; i < cfg.num_particles; ++i) total += ps.weights[i] = std::exp(logw[i] - max_log);
  for (double& x : ps.weights) x /= total;
  UpdateInfo local;
  local.ess = effective_sample_size(ps);
  if (local.ess < cfg.resample_threshold * static_cast<double>(cfg.num_particles)) {
    ps = pf_resample(ps, rng);
    local.resampled = true;
  }
  if (info) *info = local;
  return ps;
}

inline Vec2 weighted_mean_position(const ParticleSet& ps, std::size_t ball = 0) {
  Vec2 m;
  for (std::size_t i = 0; i < ps.size(); ++i) m = m + ps.weights[i] * ps.particles[i].positions.at(ball);
  return m;
}

/// Weighted average of the particle renders, clamped to [0,1].
inline Observation pf_expected_observation(const ParticleSet& ps, const PFConfig& cfg) {
  const std::size_t px = static_cast<std::size_t>(cfg.world.image_size) * static_cast<std::size_t>(cfg.world.image_size);
  std::vector<double> acc(px, 0.0);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps.weights[i] == 0.0) continue;
    const Observation r = world::render(ps.particles[i], cfg.world);
    for (std::size_t p = 0; p < px; ++p) acc[p] += ps.weights[i] * r.pixels[p];
  }
  Observation obs(cfg.world.image_size);
  for (std::size_t p = 0; p < px; ++p) obs.pixels[p] = static_cast<float>(std::clamp(acc[p], 0.0, 1.0));
  return obs;
}

/// Index drawn with probability equal to its weight.
inline std::size_t draw_particle(const ParticleSet& ps, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    cum += ps.weights[i];
    if (u < cum) return i;
  }
  // Rounding left the cumulative sum just below 1: take the last live particle.
  for (std::size_t i = ps.size(); i-- > 0;)
    if (ps.weights[i] > 0) return i;
  return ps.size() - 1;
}

inline Observation pf_sample_observation(const ParticleSet& ps, const PFConfig& cfg, Rng& rng) {
  return world::render(ps.particles[draw_particle(ps, rng)], cfg.world);
}

inline void write_particle_csv_header(std::ostream& os) { os << "t,particle_id,weight,x,y,vx,vy\n"; }

/// One row per particle and ball; multi-ball particles repeat the id.
inline void write_particle_csv(std::ostream& os, std::size_t t, const ParticleSet& ps) {
  char buf[256];
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& s = ps.particles[i];
    for (std::size_t b = 0; b < s.num_balls(); ++b) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", t, i, ps.weights[i], s.positions[b].x,
                    s.positions[b].y, s.velocities[b].x, s.velocities[b].y);
      os << buf;
    }
  }
}

}  // namespace paegan::pf
