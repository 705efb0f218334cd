#pragma once

// Ground-truth ball world: transition, rendering and structured
// measurements. All functions are pure in (state, config, rng).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "paegan/rng.hpp"
#include "paegan/world/types.hpp"

namespace paegan::world {

/// Independent noise stream per ball, so that with phase-through dynamics a
/// ball's trajectory depends only on its own stream.
class BallStreams {
 public:
  BallStreams(std::uint64_t seed, std::size_t num_balls) {
    streams_.reserve(num_balls);
    for (std::size_t i = 0; i < num_balls; ++i) streams_.emplace_back(seed, std::initializer_list<std::uint64_t>{i});
  }
  explicit BallStreams(std::vector<Rng> streams) : streams_(std::move(streams)) {}

  Rng& ball(std::size_t i) { return streams_.at(i); }
  std::size_t size() const { return streams_.size(); }

 private:
  std::vector<Rng> streams_;
};

struct StepStats {
  int wall_bounces = 0;
  int ball_collisions = 0;
};

namespace detail {
// Reflects a coordinate into [lo, hi], flipping the velocity per bounce.
inline int reflect(double& x, double& v, double lo, double hi) {
  int bounces = 0;
  for (int guard = 0; guard < 8 && (x < lo || x > hi); ++guard) {
    if (x < lo) {
      x = 2 * lo - x;
    } else {
      x = 2 * hi - x;
    }
    v = -v;
    ++bounces;
  }
  x = std::clamp(x, lo, hi);
  return bounces;
}

inline void clamp_into(Vec2& p, const WorldConfig& cfg) {
  p.x = std::clamp(p.x, cfg.lo(), cfg.hi());
  p.y = std::clamp(p.y, cfg.lo(), cfg.hi());
}
}  // namespace detail

/// Resolves contact between balls i and j: symmetric push-out along the
/// centre line, then an equal-mass elastic exchange of the normal velocity
/// components if the balls are approaching. Returns true on contact.
inline bool resolve_collision(EnvState& s, std::size_t i, std::size_t j, const WorldConfig& cfg) {
  Vec2& pi = s.positions[i];
  Vec2& pj = s.positions[j];
  const Vec2 d = pj - pi;
  const double dist = d.norm();
  const double contact = 2 * cfg.ball_radius;
  if (dist >= contact) return false;
  const Vec2 n = dist > 0 ? (1.0 / dist) * d : Vec2{1.0, 0.0};
  const double half = 0.5 * (contact - dist);
  pi = pi - half * n;
  pj = pj + half * n;
  detail::clamp_into(pi, cfg);
  detail::clamp_into(pj, cfg);
  Vec2& vi = s.velocities[i];
  Vec2& vj = s.velocities[j];
  const double approach = (vi - vj).dot(n);
  if (approach > 0) {
    vi = vi - approach * n;
    vj = vj + approach * n;
  }
  return true;
}

/// Noise-free part of a transition: move, reflect off walls, resolve
/// ball-ball contacts in index order (bounce mode only).
inline EnvState advance(const EnvState& state, const WorldConfig& cfg, StepStats* stats = nullptr) {
  EnvState next = state;
  StepStats local;
  for (std::size_t b = 0; b < next.num_balls(); ++b) {
    Vec2& p = next.positions[b];
    Vec2& v = next.velocities[b];
    p = p + v;
    local.wall_bounces += detail::reflect(p.x, v.x, cfg.lo(), cfg.hi());
    local.wall_bounces += detail::reflect(p.y, v.y, cfg.lo(), cfg.hi());
  }
  if (cfg.collision_mode == CollisionMode::bounce) {
    for (std::size_t i = 0; i < next.num_balls(); ++i)
      for (std::size_t j = i + 1; j < next.num_balls(); ++j)
        if (resolve_collision(next, i, j, cfg)) ++local.ball_collisions;
  }
  if (stats) *stats = local;
  return next;
}

/// Full transition with Gaussian velocity noise applied after collisions;
/// `noise(b)` must return a pair of standard normals for ball b.
template <class NoiseFn>
EnvState step_with(const EnvState& state, const WorldConfig& cfg, NoiseFn&& noise, StepStats* stats = nullptr) {
  EnvState next = advance(state, cfg, stats);
  if (cfg.process_noise_sigma > 0) {
    for (std::size_t b = 0; b < next.num_balls(); ++b) {
      const Vec2 z = noise(b);
      next.velocities[b] = next.velocities[b] + cfg.process_noise_sigma * z;
    }
  }
  return next;
}

inline EnvState step(const EnvState& state, const WorldConfig& cfg, BallStreams& rng, StepStats* stats = nullptr) {
  if (rng.size() < state.num_balls()) throw std::invalid_argument("step: fewer noise streams than balls");
  return step_with(
      state, cfg,
      [&](std::size_t b) {
        const double x = rng.ball(b).normal();
        return Vec2{x, rng.ball(b).normal()};
      },
      stats);
}

/// Single-stream variant; draws are taken ball by ball.
inline EnvState step(const EnvState& state, const WorldConfig& cfg, Rng& rng, StepStats* stats = nullptr) {
  return step_with(
      state, cfg,
      [&](std::size_t) {
        const double x = rng.normal();
        return Vec2{x, rng.normal()};
      },
      stats);
}

/// Uniform positions inside the arena (without overlap in bounce mode) and
/// velocity directions uniform on the circle with magnitude cfg.speed.
inline EnvState sample_initial_state(const WorldConfig& cfg, Rng& rng) {
  EnvState s;
  const auto n = static_cast<std::size_t>(cfg.num_balls);
  for (std::size_t b = 0; b < n; ++b) {
    Vec2 p;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw std::runtime_error("sample_initial_state: cannot place balls without overlap");
      p = {rng.uniform(cfg.lo(), cfg.hi()), rng.uniform(cfg.lo(), cfg.hi())};
      if (cfg.collision_mode != CollisionMode::bounce) break;
      const bool clear = std::all_of(s.positions.begin(), s.positions.end(),
                                     [&](Vec2 q) { return (p - q).norm() >= 2 * cfg.ball_radius; });
      if (clear) break;
    }
    const double angle = rng.uniform(0.0, 2 * std::numbers::pi);
    s.positions.push_back(p);
    s.velocities.push_back({cfg.speed * std::cos(angle), cfg.speed * std::sin(angle)});
  }
  return s;
}

/// Sum of isotropic Gaussian blobs, one per ball, clamped to [0,1].
inline Observation render(const EnvState& state, const WorldConfig& cfg) {
  Observation obs(cfg.image_size);
  if (state.num_balls() == 0) return obs;
  const double scale = cfg.scale();
  const double sigma = cfg.render_sharpness * cfg.ball_radius * scale;
  const double inv2s2 = 1.0 / (2 * sigma * sigma);
  const auto S = static_cast<std::size_t>(cfg.image_size);
  std::vector<double> acc(S * S, 0.0), gx(S), gy(S);
  for (std::size_t b = 0; b < state.num_balls(); ++b) {
    const double cx = state.positions[b].x * scale, cy = state.positions[b].y * scale;
    // The blob is separable: exp(-(dx^2+dy^2)/2s^2) = exp(-dx^2/2s^2) exp(-dy^2/2s^2).
    for (std::size_t i = 0; i < S; ++i) {
      const double c = static_cast<double>(i) + 0.5;
      gx[i] = std::exp(-(c - cx) * (c - cx) * inv2s2);
      gy[i] = std::exp(-(c - cy) * (c - cy) * inv2s2);
    }
    for (std::size_t row = 0; row < S; ++row)
      for (std::size_t col = 0; col < S; ++col) acc[row * S + col] += gy[row] * gx[col];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) obs.pixels[i] = static_cast<float>(std::clamp(acc[i], 0.0, 1.0));
  return obs;
}

inline Observation null_observation(const WorldConfig& cfg) { return Observation(cfg.image_size, true); }

inline PositionMeasurement measure(const EnvState& state, const WorldConfig& cfg, Rng& rng) {
  PositionMeasurement m;
  m.measured_positions.reserve(state.num_balls());
  for (const Vec2& p : state.positions) {
    if (cfg.measurement_noise_sigma > 0) {
      const double dx = rng.normal(), dy = rng.normal();
      m.measured_positions.push_back({p.x + cfg.measurement_noise_sigma * dx, p.y + cfg.measurement_noise_sigma * dy});
    } else {
      m.measured_positions.push_back(p);
    }
  }
  return m;
}

inline double kinetic_energy(const EnvState& s) {
  double e = 0;
  for (const Vec2& v : s.velocities) e += 0.5 * v.dot(v);
  return e;
}

inline Vec2 momentum(const EnvState& s) {
  Vec2 p;
  for (const Vec2& v : s.velocities) p = p + v;
  return p;
}

}  // namespace paegan::world
