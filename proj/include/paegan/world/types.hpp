#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace paegan::world {

enum class CollisionMode { phase_through, bounce };

inline void to_json(nlohmann::json& j, CollisionMode m) { j = m == CollisionMode::bounce ? "bounce" : "phase_through"; }

inline void from_json(const nlohmann::json& j, CollisionMode& m) {
  const std::string s = j.get<std::string>();
  if (s == "phase_through") {
    m = CollisionMode::phase_through;
  } else if (s == "bounce") {
    m = CollisionMode::bounce;
  } else {
    throw std::invalid_argument("collision_mode must be phase_through or bounce, got '" + s + "'");
  }
}

/// Parameters of the ball world. One world unit maps to
/// image_size / world_size pixels.
struct WorldConfig {
  int num_balls = 1;
  double world_size = 28.0;
  double ball_radius = 2.5;
  double speed = 1.0;
  double process_noise_sigma = 0.05;
  CollisionMode collision_mode = CollisionMode::phase_through;
  double measurement_noise_sigma = 0.5;
  int image_size = 28;
  double render_sharpness = 0.6;

  double scale() const { return static_cast<double>(image_size) / world_size; }
  double lo() const { return ball_radius; }
  double hi() const { return world_size - ball_radius; }

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("world config: " + m); };
    if (num_balls < 0) fail("num_balls must be non-negative");
    if (!(world_size > 0) || !std::isfinite(world_size)) fail("world_size must be positive");
    if (!(ball_radius > 0) || !(ball_radius < world_size / 2)) fail("ball_radius must lie in (0, world_size/2)");
    if (!(speed >= 0) || !std::isfinite(speed)) fail("speed must be finite and non-negative");
    if (!(process_noise_sigma >= 0) || !std::isfinite(process_noise_sigma)) fail("process_noise_sigma must be >= 0");
    if (!(measurement_noise_sigma >= 0) || !std::isfinite(measurement_noise_sigma)) {
      fail("measurement_noise_sigma must be >= 0");
    }
    if (image_size < 1) fail("image_size must be positive");
    if (!(render_sharpness > 0)) fail("render_sharpness must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WorldConfig, num_balls, world_size, ball_radius, speed,
                                                process_noise_sigma, collision_mode, measurement_noise_sigma,
                                                image_size, render_sharpness)

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
};

/// Positions and velocities of every ball.
struct EnvState {
  std::vector<Vec2> positions;
  std::vector<Vec2> velocities;

  std::size_t num_balls() const { return positions.size(); }
  friend bool operator==(const EnvState&, const EnvState&) = default;
};

/// Image observation in [0,1], or the all-zero null observation.
struct Observation {
  int size = 0;
  std::vector<float> pixels;
  bool is_null = false;

  Observation() = default;
  explicit Observation(int image_size, bool null = false)
      : size(image_size), pixels(static_cast<std::size_t>(image_size) * static_cast<std::size_t>(image_size), 0.0f),
        is_null(null) {}

  float at(int row, int col) const { return pixels[static_cast<std::size_t>(row * size + col)]; }
  friend bool operator==(const Observation&, const Observation&) = default;
};

/// Noisy per-ball position readings.
struct PositionMeasurement {
  std::vector<Vec2> measured_positions;
};

}  // namespace paegan::world
