#pragma once

// Episode datasets and their on-disk format: a single JSON header line,
// float32 frames (episode-major, time-major, row-major), then optionally
// float32 ground-truth states (x, y, vx, vy per ball).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "paegan/nn/checkpoint.hpp"
#include "paegan/rng.hpp"
#include "paegan/world/simulate.hpp"

namespace paegan::world {

inline constexpr const char* kEpisodeFormat = "paegan-episodes/1";

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpisodeSet {
  WorldConfig cfg;
  std::size_t episodes = 0;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::vector<float> frames;
  std::vector<float> states;  // empty when ground truth is not stored

  std::size_t frame_size() const {
    return static_cast<std::size_t>(cfg.image_size) * static_cast<std::size_t>(cfg.image_size);
  }
  std::size_t state_size() const { return 4 * static_cast<std::size_t>(cfg.num_balls); }
  std::size_t num_frames() const { return episodes * steps; }
  bool has_states() const { return !states.empty(); }

  std::span<const float> frame(std::size_t episode, std::size_t t) const {
    return {frames.data() + (episode * steps + t) * frame_size(), frame_size()};
  }
  std::span<const float> episode_frames(std::size_t episode) const {
    return {frames.data() + episode * steps * frame_size(), steps * frame_size()};
  }

  EnvState state(std::size_t episode, std::size_t t) const {
    if (!has_states()) throw DatasetError("dataset has no ground-truth states");
    const float* s = states.data() + (episode * steps + t) * state_size();
    EnvState out;
    for (int b = 0; b < cfg.num_balls; ++b, s += 4) {
      out.positions.push_back({s[0], s[1]});
      out.velocities.push_back({s[2], s[3]});
    }
    return out;
  }

  /// Episodes [first, first + count) as a new set.
  EpisodeSet subset(std::size_t first, std::size_t count) const {
    if (first + count > episodes) throw DatasetError("subset out of range");
    EpisodeSet out;
    out.cfg = cfg;
    out.episodes = count;
    out.steps = steps;
    out.seed = seed;
    const std::size_t fs = steps * frame_size();
    out.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(first * fs),
                      frames.begin() + static_cast<std::ptrdiff_t>((first + count) * fs));
    if (has_states()) {
      const std::size_t ss = steps * state_size();
      out.states.assign(states.begin() + static_cast<std::ptrdiff_t>(first * ss),
                        states.begin() + static_cast<std::ptrdiff_t>((first + count) * ss));
    }
    return out;
  }
};

/// Seeds for episode e: initial state from Rng(seed, {e, 0}); process noise
/// for ball b from Rng(episode_noise_seed(seed, e), {b}).
inline std::uint64_t episode_noise_seed(std::uint64_t seed, std::size_t episode) {
  return Rng::derive(seed, {episode, 1});
}

/// Ground-truth trajectory of one episode (steps states, starting with the
/// initial state).
inline std::vector<EnvState> simulate_episode(const WorldConfig& cfg, std::size_t steps, std::uint64_t seed,
                                              std::size_t episode) {
  Rng init(seed, {episode, 0});
  BallStreams noise(episode_noise_seed(seed, episode), static_cast<std::size_t>(cfg.num_balls));
  std::vector<EnvState> traj;
  traj.reserve(steps);
  traj.push_back(sample_initial_state(cfg, init));
  for (std::size_t t = 1; t < steps; ++t) traj.push_back(step(traj.back(), cfg, noise));
  return traj;
}

inline EpisodeSet generate_dataset(const WorldConfig& cfg, std::size_t episodes, std::size_t steps,
                                   std::uint64_t seed, bool store_states = true) {
  cfg.validate();
  if (episodes < 1) throw std::invalid_argument("generate_dataset: episodes must be >= 1");
  if (steps < 1) throw std::invalid_argument("generate_dataset: steps must be >= 1");
  EpisodeSet set;
  set.cfg = cfg;
  set.episodes = episodes;
  set.steps = steps;
  set.seed = seed;
  set.frames.resize(episodes * steps * set.frame_size());
  if (store_states) set.states.resize(episodes * steps * set.state_size());
  for (std::size_t e = 0; e < episodes; ++e) {
    const auto traj = simulate_episode(cfg, steps, seed, e);
    for (std::size_t t = 0; t < steps; ++t) {
      const Observation obs = render(traj[t], cfg);
      std::copy(obs.pixels.begin(), obs.pixels.end(),
                set.frames.begin() + static_cast<std::ptrdiff_t>((e * steps + t) * set.frame_size()));
      if (store_states) {
        float* s = set.states.data() + (e * steps + t) * set.state_size();
        for (std::size_t b = 0; b < traj[t].num_balls(); ++b, s += 4) {
          s[0] = static_cast<float>(traj[t].positions[b].x);
          s[1] = static_cast<float>(traj[t].positions[b].y);
          s[2] = static_cast<float>(traj[t].velocities[b].x);
          s[3] = static_cast<float>(traj[t].velocities[b].y);
        }
      }
    }
  }
  return set;
}

inline nlohmann::json dataset_header(const EpisodeSet& set) {
  return {{"format", kEpisodeFormat},
          {"episodes", set.episodes},
          {"steps", set.steps},
          {"height", set.cfg.image_size},
          {"width", set.cfg.image_size},
          {"num_balls", set.cfg.num_balls},
          {"cfg", set.cfg},
          {"seed", set.seed},
          {"has_states", set.has_states()},
          {"dtype", "float32"}};
}

inline std::string serialize_dataset(const EpisodeSet& set) {
  std::string out = dataset_header(set).dump();
  out.push_back('\n');
  const std::size_t header = out.size();
  const std::size_t fb = set.frames.size() * sizeof(float), sb = set.states.size() * sizeof(float);
  out.resize(header + fb + sb);
  if (fb) std::memcpy(out.data() + header, set.frames.data(), fb);
  if (sb) std::memcpy(out.data() + header + fb, set.states.data(), sb);
  return out;
}

/// The header line alone (used for dataset identity checks).
inline std::string read_dataset_header_line(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw DatasetError("dataset '" + path.string() + "' is empty");
  return line;
}

inline EpisodeSet deserialize_dataset(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw DatasetError("dataset: missing header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("dataset: bad header: ") + e.what());
  }
  if (h.value("format", "") != kEpisodeFormat) throw DatasetError("dataset: unknown format");
  EpisodeSet set;
  try {
    set.cfg = h.at("cfg").get<WorldConfig>();
    set.episodes = h.at("episodes").get<std::size_t>();
    set.steps = h.at("steps").get<std::size_t>();
    set.seed = h.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("dataset: bad header field: ") + e.what());
  }
  set.cfg.validate();
  const bool has_states = h.value("has_states", false);
  const std::size_t nf = set.episodes * set.steps * set.frame_size();
  const std::size_t ns = has_states ? set.episodes * set.steps * set.state_size() : 0;
  if (bytes.size() - nl - 1 != (nf + ns) * sizeof(float)) throw DatasetError("dataset: payload size mismatch");
  set.frames.resize(nf);
  set.states.resize(ns);
  if (nf) std::memcpy(set.frames.data(), bytes.data() + nl + 1, nf * sizeof(float));
  if (ns) std::memcpy(set.states.data(), bytes.data() + nl + 1 + nf * sizeof(float), ns * sizeof(float));
  return set;
}

inline void save_dataset(const EpisodeSet& set, const std::filesystem::path& path) {
  nn::write_file_bytes(path, serialize_dataset(set));
}

inline EpisodeSet load_dataset(const std::filesystem::path& path) {
  return deserialize_dataset(nn::read_file_bytes(path));
}

}  // namespace paegan::world
