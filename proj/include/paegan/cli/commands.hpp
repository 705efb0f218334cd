#pragma once

// Command-line front end: gen-data, train-pae, train-sampler, evaluate,
// render and pf-run. run_cli() parses an argv-style vector so the commands
// can be driven in-process by tests.

#include <openssl/evp.h>

#include <Eigen/Core>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "paegan/eval/harness.hpp"
#include "paegan/model/train_gan.hpp"
#include "paegan/model/train_pae.hpp"
#include "paegan/nn/checkpoint.hpp"

namespace paegan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kManifestFormat = "paegan-manifest/1";

/// Bad flags, config values or stage order; exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Files and hashes

inline std::string hex(const unsigned char* d, std::size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (std::size_t i = 0; i < n; ++i) {
    s.push_back(digits[d[i] >> 4]);
    s.push_back(digits[d[i] & 15]);
  }
  return s;
}

inline std::string sha256(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  return hex(digest, len);
}

inline std::string sha256_file(const fs::path& path) { return sha256(nn::read_file_bytes(path)); }

/// Writes to a sibling temporary and renames, so an interrupted run never
/// leaves a half-written file under the final name.
inline void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  nn::write_file_bytes(tmp, bytes);
  fs::rename(tmp, path);
}

inline void write_json(const fs::path& path, const json& j) { write_atomic(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(nn::read_file_bytes(path));
  } catch (const json::exception& e) {
    throw std::runtime_error("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline json file_entry(const fs::path& path) { return {{"path", path.string()}, {"sha256", sha256_file(path)}}; }

inline fs::path default_out_dir() {
  const char* env = std::getenv("PAEGAN_OUT_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

inline fs::path sidecar_path(const fs::path& ckpt) { return ckpt.string() + ".json"; }
inline fs::path manifest_path(const fs::path& artifact) { return artifact.string() + ".manifest.json"; }

inline json manifest(const std::string& command, const json& config, std::uint64_t seed) {
  return {{"format", kManifestFormat}, {"command", command}, {"config", config}, {"seed", seed},
          {"inputs", json::object()}, {"outputs", json::object()}};
}

/// Trajectory identity of a dataset: world settings and generation seed.
/// Two files with equal keys share episode trajectories regardless of length.
inline std::string trajectory_key(const world::EpisodeSet& d) {
  return sha256(json{{"cfg", d.cfg}, {"seed", d.seed}}.dump());
}

inline world::EpisodeSet load_dataset_checked(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("dataset '" + path.string() + "' not found (run gen-data first)");
  return world::load_dataset(path);
}

/// Episodes used for training: all but the last `holdout` fraction.
inline std::size_t train_episode_count(std::size_t episodes, double holdout) {
  const auto held = static_cast<std::size_t>(std::floor(holdout * static_cast<double>(episodes)));
  return std::max<std::size_t>(1, episodes - std::min(held, episodes - 1));
}

// ---------------------------------------------------------------------------
// Loss logs

/// Keeps the header and the first `rows` data rows of an existing log.
inline void truncate_log(const fs::path& path, std::size_t rows) {
  std::ifstream in(path);
  std::string line, kept;
  for (std::size_t i = 0; i <= rows && std::getline(in, line); ++i) kept += line + "\n";
  in.close();
  write_atomic(path, kept);
}

inline std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Model files

template <class T>
nn::ParamStore<T> merged(const nn::ParamStore<T>& a, const nn::ParamStore<T>& b) {
  nn::ParamStore<T> out;
  for (const auto* s : {&a, &b})
    for (const auto& [key, p] : *s) {
      auto& q = out.add(key, p.value);
      q.m = p.m;
      q.v = p.v;
      q.step = p.step;
    }
  return out;
}

template <class T>
void split_into(const nn::ParamStore<T>& from, nn::ParamStore<T>& to) {
  for (auto& [key, p] : to) {
    const auto& q = from.at(key);
    p.value = q.value;
    p.m = q.m;
    p.v = q.v;
    p.step = q.step;
  }
}

struct LoadedPae {
  model::Pae<float> model;
  json sidecar;
};

inline LoadedPae load_pae(const fs::path& path, const std::string& needed_by) {
  if (!fs::exists(path) || !fs::exists(sidecar_path(path))) {
    throw UsageError(needed_by + " needs a trained PAE: '" + path.string() + "' (and its .json sidecar) not found; run train-pae first");
  }
  json side = read_json(sidecar_path(path));
  if (side.value("stage", "") != "pae") throw UsageError("'" + path.string() + "' is not a PAE checkpoint");
  const auto done = side.value("completed_updates", std::size_t{0});
  const auto want = side.at("training").value("updates", std::size_t{0});
  if (done < want) {
    std::cerr << "warning: PAE checkpoint '" << path.string() << "' stopped at update " << done << " of " << want << "\n";
  }
  LoadedPae out{model::make_pae<float>(side.at("model").get<model::PaeConfig>(), 0), side};
  nn::load_params(out.model.params, path);
  return out;
}

struct LoadedSampler {
  model::Sampler<float> sampler;
  model::Discriminator<float> disc;
  json sidecar;
};

inline LoadedSampler load_sampler(const fs::path& path) {
  if (!fs::exists(path) || !fs::exists(sidecar_path(path))) {
    throw UsageError("sampler checkpoint '" + path.string() + "' (and its .json sidecar) not found; run train-sampler first");
  }
  json side = read_json(sidecar_path(path));
  if (side.value("stage", "") != "sampler") throw UsageError("'" + path.string() + "' is not a sampler checkpoint");
  LoadedSampler out{model::make_sampler<float>(side.at("sampler").get<model::SamplerConfig>(), 0),
                    model::make_discriminator<float>(side.at("discriminator").get<model::DiscriminatorConfig>(), 0), side};
  auto both = merged(out.sampler.params, out.disc.params);
  nn::load_params(both, path);
  split_into(both, out.sampler.params);
  split_into(both, out.disc.params);
  return out;
}

/// Digest of parameter values only; Adam state excluded.
template <class T>
std::string params_digest(const nn::ParamStore<T>& s) {
  return sha256(nn::serialize_params(s, false));
}

// ---------------------------------------------------------------------------
// Options. Each field is overridden by its flag only when the flag is given,
// so the config file supplies everything else.

template <class V>
struct Flag {
  V value{};
  CLI::Option* opt = nullptr;
  bool given() const { return opt && opt->count() > 0; }
  template <class D>
  void apply(D& dst) const {
    if (given()) dst = static_cast<D>(value);
  }
};

template <class V>
void add(CLI::App* app, const std::string& name, Flag<V>& f, const std::string& desc) {
  f.opt = app->add_option(name, f.value, desc);
}

struct Common {
  std::string config;
  int threads = 1;
  std::size_t log_every = 100;
};

inline json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) throw UsageError("config file '" + path + "' not found");
  json j = read_json(path);
  if (!j.is_object()) throw UsageError("config file '" + path + "' must hold a JSON object");
  return j;
}

template <class C>
C section(const json& cfg, const std::string& key) {
  try {
    return cfg.contains(key) ? cfg.at(key).get<C>() : C{};
  } catch (const json::exception& e) {
    throw UsageError("config section '" + key + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOptions {
  Flag<int> balls;
  Flag<std::size_t> episodes, steps;
  Flag<std::uint64_t> seed;
  Flag<std::string> collision;
  Flag<double> process_noise, measurement_noise, speed;
  Flag<int> image_size;
  bool no_states = false;
  std::string out;
};

inline int cmd_gen_data(const Common& c, const GenDataOptions& o, std::ostream& out) {
  const json cfg = load_config(c.config);
  world::WorldConfig wc = section<world::WorldConfig>(cfg, "world");
  json ds = cfg.value("dataset", json::object());
  std::size_t episodes = ds.value("episodes", std::size_t{2000}), steps = ds.value("steps", std::size_t{100});
  std::uint64_t seed = ds.value("seed", cfg.value("seed", std::uint64_t{0}));
  bool states = ds.value("store_states", true);
  o.balls.apply(wc.num_balls);
  o.episodes.apply(episodes);
  o.steps.apply(steps);
  o.seed.apply(seed);
  o.process_noise.apply(wc.process_noise_sigma);
  o.measurement_noise.apply(wc.measurement_noise_sigma);
  o.speed.apply(wc.speed);
  o.image_size.apply(wc.image_size);
  if (o.collision.given()) {
    if (o.collision.value == "phase_through") {
      wc.collision_mode = world::CollisionMode::phase_through;
    } else if (o.collision.value == "bounce") {
      wc.collision_mode = world::CollisionMode::bounce;
    } else {
      throw UsageError("--collision must be phase_through or bounce");
    }
  }
  if (o.no_states) states = false;
  if (episodes < 1 || steps < 1) throw UsageError("--episodes and --steps must be >= 1");
  wc.validate();

  const fs::path path = o.out.empty() ? default_out_dir() / "episodes.bin" : fs::path(o.out);
  const auto set = world::generate_dataset(wc, episodes, steps, seed, states);
  write_atomic(path, world::serialize_dataset(set));

  json m = manifest("gen-data", {{"world", wc}, {"episodes", episodes}, {"steps", steps}, {"store_states", states}}, seed);
  m["outputs"]["dataset"] = file_entry(path);
  m["header"] = world::dataset_header(set);
  write_json(manifest_path(path), m);
  out << "wrote " << path.string() << ": " << episodes << " episodes x " << steps << " steps, " << wc.image_size << "x"
      << wc.image_size << " px, " << wc.num_balls << " ball(s), seed " << seed << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-pae

struct TrainPaeOptions {
  std::string data, out;
  Flag<std::size_t> updates, batch_size;
  Flag<std::uint64_t> seed;
  Flag<double> lr, holdout;
  std::size_t checkpoint_every = 100;
  std::optional<std::size_t> stop_after;
  bool resume = false;
};

inline int cmd_train_pae(const Common& c, const TrainPaeOptions& o, std::ostream& out) {
  const json cfg = load_config(c.config);
  model::PaeConfig pc = section<model::PaeConfig>(cfg, "pae");
  model::PaeTrainConfig tc = section<model::PaeTrainConfig>(cfg, "pae_training");
  double holdout = cfg.value("holdout_fraction", 0.1);
  if (cfg.contains("seed") && !cfg.contains("pae_training")) tc.seed = cfg.at("seed").get<std::uint64_t>();
  o.updates.apply(tc.updates);
  o.batch_size.apply(tc.batch_size);
  o.seed.apply(tc.seed);
  o.lr.apply(tc.adam.learning_rate);
  o.holdout.apply(holdout);
  if (!(holdout >= 0 && holdout < 1)) throw UsageError("--holdout must lie in [0, 1)");
  if (o.checkpoint_every < 1) throw UsageError("--checkpoint-every must be >= 1");
  tc.validate();

  const fs::path data_path = o.data.empty() ? default_out_dir() / "episodes.bin" : fs::path(o.data);
  const fs::path ckpt = o.out.empty() ? default_out_dir() / "pae.ckpt" : fs::path(o.out);
  const fs::path log_path = ckpt.string() + ".loss.csv";
  const auto data = load_dataset_checked(data_path);
  if (pc.image_size != data.cfg.image_size) {
    std::cerr << "note: PAE image_size set to the dataset's " << data.cfg.image_size << "\n";
    pc.image_size = data.cfg.image_size;
  }
  pc.validate();
  const std::size_t n_train = train_episode_count(data.episodes, holdout);
  const auto train = data.subset(0, n_train);
  const std::uint64_t init_seed = Rng::derive(tc.seed, {0x9ae});

  json side = {{"format", kManifestFormat},
               {"command", "train-pae"},
               {"stage", "pae"},
               {"model", pc},
               {"training", tc},
               {"seed", tc.seed},
               {"init_seed", init_seed},
               {"holdout_fraction", holdout},
               {"train_episodes", n_train},
               {"dataset", {{"path", data_path.string()},
                            {"sha256", sha256_file(data_path)},
                            {"trajectory_key", trajectory_key(data)},
                            {"episodes", data.episodes},
                            {"steps", data.steps}}},
               {"completed_updates", 0}};

  auto m = model::make_pae<float>(pc, init_seed);
  std::size_t begin = 0;
  if (o.resume && fs::exists(ckpt) && fs::exists(sidecar_path(ckpt))) {
    const json prev = read_json(sidecar_path(ckpt));
    for (const char* k : {"stage", "model", "training", "init_seed", "train_episodes"}) {
      if (prev.value(k, json()) != side[k]) throw UsageError(std::string("--resume: '") + k + "' differs from the checkpoint's");
    }
    if (prev["dataset"]["sha256"] != side["dataset"]["sha256"]) throw UsageError("--resume: the dataset differs from the checkpoint's");
    nn::load_params(m.params, ckpt);
    begin = prev.at("completed_updates").get<std::size_t>();
    truncate_log(log_path, begin);
    out << "resuming " << ckpt.string() << " at update " << begin << "\n";
  } else {
    write_atomic(log_path, "update,p_mask,loss\n");
  }
  const std::size_t end = std::min(tc.updates, o.stop_after.value_or(tc.updates));

  std::ofstream log(log_path, std::ios::app | std::ios::binary);
  if (!log) throw std::runtime_error("cannot open '" + log_path.string() + "' for writing");
  double window = 0.0;
  std::size_t wn = 0;
  auto save = [&](std::size_t done) {
    log.flush();
    nn::save_params(m.params, ckpt.string() + ".tmp");
    fs::rename(ckpt.string() + ".tmp", ckpt);
    side["completed_updates"] = done;
    side["outputs"] = {{"checkpoint", file_entry(ckpt)}, {"loss_log", file_entry(log_path)}};
    write_json(sidecar_path(ckpt), side);
  };
  if (begin >= end) save(begin);
  for (std::size_t k = begin; k < end;) {
    const std::size_t stop = std::min(end, k + o.checkpoint_every);
    model::train_pae(m, train, tc, k, stop, [&](const model::PaeLogRow& r) {
      log << r.update << "," << fmt_g(r.p_mask) << "," << fmt_g(r.loss) << "\n";
      window += r.loss;
      ++wn;
      if ((r.update + 1) % c.log_every == 0) {
        std::cerr << "train-pae update " << r.update + 1 << "/" << tc.updates << " p_mask " << fmt_g(r.p_mask)
                  << " loss " << fmt_g(window / static_cast<double>(wn)) << "\n";
        window = 0.0;
        wn = 0;
      }
    });
    k = stop;
    save(k);
  }
  out << "wrote " << ckpt.string() << " (" << end << "/" << tc.updates << " updates, " << n_train
      << " training episodes)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-sampler

struct TrainSamplerOptions {
  std::string data, pae, out;
  Flag<std::size_t> updates, batch_size, n_samples, d_period;
  Flag<std::uint64_t> seed;
  Flag<double> lr, lambda_g, lambda_av;
  std::size_t checkpoint_every = 100;
  std::optional<std::size_t> stop_after;
  bool resume = false;
};

inline int cmd_train_sampler(const Common& c, const TrainSamplerOptions& o, std::ostream& out) {
  const json cfg = load_config(c.config);
  model::SamplerConfig sc = section<model::SamplerConfig>(cfg, "sampler");
  model::DiscriminatorConfig dc = section<model::DiscriminatorConfig>(cfg, "discriminator");
  model::GanTrainConfig gc = section<model::GanTrainConfig>(cfg, "gan_training");
  if (cfg.contains("seed") && !cfg.contains("gan_training")) gc.seed = cfg.at("seed").get<std::uint64_t>();
  o.updates.apply(gc.updates);
  o.batch_size.apply(gc.batch_size);
  o.n_samples.apply(gc.n_samples);
  o.d_period.apply(gc.d_update_period);
  o.seed.apply(gc.seed);
  o.lr.apply(gc.adam.learning_rate);
  o.lambda_g.apply(gc.weights.lambda_g);
  o.lambda_av.apply(gc.weights.lambda_av);
  if (o.checkpoint_every < 1) throw UsageError("--checkpoint-every must be >= 1");
  gc.validate();

  const fs::path pae_path = o.pae.empty() ? default_out_dir() / "pae.ckpt" : fs::path(o.pae);
  const fs::path ckpt = o.out.empty() ? default_out_dir() / "sampler.ckpt" : fs::path(o.out);
  const fs::path log_path = ckpt.string() + ".loss.csv";
  const auto loaded = load_pae(pae_path, "train-sampler");
  const auto& pae = loaded.model;
  const fs::path data_path = !o.data.empty() ? fs::path(o.data) : fs::path(loaded.sidecar["dataset"]["path"].get<std::string>());
  const auto data = load_dataset_checked(data_path);
  if (data.cfg.image_size != pae.cfg.image_size) throw UsageError("dataset and PAE image sizes differ");
  const std::size_t n_train = loaded.sidecar.value("train_episodes", data.episodes);
  const auto train = data.subset(0, std::min(n_train, data.episodes));
  sc.hidden_dim = pae.cfg.hidden_dim;
  dc.image_size = pae.cfg.image_size;
  sc.validate();
  dc.validate();

  const std::string pae_digest = params_digest(pae.params);
  const std::uint64_t s_seed = Rng::derive(gc.seed, {0x5a}), d_seed = Rng::derive(gc.seed, {0xd1});
  json side = {{"format", kManifestFormat},
               {"command", "train-sampler"},
               {"stage", "sampler"},
               {"sampler", sc},
               {"discriminator", dc},
               {"training", gc},
               {"seed", gc.seed},
               {"init_seeds", {s_seed, d_seed}},
               {"pae", {{"path", pae_path.string()}, {"sha256", sha256_file(pae_path)}, {"params_sha256", pae_digest}}},
               {"dataset", {{"path", data_path.string()}, {"sha256", sha256_file(data_path)}}},
               {"train_episodes", train.episodes},
               {"completed_updates", 0}};

  auto sampler = model::make_sampler<float>(sc, s_seed);
  auto disc = model::make_discriminator<float>(dc, d_seed);
  std::size_t begin = 0;
  if (o.resume && fs::exists(ckpt) && fs::exists(sidecar_path(ckpt))) {
    const json prev = read_json(sidecar_path(ckpt));
    for (const char* k : {"stage", "sampler", "discriminator", "training", "pae", "dataset"}) {
      if (prev.value(k, json()) != side[k]) throw UsageError(std::string("--resume: '") + k + "' differs from the checkpoint's");
    }
    auto both = merged(sampler.params, disc.params);
    nn::load_params(both, ckpt);
    split_into(both, sampler.params);
    split_into(both, disc.params);
    begin = prev.at("completed_updates").get<std::size_t>();
    truncate_log(log_path, begin);
    out << "resuming " << ckpt.string() << " at update " << begin << "\n";
  } else {
    write_atomic(log_path, "update,horizon,l_g,l_av,l_sampler,l_d,d_accuracy\n");
  }
  const std::size_t end = std::min(gc.updates, o.stop_after.value_or(gc.updates));
  const auto pool = model::build_belief_pool(pae, train, gc.pool_p_mask, gc.pool_episodes, gc.seed);

  std::ofstream log(log_path, std::ios::app | std::ios::binary);
  if (!log) throw std::runtime_error("cannot open '" + log_path.string() + "' for writing");
  auto save = [&](std::size_t done) {
    log.flush();
    if (params_digest(pae.params) != pae_digest) throw std::runtime_error("train-sampler: PAE parameters changed");
    nn::save_params(merged(sampler.params, disc.params), ckpt.string() + ".tmp");
    fs::rename(ckpt.string() + ".tmp", ckpt);
    side["completed_updates"] = done;
    side["pae_unchanged"] = true;
    side["outputs"] = {{"checkpoint", file_entry(ckpt)}, {"loss_log", file_entry(log_path)}};
    write_json(sidecar_path(ckpt), side);
  };
  if (begin >= end) save(begin);
  for (std::size_t k = begin; k < end;) {
    const std::size_t stop = std::min(end, k + o.checkpoint_every);
    model::train_sampler_gan(pae, sampler, disc, pool, train, gc, k, stop, [&](const model::GanLogRow& r) {
      log << r.update << "," << r.horizon << "," << fmt_g(r.l_g) << "," << fmt_g(r.l_av) << "," << fmt_g(r.l_sampler)
          << "," << fmt_g(r.l_d) << "," << fmt_g(r.d_accuracy) << "\n";
      if ((r.update + 1) % c.log_every == 0) {
        std::cerr << "train-sampler update " << r.update + 1 << "/" << gc.updates << " L_G " << fmt_g(r.l_g)
                  << " L_Av " << fmt_g(r.l_av) << "\n";
      }
    });
    k = stop;
    save(k);
  }
  out << "wrote " << ckpt.string() << " (" << end << "/" << gc.updates << " updates)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate and pf-run

struct EvalOptions {
  std::string data, train_data, pae, sampler, out_dir;
  Flag<double> obs_prob;
  Flag<std::size_t> warmup, horizon, episodes, particles;
  Flag<std::uint64_t> seed;
  std::size_t stride = 10;
  std::size_t save_records = 4;
  bool no_pf = false;
  std::string dump_particles;  // pf-run only
};

inline eval::ProtocolConfig protocol_from(const json& cfg, const EvalOptions& o) {
  eval::ProtocolConfig p = section<eval::ProtocolConfig>(cfg, "protocol");
  if (cfg.contains("seed") && !(cfg.contains("protocol") && cfg["protocol"].contains("seed"))) {
    p.seed = cfg.at("seed").get<std::uint64_t>();
  }
  o.obs_prob.apply(p.obs_probability);
  o.warmup.apply(p.warmup_obs);
  o.horizon.apply(p.horizon);
  o.episodes.apply(p.num_eval_episodes);
  o.seed.apply(p.seed);
  p.validate();
  return p;
}

inline pf::PFConfig pf_from(const json& cfg, const EvalOptions& o, const world::WorldConfig& wc) {
  pf::PFConfig c = pf::PFConfig::matched(wc);
  if (cfg.contains("pf")) {
    const json& j = cfg["pf"];
    c.num_particles = j.value("num_particles", c.num_particles);
    c.likelihood_sigma = j.value("likelihood_sigma", c.likelihood_sigma);
    c.resample_threshold = j.value("resample_threshold", c.resample_threshold);
  }
  o.particles.apply(c.num_particles);
  c.validate();
  return c;
}

/// Episodes of `data` that the trained model has not seen. Shared
/// trajectories (same world settings and seed) restrict evaluation to the
/// episodes past the training split and raise a warning.
inline world::EpisodeSet held_out(const world::EpisodeSet& data, const json& pae_side, std::ostream& err) {
  if (!pae_side.contains("dataset")) return data;
  if (pae_side["dataset"].value("trajectory_key", "") != trajectory_key(data)) return data;
  const std::size_t n_train = pae_side.value("train_episodes", std::size_t{0});
  err << "warning: evaluation episodes share trajectories with the PAE training data (same world settings and seed)";
  if (n_train < data.episodes) {
    err << "; evaluating only the " << data.episodes - n_train << " held-out episodes from index " << n_train << "\n";
    return data.subset(n_train, data.episodes - n_train);
  }
  err << "; no held-out episodes remain, results measure memorisation\n";
  return data;
}

inline json curve_summary(const eval::MseCurve& c) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  return {{"mean_mse_paegan", num(eval::mean_of(c.mse_paegan))},
          {"mean_mse_pf", num(eval::mean_of(c.mse_pf))},
          {"mean_mse_baseline", eval::mean_of(c.mse_baseline)},
          {"slope_mse_paegan", num(eval::trend_slope(c.mse_paegan))}};
}

inline int cmd_evaluate(const Common& c, const EvalOptions& o, std::ostream& out, std::ostream& err) {
  const json cfg = load_config(c.config);
  const eval::ProtocolConfig protocol = protocol_from(cfg, o);
  const fs::path pae_path = o.pae.empty() ? default_out_dir() / "pae.ckpt" : fs::path(o.pae);
  const auto loaded = load_pae(pae_path, "evaluate");
  std::optional<LoadedSampler> sampler;
  if (!o.sampler.empty()) {
    sampler = load_sampler(o.sampler);
    if (sampler->sidecar["pae"].value("params_sha256", "") != params_digest(loaded.model.params)) {
      err << "warning: the sampler was trained against a different PAE\n";
    }
  }
  if (o.data.empty()) throw UsageError("evaluate needs --data (an episode file with at least warmup + horizon steps)");
  const fs::path data_path = o.data;
  const auto all = load_dataset_checked(data_path);
  const auto data = held_out(all, loaded.sidecar, err);

  const fs::path train_path =
      !o.train_data.empty() ? fs::path(o.train_data) : fs::path(loaded.sidecar["dataset"]["path"].get<std::string>());
  const auto train_full = load_dataset_checked(train_path);
  const auto train = train_full.subset(0, std::min(loaded.sidecar.value("train_episodes", train_full.episodes), train_full.episodes));
  const auto baseline = eval::uninformed_baseline(train);

  std::optional<pf::PFConfig> pfc;
  if (!o.no_pf) pfc = pf_from(cfg, o, data.cfg);
  const auto records = eval::run_tracking(protocol, data, {&loaded.model, sampler ? &sampler->sampler : nullptr}, pfc);
  const auto curve = eval::mse_curve(records, baseline);

  const fs::path dir = o.out_dir.empty() ? default_out_dir() / "eval" : fs::path(o.out_dir);
  fs::create_directories(dir);
  eval::write_csv(curve, dir / "curve.csv");
  eval::write_strip(eval::render_strip(records.front(), std::max<std::size_t>(1, o.stride), data.cfg.image_size),
                    dir / "strip.pgm");
  const std::size_t keep = std::min(o.save_records, records.size());
  eval::save_records({records.begin(), records.begin() + static_cast<std::ptrdiff_t>(keep)}, data.cfg.image_size,
                     dir / "records.bin");

  double h_exp = 0, h_smp = 0;
  for (const auto& ep : records) {
    h_exp += eval::pixel_entropy(ep.back().paegan_expected) / static_cast<double>(records.size());
    if (sampler) h_smp += eval::pixel_entropy(ep.back().paegan_sample) / static_cast<double>(records.size());
  }
  json m = manifest("evaluate", {{"protocol", protocol}, {"pf", pfc ? json(*pfc) : json(nullptr)}, {"stride", o.stride}},
                    protocol.seed);
  m["inputs"] = {{"dataset", file_entry(data_path)}, {"train_dataset", file_entry(train_path)}, {"pae", file_entry(pae_path)}};
  if (sampler) m["inputs"]["sampler"] = file_entry(o.sampler);
  m["episodes_evaluated"] = records.size();
  m["summary"] = curve_summary(curve);
  m["summary"]["final_entropy_expected"] = h_exp;
  if (sampler) m["summary"]["final_entropy_sample"] = h_smp;
  m["outputs"] = {{"curve", file_entry(dir / "curve.csv")}, {"strip", file_entry(dir / "strip.pgm")},
                  {"records", file_entry(dir / "records.bin")}};
  write_json(dir / "manifest.json", m);
  out << "evaluated " << records.size() << " episodes: mean MSE paegan " << fmt_g(eval::mean_of(curve.mse_paegan));
  if (pfc) out << ", pf " << fmt_g(eval::mean_of(curve.mse_pf));
  out << ", baseline " << fmt_g(eval::mean_of(curve.mse_baseline)) << "; wrote " << dir.string() << "\n";
  return 0;
}

inline int cmd_pf_run(const Common& c, const EvalOptions& o, std::ostream& out, std::ostream& err) {
  const json cfg = load_config(c.config);
  const eval::ProtocolConfig protocol = protocol_from(cfg, o);
  if (o.data.empty()) throw UsageError("pf-run needs --data");
  const auto data = load_dataset_checked(o.data);
  world::EpisodeSet base_src;
  if (!o.train_data.empty()) {
    base_src = load_dataset_checked(o.train_data);
  } else {
    err << "note: no --train-data; the baseline image comes from the tracked dataset\n";
    base_src = data;
  }
  const auto pfc = pf_from(cfg, o, data.cfg);
  const auto records = eval::run_tracking(protocol, data, {}, pfc);
  const auto curve = eval::mse_curve(records, eval::uninformed_baseline(base_src));
  const fs::path dir = o.out_dir.empty() ? default_out_dir() / "pf" : fs::path(o.out_dir);
  fs::create_directories(dir);
  eval::write_csv(curve, dir / "curve.csv");
  json m = manifest("pf-run", {{"protocol", protocol}, {"pf", pfc}}, protocol.seed);
  m["inputs"] = {{"dataset", file_entry(o.data)}};
  if (!o.train_data.empty()) m["inputs"]["train_dataset"] = file_entry(o.train_data);
  m["episodes_evaluated"] = records.size();
  m["summary"] = curve_summary(curve);
  m["outputs"] = {{"curve", file_entry(dir / "curve.csv")}};

  if (!o.dump_particles.empty()) {
    // Particle cloud of episode 0 at every step, same streams as run_tracking.
    std::ofstream dump(o.dump_particles, std::ios::binary | std::ios::trunc);
    if (!dump) throw std::runtime_error("cannot open '" + o.dump_particles + "' for writing");
    pf::write_particle_csv_header(dump);
    eval::EpisodeStreams st(protocol.seed, 0);
    const auto sched = eval::make_schedule(protocol, st.schedule);
    pf::ParticleSet ps;
    for (std::size_t t = 0; t < protocol.length(); ++t) {
      if (t > 0) ps = pf::pf_predict(ps, pfc, st.filter);
      if (sched[t]) {
        const auto z = world::measure(data.state(0, t), data.cfg, st.measurement);
        ps = t == 0 ? pf::pf_init_from_measurement(pfc, z, st.filter) : pf::pf_update(ps, z, pfc, st.filter);
      }
      pf::write_particle_csv(dump, t, ps);
    }
    dump.close();
    m["outputs"]["particles"] = file_entry(o.dump_particles);
  }
  write_json(dir / "manifest.json", m);
  out << "pf-run over " << records.size() << " episodes: mean MSE pf " << fmt_g(eval::mean_of(curve.mse_pf))
      << ", baseline " << fmt_g(eval::mean_of(curve.mse_baseline)) << "; wrote " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// render

struct RenderOptions {
  std::string records, out;
  std::size_t episode = 0, stride = 10;
};

inline int cmd_render(const RenderOptions& o, std::ostream& out) {
  if (o.records.empty()) throw UsageError("render needs --records");
  if (!fs::exists(o.records)) throw std::runtime_error("records file '" + o.records + "' not found (run evaluate first)");
  if (o.stride < 1) throw UsageError("--stride must be >= 1");
  int size = 0;
  const auto eps = eval::load_records(o.records, &size);
  if (o.episode >= eps.size()) {
    throw UsageError("--episode " + std::to_string(o.episode) + " out of range (file holds " + std::to_string(eps.size()) + ")");
  }
  const fs::path path = o.out.empty() ? fs::path(o.records).replace_extension(".strip.pgm") : fs::path(o.out);
  const auto strip = eval::render_strip(eps[o.episode], o.stride, size);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  eval::write_strip(strip, path);
  json m = manifest("render", {{"episode", o.episode}, {"stride", o.stride}}, 0);
  m["inputs"] = {{"records", file_entry(o.records)}};
  m["outputs"] = {{"strip", file_entry(path)}};
  write_json(manifest_path(path), m);
  out << "wrote " << path.string() << " (" << strip.width << "x" << strip.height << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Predictive autoencoder with adversarial belief sampling, benchmarked against a particle filter"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config, "JSON config file; flags override its values");
  app.add_option("--threads", common.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  app.add_option("--log-every", common.log_every, "Progress line every N updates")->check(CLI::PositiveNumber);

  std::function<int()> action;

  GenDataOptions gd;
  auto* g = app.add_subcommand("gen-data", "Generate an episode file");
  add(g, "--balls", gd.balls, "Number of balls");
  add(g, "--episodes", gd.episodes, "Episodes");
  add(g, "--steps", gd.steps, "Steps per episode");
  add(g, "--seed", gd.seed, "Generation seed");
  add(g, "--collision", gd.collision, "phase_through or bounce");
  add(g, "--process-noise", gd.process_noise, "Velocity noise sigma per step");
  add(g, "--measurement-noise", gd.measurement_noise, "Position measurement noise sigma");
  add(g, "--speed", gd.speed, "Initial speed");
  add(g, "--image-size", gd.image_size, "Frame side in pixels");
  g->add_flag("--no-states", gd.no_states, "Do not store ground-truth states");
  g->add_option("--out", gd.out, "Output file (default $PAEGAN_OUT_DIR/episodes.bin)");
  g->callback([&] { action = [&] { return cmd_gen_data(common, gd, out); }; });

  TrainPaeOptions tp;
  auto* t = app.add_subcommand("train-pae", "Train the predictive autoencoder");
  t->add_option("--data", tp.data, "Episode file");
  t->add_option("--out", tp.out, "Checkpoint path (default $PAEGAN_OUT_DIR/pae.ckpt)");
  add(t, "--updates", tp.updates, "Total updates");
  add(t, "--batch-size", tp.batch_size, "Episodes per update");
  add(t, "--seed", tp.seed, "Training seed");
  add(t, "--lr", tp.lr, "Adam learning rate");
  add(t, "--holdout", tp.holdout, "Fraction of episodes held out from training");
  t->add_option("--checkpoint-every", tp.checkpoint_every, "Checkpoint period in updates");
  t->add_option("--stop-after", tp.stop_after, "Stop once this many updates are done (resume later)");
  t->add_flag("--resume", tp.resume, "Continue from an existing checkpoint");
  t->callback([&] { action = [&] { return cmd_train_pae(common, tp, out); }; });

  TrainSamplerOptions ts;
  auto* s = app.add_subcommand("train-sampler", "Train the belief sampler and discriminator against a frozen PAE");
  s->add_option("--data", ts.data, "Episode file (default: the PAE's training data)");
  s->add_option("--pae", ts.pae, "PAE checkpoint (default $PAEGAN_OUT_DIR/pae.ckpt)");
  s->add_option("--out", ts.out, "Checkpoint path (default $PAEGAN_OUT_DIR/sampler.ckpt)");
  add(s, "--updates", ts.updates, "Total updates");
  add(s, "--batch-size", ts.batch_size, "Beliefs per update");
  add(s, "--samples", ts.n_samples, "Samples per belief in the averager term");
  add(s, "--d-period", ts.d_period, "Discriminator step every N updates");
  add(s, "--seed", ts.seed, "Training seed");
  add(s, "--lr", ts.lr, "Adam learning rate");
  add(s, "--lambda-g", ts.lambda_g, "Adversarial term weight");
  add(s, "--lambda-av", ts.lambda_av, "Averager term weight");
  s->add_option("--checkpoint-every", ts.checkpoint_every, "Checkpoint period in updates");
  s->add_option("--stop-after", ts.stop_after, "Stop once this many updates are done (resume later)");
  s->add_flag("--resume", ts.resume, "Continue from an existing checkpoint");
  s->callback([&] { action = [&] { return cmd_train_sampler(common, ts, out); }; });

  EvalOptions ev;
  auto add_protocol = [](CLI::App* a, EvalOptions& e) {
    a->add_option("--data", e.data, "Episode file with ground-truth states");
    a->add_option("--train-data", e.train_data, "Training episodes for the uninformed baseline");
    a->add_option("--out-dir", e.out_dir, "Output directory");
    add(a, "--obs-prob", e.obs_prob, "Chance of an observation per step after warm-up (default 0)");
    add(a, "--warmup", e.warmup, "Observed warm-up steps (default 8)");
    add(a, "--horizon", e.horizon, "Recorded steps after warm-up (default 160)");
    add(a, "--episodes", e.episodes, "Episodes to evaluate (default 100)");
    add(a, "--particles", e.particles, "Particle count (default 1000)");
    add(a, "--seed", e.seed, "Protocol seed");
  };
  auto* e = app.add_subcommand("evaluate", "Run the tracking protocol and write MSE curves, strips and records");
  add_protocol(e, ev);
  e->add_option("--pae", ev.pae, "PAE checkpoint (default $PAEGAN_OUT_DIR/pae.ckpt)");
  e->add_option("--sampler", ev.sampler, "Sampler checkpoint (optional)");
  e->add_option("--stride", ev.stride, "Strip column stride")->check(CLI::PositiveNumber);
  e->add_option("--save-records", ev.save_records, "Episodes kept in records.bin");
  e->add_flag("--no-pf", ev.no_pf, "Skip the particle filter");
  e->callback([&] { action = [&] { return cmd_evaluate(common, ev, out, err); }; });

  EvalOptions pr;
  auto* p = app.add_subcommand("pf-run", "Particle-filter-only tracking run");
  add_protocol(p, pr);
  p->add_option("--dump-particles", pr.dump_particles, "Write the episode-0 particle cloud per step as CSV");
  p->callback([&] { action = [&] { return cmd_pf_run(common, pr, out, err); }; });

  RenderOptions rd;
  auto* r = app.add_subcommand("render", "Render a frame strip from a records file");
  r->add_option("--records", rd.records, "records.bin from evaluate");
  r->add_option("--episode", rd.episode, "Episode index in the records file");
  r->add_option("--stride", rd.stride, "Column stride");
  r->add_option("--out", rd.out, "Output PGM");
  r->callback([&] { action = [&] { return cmd_render(rd, out); }; });

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n" << "run with --help for usage\n";
    return 2;
  }
  Eigen::setNbThreads(common.threads);
  try {
    return action ? action() : 2;
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
}

}  // namespace paegan::cli
