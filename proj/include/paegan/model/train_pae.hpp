#pragma once

// Curriculum training of the predictive autoencoder on image sequences.

#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "paegan/model/pae.hpp"
#include "paegan/nn/adam.hpp"
#include "paegan/world/dataset.hpp"

namespace paegan::model {

struct CurriculumSchedule {
  double p_start = 0.3;
  double p_end = 0.98;
  std::size_t ramp_updates = 0;

  void validate() const {
    if (!(0.0 <= p_start && p_start <= p_end && p_end <= 1.0)) {
      throw std::invalid_argument("curriculum: need 0 <= p_start <= p_end <= 1");
    }
  }
};

/// Linear ramp from p_start at update 0 to p_end at ramp_updates, flat after.
inline double mask_probability(std::size_t update, const CurriculumSchedule& s) {
  if (update >= s.ramp_updates) return s.p_end;
  const double f = static_cast<double>(update) / static_cast<double>(s.ramp_updates);
  return s.p_start + (s.p_end - s.p_start) * f;
}

struct PaeTrainConfig {
  std::size_t updates = 2000;
  std::size_t batch_size = 8;
  double p_start = 0.3;
  double p_end = 0.98;
  double ramp_fraction = 0.5;  // of `updates`
  bool keep_first_frame = true;
  nn::AdamConfig adam;
  std::uint64_t seed = 0;

  CurriculumSchedule schedule() const {
    return {p_start, p_end, static_cast<std::size_t>(std::llround(ramp_fraction * static_cast<double>(updates)))};
  }

  void validate() const {
    if (updates < 1) throw std::invalid_argument("train_pae: updates must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train_pae: batch_size must be >= 1");
    if (!(ramp_fraction >= 0.0 && ramp_fraction <= 1.0)) throw std::invalid_argument("train_pae: ramp_fraction in [0,1]");
    schedule().validate();
    adam.validate();
  }
};

inline void to_json(nlohmann::json& j, const PaeTrainConfig& c) {
  j = {{"updates", c.updates},       {"batch_size", c.batch_size},
       {"p_start", c.p_start},       {"p_end", c.p_end},
       {"ramp_fraction", c.ramp_fraction}, {"keep_first_frame", c.keep_first_frame},
       {"learning_rate", c.adam.learning_rate}, {"beta1", c.adam.beta1},
       {"beta2", c.adam.beta2},      {"epsilon", c.adam.epsilon},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PaeTrainConfig& c) {
  const PaeTrainConfig d;
  c.updates = j.value("updates", d.updates);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.p_start = j.value("p_start", d.p_start);
  c.p_end = j.value("p_end", d.p_end);
  c.ramp_fraction = j.value("ramp_fraction", d.ramp_fraction);
  c.keep_first_frame = j.value("keep_first_frame", d.keep_first_frame);
  c.adam.learning_rate = j.value("learning_rate", d.adam.learning_rate);
  c.adam.beta1 = j.value("beta1", d.adam.beta1);
  c.adam.beta2 = j.value("beta2", d.adam.beta2);
  c.adam.epsilon = j.value("epsilon", d.adam.epsilon);
  c.seed = j.value("seed", d.seed);
}

struct PaeLogRow {
  std::size_t update = 0;
  double p_mask = 0.0;
  double loss = 0.0;  // prediction loss per episode (batch mean)
  double wall_time = 0.0;
};

/// Time-major mask for `steps` x `batch` inputs; row t*batch + b is masked
/// with probability p, except t = 0 when keep_first is set.
inline std::vector<bool> draw_mask(Rng& rng, std::size_t steps, std::size_t batch, double p, bool keep_first) {
  std::vector<bool> mask(steps * batch, false);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t b = 0; b < batch; ++b) {
      const bool m = rng.bernoulli(p);
      mask[t * batch + b] = m && !(keep_first && t == 0);
    }
  return mask;
}

/// Gathers episodes into a time-major [steps * batch, pixels] tensor.
template <class T>
Tensor<T> gather_time_major(const world::EpisodeSet& data, const std::vector<std::size_t>& episodes) {
  const std::size_t B = episodes.size(), steps = data.steps, px = data.frame_size();
  Tensor<T> out({steps * B, px});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < steps; ++t) {
      const auto f = data.frame(episodes[b], t);
      std::copy(f.begin(), f.end(), out.data() + (t * B + b) * px);
    }
  return out;
}

/// Runs updates [begin, end) of a schedule of cfg.updates total. All
/// randomness of update k comes from Rng(cfg.seed, {k}), so a run split at
/// any k reproduces the uninterrupted run when the Adam state is carried
/// over (as checkpoints do).
template <class T>
void train_pae(Pae<T>& model, const world::EpisodeSet& data, const PaeTrainConfig& cfg, std::size_t begin,
               std::size_t end, const std::function<void(const PaeLogRow&)>& on_update = {}) {
  cfg.validate();
  if (data.episodes == 0 || data.steps == 0) throw std::invalid_argument("train_pae: empty dataset");
  if (data.cfg.image_size != model.cfg.image_size) {
    throw std::invalid_argument("train_pae: dataset image size does not match the model");
  }
  end = std::min(end, cfg.updates);
  const auto schedule = cfg.schedule();
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t k = begin; k < end; ++k) {
    Rng rng(cfg.seed, {k});
    std::vector<std::size_t> idx(cfg.batch_size);
    for (auto& i : idx) i = rng.index(data.episodes);
    const double p = mask_probability(k, schedule);
    const auto mask = draw_mask(rng, data.steps, cfg.batch_size, p, cfg.keep_first_frame);
    const Tensor<T> frames = gather_time_major<T>(data, idx);
    double loss_value;
    {
      Graph<T> g;
      Var<T> loss = pae_loss(g, model.params, model.cfg, frames, mask, cfg.batch_size);
      loss_value = static_cast<double>(loss.value()[0]);
      g.backward(loss);
    }
    nn::adam_step(model.params, cfg.adam);
    if (on_update) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      on_update({k, p, loss_value, wall});
    }
  }
}

template <class T>
std::vector<PaeLogRow> train_pae(Pae<T>& model, const world::EpisodeSet& data, const PaeTrainConfig& cfg) {
  std::vector<PaeLogRow> log;
  train_pae(model, data, cfg, 0, cfg.updates, [&](const PaeLogRow& r) { log.push_back(r); });
  return log;
}

/// Mean of the first and last `window` losses, and the relative reduction.
struct LossReduction {
  double start = 0.0, end = 0.0, reduction = 0.0;
};

inline LossReduction loss_reduction(const std::vector<PaeLogRow>& log, std::size_t window = 100) {
  if (log.empty()) return {};
  const std::size_t w = std::min(window, log.size());
  LossReduction r;
  for (std::size_t i = 0; i < w; ++i) {
    r.start += log[i].loss / static_cast<double>(w);
    r.end += log[log.size() - w + i].loss / static_cast<double>(w);
  }
  r.reduction = r.start > 0 ? 1.0 - r.end / r.start : 0.0;
  return r;
}

}  // namespace paegan::model
