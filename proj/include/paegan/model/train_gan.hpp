#pragma once

// Alternating sampler/discriminator training against a frozen PAE.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "json.hpp"
#include "paegan/model/sampler.hpp"
#include "paegan/model/train_pae.hpp"
#include "paegan/nn/adam.hpp"
#include "paegan/world/dataset.hpp"

namespace paegan::model {

struct GanTrainConfig {
  std::size_t updates = 2000;
  std::size_t batch_size = 16;  // beliefs per update
  std::size_t n_samples = 8;    // samples per belief in L_Av
  std::size_t max_horizon = 10; // T ~ U{0..max_horizon}
  std::size_t d_update_period = 2;
  std::size_t real_batch = 64;  // images per discriminator step (real and fake each)
  SamplerLossWeights weights;
  nn::AdamConfig adam;
  double pool_p_mask = 0.98;
  std::size_t pool_episodes = 400;
  std::uint64_t seed = 0;

  void validate() const {
    if (updates < 1 || batch_size < 1 || n_samples < 1 || d_update_period < 1 || real_batch < 2) {
      throw std::invalid_argument("train_sampler_gan: counts must be positive (real_batch >= 2)");
    }
    if (!(weights.lambda_g >= 0 && weights.lambda_av >= 0)) throw std::invalid_argument("train_sampler_gan: negative loss weight");
    if (!(pool_p_mask >= 0 && pool_p_mask <= 1)) throw std::invalid_argument("train_sampler_gan: pool_p_mask in [0,1]");
    if (pool_episodes < 1) throw std::invalid_argument("train_sampler_gan: pool_episodes must be >= 1");
    adam.validate();
  }
};

inline void to_json(nlohmann::json& j, const GanTrainConfig& c) {
  j = {{"updates", c.updates},
       {"batch_size", c.batch_size},
       {"n_samples", c.n_samples},
       {"max_horizon", c.max_horizon},
       {"d_update_period", c.d_update_period},
       {"real_batch", c.real_batch},
       {"lambda_g", c.weights.lambda_g},
       {"lambda_av", c.weights.lambda_av},
       {"learning_rate", c.adam.learning_rate},
       {"beta1", c.adam.beta1},
       {"beta2", c.adam.beta2},
       {"epsilon", c.adam.epsilon},
       {"pool_p_mask", c.pool_p_mask},
       {"pool_episodes", c.pool_episodes},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GanTrainConfig& c) {
  const GanTrainConfig d;
  c.updates = j.value("updates", d.updates);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.n_samples = j.value("n_samples", d.n_samples);
  c.max_horizon = j.value("max_horizon", d.max_horizon);
  c.d_update_period = j.value("d_update_period", d.d_update_period);
  c.real_batch = j.value("real_batch", d.real_batch);
  c.weights.lambda_g = j.value("lambda_g", d.weights.lambda_g);
  c.weights.lambda_av = j.value("lambda_av", d.weights.lambda_av);
  c.adam.learning_rate = j.value("learning_rate", d.adam.learning_rate);
  c.adam.beta1 = j.value("beta1", d.adam.beta1);
  c.adam.beta2 = j.value("beta2", d.adam.beta2);
  c.adam.epsilon = j.value("epsilon", d.adam.epsilon);
  c.pool_p_mask = j.value("pool_p_mask", d.pool_p_mask);
  c.pool_episodes = j.value("pool_episodes", d.pool_episodes);
  c.seed = j.value("seed", d.seed);
}

struct GanLogRow {
  std::size_t update = 0;
  std::size_t horizon = 0;
  double l_g = 0.0;
  double l_av = 0.0;
  double l_sampler = 0.0;
  double l_d = std::numeric_limits<double>::quiet_NaN();  // NaN when D was not stepped
  double d_accuracy = std::numeric_limits<double>::quiet_NaN();
  double wall_time = 0.0;
};

/// Beliefs [M,H] obtained by running the PAE over dataset episodes with
/// inputs masked at probability p_mask (first frame kept).
template <class T>
Tensor<T> build_belief_pool(const Pae<T>& pae, const world::EpisodeSet& data, double p_mask, std::size_t episodes,
                            std::uint64_t seed) {
  episodes = std::min(episodes, data.episodes);
  if (episodes == 0) throw std::invalid_argument("belief pool: empty dataset");
  const std::size_t H = pae.cfg.hidden_dim, px = data.frame_size();
  Rng rng(seed, {0xb0});
  std::vector<std::size_t> idx(episodes);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto mask = draw_mask(rng, data.steps, episodes, p_mask, true);
  Tensor<T> pool({data.steps * episodes, H});
  Tensor<T> h = zero_belief(pae, episodes);
  for (std::size_t t = 0; t < data.steps; ++t) {
    Tensor<T> frames({episodes, px});
    for (std::size_t e = 0; e < episodes; ++e) {
      if (mask[t * episodes + e]) continue;
      const auto f = data.frame(idx[e], t);
      std::copy(f.begin(), f.end(), frames.data() + e * px);
    }
    h = propagate(pae, h, frames);
    std::copy(h.data(), h.data() + h.size(), pool.data() + t * episodes * H);
  }
  return pool;
}

/// Runs updates [begin, end). PAE parameters are only read. Randomness of
/// update k comes from Rng(cfg.seed, {k}).
template <class T>
void train_sampler_gan(const Pae<T>& pae, Sampler<T>& sampler, Discriminator<T>& disc, const Tensor<T>& pool,
                       const world::EpisodeSet& data, const GanTrainConfig& cfg, std::size_t begin, std::size_t end,
                       const std::function<void(const GanLogRow&)>& on_update = {}) {
  cfg.validate();
  if (pae.params.size() == 0) throw std::invalid_argument("train_sampler_gan: a trained PAE is required");
  if (sampler.cfg.hidden_dim != pae.cfg.hidden_dim) throw std::invalid_argument("train_sampler_gan: sampler/PAE belief size mismatch");
  if (disc.cfg.image_size != pae.cfg.image_size) throw std::invalid_argument("train_sampler_gan: discriminator/PAE image size mismatch");
  if (pool.rank() != 2 || pool.dim(1) != static_cast<std::size_t>(pae.cfg.hidden_dim) || pool.dim(0) == 0) {
    throw std::invalid_argument("train_sampler_gan: belief pool must be [M,H] with M > 0");
  }
  if (data.num_frames() == 0) throw std::invalid_argument("train_sampler_gan: empty dataset");
  const std::size_t H = pae.cfg.hidden_dim, Z = sampler.cfg.noise_dim, px = pae.cfg.pixels();
  const std::size_t B = cfg.batch_size, n = cfg.n_samples;
  const Tensor<T> gx_null = null_projection(pae);
  const auto t0 = std::chrono::steady_clock::now();
  end = std::min(end, cfg.updates);
  for (std::size_t k = begin; k < end; ++k) {
    Rng rng(cfg.seed, {k});
    GanLogRow row;
    row.update = k;
    Tensor<T> bs({B, H});
    for (std::size_t i = 0; i < B; ++i) std::copy_n(pool.data() + rng.index(pool.dim(0)) * H, H, bs.data() + i * H);
    row.horizon = rng.index(cfg.max_horizon + 1);
    const Tensor<T> noise_g = standard_noise<T>(rng, B * n, Z);
    const Tensor<T> noise_av = standard_noise<T>(rng, B * n, Z);
    {
      Graph<T> g;
      const Discriminator<T>& frozen_disc = disc;
      Var<T> bsv = g.constant(bs);
      Var<T> l_g = generator_loss(g, sampler.params, pae.params, pae.cfg, frozen_disc.params, disc.cfg,
                                  nn::repeat_rows(bsv, n), g.constant(noise_g));
      Var<T> l_av = averager_loss(g, sampler.params, pae.params, pae.cfg, bsv, g.constant(noise_av), n, row.horizon,
                                  gx_null);
      Var<T> total = sampler_loss(l_g, l_av, cfg.weights);
      row.l_g = l_g.value()[0];
      row.l_av = l_av.value()[0];
      row.l_sampler = total.value()[0];
      g.backward(total);
    }
    nn::adam_step(sampler.params, cfg.adam);

    if ((k + 1) % cfg.d_update_period == 0) {
      const std::size_t R = cfg.real_batch;
      Tensor<T> real({R, px});
      for (std::size_t i = 0; i < R; ++i) {
        const auto f = data.frame(rng.index(data.episodes), rng.index(data.steps));
        std::copy(f.begin(), f.end(), real.data() + i * px);
      }
      Tensor<T> fbs({R, H});
      for (std::size_t i = 0; i < R; ++i) std::copy_n(pool.data() + rng.index(pool.dim(0)) * H, H, fbs.data() + i * H);
      const Tensor<T> fake = decode(pae, sample_states(sampler, fbs, standard_noise<T>(rng, R, Z)));
      Graph<T> g;
      Var<T> p_real = discriminate(g, disc.params, disc.cfg, g.constant(real));
      Var<T> p_fake = discriminate(g, disc.params, disc.cfg, g.constant(fake));
      Var<T> l_d = nn::add(nn::bce(p_real, T{1}), nn::bce(p_fake, T{0}));
      std::size_t correct = 0;
      for (auto v : p_real.value().values()) correct += v > T{0.5};
      for (auto v : p_fake.value().values()) correct += v < T{0.5};
      row.l_d = l_d.value()[0];
      row.d_accuracy = static_cast<double>(correct) / static_cast<double>(2 * R);
      g.backward(l_d);
      nn::adam_step(disc.params, cfg.adam);
    }
    row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_update) on_update(row);
  }
}

}  // namespace paegan::model
