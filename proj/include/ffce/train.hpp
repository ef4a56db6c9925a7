#pragma once

// SGD training with a poly learning-rate schedule and bit-exact
// checkpointing. One trainer owns the model, the optimizer state and the
// shuffling/dropout RNG; given the same seed, config and data it reproduces
// runs byte for byte, including across a save/load boundary.

#include "ffce/net.hpp"
#include "ffce/volume.hpp"

namespace ffce {

struct TrainConfig {
  double base_lr = 0.01;
  double poly_power = 0.9;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::size_t batch_size = 1;
  std::size_t epochs = 100;
  std::uint64_t seed = 1;
  bool class_weights_enabled = false;
  LossWeights loss_weights;

  void validate() const {
    if (base_lr <= 0) throw std::invalid_argument("train config: base_lr must be positive");
    if (poly_power < 0) throw std::invalid_argument("train config: poly_power must be >= 0");
    if (weight_decay < 0) throw std::invalid_argument("train config: weight_decay must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  }
};

// lr = base * (1 - iter/iter_total)^p
double poly_lr(double base_lr, std::size_t iter, std::size_t iter_total, double p);

// g' = g + wd*w; buf = momentum*buf + g'; w -= lr*buf. Buffers are aligned
// with the trainable entries of the store, in insertion order.
template <std::floating_point T>
void sgd_step(ParamStore<T>& params, std::vector<std::vector<T>>& buffers, double lr,
              double momentum, double weight_decay) {
  std::size_t bi = 0;
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    if (bi >= buffers.size() || buffers[bi].size() != e.value.numel())
      throw std::invalid_argument("sgd_step: momentum buffer does not match parameter " + e.name);
    auto& buf = buffers[bi++];
    T* w = e.value.values_mut().data();
    const T* g = e.value.has_grad() ? e.value.grad().data() : nullptr;
    const T lrT = static_cast<T>(lr), mT = static_cast<T>(momentum), wdT = static_cast<T>(weight_decay);
    for (std::size_t i = 0; i < buf.size(); ++i) {
      const T gi = (g ? g[i] : T(0)) + wdT * w[i];
      buf[i] = mT * buf[i] + gi;
      w[i] -= lrT * buf[i];
    }
  }
}

class Trainer {
 public:
  Trainer(NetworkConfig ncfg, TrainConfig tcfg);

  // Builds every coronal sample up front. Must be called before training and
  // again (with the same data) after loading a checkpoint mid-run.
  void attach_data(const std::vector<std::pair<Volume, LabelVolume>>& data);

  LossReport train_epoch();

  // Epochs already completed, derived from the iteration counter.
  std::size_t epochs_done() const;
  std::size_t iteration() const { return iter_; }
  std::size_t iterations_total() const { return iter_total_; }

  FfceNet<float>& net() { return net_; }
  const FfceNet<float>& net() const { return net_; }
  const TrainConfig& train_config() const { return tcfg_; }
  const ClassWeights& class_weights() const { return omega_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  // expected, when given, must match the stored network config exactly.
  static Trainer load_checkpoint(const std::filesystem::path& path,
                                 const NetworkConfig* expected = nullptr);

 private:
  FfceNet<float> net_;
  TrainConfig tcfg_;
  Rng rng_;
  std::vector<std::vector<float>> momentum_;  // one buffer per trainable param
  std::vector<SliceSample> samples_;
  ClassWeights omega_;
  std::size_t iter_ = 0;
  std::size_t iter_total_ = 0;
  std::size_t sample_count_ = 0;  // pinned by checkpoints to keep the schedule aligned
  std::size_t h_ = 0, w_ = 0;
};

}  // namespace ffce
