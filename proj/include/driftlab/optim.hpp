#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "driftlab/tensor.hpp"

namespace driftlab {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  // Applies one update with learning rate `lr` (the schedule lives with the
  // caller) and returns the pre-clip gradient norm.
  double step(double lr);
  double step() { return step(config_.lr); }
  void zero_grad();

  std::size_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup followed by cosine decay to `floor_frac` of the peak rate.
double warmup_cosine_lr(double peak, std::size_t step, std::size_t total, std::size_t warmup,
                        double floor_frac = 0.1);

}  // namespace driftlab

namespace driftlab {

// Loss became non-finite during training.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace driftlab
