#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "masklm/model.hpp"
#include "masklm/tensor.hpp"

namespace masklm {

struct OptimizerConfig {
    double peak_lr = 1e-3;
    int warmup_steps = 50;
    int total_steps = 2000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip_norm = 1.0;  // <= 0 disables clipping

    void validate() const;
};

// Linear warmup to peak_lr at warmup_steps, then linear decay to zero at
// total_steps: lr(step) = peak * min(step/warmup, (total-step)/(total-warmup)).
double learning_rate_at(const OptimizerConfig& config, std::int64_t step);

// Adam with decoupled weight decay. Decay touches only parameters flagged for
// it (matrix weights; never embeddings, norms, or biases) and is applied
// directly to the weights, outside the moment estimates.
class Adam {
  public:
    Adam(std::vector<NamedParam> params, OptimizerConfig config);

    // One update from the gradients currently stored in the parameters, at
    // the schedule position `step`. Returns the pre-clip global gradient
    // norm. Throws NumericError on non-finite gradients.
    double apply(std::int64_t step);

    void zero_grad();
    std::int64_t updates_done() const { return t_; }
    const OptimizerConfig& config() const { return cfg_; }

    // Moment tensors named adam.m.<param> / adam.v.<param>, for the training
    // state file; restore() is the inverse.
    std::vector<NamedParam> state_arrays() const;
    void restore(const std::map<std::string, Tensor>& arrays, std::int64_t updates_done);

  private:
    std::vector<NamedParam> params_;
    OptimizerConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;  // completed updates; bias correction uses t_ + 1
};

}  // namespace masklm
