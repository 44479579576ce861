#include "masklm/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "masklm/error.hpp"

namespace masklm {

void OptimizerConfig::validate() const {
    if (peak_lr < 0.0) throw DataError("optimizer config: peak_lr must be >= 0");
    if (warmup_steps < 0 || total_steps < 1) {
        throw DataError("optimizer config: warmup_steps >= 0 and total_steps >= 1 required");
    }
    if (warmup_steps > total_steps) {
        throw DataError("optimizer config: warmup_steps must not exceed total_steps");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw DataError("optimizer config: betas must lie in [0, 1)");
    }
    if (eps <= 0.0) throw DataError("optimizer config: eps must be > 0");
    if (weight_decay < 0.0) throw DataError("optimizer config: weight_decay must be >= 0");
}

double learning_rate_at(const OptimizerConfig& config, std::int64_t step) {
    const auto s = static_cast<double>(step);
    const double warm = config.warmup_steps > 0 ? s / config.warmup_steps : 1.0;
    const double tail = config.total_steps > config.warmup_steps
                            ? (config.total_steps - s) /
                                  static_cast<double>(config.total_steps - config.warmup_steps)
                            : (step >= config.total_steps ? 0.0 : 1.0);
    return config.peak_lr * std::clamp(std::min(warm, tail), 0.0, 1.0);
}

Adam::Adam(std::vector<NamedParam> params, OptimizerConfig config)
    : params_(std::move(params)), cfg_(config) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& np : params_) {
        m_.emplace_back(np.tensor.shape());
        v_.emplace_back(np.tensor.shape());
    }
}

double Adam::apply(std::int64_t step) {
    double sq_norm = 0.0;
    for (auto& np : params_) {
        for (double g : np.tensor.grad()) sq_norm += g * g;
    }
    const double norm = std::sqrt(sq_norm);
    if (!std::isfinite(norm)) {
        throw NumericError("non-finite gradient norm in optimizer update", step);
    }
    const double clip =
        (cfg_.grad_clip_norm > 0.0 && norm > cfg_.grad_clip_norm) ? cfg_.grad_clip_norm / norm
                                                                  : 1.0;

    const double lr = learning_rate_at(cfg_, step);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& np = params_[i];
        double* w = np.tensor.data();
        double* m = m_[i].data();
        double* v = v_[i].data();
        const std::vector<double>& grad = np.tensor.grad();
        const std::int64_t n = np.tensor.numel();
        for (std::int64_t j = 0; j < n; ++j) {
            const double g = grad[static_cast<std::size_t>(j)] * clip;
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
            if (np.weight_decay) w[j] -= lr * cfg_.weight_decay * w[j];
        }
    }
    return norm;
}

void Adam::zero_grad() {
    for (auto& np : params_) np.tensor.zero_grad();
}

std::vector<NamedParam> Adam::state_arrays() const {
    std::vector<NamedParam> out;
    out.reserve(params_.size() * 2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.push_back({"adam.m." + params_[i].name, m_[i], false});
        out.push_back({"adam.v." + params_[i].name, v_[i], false});
    }
    return out;
}

void Adam::restore(const std::map<std::string, Tensor>& arrays, std::int64_t updates_done) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        for (auto [moment, dst] : {std::pair{std::string("adam.m."), &m_[i]},
                                   std::pair{std::string("adam.v."), &v_[i]}}) {
            auto it = arrays.find(moment + params_[i].name);
            if (it == arrays.end()) {
                throw CheckpointError("training state is missing the moment array for " +
                                      params_[i].name);
            }
            if (it->second.numel() != dst->numel()) {
                throw CheckpointError("training state moment for " + params_[i].name +
                                      " has the wrong size");
            }
            dst->values() = it->second.values();
        }
    }
    t_ = updates_done;
}

}  // namespace masklm
