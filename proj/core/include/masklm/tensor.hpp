#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "masklm/error.hpp"
#include "masklm/rng.hpp"

namespace masklm {

// Additive mask sentinel. The most-negative finite double rather than IEEE
// -inf, so mask + score arithmetic can never produce NaN; softmax_rows treats
// anything at or below kMaskedScoreThreshold as a fully blocked entry.
inline constexpr double kNegInf = std::numeric_limits<double>::lowest();
inline constexpr double kMaskedScoreThreshold = -1e300;

class Rng;

// Dense row-major tensor of 64-bit floats with value semantics over shared
// storage: copies alias the same data and gradient buffers, which is what
// lets one embedding table back both the input lookup and the tied LM head.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, bool requires_grad = false);
    Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);

    static Tensor scalar(double v);
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad);
    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);

    bool defined() const { return s_ != nullptr; }
    const std::vector<int>& shape() const { return s_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->value.size()); }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    int rows() const;  // rank-2 only
    int cols() const;  // rank-2 only
    int dim(int i) const { return s_->shape.at(static_cast<std::size_t>(i)); }

    double* data() { return s_->value.data(); }
    const double* data() const { return s_->value.data(); }
    std::vector<double>& values() { return s_->value; }
    const std::vector<double>& values() const { return s_->value; }

    double& at(int i, int j);
    double at(int i, int j) const;
    double item() const;  // single-element tensors

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool v) { s_->requires_grad = v; }

    // Gradient buffer, allocated zeroed on first use. Like the value buffer it
    // lives in the shared storage, so it is mutable through const copies.
    std::vector<double>& grad() const;
    bool has_grad() const { return s_ && !s_->grad.empty(); }
    void zero_grad() const;

    // Identity of the underlying storage; equal pointers mean tied parameters.
    const void* storage_id() const { return s_.get(); }

  private:
    struct Storage {
        std::vector<int> shape;
        std::vector<double> value;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Storage> s_;
};

// Records the backward rule of every op in execution order; backward() replays
// the rules in reverse, which visits each output before its inputs. Replay
// order is fixed, so two backward passes over identical tapes accumulate
// gradients in bit-identical order. One tape per training thread.
class Tape {
  public:
    void record(std::function<void()> backward_rule);
    std::size_t size() const { return rules_.size(); }
    void clear() { rules_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and replays the tape. loss must be a single
    // element tensor.
    void backward(Tensor& loss);

  private:
    std::vector<std::function<void()>> rules_;
};

// ---- ops ------------------------------------------------------------------
// Every op computes its value eagerly and, when tape is non-null, records a
// backward rule that accumulates into the inputs' grad buffers.

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape* tape, const Tensor& a);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
// [m x d] plus a length-d bias row, broadcast over rows.
Tensor add_row_broadcast(Tape* tape, const Tensor& m, const Tensor& bias);
Tensor scale(Tape* tape, const Tensor& a, double c);
Tensor gelu(Tape* tape, const Tensor& x);
Tensor softmax_rows(Tape* tape, const Tensor& x);
Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                     double smoothing);
Tensor dropout(Tape* tape, const Tensor& x, double rate, Rng& rng);
Tensor sum(Tape* tape, const Tensor& x);

// Row gather: out[i] = table[ids[i]]. Backward scatter-adds, so repeated ids
// accumulate.
Tensor embedding_rows(Tape* tape, const Tensor& table, const std::vector<int>& ids);
Tensor select_rows(Tape* tape, const Tensor& x, const std::vector<int>& positions);

Tensor slice_cols(Tape* tape, const Tensor& x, int first, int count);
Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts);

std::string shape_string(const std::vector<int>& shape);

}  // namespace masklm
