#include "masklm/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>

namespace masklm {

namespace {

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape));
        n *= d;
    }
    return n;
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected rank-2 tensor, got shape " +
                         shape_string(t.shape()));
    }
}

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<int> shape, bool requires_grad) {
    s_ = std::make_shared<Storage>();
    s_->shape = std::move(shape);
    s_->value.assign(static_cast<std::size_t>(shape_numel(s_->shape)), 0.0);
    s_->requires_grad = requires_grad;
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    s_ = std::make_shared<Storage>();
    s_->shape = std::move(shape);
    if (shape_numel(s_->shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not fill shape " + shape_string(s_->shape));
    }
    s_->value = std::move(values);
    s_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    for (double& x : t.s_->value) x = v;
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    for (double& x : t.s_->value) x = rng.normal() * stddev;
    return t;
}

int Tensor::rows() const {
    require_rank2(*this, "rows");
    return s_->shape[0];
}

int Tensor::cols() const {
    require_rank2(*this, "cols");
    return s_->shape[1];
}

double& Tensor::at(int i, int j) {
    require_rank2(*this, "at");
    if (i < 0 || i >= s_->shape[0] || j < 0 || j >= s_->shape[1]) {
        throw IndexError("element (" + std::to_string(i) + "," + std::to_string(j) +
                         ") outside tensor " + shape_string(s_->shape));
    }
    return s_->value[static_cast<std::size_t>(i) * static_cast<std::size_t>(s_->shape[1]) +
                     static_cast<std::size_t>(j)];
}

double Tensor::at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_string(s_->shape));
    }
    return s_->value[0];
}

std::vector<double>& Tensor::grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0);
    return s_->grad;
}

void Tensor::zero_grad() const {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

void Tape::record(std::function<void()> backward_rule) {
    rules_.push_back(std::move(backward_rule));
}

void Tape::backward(Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward() needs a single-element loss, got " +
                         shape_string(loss.shape()));
    }
    loss.grad()[0] += 1.0;
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
}

namespace {

bool track(Tape* tape, const Tensor& a) { return tape != nullptr && a.requires_grad(); }
bool track(Tape* tape, const Tensor& a, const Tensor& b) {
    return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n}, track(tape, a, b));
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = pb + static_cast<std::size_t>(p) * n;
            double* crow = pc + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    if (out.requires_grad()) {
        tape->record([a, b, out, m, k, n]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                const double* pb2 = b.data();
                for (int i = 0; i < m; ++i) {
                    for (int p = 0; p < k; ++p) {
                        const double* grow = g + static_cast<std::size_t>(i) * n;
                        const double* brow = pb2 + static_cast<std::size_t>(p) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                    }
                }
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                const double* pa2 = a.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + static_cast<std::size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        const double aip = pa2[i * k + p];
                        if (aip == 0.0) continue;
                        double* gbrow = gb + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor transpose(Tape* tape, const Tensor& a) {
    require_rank2(a, "transpose");
    const int m = a.rows(), n = a.cols();
    Tensor out({n, m}, track(tape, a));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (out.requires_grad()) {
        tape->record([a, out, m, n]() mutable {
            double* ga = a.grad().data();
            const double* g = out.grad().data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shapes differ, " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
    Tensor out(a.shape(), track(tape, a, b));
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (out.requires_grad()) {
        tape->record([a, b, out, n]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor add_row_broadcast(Tape* tape, const Tensor& m, const Tensor& bias) {
    require_rank2(m, "add_row_broadcast");
    if (bias.rank() != 1 || bias.dim(0) != m.cols()) {
        throw ShapeError("add_row_broadcast: bias " + shape_string(bias.shape()) +
                         " does not match matrix " + shape_string(m.shape()));
    }
    const int rows = m.rows(), cols = m.cols();
    Tensor out({rows, cols}, track(tape, m, bias));
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            out.data()[i * cols + j] = m.data()[i * cols + j] + bias.data()[j];
    if (out.requires_grad()) {
        tape->record([m, bias, out, rows, cols]() mutable {
            const double* g = out.grad().data();
            if (m.requires_grad()) {
                double* gm = m.grad().data();
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(rows) * cols; ++i)
                    gm[i] += g[i];
            }
            if (bias.requires_grad()) {
                double* gb = bias.grad().data();
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
            }
        });
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& a, double c) {
    Tensor out(a.shape(), track(tape, a));
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (out.requires_grad()) {
        tape->record([a, out, c, n]() mutable {
            double* ga = a.grad().data();
            const double* g = out.grad().data();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += c * g[i];
        });
    }
    return out;
}

namespace {

// Standard normal CDF and density, exact via erf.
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
inline double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

}  // namespace

Tensor gelu(Tape* tape, const Tensor& x) {
    Tensor out(x.shape(), track(tape, x));
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * norm_cdf(x.data()[i]);
    if (out.requires_grad()) {
        tape->record([x, out, n]() mutable {
            double* gx = x.grad().data();
            const double* g = out.grad().data();
            const double* v = x.data();
            for (std::int64_t i = 0; i < n; ++i)
                gx[i] += g[i] * (norm_cdf(v[i]) + v[i] * norm_pdf(v[i]));
        });
    }
    return out;
}

Tensor softmax_rows(Tape* tape, const Tensor& x) {
    require_rank2(x, "softmax_rows");
    const int m = x.rows(), n = x.cols();
    Tensor out({m, n}, track(tape, x));
    for (int i = 0; i < m; ++i) {
        const double* row = x.data() + static_cast<std::size_t>(i) * n;
        double* prow = out.data() + static_cast<std::size_t>(i) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            if (row[j] > kMaskedScoreThreshold && row[j] > mx) mx = row[j];
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw DegenerateAttentionError("softmax_rows: row " + std::to_string(i) +
                                           " is fully masked");
        }
        double denom = 0.0;
        for (int j = 0; j < n; ++j) {
            if (row[j] > kMaskedScoreThreshold) {
                prow[j] = std::exp(row[j] - mx);
                denom += prow[j];
            } else {
                prow[j] = 0.0;
            }
        }
        for (int j = 0; j < n; ++j) prow[j] /= denom;
    }
    if (out.requires_grad()) {
        tape->record([x, out, m, n]() mutable {
            double* gx = x.grad().data();
            const double* g = out.grad().data();
            const double* p = out.data();
            for (int i = 0; i < m; ++i) {
                const double* gr = g + static_cast<std::size_t>(i) * n;
                const double* pr = p + static_cast<std::size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += gr[j] * pr[j];
                double* gxr = gx + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) gxr[j] += pr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    require_rank2(x, "layer_norm");
    const int m = x.rows(), d = x.cols();
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
        throw ShapeError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match row width of " +
                         shape_string(x.shape()));
    }
    Tensor out({m, d}, tape != nullptr && (x.requires_grad() || gain.requires_grad() ||
                                           bias.requires_grad()));
    // Normalized rows are recomputed in the backward rule, keep per-row stats.
    std::vector<double> inv_std(static_cast<std::size_t>(m));
    std::vector<double> mean(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const double* row = x.data() + static_cast<std::size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= d;
        const double istd = 1.0 / std::sqrt(var + eps);
        mean[static_cast<std::size_t>(i)] = mu;
        inv_std[static_cast<std::size_t>(i)] = istd;
        double* orow = out.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j)
            orow[j] = (row[j] - mu) * istd * gain.data()[j] + bias.data()[j];
    }
    if (out.requires_grad()) {
        auto stats_mean = std::make_shared<std::vector<double>>(std::move(mean));
        auto stats_istd = std::make_shared<std::vector<double>>(std::move(inv_std));
        tape->record([x, gain, bias, out, stats_mean, stats_istd, m, d]() mutable {
            const double* g = out.grad().data();
            for (int i = 0; i < m; ++i) {
                const double mu = (*stats_mean)[static_cast<std::size_t>(i)];
                const double istd = (*stats_istd)[static_cast<std::size_t>(i)];
                const double* row = x.data() + static_cast<std::size_t>(i) * d;
                const double* gr = g + static_cast<std::size_t>(i) * d;
                if (gain.requires_grad() || bias.requires_grad()) {
                    for (int j = 0; j < d; ++j) {
                        const double xhat = (row[j] - mu) * istd;
                        if (gain.requires_grad()) gain.grad()[static_cast<std::size_t>(j)] += gr[j] * xhat;
                        if (bias.requires_grad()) bias.grad()[static_cast<std::size_t>(j)] += gr[j];
                    }
                }
                if (x.requires_grad()) {
                    double sum1 = 0.0, sum2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dxhat = gr[j] * gain.data()[j];
                        const double xhat = (row[j] - mu) * istd;
                        sum1 += dxhat;
                        sum2 += dxhat * xhat;
                    }
                    double* gx = x.grad().data() + static_cast<std::size_t>(i) * d;
                    for (int j = 0; j < d; ++j) {
                        const double dxhat = gr[j] * gain.data()[j];
                        const double xhat = (row[j] - mu) * istd;
                        gx[j] += istd * (dxhat - sum1 / d - xhat * sum2 / d);
                    }
                }
            }
        });
    }
    return out;
}

Tensor cross_entropy(Tape* tape, const Tensor& logits, const std::vector<int>& targets,
                     double smoothing) {
    require_rank2(logits, "cross_entropy");
    if (smoothing < 0.0 || smoothing >= 1.0) {
        throw DataError("cross_entropy: smoothing must be in [0, 1), got " +
                        std::to_string(smoothing));
    }
    const int m = logits.rows(), v = logits.cols();
    if (static_cast<int>(targets.size()) != m) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_string(logits.shape()));
    }
    for (int t : targets) {
        if (t < 0 || t >= v) {
            throw IndexError("cross_entropy: target id " + std::to_string(t) +
                             " outside vocab of size " + std::to_string(v));
        }
    }
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
        const double* row = logits.data() + static_cast<std::size_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
        const double lse = mx + std::log(denom);
        double row_loss = -(1.0 - smoothing) * (row[static_cast<std::size_t>(targets[static_cast<std::size_t>(i)])] - lse);
        if (smoothing > 0.0) {
            double sum_lp = 0.0;
            for (int j = 0; j < v; ++j) sum_lp += row[j] - lse;
            row_loss += -(smoothing / v) * sum_lp;
        }
        total += row_loss;
    }
    Tensor out = Tensor::scalar(total / m);
    if (track(tape, logits)) {
        out.set_requires_grad(true);
        auto tgt = std::make_shared<std::vector<int>>(targets);
        tape->record([logits, out, tgt, smoothing, m, v]() mutable {
            const double gscale = out.grad()[0] / m;
            double* gl = logits.grad().data();
            for (int i = 0; i < m; ++i) {
                const double* row = logits.data() + static_cast<std::size_t>(i) * v;
                double mx = row[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                double denom = 0.0;
                for (int j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
                double* grow = gl + static_cast<std::size_t>(i) * v;
                const int t = (*tgt)[static_cast<std::size_t>(i)];
                for (int j = 0; j < v; ++j) {
                    const double p = std::exp(row[j] - mx) / denom;
                    const double q = (j == t ? 1.0 - smoothing : 0.0) + smoothing / v;
                    grow[j] += gscale * (p - q);
                }
            }
        });
    }
    return out;
}

Tensor dropout(Tape* tape, const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw DataError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    }
    if (rate == 0.0) return x;
    const std::int64_t n = x.numel();
    auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::int64_t i = 0; i < n; ++i)
        (*mask)[static_cast<std::size_t>(i)] = rng.uniform() >= rate ? keep_scale : 0.0;
    Tensor out(x.shape(), track(tape, x));
    for (std::int64_t i = 0; i < n; ++i)
        out.data()[i] = x.data()[i] * (*mask)[static_cast<std::size_t>(i)];
    if (out.requires_grad()) {
        tape->record([x, out, mask, n]() mutable {
            double* gx = x.grad().data();
            const double* g = out.grad().data();
            for (std::int64_t i = 0; i < n; ++i)
                gx[i] += g[i] * (*mask)[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

Tensor sum(Tape* tape, const Tensor& x) {
    double total = 0.0;
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) total += x.data()[i];
    Tensor out = Tensor::scalar(total);
    if (track(tape, x)) {
        out.set_requires_grad(true);
        tape->record([x, out, n]() mutable {
            const double g = out.grad()[0];
            double* gx = x.grad().data();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

namespace {

Tensor gather_rows(Tape* tape, const Tensor& table, const std::vector<int>& ids,
                   const char* op) {
    require_rank2(table, op);
    const int v = table.rows(), d = table.cols();
    const int n = static_cast<int>(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw IndexError(std::string(op) + ": row " + std::to_string(id) +
                             " outside table " + shape_string(table.shape()));
        }
    }
    Tensor out({n, d}, track(tape, table));
    for (int i = 0; i < n; ++i) {
        const double* src = table.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d;
        double* dst = out.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) dst[j] = src[j];
    }
    if (out.requires_grad()) {
        auto idx = std::make_shared<std::vector<int>>(ids);
        tape->record([table, out, idx, n, d]() mutable {
            double* gt = table.grad().data();
            const double* g = out.grad().data();
            for (int i = 0; i < n; ++i) {
                double* dst = gt + static_cast<std::size_t>((*idx)[static_cast<std::size_t>(i)]) * d;
                const double* src = g + static_cast<std::size_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

}  // namespace

Tensor embedding_rows(Tape* tape, const Tensor& table, const std::vector<int>& ids) {
    return gather_rows(tape, table, ids, "embedding_rows");
}

Tensor select_rows(Tape* tape, const Tensor& x, const std::vector<int>& positions) {
    return gather_rows(tape, x, positions, "select_rows");
}

Tensor slice_cols(Tape* tape, const Tensor& x, int first, int count) {
    require_rank2(x, "slice_cols");
    const int m = x.rows(), n = x.cols();
    if (first < 0 || count <= 0 || first + count > n) {
        throw IndexError("slice_cols: columns [" + std::to_string(first) + "," +
                         std::to_string(first + count) + ") outside " +
                         shape_string(x.shape()));
    }
    Tensor out({m, count}, track(tape, x));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j)
            out.data()[i * count + j] = x.data()[static_cast<std::size_t>(i) * n + first + j];
    if (out.requires_grad()) {
        tape->record([x, out, first, count, m, n]() mutable {
            double* gx = x.grad().data();
            const double* g = out.grad().data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < count; ++j)
                    gx[static_cast<std::size_t>(i) * n + first + j] += g[i * count + j];
        });
    }
    return out;
}

Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const int m = parts[0].rows();
    int total = 0;
    bool need_grad = false;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != m) {
            throw ShapeError("concat_cols: row counts differ, " + shape_string(parts[0].shape()) +
                             " vs " + shape_string(p.shape()));
        }
        total += p.cols();
        need_grad = need_grad || p.requires_grad();
    }
    Tensor out({m, total}, tape != nullptr && need_grad);
    int offset = 0;
    for (const Tensor& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                out.data()[static_cast<std::size_t>(i) * total + offset + j] = p.data()[i * w + j];
        offset += w;
    }
    if (out.requires_grad()) {
        auto parts_copy = std::make_shared<std::vector<Tensor>>(parts);
        tape->record([parts_copy, out, m, total]() mutable {
            const double* g = out.grad().data();
            int off = 0;
            for (Tensor& p : *parts_copy) {
                const int w = p.cols();
                if (p.requires_grad()) {
                    double* gp = p.grad().data();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            gp[i * w + j] += g[static_cast<std::size_t>(i) * total + off + j];
                }
                off += w;
            }
        });
    }
    return out;
}

}  // namespace masklm
