#include "masklm/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "masklm/error.hpp"
#include "masklm/masks.hpp"

namespace masklm {

void DecodeConfig::validate() const {
    if (beam_size < 1) throw DataError("decode config: beam_size must be >= 1");
    if (max_out_len < 1) throw DataError("decode config: max_out_len must be >= 1");
    if (block_ngram != 0 && block_ngram < 2) {
        throw DataError("decode config: block_ngram must be 0 (disabled) or >= 2");
    }
    if (top_k < 1) throw DataError("decode config: top_k must be >= 1");
    if (length_norm < 0.0) throw DataError("decode config: length_norm must be >= 0");
}

namespace {

std::vector<double> mask_position_dist(const ModelParams& params, const PackedInput& packed) {
    HiddenStates states = forward(nullptr, params, packed, false, 0);
    Tensor logits = lm_logits(nullptr, params, states.h.back(), {packed.length() - 1});
    return softmax_rows(nullptr, logits).values();
}

}  // namespace

std::vector<double> next_token_dist(const ModelParams& params, const std::vector<int>& source,
                                    const std::vector<int>& prefix) {
    if (source.empty()) throw DataError("seq2seq generation needs a non-empty source");
    const int n = static_cast<int>(source.size() + prefix.size()) + 3;
    if (n > params.config.max_len) {
        std::ostringstream os;
        os << "packed generation input of length " << n << " exceeds max_len "
           << params.config.max_len << "; truncate the source or lower max_out_len";
        throw DataError(os.str());
    }
    PackedInput p;
    p.ids.reserve(static_cast<std::size_t>(n));
    p.ids.push_back(Vocab::kSos);
    p.ids.insert(p.ids.end(), source.begin(), source.end());
    p.ids.push_back(Vocab::kEos);
    const int source_len = static_cast<int>(p.ids.size());
    p.ids.insert(p.ids.end(), prefix.begin(), prefix.end());
    p.ids.push_back(Vocab::kMask);
    p.segments.assign(p.ids.size(), SegmentIds::kSeq2SeqTarget);
    for (int i = 0; i < source_len; ++i) p.segments[static_cast<std::size_t>(i)] = SegmentIds::kSeq2SeqSource;
    p.positions.resize(p.ids.size());
    for (std::size_t i = 0; i < p.positions.size(); ++i) p.positions[i] = static_cast<int>(i);
    p.objective = LMObjective::seq2seq(source_len);
    return mask_position_dist(params, p);
}

std::vector<double> next_token_dist_lr(const ModelParams& params, const std::vector<int>& prefix) {
    const int n = static_cast<int>(prefix.size()) + 2;
    if (n > params.config.max_len) {
        std::ostringstream os;
        os << "packed generation input of length " << n << " exceeds max_len "
           << params.config.max_len << "; truncate the prompt or lower max_out_len";
        throw DataError(os.str());
    }
    PackedInput p;
    p.ids.reserve(static_cast<std::size_t>(n));
    p.ids.push_back(Vocab::kSos);
    p.ids.insert(p.ids.end(), prefix.begin(), prefix.end());
    p.ids.push_back(Vocab::kMask);
    p.segments.assign(p.ids.size(), SegmentIds::kLeftToRight);
    p.positions.resize(p.ids.size());
    for (std::size_t i = 0; i < p.positions.size(); ++i) p.positions[i] = static_cast<int>(i);
    p.objective = LMObjective::left_to_right();
    return mask_position_dist(params, p);
}

bool completes_duplicate_ngram(const std::vector<int>& ids, int candidate, int n) {
    const int len = static_cast<int>(ids.size());
    if (n < 2 || len < n) return false;
    // The would-be new n-gram: the last n-1 generated tokens plus candidate.
    const int pattern_start = len - n + 1;
    for (int start = 0; start + n <= len; ++start) {
        bool equal = candidate == ids[static_cast<std::size_t>(start + n - 1)];
        for (int k = 0; equal && k + 1 < n; ++k) {
            equal = ids[static_cast<std::size_t>(start + k)] ==
                    ids[static_cast<std::size_t>(pattern_start + k)];
        }
        if (equal) return true;
    }
    return false;
}

namespace {

// Beam ordering: higher score first, then earlier finish, then lexicographic.
bool better_hypothesis(const Hypothesis& a, const Hypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    if (a.ids.size() != b.ids.size()) return a.ids.size() < b.ids.size();
    return a.ids < b.ids;
}

double ranking_score(const Hypothesis& h, double length_norm) {
    if (length_norm == 0.0) return h.log_prob;
    return h.log_prob / std::pow(static_cast<double>(h.ids.size()), length_norm);
}

}  // namespace

Hypothesis beam_search_over(const NextTokenFn& next, int vocab_size, const DecodeConfig& config) {
    config.validate();
    std::vector<Hypothesis> frontier(1);  // one empty, unfinished hypothesis
    std::vector<Hypothesis> finished;

    for (int t = 0; t < config.max_out_len && !frontier.empty(); ++t) {
        std::vector<Hypothesis> candidates;
        for (const Hypothesis& hyp : frontier) {
            const std::vector<double> dist = next(hyp.ids);
            if (static_cast<int>(dist.size()) != vocab_size) {
                throw ShapeError("next-token distribution size " +
                                 std::to_string(dist.size()) + " does not match vocab size " +
                                 std::to_string(vocab_size));
            }
            for (int v = 0; v < vocab_size; ++v) {
                if (dist[static_cast<std::size_t>(v)] <= 0.0) continue;
                if (config.block_ngram >= 2 &&
                    completes_duplicate_ngram(hyp.ids, v, config.block_ngram)) {
                    continue;  // blocked extensions drop out before selection
                }
                Hypothesis ext = hyp;
                ext.ids.push_back(v);
                ext.log_prob += std::log(dist[static_cast<std::size_t>(v)]);
                ext.finished =
                    v == Vocab::kEos || static_cast<int>(ext.ids.size()) >= config.max_out_len;
                candidates.push_back(std::move(ext));
            }
        }
        if (candidates.empty()) break;  // every extension blocked or zero-probability

        std::sort(candidates.begin(), candidates.end(), better_hypothesis);
        frontier.clear();
        const std::size_t keep = std::min<std::size_t>(candidates.size(),
                                                       static_cast<std::size_t>(config.beam_size));
        for (std::size_t i = 0; i < keep; ++i) {
            (candidates[i].finished ? finished : frontier).push_back(std::move(candidates[i]));
        }

        // Log-probabilities only fall with length, so once the best live
        // hypothesis cannot beat a finished one the search is over (pure-sum
        // ranking only).
        if (config.length_norm == 0.0 && !finished.empty() && !frontier.empty()) {
            const double best_finished =
                std::max_element(finished.begin(), finished.end(),
                                 [](const Hypothesis& a, const Hypothesis& b) {
                                     return a.log_prob < b.log_prob;
                                 })
                    ->log_prob;
            if (frontier.front().log_prob <= best_finished) break;
        }
    }

    if (finished.empty()) {
        throw DataError("beam search finished no hypothesis: every extension was blocked");
    }
    std::sort(finished.begin(), finished.end(),
              [&](const Hypothesis& a, const Hypothesis& b) {
                  const double sa = ranking_score(a, config.length_norm);
                  const double sb = ranking_score(b, config.length_norm);
                  if (sa != sb) return sa > sb;
                  if (a.ids.size() != b.ids.size()) return a.ids.size() < b.ids.size();
                  return a.ids < b.ids;
              });
    return finished.front();
}

std::vector<int> sample_tokens_over(const NextTokenFn& next, int vocab_size,
                                    const DecodeConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    std::vector<int> out;
    for (int t = 0; t < config.max_out_len; ++t) {
        const std::vector<double> dist = next(out);
        if (static_cast<int>(dist.size()) != vocab_size) {
            throw ShapeError("next-token distribution size " + std::to_string(dist.size()) +
                             " does not match vocab size " + std::to_string(vocab_size));
        }
        std::vector<int> order(static_cast<std::size_t>(vocab_size));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            const double pa = dist[static_cast<std::size_t>(a)];
            const double pb = dist[static_cast<std::size_t>(b)];
            return pa != pb ? pa > pb : a < b;
        });

        // Truncate to the top_k most probable first, then drop blocked tokens
        // from that window.
        std::vector<int> candidates;
        std::vector<double> weights;
        int taken = 0;
        for (int k = 0; k < vocab_size && taken < config.top_k; ++k) {
            const int v = order[static_cast<std::size_t>(k)];
            const double p = dist[static_cast<std::size_t>(v)];
            if (p <= 0.0) break;
            ++taken;
            if (config.block_ngram >= 2 && completes_duplicate_ngram(out, v, config.block_ngram)) {
                continue;
            }
            candidates.push_back(v);
            weights.push_back(p);
        }
        if (candidates.empty()) {
            out.push_back(Vocab::kEos);
            break;
        }
        const int chosen = candidates[rng.categorical(weights)];
        out.push_back(chosen);
        if (chosen == Vocab::kEos) break;
    }
    return out;
}

Hypothesis beam_search(const ModelParams& params, const std::vector<int>& source,
                       const DecodeConfig& config) {
    const NextTokenFn next = [&](const std::vector<int>& prefix) {
        return next_token_dist(params, source, prefix);
    };
    return beam_search_over(next, params.config.vocab, config);
}

std::vector<int> sample_lr(const ModelParams& params, const std::vector<int>& prompt,
                           const DecodeConfig& config, std::uint64_t seed) {
    if (prompt.empty()) throw DataError("sampling needs a non-empty prompt");
    const NextTokenFn next = [&](const std::vector<int>& generated) {
        std::vector<int> prefix = prompt;
        prefix.insert(prefix.end(), generated.begin(), generated.end());
        return next_token_dist_lr(params, prefix);
    };
    return sample_tokens_over(next, params.config.vocab, config, seed);
}

}  // namespace masklm
