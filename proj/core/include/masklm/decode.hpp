#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "masklm/model.hpp"
#include "masklm/tokenizer.hpp"

namespace masklm {

struct Hypothesis {
    std::vector<int> ids;  // generated tokens; ends with EOS when finished that way
    double log_prob = 0.0;
    bool finished = false;
};

struct DecodeConfig {
    int beam_size = 5;
    int max_out_len = 32;
    int block_ngram = 3;  // duplicate n-gram size to forbid; 0 disables
    int top_k = 40;       // sampling truncation
    double length_norm = 0.0;  // final ranking: log_prob / length^length_norm

    void validate() const;
};

// Next-token distribution for seq2seq generation: packs
// "SOS source EOS prefix MASK", runs the seq2seq-masked forward pass, and
// returns the softmax of the LM logits at the MASK position.
std::vector<double> next_token_dist(const ModelParams& params, const std::vector<int>& source,
                                    const std::vector<int>& prefix);

// The left-to-right variant used for sampling: packs "SOS prefix MASK" under
// the left-to-right mask.
std::vector<double> next_token_dist_lr(const ModelParams& params, const std::vector<int>& prefix);

// True when appending `candidate` to `ids` would complete an n-gram already
// present in ids (the duplicate-n-gram blocking rule).
bool completes_duplicate_ngram(const std::vector<int>& ids, int candidate, int n);

// Model-agnostic cores, so the search logic can be exercised against
// hand-built stochastic matrices as well as real checkpoints. The function
// maps a generated prefix to a next-token distribution of size vocab_size.
using NextTokenFn = std::function<std::vector<double>(const std::vector<int>& prefix)>;

Hypothesis beam_search_over(const NextTokenFn& next, int vocab_size, const DecodeConfig& config);
std::vector<int> sample_tokens_over(const NextTokenFn& next, int vocab_size,
                                    const DecodeConfig& config, std::uint64_t seed);

// Seq2seq beam search over a real model.
Hypothesis beam_search(const ModelParams& params, const std::vector<int>& source,
                       const DecodeConfig& config);

// Left-to-right top-k sampling continuation of a prompt. The returned ids are
// the generated continuation only (with the final EOS when one was emitted).
std::vector<int> sample_lr(const ModelParams& params, const std::vector<int>& prompt,
                           const DecodeConfig& config, std::uint64_t seed);

}  // namespace masklm
