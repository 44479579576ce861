#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "masklm/model.hpp"
#include "masklm/optimizer.hpp"
#include "masklm/rng.hpp"
#include "masklm/tokenizer.hpp"

namespace masklm {

// ---- corruption -------------------------------------------------------------

struct CorruptionPolicy {
    double mask_prob = 0.15;
    double replace_mask = 0.80;
    double replace_random = 0.10;
    double keep_original = 0.10;
    double span_unigram = 0.80;
    double span_bigram_or_trigram = 0.20;  // split uniformly between 2 and 3

    void validate() const;  // each group must sum to 1
};

struct MaskTarget {
    int position;  // index into the packed input
    int original;  // token id before corruption
};

struct ClozeExample {
    PackedInput input;  // corrupted
    std::vector<MaskTarget> targets;
};

// Monte-Carlo counters for the corruption distribution. Span kinds are counted
// as drawn; boundary truncation may shorten the realized span.
struct CorruptionStats {
    std::int64_t unigram_spans = 0;
    std::int64_t bigram_spans = 0;
    std::int64_t trigram_spans = 0;
    std::int64_t replaced_mask = 0;
    std::int64_t replaced_random = 0;
    std::int64_t kept_original = 0;
    std::int64_t masked_tokens = 0;
    std::int64_t maskable_tokens = 0;
};

// Draws masking spans until the budget ceil(mask_prob * maskable) (>= 1) is
// met, truncating spans at segment boundaries, special tokens, already-chosen
// positions, and the budget itself; then applies the 80/10/10 MASK / random /
// keep replacement per chosen token. Deterministic per rng state.
ClozeExample corrupt(const PackedInput& clean, const CorruptionPolicy& policy, int vocab_size,
                     Rng& rng, CorruptionStats* stats = nullptr);

// ---- objective mixing and pairing -------------------------------------------

struct MixSchedule {
    double bidirectional = 1.0 / 3.0;
    double seq2seq = 1.0 / 3.0;
    double left_to_right = 1.0 / 6.0;
    double right_to_left = 1.0 / 6.0;

    void validate() const;  // non-negative, sums to 1
};

ObjectiveKind sample_objective(const MixSchedule& schedule, Rng& rng);

// Documents are corpus lines; sentences split on [.!?]+ whitespace.
struct Corpus {
    std::vector<std::vector<TokenSequence>> docs;

    static Corpus from_text(const std::string& text, const Vocab& vocab);
    static Corpus load_file(const std::filesystem::path& path, const Vocab& vocab);

    std::size_t total_sentences() const;
    std::size_t consecutive_pair_count() const;
};

std::vector<std::string> split_sentences(const std::string& line);

enum class NspLabel { IsNext = 0, NotNext = 1 };

struct SentencePair {
    std::vector<int> first;
    std::vector<int> second;
    NspLabel label = NspLabel::IsNext;
};

// Uniform over all adjacent same-document sentence pairs; label IsNext.
SentencePair sample_consecutive_pair(const Corpus& corpus, Rng& rng);
// 50% consecutive pair, 50% second sentence from a different document.
SentencePair make_nsp_pair(const Corpus& corpus, Rng& rng);
// Uniform over all sentences.
const TokenSequence& sample_sentence(const Corpus& corpus, Rng& rng);

// ---- training step and loop -------------------------------------------------

struct ClozeBatch {
    std::vector<PackedInput> inputs;  // each carries its exact objective
    std::vector<std::vector<MaskTarget>> targets;
    std::vector<NspLabel> nsp_labels;          // bidirectional batches; else empty
    std::vector<std::uint64_t> dropout_seeds;  // per example; 0,1,2,... when empty
    ObjectiveKind objective = ObjectiveKind::Bidirectional;
};

// Forward + cross-entropy over masked tokens (mean per token, pooled across
// the batch), plus the mean next-sentence loss on bidirectional batches; one
// Adam update at the given schedule step. Returns the loss value.
double pretrain_step(ModelParams& params, const ClozeBatch& batch, Adam& opt, std::int64_t step);

struct PretrainConfig {
    int steps = 2000;
    int batch_size = 16;
    int checkpoint_every = 500;
    std::uint64_t seed = 0;
    OptimizerConfig optimizer;
    CorruptionPolicy corruption;
    MixSchedule mix;
};

struct StepRecord {
    std::int64_t step;  // 1-based; the step that just completed
    ObjectiveKind objective;
    double loss;
    double lr;
};

// Full training loop: sample objective -> assemble batch -> corrupt ->
// pretrain_step. Writes metrics.jsonl (one line per step), a checkpoint plus
// training-state file at step 0, every checkpoint_every steps, and at the
// end. With resume = true, continues from the newest checkpoint in out_dir
// and reproduces the uninterrupted trajectory exactly.
std::vector<StepRecord> pretrain_loop(ModelParams& params, const Corpus& corpus,
                                      const Vocab& vocab, const PretrainConfig& config,
                                      const std::filesystem::path& out_dir, bool resume = false);

// One step's worth of batch assembly, shared by the loop and the tests.
ClozeBatch assemble_batch(const Corpus& corpus, const PretrainConfig& config,
                          const ModelConfig& model_config, Rng& rng);

}  // namespace masklm
