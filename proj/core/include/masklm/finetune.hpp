#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "masklm/model.hpp"
#include "masklm/optimizer.hpp"
#include "masklm/pretrain.hpp"

namespace masklm {

// ---- heads -------------------------------------------------------------------

struct ClassifierHead {
    Tensor w;  // [hidden x classes]

    static ClassifierHead init(int hidden, int classes, Rng& rng, double init_std = 0.02);
    int classes() const { return w.cols(); }
};

struct SpanHead {
    Tensor start_proj;  // [hidden x 1]
    Tensor end_proj;    // [hidden x 1]

    static SpanHead init(int hidden, Rng& rng, double init_std = 0.02);
};

struct FinetuneConfig {
    enum class Mode { Classify, Span, Seq2Seq };
    Mode mode = Mode::Seq2Seq;
    double target_mask_prob = 0.7;  // Seq2Seq: chance each target token becomes MASK
    double label_smoothing = 0.1;   // Seq2Seq target prediction only
    int epochs = 10;
    int batch = 8;
    double lr = 1e-3;
    double dropout = 0.1;  // overrides the checkpoint's dropout during fine-tuning
    int max_span_len = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

// ---- packing -----------------------------------------------------------------

// Single text as one bidirectional segment: SOS text EOS, segment ids all 0.
PackedInput pack_classify(const std::vector<int>& tokens);

struct SpanExample {
    PackedInput input;
    int passage_first = 0;  // packed position of the first passage token
    int passage_last = 0;   // packed position of the last passage token (inclusive)
};

// Passage then question, bidirectional: SOS passage EOS question EOS.
SpanExample pack_span_example(const std::vector<int>& passage, const std::vector<int>& question);

// ---- inference ---------------------------------------------------------------

// Class probabilities from the last layer's SOS vector through the head.
std::vector<double> classify(const ModelParams& params, const ClassifierHead& head,
                             const PackedInput& input);

struct SpanPrediction {
    int start = 0;
    int end = 0;
};

// Argmax of start_logit[i] + end_logit[j] over pairs with
// passage_first <= i <= j <= min(i + max_span_len, passage_last).
// Ties break toward the smaller start, then the smaller end.
SpanPrediction extract_span(const ModelParams& params, const SpanHead& head,
                            const PackedInput& input, int passage_first, int passage_last,
                            int max_span_len = 16);

// ---- training ----------------------------------------------------------------

// Seq2seq fine-tuning loss for one pair on the tape: pack as a seq2seq pair,
// turn each target-segment token (including the final EOS, never the source)
// into MASK with probability target_mask_prob, at least one; label-smoothed
// cross-entropy at the masked positions.
Tensor seq2seq_finetune_loss(Tape* tape, const ModelParams& params,
                             const std::vector<int>& source, const std::vector<int>& target,
                             const FinetuneConfig& config, Rng& rng, std::uint64_t dropout_seed,
                             bool train_mode, std::vector<MaskTarget>* targets_out = nullptr);

double finetune_seq2seq_step(ModelParams& params, Adam& opt, const std::vector<int>& source,
                             const std::vector<int>& target, const FinetuneConfig& config,
                             std::int64_t step, Rng& rng);

double finetune_classify_step(ModelParams& params, ClassifierHead& head, Adam& opt,
                              const std::vector<PackedInput>& inputs,
                              const std::vector<int>& labels, std::int64_t step, Rng& rng);

double finetune_span_step(ModelParams& params, SpanHead& head, Adam& opt,
                          const std::vector<SpanExample>& examples,
                          const std::vector<SpanPrediction>& gold, std::int64_t step, Rng& rng);

// ---- datasets and epoch loops --------------------------------------------------

struct ClassifyDataset {
    std::vector<PackedInput> inputs;
    std::vector<int> labels;
    int classes = 0;

    // TSV lines: text<TAB>label. Labels are assigned ids in first-seen order.
    static ClassifyDataset load_tsv(const std::filesystem::path& path, const Vocab& vocab);
    std::vector<std::string> label_names;
};

struct SpanDataset {
    std::vector<SpanExample> examples;
    std::vector<SpanPrediction> gold;  // packed coordinates

    // JSON lines: {"passage", "question", "answer_start", "answer_end"} with
    // byte offsets into the passage, end exclusive.
    static SpanDataset load_jsonl(const std::filesystem::path& path, const Vocab& vocab);
};

struct PairDataset {
    std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;

    // TSV lines: source<TAB>target.
    static PairDataset load_tsv(const std::filesystem::path& path, const Vocab& vocab);
};

// Epoch-driven loops over shuffled batches; linear lr decay, no warmup.
// Returned values are the per-step losses.
std::vector<double> run_finetune_classify(ModelParams& params, ClassifierHead& head,
                                          const ClassifyDataset& data,
                                          const FinetuneConfig& config);
std::vector<double> run_finetune_span(ModelParams& params, SpanHead& head,
                                      const SpanDataset& data, const FinetuneConfig& config);
std::vector<double> run_finetune_seq2seq(ModelParams& params, const PairDataset& data,
                                         const FinetuneConfig& config);

}  // namespace masklm
