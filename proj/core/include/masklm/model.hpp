#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "masklm/masks.hpp"
#include "masklm/tensor.hpp"
#include "masklm/tokenizer.hpp"

namespace masklm {

struct ModelConfig {
    int layers = 2;
    int hidden = 64;
    int heads = 4;
    int head_dim = 16;  // hidden / heads
    int ffn = 256;
    int vocab = 0;
    int max_len = 64;
    int segments = 6;
    double dropout = 0.1;

    void validate() const;
};

// Segment embeddings double as the LM-objective identifier: each objective
// gets disjoint segment ids.
//   Bidirectional pair  -> (0, 1)
//   LeftToRight         -> 2
//   RightToLeft         -> 3
//   Seq2Seq pair        -> (4, 5)
struct SegmentIds {
    static constexpr int kBidiFirst = 0;
    static constexpr int kBidiSecond = 1;
    static constexpr int kLeftToRight = 2;
    static constexpr int kRightToLeft = 3;
    static constexpr int kSeq2SeqSource = 4;
    static constexpr int kSeq2SeqTarget = 5;
    static constexpr int kCount = 6;
};

// A packed one- or two-segment input: SOS first, every segment closed by EOS.
struct PackedInput {
    std::vector<int> ids;
    std::vector<int> segments;
    std::vector<int> positions;  // always 0..n-1
    LMObjective objective;

    int length() const { return static_cast<int>(ids.size()); }
};

// Training-time packers. Decoding packs its own (intentionally unterminated)
// inputs, so forward() itself only checks table bounds.
PackedInput pack_single(const std::vector<int>& tokens, ObjectiveKind direction);
PackedInput pack_pair(const std::vector<int>& first, const std::vector<int>& second,
                      ObjectiveKind objective);
// Checks the SOS/EOS framing and segment assignment of a training packing.
void validate_training_packing(const PackedInput& input);

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool weight_decay;  // embeddings, norms, and biases are exempt
};

struct LayerParams {
    Tensor w_q, w_k, w_v, w_o;      // [hidden x hidden]
    Tensor attn_gain, attn_bias;    // [hidden]
    Tensor ff_w1;                   // [hidden x ffn]
    Tensor ff_w2;                   // [ffn x hidden]
    Tensor ff_gain, ff_bias;        // [hidden]
};

struct ModelParams {
    ModelConfig config;
    Tensor token_embedding;     // [vocab x hidden]; also the tied LM-head weight
    Tensor position_embedding;  // [max_len x hidden]
    Tensor segment_embedding;   // [segments x hidden]
    std::vector<LayerParams> layer;
    Tensor nsp_head;            // [hidden x 2]
    Tensor lm_bias;             // [vocab]

    // Fresh random parameters: normal(0, init_std) weights, identity norms.
    static ModelParams init(const ModelConfig& config, Rng& rng, double init_std = 0.02);

    // Every trainable tensor in the documented checkpoint order.
    std::vector<NamedParam> parameters() const;
    std::int64_t parameter_count() const;
};

struct HiddenStates {
    std::vector<Tensor> h;  // h[0] = summed embeddings, h[l] = layer l output
};

// Optional per-layer, per-head attention probability probes for tests.
struct AttentionProbes {
    std::vector<std::vector<Tensor>> probs;  // [layer][head], each [n x n]
};

Tensor embed(Tape* tape, const ModelParams& params, const PackedInput& input);

Tensor attention_layer(Tape* tape, const Tensor& h, const AttentionMask& mask,
                       const LayerParams& lp, const ModelConfig& config, bool train_mode,
                       Rng* dropout_rng, std::vector<Tensor>* head_probs = nullptr);

HiddenStates forward(Tape* tape, const ModelParams& params, const PackedInput& input,
                     bool train_mode, std::uint64_t seed, AttentionProbes* probes = nullptr);

// Logits over the vocabulary at the given positions, through the tied
// embedding table plus the LM bias.
Tensor lm_logits(Tape* tape, const ModelParams& params, const Tensor& h,
                 const std::vector<int>& positions);

// {IsNext, NotNext} logits from the SOS-position vector h1 [1 x hidden].
Tensor nsp_logits(Tape* tape, const ModelParams& params, const Tensor& h1);

// ---- checkpoints ------------------------------------------------------------
// Layout: 8-byte magic "MLMCKPT1", little-endian u32 header length, JSON
// header {version, config, vocab?, arrays:[{name, shape}]}, then each array's
// raw little-endian float64 data in header order.

struct Checkpoint {
    ModelParams params;
    std::vector<std::string> vocab_tokens;   // empty when the file carries none
    std::map<std::string, Tensor> extras;    // task heads and other add-ons
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::vector<std::string>& vocab_tokens = {},
                     const std::map<std::string, Tensor>& extras = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Same binary framing without a model: named f64 arrays plus a free-form
// string meta block. Training state (optimizer moments, RNG state) uses this.
struct ArrayFile {
    std::map<std::string, std::string> meta;
    std::map<std::string, Tensor> arrays;
};
void save_array_file(const std::filesystem::path& path,
                     const std::map<std::string, std::string>& meta,
                     const std::vector<NamedParam>& arrays);
ArrayFile load_array_file(const std::filesystem::path& path);

}  // namespace masklm
