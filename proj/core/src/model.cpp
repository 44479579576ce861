#include "masklm/model.hpp"

#include <cmath>
#include <sstream>

#include "masklm/error.hpp"

namespace masklm {

namespace {

constexpr double kLayerNormEps = 1e-12;

}  // namespace

void ModelConfig::validate() const {
    if (layers < 0) throw DataError("model config: layers must be >= 0");
    if (heads < 1 || head_dim < 1) throw DataError("model config: heads and head_dim must be >= 1");
    if (hidden != heads * head_dim) {
        std::ostringstream os;
        os << "model config: hidden (" << hidden << ") must equal heads*head_dim (" << heads << "*"
           << head_dim << ")";
        throw DataError(os.str());
    }
    if (ffn < 1) throw DataError("model config: ffn must be >= 1");
    if (vocab < Vocab::kReservedCount + 1) {
        throw DataError("model config: vocab must cover the reserved ids plus at least one token");
    }
    if (max_len < 2) throw DataError("model config: max_len must be >= 2");
    if (segments < SegmentIds::kCount) {
        std::ostringstream os;
        os << "model config: segments must be >= " << SegmentIds::kCount << ", got " << segments;
        throw DataError(os.str());
    }
    if (dropout < 0.0 || dropout >= 1.0) throw DataError("model config: dropout must be in [0, 1)");
}

PackedInput pack_single(const std::vector<int>& tokens, ObjectiveKind direction) {
    if (direction != ObjectiveKind::LeftToRight && direction != ObjectiveKind::RightToLeft) {
        throw DataError("pack_single handles only the unidirectional objectives");
    }
    PackedInput p;
    p.ids.reserve(tokens.size() + 2);
    p.ids.push_back(Vocab::kSos);
    p.ids.insert(p.ids.end(), tokens.begin(), tokens.end());
    p.ids.push_back(Vocab::kEos);
    const int seg = direction == ObjectiveKind::LeftToRight ? SegmentIds::kLeftToRight
                                                            : SegmentIds::kRightToLeft;
    p.segments.assign(p.ids.size(), seg);
    p.positions.resize(p.ids.size());
    for (std::size_t i = 0; i < p.positions.size(); ++i) p.positions[i] = static_cast<int>(i);
    p.objective = direction == ObjectiveKind::LeftToRight ? LMObjective::left_to_right()
                                                          : LMObjective::right_to_left();
    return p;
}

PackedInput pack_pair(const std::vector<int>& first, const std::vector<int>& second,
                      ObjectiveKind objective) {
    if (objective != ObjectiveKind::Bidirectional && objective != ObjectiveKind::Seq2Seq) {
        throw DataError("pack_pair handles only the bidirectional and seq2seq objectives");
    }
    PackedInput p;
    const std::size_t n = first.size() + second.size() + 3;
    p.ids.reserve(n);
    p.ids.push_back(Vocab::kSos);
    p.ids.insert(p.ids.end(), first.begin(), first.end());
    p.ids.push_back(Vocab::kEos);
    const int source_len = static_cast<int>(p.ids.size());
    p.ids.insert(p.ids.end(), second.begin(), second.end());
    p.ids.push_back(Vocab::kEos);

    const int seg_a = objective == ObjectiveKind::Bidirectional ? SegmentIds::kBidiFirst
                                                                : SegmentIds::kSeq2SeqSource;
    const int seg_b = objective == ObjectiveKind::Bidirectional ? SegmentIds::kBidiSecond
                                                                : SegmentIds::kSeq2SeqTarget;
    p.segments.assign(p.ids.size(), seg_b);
    for (int i = 0; i < source_len; ++i) p.segments[static_cast<std::size_t>(i)] = seg_a;

    p.positions.resize(p.ids.size());
    for (std::size_t i = 0; i < p.positions.size(); ++i) p.positions[i] = static_cast<int>(i);
    p.objective = objective == ObjectiveKind::Bidirectional ? LMObjective::bidirectional()
                                                            : LMObjective::seq2seq(source_len);
    return p;
}

void validate_training_packing(const PackedInput& input) {
    const int n = input.length();
    if (n < 2) throw DataError("packed input must hold at least SOS and EOS");
    if (static_cast<int>(input.segments.size()) != n ||
        static_cast<int>(input.positions.size()) != n) {
        throw DataError("packed input: ids, segments, and positions must have equal length");
    }
    if (input.ids.front() != Vocab::kSos) throw DataError("packed input must start with SOS");
    if (input.ids.back() != Vocab::kEos) throw DataError("packed input must end with EOS");
    for (int i = 0; i < n; ++i) {
        if (input.positions[static_cast<std::size_t>(i)] != i) {
            throw DataError("packed input positions must be 0..n-1");
        }
    }

    int seg_a = -1, seg_b = -1;
    switch (input.objective.kind) {
        case ObjectiveKind::Bidirectional:
            seg_a = SegmentIds::kBidiFirst;
            seg_b = SegmentIds::kBidiSecond;
            break;
        case ObjectiveKind::LeftToRight:
            seg_a = seg_b = SegmentIds::kLeftToRight;
            break;
        case ObjectiveKind::RightToLeft:
            seg_a = seg_b = SegmentIds::kRightToLeft;
            break;
        case ObjectiveKind::Seq2Seq:
            seg_a = SegmentIds::kSeq2SeqSource;
            seg_b = SegmentIds::kSeq2SeqTarget;
            break;
    }
    int boundary = n;  // first index carrying seg_b, n when single-segment
    for (int i = 0; i < n; ++i) {
        const int s = input.segments[static_cast<std::size_t>(i)];
        if (i < boundary && s == seg_b && seg_b != seg_a) {
            boundary = i;
        } else if (s != (i < boundary ? seg_a : seg_b)) {
            throw DataError("packed input segment ids do not match the objective");
        }
    }
    if (input.objective.kind == ObjectiveKind::Bidirectional ||
        input.objective.kind == ObjectiveKind::Seq2Seq) {
        if (boundary >= n) throw DataError("two-segment packing is missing its second segment");
        if (input.ids[static_cast<std::size_t>(boundary - 1)] != Vocab::kEos) {
            throw DataError("first segment must be terminated by EOS");
        }
        if (input.objective.kind == ObjectiveKind::Seq2Seq &&
            input.objective.source_len != boundary) {
            std::ostringstream os;
            os << "seq2seq source_len " << input.objective.source_len
               << " does not match the segment boundary " << boundary;
            throw DataError(os.str());
        }
    }
}

ModelParams ModelParams::init(const ModelConfig& config, Rng& rng, double init_std) {
    config.validate();
    ModelParams p;
    p.config = config;
    // Draw order matches parameters() order so a seed pins every weight.
    p.token_embedding = Tensor::randn({config.vocab, config.hidden}, rng, init_std, true);
    p.position_embedding = Tensor::randn({config.max_len, config.hidden}, rng, init_std, true);
    p.segment_embedding = Tensor::randn({config.segments, config.hidden}, rng, init_std, true);
    p.layer.resize(static_cast<std::size_t>(config.layers));
    for (auto& lp : p.layer) {
        lp.w_q = Tensor::randn({config.hidden, config.hidden}, rng, init_std, true);
        lp.w_k = Tensor::randn({config.hidden, config.hidden}, rng, init_std, true);
        lp.w_v = Tensor::randn({config.hidden, config.hidden}, rng, init_std, true);
        lp.w_o = Tensor::randn({config.hidden, config.hidden}, rng, init_std, true);
        lp.attn_gain = Tensor::full({config.hidden}, 1.0, true);
        lp.attn_bias = Tensor::full({config.hidden}, 0.0, true);
        lp.ff_w1 = Tensor::randn({config.hidden, config.ffn}, rng, init_std, true);
        lp.ff_w2 = Tensor::randn({config.ffn, config.hidden}, rng, init_std, true);
        lp.ff_gain = Tensor::full({config.hidden}, 1.0, true);
        lp.ff_bias = Tensor::full({config.hidden}, 0.0, true);
    }
    p.nsp_head = Tensor::randn({config.hidden, 2}, rng, init_std, true);
    p.lm_bias = Tensor::full({config.vocab}, 0.0, true);
    return p;
}

std::vector<NamedParam> ModelParams::parameters() const {
    std::vector<NamedParam> out;
    out.push_back({"token_embedding", token_embedding, false});
    out.push_back({"position_embedding", position_embedding, false});
    out.push_back({"segment_embedding", segment_embedding, false});
    for (std::size_t l = 0; l < layer.size(); ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        const LayerParams& lp = layer[l];
        out.push_back({prefix + "attn.w_q", lp.w_q, true});
        out.push_back({prefix + "attn.w_k", lp.w_k, true});
        out.push_back({prefix + "attn.w_v", lp.w_v, true});
        out.push_back({prefix + "attn.w_o", lp.w_o, true});
        out.push_back({prefix + "attn.norm_gain", lp.attn_gain, false});
        out.push_back({prefix + "attn.norm_bias", lp.attn_bias, false});
        out.push_back({prefix + "ff.w1", lp.ff_w1, true});
        out.push_back({prefix + "ff.w2", lp.ff_w2, true});
        out.push_back({prefix + "ff.norm_gain", lp.ff_gain, false});
        out.push_back({prefix + "ff.norm_bias", lp.ff_bias, false});
    }
    out.push_back({"nsp_head", nsp_head, true});
    out.push_back({"lm_bias", lm_bias, false});
    return out;
}

std::int64_t ModelParams::parameter_count() const {
    std::int64_t total = 0;
    for (const auto& np : parameters()) total += np.tensor.numel();
    return total;
}

Tensor embed(Tape* tape, const ModelParams& params, const PackedInput& input) {
    const ModelConfig& cfg = params.config;
    const int n = input.length();
    if (n == 0) throw DataError("cannot embed an empty packed input");
    if (n > cfg.max_len) {
        std::ostringstream os;
        os << "packed input length " << n << " exceeds the model's max_len " << cfg.max_len;
        throw DataError(os.str());
    }
    if (static_cast<int>(input.segments.size()) != n ||
        static_cast<int>(input.positions.size()) != n) {
        throw DataError("packed input: ids, segments, and positions must have equal length");
    }
    Tensor tok = embedding_rows(tape, params.token_embedding, input.ids);
    Tensor pos = embedding_rows(tape, params.position_embedding, input.positions);
    Tensor seg = embedding_rows(tape, params.segment_embedding, input.segments);
    return add(tape, add(tape, tok, pos), seg);
}

Tensor attention_layer(Tape* tape, const Tensor& h, const AttentionMask& mask,
                       const LayerParams& lp, const ModelConfig& config, bool train_mode,
                       Rng* dropout_rng, std::vector<Tensor>* head_probs) {
    const int n = h.rows();
    if (mask.n != n) {
        std::ostringstream os;
        os << "attention mask size " << mask.n << " does not match sequence length " << n;
        throw ShapeError(os.str());
    }
    Tensor q = matmul(tape, h, lp.w_q);
    Tensor k = matmul(tape, h, lp.w_k);
    Tensor v = matmul(tape, h, lp.w_v);
    Tensor mask_t({n, n}, mask.entries);
    const double scaling = 1.0 / std::sqrt(static_cast<double>(config.head_dim));

    std::vector<Tensor> contexts;
    contexts.reserve(static_cast<std::size_t>(config.heads));
    for (int head = 0; head < config.heads; ++head) {
        const int first = head * config.head_dim;
        Tensor qh = slice_cols(tape, q, first, config.head_dim);
        Tensor kh = slice_cols(tape, k, first, config.head_dim);
        Tensor vh = slice_cols(tape, v, first, config.head_dim);
        Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), scaling);
        Tensor probs = softmax_rows(tape, add(tape, scores, mask_t));
        if (head_probs) head_probs->push_back(probs);
        if (train_mode) probs = dropout(tape, probs, config.dropout, *dropout_rng);
        contexts.push_back(matmul(tape, probs, vh));
    }
    Tensor ctx = config.heads == 1 ? contexts.front() : concat_cols(tape, contexts);
    Tensor proj = matmul(tape, ctx, lp.w_o);
    if (train_mode) proj = dropout(tape, proj, config.dropout, *dropout_rng);
    return layer_norm(tape, add(tape, h, proj), lp.attn_gain, lp.attn_bias, kLayerNormEps);
}

namespace {

Tensor feed_forward(Tape* tape, const Tensor& h, const LayerParams& lp, const ModelConfig& config,
                    bool train_mode, Rng* dropout_rng) {
    Tensor inner = gelu(tape, matmul(tape, h, lp.ff_w1));
    Tensor out = matmul(tape, inner, lp.ff_w2);
    if (train_mode) out = dropout(tape, out, config.dropout, *dropout_rng);
    return layer_norm(tape, add(tape, h, out), lp.ff_gain, lp.ff_bias, kLayerNormEps);
}

}  // namespace

HiddenStates forward(Tape* tape, const ModelParams& params, const PackedInput& input,
                     bool train_mode, std::uint64_t seed, AttentionProbes* probes) {
    const ModelConfig& cfg = params.config;
    const AttentionMask mask = build_mask(input.objective, input.length());
    Rng dropout_rng(seed);
    Rng* rng = train_mode ? &dropout_rng : nullptr;

    HiddenStates states;
    states.h.reserve(static_cast<std::size_t>(cfg.layers) + 1);
    Tensor h = embed(tape, params, input);
    if (train_mode) h = dropout(tape, h, cfg.dropout, dropout_rng);
    states.h.push_back(h);
    if (probes) probes->probs.assign(static_cast<std::size_t>(cfg.layers), {});

    for (int l = 0; l < cfg.layers; ++l) {
        std::vector<Tensor>* hp = probes ? &probes->probs[static_cast<std::size_t>(l)] : nullptr;
        h = attention_layer(tape, h, mask, params.layer[static_cast<std::size_t>(l)], cfg,
                            train_mode, rng, hp);
        h = feed_forward(tape, h, params.layer[static_cast<std::size_t>(l)], cfg, train_mode, rng);
        states.h.push_back(h);
    }
    return states;
}

Tensor lm_logits(Tape* tape, const ModelParams& params, const Tensor& h,
                 const std::vector<int>& positions) {
    if (positions.empty()) throw DataError("lm_logits needs at least one position");
    Tensor sel = select_rows(tape, h, positions);
    // Tied head: score against the embedding table itself, so both the input
    // lookup and the output projection train the same storage.
    Tensor logits = matmul(tape, sel, transpose(tape, params.token_embedding));
    return add_row_broadcast(tape, logits, params.lm_bias);
}

Tensor nsp_logits(Tape* tape, const ModelParams& params, const Tensor& h1) {
    if (h1.rank() != 2 || h1.rows() != 1 || h1.cols() != params.config.hidden) {
        throw ShapeError("nsp_logits expects the single SOS-position row [1 x hidden], got " +
                         shape_string(h1.shape()));
    }
    return matmul(tape, h1, params.nsp_head);
}

}  // namespace masklm
