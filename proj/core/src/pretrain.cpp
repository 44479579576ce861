#include "masklm/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "masklm/error.hpp"

namespace masklm {

namespace {

bool close_to_one(double x) { return std::abs(x - 1.0) < 1e-9; }

}  // namespace

void CorruptionPolicy::validate() const {
    if (mask_prob <= 0.0 || mask_prob > 1.0) {
        throw DataError("corruption policy: mask_prob must lie in (0, 1]");
    }
    for (double p : {replace_mask, replace_random, keep_original, span_unigram,
                     span_bigram_or_trigram}) {
        if (p < 0.0 || p > 1.0) throw DataError("corruption policy: fractions must lie in [0, 1]");
    }
    if (!close_to_one(replace_mask + replace_random + keep_original)) {
        throw DataError("corruption policy: replacement fractions must sum to 1");
    }
    if (!close_to_one(span_unigram + span_bigram_or_trigram)) {
        throw DataError("corruption policy: span fractions must sum to 1");
    }
}

ClozeExample corrupt(const PackedInput& clean, const CorruptionPolicy& policy, int vocab_size,
                     Rng& rng, CorruptionStats* stats) {
    if (vocab_size <= Vocab::kReservedCount) {
        throw DataError("corrupt: vocabulary has no non-reserved tokens to draw replacements from");
    }
    const int n = clean.length();
    std::vector<bool> maskable(static_cast<std::size_t>(n));
    int n_maskable = 0;
    for (int i = 0; i < n; ++i) {
        maskable[static_cast<std::size_t>(i)] = !Vocab::is_reserved(clean.ids[static_cast<std::size_t>(i)]);
        if (maskable[static_cast<std::size_t>(i)]) ++n_maskable;
    }
    if (n_maskable == 0) throw DataError("corrupt: packed input has no maskable tokens");

    ClozeExample out;
    out.input = clean;
    int budget = std::max(1, static_cast<int>(std::ceil(policy.mask_prob * n_maskable)));
    if (stats) {
        stats->maskable_tokens += n_maskable;
        stats->masked_tokens += budget;
    }

    // Open = maskable and not yet chosen. Spans start at a uniformly random
    // open position and run right, truncated by specials, segment changes,
    // overlap with earlier spans, and the remaining budget.
    std::vector<bool> chosen(static_cast<std::size_t>(n), false);
    int open_count = n_maskable;
    while (budget > 0) {
        int span_len;
        if (rng.uniform() < policy.span_unigram) {
            span_len = 1;
            if (stats) ++stats->unigram_spans;
        } else {
            span_len = 2 + static_cast<int>(rng.below(2));
            if (stats) ++(span_len == 2 ? stats->bigram_spans : stats->trigram_spans);
        }

        int pick = static_cast<int>(rng.below(static_cast<std::uint64_t>(open_count)));
        int start = -1;
        for (int i = 0; i < n; ++i) {
            if (maskable[static_cast<std::size_t>(i)] && !chosen[static_cast<std::size_t>(i)] &&
                pick-- == 0) {
                start = i;
                break;
            }
        }

        const int start_segment = clean.segments[static_cast<std::size_t>(start)];
        for (int p = start; p < n && span_len > 0 && budget > 0; ++p, --span_len) {
            const auto idx = static_cast<std::size_t>(p);
            if (!maskable[idx] || chosen[idx]) break;
            if (clean.segments[idx] != start_segment) break;
            chosen[idx] = true;
            --open_count;
            --budget;

            out.targets.push_back({p, clean.ids[idx]});
            const double r = rng.uniform();
            if (r < policy.replace_mask) {
                out.input.ids[idx] = Vocab::kMask;
                if (stats) ++stats->replaced_mask;
            } else if (r < policy.replace_mask + policy.replace_random) {
                out.input.ids[idx] =
                    Vocab::kReservedCount +
                    static_cast<int>(rng.below(
                        static_cast<std::uint64_t>(vocab_size - Vocab::kReservedCount)));
                if (stats) ++stats->replaced_random;
            } else {
                if (stats) ++stats->kept_original;
            }
        }
    }
    return out;
}

void MixSchedule::validate() const {
    for (double w : {bidirectional, seq2seq, left_to_right, right_to_left}) {
        if (w < 0.0) throw DataError("mix schedule: weights must be non-negative");
    }
    if (!close_to_one(bidirectional + seq2seq + left_to_right + right_to_left)) {
        throw DataError("mix schedule: weights must sum to 1");
    }
}

ObjectiveKind sample_objective(const MixSchedule& schedule, Rng& rng) {
    const std::size_t pick = rng.categorical(
        {schedule.bidirectional, schedule.seq2seq, schedule.left_to_right,
         schedule.right_to_left});
    switch (pick) {
        case 0: return ObjectiveKind::Bidirectional;
        case 1: return ObjectiveKind::Seq2Seq;
        case 2: return ObjectiveKind::LeftToRight;
        default: return ObjectiveKind::RightToLeft;
    }
}

std::vector<std::string> split_sentences(const std::string& line) {
    std::vector<std::string> out;
    std::string current;
    for (std::size_t i = 0; i < line.size(); ++i) {
        current += line[i];
        const char c = line[i];
        if (c == '.' || c == '!' || c == '?') {
            // Consume the whole punctuation run, then break at whitespace/end.
            while (i + 1 < line.size() &&
                   (line[i + 1] == '.' || line[i + 1] == '!' || line[i + 1] == '?')) {
                current += line[++i];
            }
            if (i + 1 >= line.size() || std::isspace(static_cast<unsigned char>(line[i + 1]))) {
                while (i + 1 < line.size() &&
                       std::isspace(static_cast<unsigned char>(line[i + 1]))) {
                    ++i;
                }
                out.push_back(current);
                current.clear();
            }
        }
    }
    // Trailing text without closing punctuation still counts as a sentence.
    if (!current.empty() &&
        current.find_first_not_of(" \t\r") != std::string::npos) {
        out.push_back(current);
    }
    return out;
}

Corpus Corpus::from_text(const std::string& text, const Vocab& vocab) {
    Corpus corpus;
    std::istringstream stream(text);
    std::string line;
    while (std::getline(stream, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<TokenSequence> doc;
        for (const std::string& sentence : split_sentences(line)) {
            TokenSequence seq = vocab.encode(sentence);
            if (!seq.ids.empty()) doc.push_back(std::move(seq));
        }
        if (!doc.empty()) corpus.docs.push_back(std::move(doc));
    }
    return corpus;
}

Corpus Corpus::load_file(const std::filesystem::path& path, const Vocab& vocab) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open corpus file: " + path.string());
    std::ostringstream buffer;
    buffer << f.rdbuf();
    return from_text(buffer.str(), vocab);
}

std::size_t Corpus::total_sentences() const {
    std::size_t n = 0;
    for (const auto& doc : docs) n += doc.size();
    return n;
}

std::size_t Corpus::consecutive_pair_count() const {
    std::size_t n = 0;
    for (const auto& doc : docs) n += doc.size() > 1 ? doc.size() - 1 : 0;
    return n;
}

SentencePair sample_consecutive_pair(const Corpus& corpus, Rng& rng) {
    const std::size_t slots = corpus.consecutive_pair_count();
    if (slots == 0) {
        throw DataError("corpus needs a document with at least two sentences for pair sampling");
    }
    std::size_t pick = rng.below(slots);
    for (const auto& doc : corpus.docs) {
        if (doc.size() < 2) continue;
        if (pick < doc.size() - 1) {
            return {doc[pick].ids, doc[pick + 1].ids, NspLabel::IsNext};
        }
        pick -= doc.size() - 1;
    }
    throw DataError("corpus pair sampling walked past the last document");  // unreachable
}

const TokenSequence& sample_sentence(const Corpus& corpus, Rng& rng) {
    const std::size_t total = corpus.total_sentences();
    if (total == 0) throw DataError("corpus has no sentences");
    std::size_t pick = rng.below(total);
    for (const auto& doc : corpus.docs) {
        if (pick < doc.size()) return doc[pick];
        pick -= doc.size();
    }
    throw DataError("corpus sentence sampling walked past the last document");  // unreachable
}

SentencePair make_nsp_pair(const Corpus& corpus, Rng& rng) {
    if (rng.bernoulli(0.5)) {
        return sample_consecutive_pair(corpus, rng);
    }
    if (corpus.docs.size() < 2) {
        throw DataError("corpus needs at least two documents for next-sentence negatives");
    }
    const std::size_t total = corpus.total_sentences();
    std::size_t pick_a = rng.below(total);
    std::size_t doc_a = 0;
    const TokenSequence* first = nullptr;
    for (std::size_t d = 0; d < corpus.docs.size(); ++d) {
        if (pick_a < corpus.docs[d].size()) {
            first = &corpus.docs[d][pick_a];
            doc_a = d;
            break;
        }
        pick_a -= corpus.docs[d].size();
    }
    // Second sentence from any other document; never the true successor.
    const std::size_t others = total - corpus.docs[doc_a].size();
    if (others == 0) {
        throw DataError("corpus needs sentences outside the sampled document for negatives");
    }
    std::size_t pick_b = rng.below(others);
    for (std::size_t d = 0; d < corpus.docs.size(); ++d) {
        if (d == doc_a) continue;
        if (pick_b < corpus.docs[d].size()) {
            return {first->ids, corpus.docs[d][pick_b].ids, NspLabel::NotNext};
        }
        pick_b -= corpus.docs[d].size();
    }
    throw DataError("corpus negative sampling walked past the last document");  // unreachable
}

double pretrain_step(ModelParams& params, const ClozeBatch& batch, Adam& opt, std::int64_t step) {
    if (batch.inputs.empty()) throw DataError("pretrain step: batch is empty");
    if (batch.targets.size() != batch.inputs.size()) {
        throw DataError("pretrain step: one target list per input required");
    }
    std::int64_t total_targets = 0;
    for (std::size_t e = 0; e < batch.inputs.size(); ++e) {
        if (batch.inputs[e].objective.kind != batch.objective) {
            throw DataError("pretrain step: example objective differs from the batch objective");
        }
        if (batch.targets[e].empty()) {
            throw DataError("pretrain step: every example needs at least one prediction target");
        }
        total_targets += static_cast<std::int64_t>(batch.targets[e].size());
    }
    const bool with_nsp =
        batch.objective == ObjectiveKind::Bidirectional && !batch.nsp_labels.empty();
    if (with_nsp && batch.nsp_labels.size() != batch.inputs.size()) {
        throw DataError("pretrain step: one next-sentence label per input required");
    }

    Tape tape;
    Tensor loss;
    std::vector<HiddenStates> states(batch.inputs.size());
    for (std::size_t e = 0; e < batch.inputs.size(); ++e) {
        const std::uint64_t seed =
            e < batch.dropout_seeds.size() ? batch.dropout_seeds[e] : static_cast<std::uint64_t>(e);
        states[e] = forward(&tape, params, batch.inputs[e], true, seed);

        std::vector<int> positions, originals;
        positions.reserve(batch.targets[e].size());
        originals.reserve(batch.targets[e].size());
        for (const MaskTarget& t : batch.targets[e]) {
            positions.push_back(t.position);
            originals.push_back(t.original);
        }
        Tensor logits = lm_logits(&tape, params, states[e].h.back(), positions);
        Tensor ce = cross_entropy(&tape, logits, originals, 0.0);
        // Pool to a mean over every masked token in the batch.
        const double weight = static_cast<double>(positions.size()) /
                              static_cast<double>(total_targets);
        Tensor term = scale(&tape, ce, weight);
        loss = loss.defined() ? add(&tape, loss, term) : term;
    }
    if (with_nsp) {
        for (std::size_t e = 0; e < batch.inputs.size(); ++e) {
            Tensor h1 = select_rows(&tape, states[e].h.back(), {0});
            Tensor logits = nsp_logits(&tape, params, h1);
            Tensor ce =
                cross_entropy(&tape, logits, {static_cast<int>(batch.nsp_labels[e])}, 0.0);
            Tensor term = scale(&tape, ce, 1.0 / static_cast<double>(batch.inputs.size()));
            loss = add(&tape, loss, term);
        }
    }

    const double value = loss.item();
    if (!std::isfinite(value)) {
        throw NumericError("non-finite pretraining loss", step);
    }
    opt.zero_grad();
    tape.backward(loss);
    opt.apply(step);
    return value;
}

namespace {

// Keep a packed single under max_len by keeping the leading tokens.
std::vector<int> head_of(const std::vector<int>& ids, int keep) {
    if (static_cast<int>(ids.size()) <= keep) return ids;
    return {ids.begin(), ids.begin() + keep};
}

// Split a pair budget, favouring neither side more than one token.
void fit_pair(std::vector<int>& a, std::vector<int>& b, int budget) {
    if (static_cast<int>(a.size() + b.size()) <= budget) return;
    int keep_a = std::min<int>(static_cast<int>(a.size()), (budget + 1) / 2);
    int keep_b = std::min<int>(static_cast<int>(b.size()), budget - keep_a);
    keep_a = std::min<int>(static_cast<int>(a.size()), budget - keep_b);
    a = head_of(a, std::max(1, keep_a));
    b = head_of(b, std::max(1, keep_b));
}

}  // namespace

ClozeBatch assemble_batch(const Corpus& corpus, const PretrainConfig& config,
                          const ModelConfig& model_config, Rng& rng) {
    ClozeBatch batch;
    batch.objective = sample_objective(config.mix, rng);
    const int pair_budget = model_config.max_len - 3;
    const int single_budget = model_config.max_len - 2;

    for (int e = 0; e < config.batch_size; ++e) {
        PackedInput clean;
        switch (batch.objective) {
            case ObjectiveKind::Bidirectional: {
                SentencePair pair = make_nsp_pair(corpus, rng);
                fit_pair(pair.first, pair.second, pair_budget);
                clean = pack_pair(pair.first, pair.second, ObjectiveKind::Bidirectional);
                batch.nsp_labels.push_back(pair.label);
                break;
            }
            case ObjectiveKind::Seq2Seq: {
                SentencePair pair = sample_consecutive_pair(corpus, rng);
                fit_pair(pair.first, pair.second, pair_budget);
                clean = pack_pair(pair.first, pair.second, ObjectiveKind::Seq2Seq);
                break;
            }
            case ObjectiveKind::LeftToRight:
            case ObjectiveKind::RightToLeft: {
                std::vector<int> ids = head_of(sample_sentence(corpus, rng).ids, single_budget);
                clean = pack_single(ids, batch.objective);
                break;
            }
        }
        ClozeExample example = corrupt(clean, config.corruption, model_config.vocab, rng);
        batch.inputs.push_back(std::move(example.input));
        batch.targets.push_back(std::move(example.targets));
        batch.dropout_seeds.push_back(rng.next_u64());
    }
    return batch;
}

namespace {

std::string step_tag(std::int64_t step) {
    std::ostringstream os;
    os << std::setw(6) << std::setfill('0') << step;
    return os.str();
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step) {
    return dir / ("checkpoint_" + step_tag(step) + ".mlm");
}

std::filesystem::path state_path(const std::filesystem::path& dir, std::int64_t step) {
    return dir / ("train_state_" + step_tag(step) + ".bin");
}

std::optional<std::int64_t> latest_checkpoint_step(const std::filesystem::path& dir) {
    std::optional<std::int64_t> best;
    if (!std::filesystem::is_directory(dir)) return best;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() != 21 || name.rfind("checkpoint_", 0) != 0 ||
            name.substr(17) != ".mlm") {
            continue;
        }
        const std::string digits = name.substr(11, 6);
        if (digits.find_first_not_of("0123456789") != std::string::npos) continue;
        const std::int64_t step = std::stoll(digits);
        if (std::filesystem::exists(state_path(dir, step)) && (!best || step > *best)) {
            best = step;
        }
    }
    return best;
}

void save_training_snapshot(const std::filesystem::path& dir, std::int64_t step,
                            const ModelParams& params, const Vocab& vocab, const Adam& opt,
                            const Rng& data_rng) {
    std::vector<std::string> tokens;
    tokens.reserve(static_cast<std::size_t>(vocab.size()));
    for (int i = 0; i < vocab.size(); ++i) tokens.push_back(vocab.token_of(i));
    save_checkpoint(checkpoint_path(dir, step), params, tokens);

    std::map<std::string, std::string> meta;
    meta["step"] = std::to_string(step);
    meta["adam_updates"] = std::to_string(opt.updates_done());
    meta["data_rng"] = data_rng.save_state();
    save_array_file(state_path(dir, step), meta, opt.state_arrays());
}

}  // namespace

std::vector<StepRecord> pretrain_loop(ModelParams& params, const Corpus& corpus,
                                      const Vocab& vocab, const PretrainConfig& config,
                                      const std::filesystem::path& out_dir, bool resume) {
    config.optimizer.validate();
    config.corruption.validate();
    config.mix.validate();
    if (config.steps < 0 || config.batch_size < 1) {
        throw DataError("pretrain loop: steps must be >= 0 and batch_size >= 1");
    }
    if (vocab.size() != params.config.vocab) {
        throw DataError("pretrain loop: vocabulary size differs from the model's vocab dimension");
    }
    std::filesystem::create_directories(out_dir);

    Rng data_rng(config.seed);
    Adam opt(params.parameters(), config.optimizer);
    std::int64_t done = 0;

    if (resume) {
        const auto latest = latest_checkpoint_step(out_dir);
        if (latest) {
            Checkpoint ckpt = load_checkpoint(checkpoint_path(out_dir, *latest));
            params = std::move(ckpt.params);
            ArrayFile state = load_array_file(state_path(out_dir, *latest));
            opt = Adam(params.parameters(), config.optimizer);
            opt.restore(state.arrays, std::stoll(state.meta.at("adam_updates")));
            data_rng.restore_state(state.meta.at("data_rng"));
            done = std::stoll(state.meta.at("step"));
        } else {
            resume = false;  // nothing to resume from; behave like a fresh run
        }
    }
    if (!resume) {
        save_training_snapshot(out_dir, 0, params, vocab, opt, data_rng);
    }

    std::ofstream metrics(out_dir / "metrics.jsonl",
                          resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw DataError("cannot open metrics log in " + out_dir.string());

    std::vector<StepRecord> records;
    for (std::int64_t s = done + 1; s <= config.steps; ++s) {
        ClozeBatch batch = assemble_batch(corpus, config, params.config, data_rng);
        const double lr = learning_rate_at(config.optimizer, s - 1);
        const double loss = pretrain_step(params, batch, opt, s - 1);
        records.push_back({s, batch.objective, loss, lr});

        nlohmann::json line = {{"step", s},
                               {"objective", objective_name(batch.objective)},
                               {"loss", loss},
                               {"lr", lr}};
        metrics << line.dump() << "\n";
        metrics.flush();

        if (config.checkpoint_every > 0 && s % config.checkpoint_every == 0 &&
            s < config.steps) {
            save_training_snapshot(out_dir, s, params, vocab, opt, data_rng);
        }
    }
    if (done < config.steps || !resume) {
        save_training_snapshot(out_dir, config.steps, params, vocab, opt, data_rng);
    }
    return records;
}

}  // namespace masklm
