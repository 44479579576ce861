#include "masklm/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "masklm/error.hpp"

namespace masklm {

ClassifierHead ClassifierHead::init(int hidden, int classes, Rng& rng, double init_std) {
    if (classes < 2) throw DataError("classifier head needs at least two classes");
    return {Tensor::randn({hidden, classes}, rng, init_std, true)};
}

SpanHead SpanHead::init(int hidden, Rng& rng, double init_std) {
    return {Tensor::randn({hidden, 1}, rng, init_std, true),
            Tensor::randn({hidden, 1}, rng, init_std, true)};
}

void FinetuneConfig::validate() const {
    if (target_mask_prob <= 0.0 || target_mask_prob > 1.0) {
        throw DataError("finetune config: target_mask_prob must lie in (0, 1]");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw DataError("finetune config: label_smoothing must lie in [0, 1)");
    }
    if (epochs < 0 || batch < 1) {
        throw DataError("finetune config: epochs must be >= 0 and batch >= 1");
    }
    if (lr < 0.0) throw DataError("finetune config: lr must be >= 0");
    if (dropout < 0.0 || dropout >= 1.0) {
        throw DataError("finetune config: dropout must lie in [0, 1)");
    }
    if (max_span_len < 0) throw DataError("finetune config: max_span_len must be >= 0");
}

PackedInput pack_classify(const std::vector<int>& tokens) {
    PackedInput p;
    p.ids.reserve(tokens.size() + 2);
    p.ids.push_back(Vocab::kSos);
    p.ids.insert(p.ids.end(), tokens.begin(), tokens.end());
    p.ids.push_back(Vocab::kEos);
    p.segments.assign(p.ids.size(), SegmentIds::kBidiFirst);
    p.positions.resize(p.ids.size());
    for (std::size_t i = 0; i < p.positions.size(); ++i) p.positions[i] = static_cast<int>(i);
    p.objective = LMObjective::bidirectional();
    return p;
}

SpanExample pack_span_example(const std::vector<int>& passage, const std::vector<int>& question) {
    if (passage.empty()) throw DataError("span example needs a non-empty passage");
    SpanExample ex;
    ex.input = pack_pair(passage, question, ObjectiveKind::Bidirectional);
    ex.passage_first = 1;
    ex.passage_last = static_cast<int>(passage.size());
    return ex;
}

std::vector<double> classify(const ModelParams& params, const ClassifierHead& head,
                             const PackedInput& input) {
    if (input.objective.kind != ObjectiveKind::Bidirectional) {
        throw DataError("classification input must be packed with the bidirectional objective");
    }
    HiddenStates states = forward(nullptr, params, input, false, 0);
    Tensor h1 = select_rows(nullptr, states.h.back(), {0});
    Tensor probs = softmax_rows(nullptr, matmul(nullptr, h1, head.w));
    return probs.values();
}

namespace {

void check_region(const PackedInput& input, int first, int last) {
    const int n = input.length();
    if (first < 0 || last >= n || first > last) {
        std::ostringstream os;
        os << "passage region [" << first << ", " << last << "] is empty or outside the packed "
           << "input of length " << n;
        throw DataError(os.str());
    }
}

std::vector<int> region_positions(int first, int last) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(last - first + 1));
    for (int i = first; i <= last; ++i) out.push_back(i);
    return out;
}

}  // namespace

SpanPrediction extract_span(const ModelParams& params, const SpanHead& head,
                            const PackedInput& input, int passage_first, int passage_last,
                            int max_span_len) {
    check_region(input, passage_first, passage_last);
    HiddenStates states = forward(nullptr, params, input, false, 0);
    Tensor h = states.h.back();
    Tensor start_scores = matmul(nullptr, h, head.start_proj);  // [n x 1]
    Tensor end_scores = matmul(nullptr, h, head.end_proj);

    SpanPrediction best;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int i = passage_first; i <= passage_last; ++i) {
        const int j_max = std::min(passage_last, i + max_span_len);
        for (int j = i; j <= j_max; ++j) {
            const double score = start_scores.at(i, 0) + end_scores.at(j, 0);
            if (score > best_score) {
                best_score = score;
                best = {i, j};
            }
        }
    }
    return best;
}

Tensor seq2seq_finetune_loss(Tape* tape, const ModelParams& params,
                             const std::vector<int>& source, const std::vector<int>& target,
                             const FinetuneConfig& config, Rng& rng, std::uint64_t dropout_seed,
                             bool train_mode, std::vector<MaskTarget>* targets_out) {
    if (target.empty()) throw DataError("seq2seq fine-tuning needs a non-empty target");
    PackedInput packed = pack_pair(source, target, ObjectiveKind::Seq2Seq);
    const int n = packed.length();
    const int s = packed.objective.source_len;

    // Candidates are every target-segment position: the target tokens plus
    // the final EOS, which the model must learn to emit. Source positions are
    // never corrupted here.
    std::vector<MaskTarget> targets;
    for (int p = s; p < n; ++p) {
        if (rng.bernoulli(config.target_mask_prob)) {
            targets.push_back({p, packed.ids[static_cast<std::size_t>(p)]});
            packed.ids[static_cast<std::size_t>(p)] = Vocab::kMask;
        }
    }
    if (targets.empty()) {
        const int p = s + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - s)));
        targets.push_back({p, packed.ids[static_cast<std::size_t>(p)]});
        packed.ids[static_cast<std::size_t>(p)] = Vocab::kMask;
    }
    if (targets_out) *targets_out = targets;

    HiddenStates states = forward(tape, params, packed, train_mode, dropout_seed);
    std::vector<int> positions, originals;
    positions.reserve(targets.size());
    originals.reserve(targets.size());
    for (const MaskTarget& t : targets) {
        positions.push_back(t.position);
        originals.push_back(t.original);
    }
    Tensor logits = lm_logits(tape, params, states.h.back(), positions);
    return cross_entropy(tape, logits, originals, config.label_smoothing);
}

namespace {

double finish_step(Tape& tape, Tensor& loss, Adam& opt, std::int64_t step) {
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("non-finite fine-tuning loss", step);
    opt.zero_grad();
    tape.backward(loss);
    opt.apply(step);
    return value;
}

}  // namespace

double finetune_seq2seq_step(ModelParams& params, Adam& opt, const std::vector<int>& source,
                             const std::vector<int>& target, const FinetuneConfig& config,
                             std::int64_t step, Rng& rng) {
    Tape tape;
    const std::uint64_t seed = rng.next_u64();
    Tensor loss = seq2seq_finetune_loss(&tape, params, source, target, config, rng, seed, true);
    return finish_step(tape, loss, opt, step);
}

double finetune_classify_step(ModelParams& params, ClassifierHead& head, Adam& opt,
                              const std::vector<PackedInput>& inputs,
                              const std::vector<int>& labels, std::int64_t step, Rng& rng) {
    if (inputs.empty() || inputs.size() != labels.size()) {
        throw DataError("classification step: inputs and labels must pair up and be non-empty");
    }
    Tape tape;
    Tensor loss;
    const double weight = 1.0 / static_cast<double>(inputs.size());
    for (std::size_t e = 0; e < inputs.size(); ++e) {
        if (labels[e] < 0 || labels[e] >= head.classes()) {
            throw DataError("classification step: label " + std::to_string(labels[e]) +
                            " outside the head's " + std::to_string(head.classes()) + " classes");
        }
        HiddenStates states = forward(&tape, params, inputs[e], true, rng.next_u64());
        Tensor h1 = select_rows(&tape, states.h.back(), {0});
        Tensor logits = matmul(&tape, h1, head.w);
        Tensor term = scale(&tape, cross_entropy(&tape, logits, {labels[e]}, 0.0), weight);
        loss = loss.defined() ? add(&tape, loss, term) : term;
    }
    return finish_step(tape, loss, opt, step);
}

double finetune_span_step(ModelParams& params, SpanHead& head, Adam& opt,
                          const std::vector<SpanExample>& examples,
                          const std::vector<SpanPrediction>& gold, std::int64_t step, Rng& rng) {
    if (examples.empty() || examples.size() != gold.size()) {
        throw DataError("span step: examples and gold spans must pair up and be non-empty");
    }
    Tape tape;
    Tensor loss;
    const double weight = 1.0 / static_cast<double>(examples.size());
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const SpanExample& ex = examples[e];
        check_region(ex.input, ex.passage_first, ex.passage_last);
        if (gold[e].start < ex.passage_first || gold[e].end > ex.passage_last ||
            gold[e].start > gold[e].end) {
            throw DataError("span step: gold span lies outside the passage region");
        }
        HiddenStates states = forward(&tape, params, ex.input, true, rng.next_u64());
        Tensor region = select_rows(&tape, states.h.back(),
                                    region_positions(ex.passage_first, ex.passage_last));
        // Softmax over passage positions only: logits [1 x region].
        Tensor start_logits = transpose(&tape, matmul(&tape, region, head.start_proj));
        Tensor end_logits = transpose(&tape, matmul(&tape, region, head.end_proj));
        Tensor ce_start =
            cross_entropy(&tape, start_logits, {gold[e].start - ex.passage_first}, 0.0);
        Tensor ce_end = cross_entropy(&tape, end_logits, {gold[e].end - ex.passage_first}, 0.0);
        Tensor term = scale(&tape, add(&tape, ce_start, ce_end), weight);
        loss = loss.defined() ? add(&tape, loss, term) : term;
    }
    return finish_step(tape, loss, opt, step);
}

// ---- datasets -----------------------------------------------------------------

namespace {

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open training data file: " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

std::pair<std::string, std::string> split_tsv(const std::string& line,
                                              const std::filesystem::path& path,
                                              std::size_t line_no) {
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": expected two tab-separated fields");
    }
    return {line.substr(0, tab), line.substr(tab + 1)};
}

}  // namespace

ClassifyDataset ClassifyDataset::load_tsv(const std::filesystem::path& path, const Vocab& vocab) {
    ClassifyDataset data;
    std::size_t line_no = 0;
    for (const std::string& line : read_lines(path)) {
        ++line_no;
        auto [text, label] = split_tsv(line, path, line_no);
        auto it = std::find(data.label_names.begin(), data.label_names.end(), label);
        int label_id;
        if (it == data.label_names.end()) {
            label_id = static_cast<int>(data.label_names.size());
            data.label_names.push_back(label);
        } else {
            label_id = static_cast<int>(it - data.label_names.begin());
        }
        data.inputs.push_back(pack_classify(vocab.encode(text).ids));
        data.labels.push_back(label_id);
    }
    data.classes = static_cast<int>(data.label_names.size());
    if (data.classes < 2) {
        throw DataError(path.string() + ": classification data needs at least two labels");
    }
    return data;
}

SpanDataset SpanDataset::load_jsonl(const std::filesystem::path& path, const Vocab& vocab) {
    SpanDataset data;
    std::size_t line_no = 0;
    for (const std::string& line : read_lines(path)) {
        ++line_no;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        std::string passage, question;
        int a_start = 0, a_end = 0;
        try {
            passage = j.at("passage").get<std::string>();
            question = j.at("question").get<std::string>();
            a_start = j.at("answer_start").get<int>();
            a_end = j.at("answer_end").get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (a_start < 0 || a_end <= a_start || a_end > static_cast<int>(passage.size())) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": answer offsets outside the passage");
        }

        std::vector<std::pair<int, int>> ranges;
        TokenSequence seq = vocab.encode_with_offsets(passage, ranges);
        int first_tok = -1, last_tok = -1;
        for (std::size_t t = 0; t < ranges.size(); ++t) {
            const bool overlaps = ranges[t].first < a_end && ranges[t].second > a_start;
            if (overlaps) {
                if (first_tok < 0) first_tok = static_cast<int>(t);
                last_tok = static_cast<int>(t);
            }
        }
        if (first_tok < 0) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": answer span covers no tokens");
        }
        SpanExample ex = pack_span_example(seq.ids, vocab.encode(question).ids);
        data.examples.push_back(ex);
        data.gold.push_back({ex.passage_first + first_tok, ex.passage_first + last_tok});
    }
    if (data.examples.empty()) throw DataError(path.string() + ": no span examples found");
    return data;
}

PairDataset PairDataset::load_tsv(const std::filesystem::path& path, const Vocab& vocab) {
    PairDataset data;
    std::size_t line_no = 0;
    for (const std::string& line : read_lines(path)) {
        ++line_no;
        auto [source, target] = split_tsv(line, path, line_no);
        std::vector<int> src = vocab.encode(source).ids;
        std::vector<int> tgt = vocab.encode(target).ids;
        if (src.empty() || tgt.empty()) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": source and target must both tokenize to something");
        }
        data.pairs.emplace_back(std::move(src), std::move(tgt));
    }
    if (data.pairs.empty()) throw DataError(path.string() + ": no pairs found");
    return data;
}

// ---- epoch loops ----------------------------------------------------------------

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::swap(idx[i - 1], idx[rng.below(i)]);
    }
    return idx;
}

OptimizerConfig finetune_optimizer(const FinetuneConfig& cfg, std::int64_t total_steps) {
    OptimizerConfig opt;
    opt.peak_lr = cfg.lr;
    opt.warmup_steps = 0;
    opt.total_steps = static_cast<int>(std::max<std::int64_t>(1, total_steps));
    return opt;
}

std::int64_t steps_per_run(std::size_t n, const FinetuneConfig& cfg) {
    const auto batches = static_cast<std::int64_t>((n + cfg.batch - 1) / cfg.batch);
    return batches * cfg.epochs;
}

}  // namespace

std::vector<double> run_finetune_classify(ModelParams& params, ClassifierHead& head,
                                          const ClassifyDataset& data,
                                          const FinetuneConfig& config) {
    config.validate();
    if (data.inputs.empty()) throw DataError("classification fine-tuning has no examples");
    params.config.dropout = config.dropout;

    std::vector<NamedParam> trainable = params.parameters();
    trainable.push_back({"classifier.w", head.w, true});
    Adam opt(trainable, finetune_optimizer(config, steps_per_run(data.inputs.size(), config)));

    Rng rng(config.seed);
    std::vector<double> losses;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = shuffled_indices(data.inputs.size(), rng);
        for (std::size_t at = 0; at < order.size(); at += config.batch) {
            std::vector<PackedInput> inputs;
            std::vector<int> labels;
            for (std::size_t k = at; k < std::min(order.size(), at + config.batch); ++k) {
                inputs.push_back(data.inputs[order[k]]);
                labels.push_back(data.labels[order[k]]);
            }
            losses.push_back(
                finetune_classify_step(params, head, opt, inputs, labels, step++, rng));
        }
    }
    return losses;
}

std::vector<double> run_finetune_span(ModelParams& params, SpanHead& head,
                                      const SpanDataset& data, const FinetuneConfig& config) {
    config.validate();
    if (data.examples.empty()) throw DataError("span fine-tuning has no examples");
    params.config.dropout = config.dropout;

    std::vector<NamedParam> trainable = params.parameters();
    trainable.push_back({"span.start_proj", head.start_proj, true});
    trainable.push_back({"span.end_proj", head.end_proj, true});
    Adam opt(trainable, finetune_optimizer(config, steps_per_run(data.examples.size(), config)));

    Rng rng(config.seed);
    std::vector<double> losses;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = shuffled_indices(data.examples.size(), rng);
        for (std::size_t at = 0; at < order.size(); at += config.batch) {
            std::vector<SpanExample> examples;
            std::vector<SpanPrediction> gold;
            for (std::size_t k = at; k < std::min(order.size(), at + config.batch); ++k) {
                examples.push_back(data.examples[order[k]]);
                gold.push_back(data.gold[order[k]]);
            }
            losses.push_back(finetune_span_step(params, head, opt, examples, gold, step++, rng));
        }
    }
    return losses;
}

std::vector<double> run_finetune_seq2seq(ModelParams& params, const PairDataset& data,
                                         const FinetuneConfig& config) {
    config.validate();
    if (data.pairs.empty()) throw DataError("seq2seq fine-tuning has no examples");
    params.config.dropout = config.dropout;

    Adam opt(params.parameters(),
             finetune_optimizer(config, steps_per_run(data.pairs.size(), config)));

    Rng rng(config.seed);
    std::vector<double> losses;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = shuffled_indices(data.pairs.size(), rng);
        for (std::size_t at = 0; at < order.size(); at += config.batch) {
            Tape tape;
            Tensor loss;
            const std::size_t end = std::min(order.size(), at + config.batch);
            const double weight = 1.0 / static_cast<double>(end - at);
            for (std::size_t k = at; k < end; ++k) {
                const auto& [source, target] = data.pairs[order[k]];
                const std::uint64_t seed = rng.next_u64();
                Tensor term = scale(
                    &tape,
                    seq2seq_finetune_loss(&tape, params, source, target, config, rng, seed, true),
                    weight);
                loss = loss.defined() ? add(&tape, loss, term) : term;
            }
            const double value = loss.item();
            if (!std::isfinite(value)) throw NumericError("non-finite fine-tuning loss", step);
            opt.zero_grad();
            tape.backward(loss);
            opt.apply(step);
            losses.push_back(value);
            ++step;
        }
    }
    return losses;
}

}  // namespace masklm
