// masklm: one binary for the whole pipeline. Subcommands:
//   build-vocab    corpus text -> vocabulary JSON
//   pretrain       masked-LM pretraining over a line corpus
//   finetune       classify / span / seq2seq task adaptation of a checkpoint
//   generate       beam or sampled text generation from a checkpoint
//   eval           text metrics over hypothesis/reference line files
//   inspect-mask   print an attention mask as an ASCII grid
//   inspect-model  print a checkpoint's config and parameter table
//
// Exit codes: 0 success, 1 usage error, 2 data/checkpoint/numeric error.
// MASKLM_CONFIG names a default config file used when --config is absent.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "masklm/decode.hpp"
#include "masklm/error.hpp"
#include "masklm/finetune.hpp"
#include "masklm/masks.hpp"
#include "masklm/metrics.hpp"
#include "masklm/model.hpp"
#include "masklm/pretrain.hpp"
#include "masklm/run_config.hpp"
#include "masklm/tokenizer.hpp"

namespace {

using namespace masklm;

// Flag combinations CLI11 cannot express; reported like a parse error (exit 1).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read file " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::string> read_lines(const std::string& path) {
    std::string text = read_text_file(path);
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t nl = text.find('\n', start);
        if (nl == std::string::npos) {
            if (start < text.size()) lines.push_back(text.substr(start));
            break;
        }
        std::string line = text.substr(start, nl - start);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(std::move(line));
        start = nl + 1;
    }
    return lines;
}

RunConfig resolve_config(const std::string& flag_path) {
    if (!flag_path.empty()) return RunConfig::load(flag_path);
    if (const char* env = std::getenv("MASKLM_CONFIG"); env != nullptr && *env != '\0') {
        return RunConfig::load(env);
    }
    return RunConfig::defaults();
}

Vocab vocab_for_checkpoint(const Checkpoint& ck, const std::string& vocab_flag,
                           const std::string& ckpt_path) {
    Vocab vocab = !vocab_flag.empty() ? Vocab::load(vocab_flag)
                  : !ck.vocab_tokens.empty()
                      ? Vocab::from_tokens(ck.vocab_tokens)
                      : throw DataError("checkpoint " + ckpt_path +
                                        " embeds no vocabulary; pass --vocab");
    if (vocab.size() != ck.params.config.vocab) {
        throw DataError("vocabulary size " + std::to_string(vocab.size()) +
                        " does not match the checkpoint's vocab dimension " +
                        std::to_string(ck.params.config.vocab));
    }
    return vocab;
}

ObjectiveKind objective_from_name(const std::string& name) {
    if (name == "bidirectional") return ObjectiveKind::Bidirectional;
    if (name == "left_to_right") return ObjectiveKind::LeftToRight;
    if (name == "right_to_left") return ObjectiveKind::RightToLeft;
    if (name == "seq2seq") return ObjectiveKind::Seq2Seq;
    throw DataError("unknown objective '" + name +
                    "' (expected bidirectional, left_to_right, right_to_left, or seq2seq)");
}

// Drop a single trailing EOS produced by the decoder before detokenizing.
std::vector<int> strip_eos(std::vector<int> ids) {
    if (!ids.empty() && ids.back() == Vocab::kEos) ids.pop_back();
    return ids;
}

int run_build_vocab(const std::string& corpus_path, int size, const std::string& out_path) {
    Vocab vocab = Vocab::build_from_text(read_text_file(corpus_path), size);
    vocab.save(out_path);
    std::cout << "wrote " << vocab.size() << "-token vocabulary to " << out_path << "\n";
    return 0;
}

int run_pretrain(const CLI::App& sub, const std::string& config_path,
                 const std::string& corpus_path, const std::string& vocab_path,
                 const std::string& out_dir, int steps, int batch, int checkpoint_every,
                 std::uint64_t seed, bool resume) {
    RunConfig rc = resolve_config(config_path);
    if (sub.count("--steps") > 0) rc.pretrain.steps = steps;
    if (sub.count("--batch") > 0) rc.pretrain.batch_size = batch;
    if (sub.count("--checkpoint-every") > 0) rc.pretrain.checkpoint_every = checkpoint_every;
    if (sub.count("--seed") > 0) rc.pretrain.seed = seed;

    Vocab vocab = Vocab::load(vocab_path);
    if (rc.model.vocab == 0) {
        rc.model.vocab = vocab.size();
    } else if (rc.model.vocab != vocab.size()) {
        throw DataError("config sets model.vocab = " + std::to_string(rc.model.vocab) +
                        " but " + vocab_path + " holds " + std::to_string(vocab.size()) +
                        " tokens");
    }
    rc.validate();

    Corpus corpus = Corpus::load_file(corpus_path, vocab);
    Rng init_rng(rc.pretrain.seed);
    ModelParams params = ModelParams::init(rc.model, init_rng);
    std::vector<StepRecord> records = pretrain_loop(params, corpus, vocab, rc.pretrain, out_dir,
                                                    resume);
    if (records.empty()) {
        std::cout << "nothing to do: training already reached step " << rc.pretrain.steps
                  << " in " << out_dir << "\n";
    } else {
        std::cout << "pretrained " << records.size() << " step(s); final loss "
                  << records.back().loss << "; artifacts in " << out_dir << "\n";
    }
    return 0;
}

int run_finetune(const CLI::App& sub, const std::string& config_path, const std::string& mode_name,
                 const std::string& train_path, const std::string& init_path,
                 const std::string& out_path, const std::string& vocab_flag, int epochs, int batch,
                 double lr, std::uint64_t seed) {
    RunConfig rc = resolve_config(config_path);
    rc.finetune.mode = finetune_mode_from_name(mode_name);
    if (sub.count("--epochs") > 0) rc.finetune.epochs = epochs;
    if (sub.count("--batch") > 0) rc.finetune.batch = batch;
    if (sub.count("--lr") > 0) rc.finetune.lr = lr;
    if (sub.count("--seed") > 0) rc.finetune.seed = seed;
    rc.finetune.validate();

    Checkpoint ck = load_checkpoint(init_path);
    Vocab vocab = vocab_for_checkpoint(ck, vocab_flag, init_path);

    std::vector<double> losses;
    std::map<std::string, Tensor> extras;
    Rng head_rng(rc.finetune.seed);
    switch (rc.finetune.mode) {
        case FinetuneConfig::Mode::Classify: {
            ClassifyDataset data = ClassifyDataset::load_tsv(train_path, vocab);
            ClassifierHead head = ClassifierHead::init(ck.params.config.hidden, data.classes,
                                                       head_rng);
            losses = run_finetune_classify(ck.params, head, data, rc.finetune);
            extras.emplace("classifier.w", head.w);
            break;
        }
        case FinetuneConfig::Mode::Span: {
            SpanDataset data = SpanDataset::load_jsonl(train_path, vocab);
            SpanHead head = SpanHead::init(ck.params.config.hidden, head_rng);
            losses = run_finetune_span(ck.params, head, data, rc.finetune);
            extras.emplace("span.start_proj", head.start_proj);
            extras.emplace("span.end_proj", head.end_proj);
            break;
        }
        case FinetuneConfig::Mode::Seq2Seq: {
            PairDataset data = PairDataset::load_tsv(train_path, vocab);
            losses = run_finetune_seq2seq(ck.params, data, rc.finetune);
            break;
        }
    }
    save_checkpoint(out_path, ck.params, vocab.tokens(), extras);
    std::cout << "finetuned (" << mode_name << ") for " << losses.size() << " step(s); loss "
              << (losses.empty() ? 0.0 : losses.front()) << " -> "
              << (losses.empty() ? 0.0 : losses.back()) << "; wrote " << out_path << "\n";
    return 0;
}

int run_generate(const CLI::App& sub, const std::string& config_path,
                 const std::string& ckpt_path, const std::string& vocab_flag,
                 const std::string& mode, const std::string& input_path,
                 const std::string& out_path, int beam, int top_k, int block_ngram,
                 int max_out_len, double length_norm, std::uint64_t seed) {
    RunConfig rc = resolve_config(config_path);
    if (sub.count("--beam") > 0) rc.decode.beam_size = beam;
    if (sub.count("--top-k") > 0) rc.decode.top_k = top_k;
    if (sub.count("--block-ngram") > 0) rc.decode.block_ngram = block_ngram;
    if (sub.count("--max-out-len") > 0) rc.decode.max_out_len = max_out_len;
    if (sub.count("--length-norm") > 0) rc.decode.length_norm = length_norm;
    rc.decode.validate();

    Checkpoint ck = load_checkpoint(ckpt_path);
    Vocab vocab = vocab_for_checkpoint(ck, vocab_flag, ckpt_path);

    std::vector<std::string> lines = read_lines(input_path);
    std::ostringstream out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].empty()) {
            throw DataError("generate: " + input_path + " line " + std::to_string(i + 1) +
                            " is empty");
        }
        const std::vector<int> ids = vocab.encode(lines[i]).ids;
        std::vector<int> generated;
        if (mode == "beam") {
            generated = beam_search(ck.params, ids, rc.decode).ids;
        } else {
            generated = sample_lr(ck.params, ids, rc.decode, seed + i);
        }
        out << vocab.decode(strip_eos(std::move(generated))) << '\n';
    }
    if (out_path.empty()) {
        std::cout << out.str();
    } else {
        std::ofstream os(out_path, std::ios::binary);
        if (!os) throw DataError("cannot write file " + out_path);
        os << out.str();
    }
    return 0;
}

int run_eval(const std::string& metric, const std::string& hyp_path, const std::string& ref_path) {
    std::vector<std::string> hyp = read_lines(hyp_path);
    std::vector<std::string> ref = read_lines(ref_path);
    if (hyp.size() != ref.size()) {
        throw DataError("eval: " + hyp_path + " has " + std::to_string(hyp.size()) +
                        " lines but " + ref_path + " has " + std::to_string(ref.size()));
    }
    if (hyp.empty()) throw DataError("eval: " + hyp_path + " is empty");
    const double n = static_cast<double>(hyp.size());

    nlohmann::json report;
    report["metric"] = metric;
    report["examples"] = hyp.size();
    if (metric == "bleu4") {
        double total = 0.0;
        for (std::size_t i = 0; i < hyp.size(); ++i) {
            total += bleu4(metric_tokens(hyp[i]), metric_tokens(ref[i]));
        }
        report["score"] = total / n;
    } else if (metric == "span") {
        double em = 0.0, f1 = 0.0;
        for (std::size_t i = 0; i < hyp.size(); ++i) {
            SpanScore s = span_em_f1(hyp[i], ref[i]);
            em += s.exact_match;
            f1 += s.f1;
        }
        report["exact_match"] = em / n;
        report["f1"] = f1 / n;
    } else {
        double p = 0.0, r = 0.0, f = 0.0;
        for (std::size_t i = 0; i < hyp.size(); ++i) {
            ScoreReport s = metric == "rouge1"   ? rouge_n(metric_tokens(hyp[i]), metric_tokens(ref[i]), 1)
                            : metric == "rouge2" ? rouge_n(metric_tokens(hyp[i]), metric_tokens(ref[i]), 2)
                                                 : rouge_l(metric_tokens(hyp[i]), metric_tokens(ref[i]));
            p += s.precision;
            r += s.recall;
            f += s.f1;
        }
        report["precision"] = p / n;
        report["recall"] = r / n;
        report["f1"] = f / n;
    }
    std::cout << report.dump() << "\n";
    return 0;
}

int run_inspect_mask(const CLI::App& sub, const std::string& objective_name_flag, int len,
                     int src_len) {
    ObjectiveKind kind = objective_from_name(objective_name_flag);
    if (kind != ObjectiveKind::Seq2Seq && sub.count("--src-len") > 0) {
        throw UsageError("--src-len only applies to the seq2seq objective");
    }
    if (kind == ObjectiveKind::Seq2Seq && sub.count("--src-len") == 0) {
        throw UsageError("the seq2seq objective needs --src-len");
    }
    LMObjective objective{kind, src_len};
    std::cout << render_mask(build_mask(objective, len));
    return 0;
}

int run_inspect_model(const std::string& ckpt_path) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    const ModelConfig& c = ck.params.config;
    std::cout << "config: layers=" << c.layers << " hidden=" << c.hidden << " heads=" << c.heads
              << " head_dim=" << c.head_dim << " ffn=" << c.ffn << " vocab=" << c.vocab
              << " max_len=" << c.max_len << " segments=" << c.segments
              << " dropout=" << c.dropout << "\n";
    std::cout << "embedded vocabulary: "
              << (ck.vocab_tokens.empty() ? std::string("none")
                                          : std::to_string(ck.vocab_tokens.size()) + " tokens")
              << "\n";
    for (const NamedParam& p : ck.params.parameters()) {
        std::cout << "  " << p.name << "  " << shape_string(p.tensor.shape()) << "  "
                  << p.tensor.numel() << (p.weight_decay ? "  (decayed)" : "") << "\n";
    }
    for (const auto& [name, tensor] : ck.extras) {
        std::cout << "  " << name << "  " << shape_string(tensor.shape()) << "  " << tensor.numel()
                  << "  (extra)\n";
    }
    std::cout << "total parameters: " << ck.params.parameter_count() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"masked-LM pretraining, fine-tuning, generation, and evaluation"};
    app.require_subcommand(1);

    std::string config_path;

    // build-vocab
    auto* bv = app.add_subcommand("build-vocab", "build a subword vocabulary from a text corpus");
    std::string bv_corpus, bv_out;
    int bv_size = 200;
    bv->add_option("--corpus", bv_corpus, "corpus text file")->required();
    bv->add_option("--size", bv_size, "target vocabulary size (reserved tokens included)");
    bv->add_option("--out", bv_out, "output vocabulary JSON path")->required();

    // pretrain
    auto* pt = app.add_subcommand("pretrain", "pretrain over a line corpus with mixed objectives");
    std::string pt_corpus, pt_vocab, pt_out;
    int pt_steps = 0, pt_batch = 0, pt_every = 0;
    std::uint64_t pt_seed = 0;
    bool pt_resume = false;
    pt->add_option("--config", config_path, "run config JSON (default: $MASKLM_CONFIG)");
    pt->add_option("--corpus", pt_corpus, "corpus text file, one document per line")->required();
    pt->add_option("--vocab", pt_vocab, "vocabulary JSON from build-vocab")->required();
    pt->add_option("--out", pt_out, "output directory for checkpoints and metrics.jsonl")
        ->required();
    pt->add_option("--steps", pt_steps, "total optimizer steps");
    pt->add_option("--batch", pt_batch, "examples per step");
    pt->add_option("--checkpoint-every", pt_every, "checkpoint interval in steps");
    pt->add_option("--seed", pt_seed, "master seed for init, data order, and dropout");
    pt->add_flag("--resume", pt_resume, "continue from the newest checkpoint in --out");

    // finetune
    auto* ft = app.add_subcommand("finetune", "adapt a pretrained checkpoint to a task");
    std::string ft_mode, ft_train, ft_init, ft_out, ft_vocab;
    int ft_epochs = 0, ft_batch = 0;
    double ft_lr = 0.0;
    std::uint64_t ft_seed = 0;
    ft->add_option("--config", config_path, "run config JSON (default: $MASKLM_CONFIG)");
    ft->add_option("--mode", ft_mode, "classify, span, or seq2seq")->required();
    ft->add_option("--train", ft_train,
                   "training data: TSV text/label (classify), JSONL (span), TSV source/target "
                   "(seq2seq)")
        ->required();
    ft->add_option("--init", ft_init, "pretrained checkpoint to start from")->required();
    ft->add_option("--out", ft_out, "output checkpoint path")->required();
    ft->add_option("--vocab", ft_vocab, "vocabulary JSON (default: embedded in --init)");
    ft->add_option("--epochs", ft_epochs, "training epochs");
    ft->add_option("--batch", ft_batch, "examples per step");
    ft->add_option("--lr", ft_lr, "peak learning rate");
    ft->add_option("--seed", ft_seed, "seed for shuffling, masking, and dropout");

    // generate
    auto* gen = app.add_subcommand("generate", "decode one output line per input line");
    std::string gen_ckpt, gen_vocab, gen_mode = "beam", gen_input, gen_out;
    int gen_beam = 0, gen_topk = 0, gen_block = 0, gen_maxlen = 0;
    double gen_lnorm = 0.0;
    std::uint64_t gen_seed = 0;
    gen->add_option("--config", config_path, "run config JSON (default: $MASKLM_CONFIG)");
    gen->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
    gen->add_option("--vocab", gen_vocab, "vocabulary JSON (default: embedded in --checkpoint)");
    gen->add_option("--mode", gen_mode, "beam (seq2seq) or sample (left-to-right)")
        ->check(CLI::IsMember({"beam", "sample"}));
    gen->add_option("--input", gen_input, "input text file, one source/prompt per line")
        ->required();
    gen->add_option("--out", gen_out, "output file (default: stdout)");
    gen->add_option("--beam", gen_beam, "beam size");
    gen->add_option("--top-k", gen_topk, "sampling truncation");
    gen->add_option("--block-ngram", gen_block, "duplicate n-gram size to forbid; 0 disables");
    gen->add_option("--max-out-len", gen_maxlen, "maximum generated tokens");
    gen->add_option("--length-norm", gen_lnorm, "final beam ranking: log_prob / length^a");
    gen->add_option("--seed", gen_seed, "sampling seed; line i uses seed + i");

    // eval
    auto* ev = app.add_subcommand("eval", "score hypothesis lines against reference lines");
    std::string ev_metric, ev_hyp, ev_ref;
    ev->add_option("--metric", ev_metric, "rouge1, rouge2, rougeL, bleu4, or span")
        ->required()
        ->check(CLI::IsMember({"rouge1", "rouge2", "rougeL", "bleu4", "span"}));
    ev->add_option("--hyp", ev_hyp, "hypothesis file, one per line")->required();
    ev->add_option("--ref", ev_ref, "reference file, one per line")->required();

    // inspect-mask
    auto* im = app.add_subcommand("inspect-mask", "print an attention mask as an ASCII grid");
    std::string im_objective;
    int im_len = 0, im_src = 0;
    im->add_option("--objective", im_objective,
                   "bidirectional, left_to_right, right_to_left, or seq2seq")
        ->required()
        ->check(CLI::IsMember({"bidirectional", "left_to_right", "right_to_left", "seq2seq"}));
    im->add_option("--len", im_len, "packed sequence length")->required();
    im->add_option("--src-len", im_src, "source length (seq2seq only)");

    // inspect-model
    auto* imo = app.add_subcommand("inspect-model", "print a checkpoint's config and parameters");
    std::string imo_ckpt;
    imo->add_option("--checkpoint", imo_ckpt, "model checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (bv->parsed()) return run_build_vocab(bv_corpus, bv_size, bv_out);
        if (pt->parsed()) {
            return run_pretrain(*pt, config_path, pt_corpus, pt_vocab, pt_out, pt_steps, pt_batch,
                                pt_every, pt_seed, pt_resume);
        }
        if (ft->parsed()) {
            return run_finetune(*ft, config_path, ft_mode, ft_train, ft_init, ft_out, ft_vocab,
                                ft_epochs, ft_batch, ft_lr, ft_seed);
        }
        if (gen->parsed()) {
            return run_generate(*gen, config_path, gen_ckpt, gen_vocab, gen_mode, gen_input,
                                gen_out, gen_beam, gen_topk, gen_block, gen_maxlen, gen_lnorm,
                                gen_seed);
        }
        if (ev->parsed()) return run_eval(ev_metric, ev_hyp, ev_ref);
        if (im->parsed()) return run_inspect_mask(*im, im_objective, im_len, im_src);
        if (imo->parsed()) return run_inspect_model(imo_ckpt);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
