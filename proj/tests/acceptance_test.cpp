// End-to-end acceptance checks. Each criterion prints one line:
//   [PASS] 3. gradient oracle (1.8s)
// and the binary exits nonzero when any criterion fails. Run a single
// criterion with --criterion N.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "masklm/decode.hpp"
#include "masklm/error.hpp"
#include "masklm/finetune.hpp"
#include "masklm/masks.hpp"
#include "masklm/metrics.hpp"
#include "masklm/model.hpp"
#include "masklm/pretrain.hpp"
#include "masklm/rng.hpp"
#include "masklm/run_config.hpp"
#include "masklm/tokenizer.hpp"

using namespace masklm;
namespace fs = std::filesystem;

namespace {

const std::string kDataDir = MASKLM_DATA_DIR;

struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
    if (!ok) throw CheckFailure(what);
}

fs::path fresh_dir(const std::string& tag) {
    static int counter = 0;
    fs::path dir = fs::temp_directory_path() /
                   ("masklm_accept_" + tag + "_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "cannot write " + path.string());
    os << text;
}

std::vector<int> random_ids(Rng& rng, int len, int vocab, int low = Vocab::kReservedCount) {
    std::vector<int> ids(static_cast<std::size_t>(len));
    for (int& id : ids) id = low + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - low)));
    return ids;
}

// Reproducible strictly positive next-token distribution from a hash of the
// prefix, for exercising the search code without a model.
std::vector<double> hash_dist(std::uint64_t salt, const std::vector<int>& prefix, int vocab) {
    std::uint64_t h = salt * 0x9E3779B97F4A7C15ULL + 0x0123456789ABCDEFULL;
    for (int id : prefix) {
        h = (h ^ static_cast<std::uint64_t>(id + 1)) * 0xBF58476D1CE4E5B9ULL;
        h ^= h >> 27;
    }
    std::vector<double> p(static_cast<std::size_t>(vocab));
    double total = 0.0;
    for (int v = 0; v < vocab; ++v) {
        std::uint64_t g = (h ^ (static_cast<std::uint64_t>(v) * 0x94D049BB133111EBULL + 17));
        g *= 0xFF51AFD7ED558CCDULL;
        g ^= g >> 33;
        p[static_cast<std::size_t>(v)] = 1.0 + static_cast<double>(g % 1000);
        total += p[static_cast<std::size_t>(v)];
    }
    for (double& x : p) x /= total;
    return p;
}

bool has_duplicate_ngram(const std::vector<int>& ids, int n) {
    const int len = static_cast<int>(ids.size());
    for (int a = 0; a + n <= len; ++a) {
        for (int b = a + 1; b + n <= len; ++b) {
            bool equal = true;
            for (int k = 0; equal && k < n; ++k) equal = ids[a + k] == ids[b + k];
            if (equal) return true;
        }
    }
    return false;
}

// ---- criterion 1: mask block structure and the direction transpose ----------

void criterion_masks() {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const int kind_draw = static_cast<int>(rng.below(4));
        if (kind_draw == 3) {
            const int n = 3 + static_cast<int>(rng.below(14));  // 3..16
            const int s = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 2)));
            AttentionMask mask = build_mask(LMObjective::seq2seq(s), n);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    const bool expect = i < s ? (j < s) : (j < s || j <= i);
                    require(allowed(mask, i, j) == expect,
                            "seq2seq block structure broken at n=" + std::to_string(n) +
                                " s=" + std::to_string(s) + " i=" + std::to_string(i) +
                                " j=" + std::to_string(j));
                    const double e = mask.entry(i, j);
                    require(e == 0.0 || e == kNegInf, "mask entry is not 0 or the -inf sentinel");
                }
            }
        } else {
            const int n = 1 + static_cast<int>(rng.below(16));  // 1..16
            AttentionMask bidi = build_mask(LMObjective::bidirectional(), n);
            AttentionMask l2r = build_mask(LMObjective::left_to_right(), n);
            AttentionMask r2l = build_mask(LMObjective::right_to_left(), n);
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    require(allowed(bidi, i, j), "bidirectional mask must allow everything");
                    require(allowed(l2r, i, j) == (j <= i), "left-to-right mask is not triangular");
                    require(allowed(r2l, i, j) == (j >= i), "right-to-left mask is not triangular");
                    require(allowed(l2r, i, j) == allowed(r2l, j, i),
                            "the two directional masks are not transposes");
                }
            }
        }
    }
}

// ---- criterion 2: masked positions cannot influence the output --------------

void criterion_causality() {
    Rng rng(22);
    std::int64_t denied_pairs_checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        ModelConfig mc;
        mc.layers = 1 + static_cast<int>(rng.below(2));
        mc.hidden = 8 << rng.below(3);  // 8, 16, or 32
        mc.heads = 2;
        mc.head_dim = mc.hidden / 2;
        mc.ffn = mc.hidden * 2;
        mc.vocab = 30;
        mc.max_len = 12;
        mc.dropout = 0.0;
        ModelParams params = ModelParams::init(mc, rng);

        for (int obj = 0; obj < 3; ++obj) {
            PackedInput input;
            int n;
            if (obj == 2) {
                n = 3 + static_cast<int>(rng.below(10));  // 3..12
                const int s = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 2)));
                input.objective = LMObjective::seq2seq(s);
                input.segments.assign(static_cast<std::size_t>(n), SegmentIds::kSeq2SeqTarget);
                for (int i = 0; i < s; ++i) input.segments[static_cast<std::size_t>(i)] = SegmentIds::kSeq2SeqSource;
            } else {
                n = 2 + static_cast<int>(rng.below(11));  // 2..12
                input.objective = obj == 0 ? LMObjective::left_to_right()
                                           : LMObjective::right_to_left();
                input.segments.assign(static_cast<std::size_t>(n),
                                      obj == 0 ? SegmentIds::kLeftToRight
                                               : SegmentIds::kRightToLeft);
            }
            input.ids = random_ids(rng, n, mc.vocab);
            input.positions.resize(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) input.positions[static_cast<std::size_t>(i)] = i;

            const AttentionMask mask = build_mask(input.objective, n);
            const std::vector<double> base = forward(nullptr, params, input, false, 0).h.back().values();
            const int d = mc.hidden;

            for (int j = 0; j < n; ++j) {
                PackedInput flipped = input;
                int other = flipped.ids[static_cast<std::size_t>(j)];
                while (other == flipped.ids[static_cast<std::size_t>(j)]) {
                    other = Vocab::kReservedCount +
                            static_cast<int>(rng.below(static_cast<std::uint64_t>(mc.vocab - Vocab::kReservedCount)));
                }
                flipped.ids[static_cast<std::size_t>(j)] = other;
                const std::vector<double> out = forward(nullptr, params, flipped, false, 0).h.back().values();
                for (int i = 0; i < n; ++i) {
                    if (allowed(mask, i, j)) continue;
                    ++denied_pairs_checked;
                    for (int k = 0; k < d; ++k) {
                        require(out[static_cast<std::size_t>(i) * d + k] ==
                                    base[static_cast<std::size_t>(i) * d + k],
                                "flipping an unreachable token changed output row " +
                                    std::to_string(i) + " under " +
                                    objective_name(input.objective.kind));
                    }
                }
            }
        }
    }
    require(denied_pairs_checked > 3000, "causality sweep exercised too few denied pairs");
}

// ---- criterion 3: analytic gradients match central finite differences -------

void criterion_gradients() {
    ModelConfig mc;
    mc.layers = 2;
    mc.hidden = 16;
    mc.heads = 2;
    mc.head_dim = 8;
    mc.ffn = 32;
    mc.vocab = 50;
    mc.max_len = 16;
    mc.dropout = 0.0;
    Rng rng(33);
    ModelParams params = ModelParams::init(mc, rng);

    const PackedInput input = pack_pair({7, 8, 9}, {10, 11, 12}, ObjectiveKind::Bidirectional);
    const std::vector<int> lm_positions = {1, 4, 6};
    const std::vector<int> lm_targets = {7, 30, 12};
    const std::vector<int> nsp_target = {0};

    const auto loss_value = [&](Tape* tape) {
        HiddenStates hs = forward(tape, params, input, false, 0);
        Tensor logits = lm_logits(tape, params, hs.h.back(), lm_positions);
        Tensor lm_loss = cross_entropy(tape, logits, lm_targets, 0.1);
        Tensor h1 = select_rows(tape, hs.h.back(), {0});
        Tensor nsp_loss = cross_entropy(tape, nsp_logits(tape, params, h1), nsp_target, 0.0);
        return add(tape, lm_loss, nsp_loss);
    };

    // Analytic pass.
    for (const NamedParam& p : params.parameters()) p.tensor.zero_grad();
    Tape tape;
    Tensor loss = loss_value(&tape);
    tape.backward(loss);

    const double h = 1e-5;
    std::int64_t checked = 0;
    for (const NamedParam& p : params.parameters()) {
        Tensor param = p.tensor;  // copies alias the same storage
        std::vector<double>& w = param.values();
        const std::vector<double> analytic = param.grad();
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double keep = w[k];
            w[k] = keep + h;
            const double up = loss_value(nullptr).item();
            w[k] = keep - h;
            const double down = loss_value(nullptr).item();
            w[k] = keep;
            const double fd = (up - down) / (2.0 * h);
            const double an = analytic[k];
            const double denom = std::max(std::abs(an), std::abs(fd));
            require(std::abs(an - fd) <= 1e-4 * denom || std::abs(an - fd) <= 1e-8,
                    "gradient mismatch in " + p.name + "[" + std::to_string(k) +
                        "]: analytic " + std::to_string(an) + " vs finite difference " +
                        std::to_string(fd));
            ++checked;
        }
    }
    require(checked == params.parameter_count(), "finite differences missed some parameters");
}

// ---- criterion 4: corruption hits its configured proportions ----------------

void criterion_corruption_stats() {
    const CorruptionPolicy policy;  // 0.15 budget, 80/10/10, 80/20 spans
    const int vocab = 60;
    Rng rng(44);
    CorruptionStats stats;
    while (stats.masked_tokens < 100000) {
        const int n = 150 + static_cast<int>(rng.below(101));
        PackedInput clean = pack_single(random_ids(rng, n, vocab), ObjectiveKind::LeftToRight);
        corrupt(clean, policy, vocab, rng, &stats);
    }
    const double masked = static_cast<double>(stats.masked_tokens);
    const double rate = masked / static_cast<double>(stats.maskable_tokens);
    require(std::abs(rate - 0.15) <= 0.01,
            "per-token mask rate " + std::to_string(rate) + " is not within 1% of 15%");

    const double mask_frac = static_cast<double>(stats.replaced_mask) / masked;
    const double random_frac = static_cast<double>(stats.replaced_random) / masked;
    const double keep_frac = static_cast<double>(stats.kept_original) / masked;
    require(std::abs(mask_frac - 0.80) <= 0.01, "MASK replacement fraction " + std::to_string(mask_frac));
    require(std::abs(random_frac - 0.10) <= 0.01, "random replacement fraction " + std::to_string(random_frac));
    require(std::abs(keep_frac - 0.10) <= 0.01, "keep-original fraction " + std::to_string(keep_frac));

    const double spans = static_cast<double>(stats.unigram_spans + stats.bigram_spans +
                                             stats.trigram_spans);
    const double uni = static_cast<double>(stats.unigram_spans) / spans;
    const double bi = static_cast<double>(stats.bigram_spans) / spans;
    const double tri = static_cast<double>(stats.trigram_spans) / spans;
    require(std::abs(uni - 0.80) <= 0.015, "unigram span fraction " + std::to_string(uni));
    require(std::abs(bi - 0.10) <= 0.015, "bigram span fraction " + std::to_string(bi));
    require(std::abs(tri - 0.10) <= 0.015, "trigram span fraction " + std::to_string(tri));
}

// ---- criterion 5: objective mixing ratios ------------------------------------

void criterion_mixing() {
    const MixSchedule mix;  // 1/3, 1/3, 1/6, 1/6
    Rng rng(55);
    std::map<ObjectiveKind, int> counts;
    const int draws = 60000;
    for (int i = 0; i < draws; ++i) counts[sample_objective(mix, rng)]++;
    const auto frac = [&](ObjectiveKind k) {
        return static_cast<double>(counts[k]) / static_cast<double>(draws);
    };
    require(std::abs(frac(ObjectiveKind::Bidirectional) - 1.0 / 3.0) <= 0.02,
            "bidirectional mixing fraction off");
    require(std::abs(frac(ObjectiveKind::Seq2Seq) - 1.0 / 3.0) <= 0.02,
            "seq2seq mixing fraction off");
    require(std::abs(frac(ObjectiveKind::LeftToRight) - 1.0 / 6.0) <= 0.02,
            "left-to-right mixing fraction off");
    require(std::abs(frac(ObjectiveKind::RightToLeft) - 1.0 / 6.0) <= 0.02,
            "right-to-left mixing fraction off");
}

// ---- criterion 6: joint pretraining drives every objective's loss down ------

void criterion_pretraining_convergence() {
    Vocab vocab = Vocab::build_from_text(read_file(fs::path(kDataDir) / "toy_corpus.txt"), 120);
    Corpus corpus = Corpus::load_file(fs::path(kDataDir) / "toy_corpus.txt", vocab);

    ModelConfig mc;
    mc.layers = 2;
    mc.hidden = 64;
    mc.heads = 2;
    mc.head_dim = 32;
    mc.ffn = 128;
    mc.vocab = vocab.size();
    mc.max_len = 48;
    mc.dropout = 0.0;

    PretrainConfig cfg;
    cfg.steps = 2000;
    cfg.batch_size = 8;
    cfg.checkpoint_every = 1000;
    cfg.seed = 6;
    cfg.optimizer.peak_lr = 6e-3;
    cfg.optimizer.warmup_steps = 100;
    cfg.optimizer.total_steps = 2000;

    fs::path dir = fresh_dir("pretrain");
    Rng init_rng(cfg.seed);
    ModelParams params = ModelParams::init(mc, init_rng);
    std::vector<StepRecord> records = pretrain_loop(params, corpus, vocab, cfg, dir);
    require(static_cast<int>(records.size()) == cfg.steps, "pretraining recorded too few steps");

    std::map<ObjectiveKind, std::vector<double>> by_objective;
    for (const StepRecord& r : records) by_objective[r.objective].push_back(r.loss);
    for (const auto& [kind, losses] : by_objective) {
        require(losses.size() >= 200,
                objective_name(kind) + " saw too few steps to form two 100-step windows");
        const auto mean = [](const double* p, std::size_t count) {
            double total = 0.0;
            for (std::size_t i = 0; i < count; ++i) total += p[i];
            return total / static_cast<double>(count);
        };
        const double initial = mean(losses.data(), 100);
        const double final_mean = mean(losses.data() + losses.size() - 100, 100);
        require(final_mean < 0.5 * initial,
                objective_name(kind) + " loss did not halve: first-100 mean " +
                    std::to_string(initial) + ", last-100 mean " + std::to_string(final_mean));
    }

    // Determinism: a fresh 50-step run with the same seed reproduces the
    // trajectory bit for bit.
    PretrainConfig short_cfg = cfg;
    short_cfg.steps = 50;
    fs::path dir2 = fresh_dir("pretrain_rerun");
    Rng rerun_rng(cfg.seed);
    ModelParams rerun = ModelParams::init(mc, rerun_rng);
    std::vector<StepRecord> prefix = pretrain_loop(rerun, corpus, vocab, short_cfg, dir2);
    require(prefix.size() == 50, "determinism rerun recorded the wrong number of steps");
    for (int i = 0; i < 50; ++i) {
        require(prefix[static_cast<std::size_t>(i)].loss == records[static_cast<std::size_t>(i)].loss &&
                    prefix[static_cast<std::size_t>(i)].objective ==
                        records[static_cast<std::size_t>(i)].objective,
                "rerun diverged at step " + std::to_string(i + 1));
    }
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

// ---- criterion 7: sequence-to-sequence copy task ------------------------------

void criterion_copy_task() {
    // A 30-token vocabulary: the 5 reserved ids plus 25 letters.
    std::vector<std::string> tokens(Vocab::reserved_tokens().begin(),
                                    Vocab::reserved_tokens().end());
    for (char c = 'a'; c <= 'y'; ++c) tokens.push_back(std::string(1, c));
    Vocab vocab = Vocab::from_tokens(tokens);

    ModelConfig mc;
    mc.layers = 2;
    mc.hidden = 64;
    mc.heads = 4;
    mc.head_dim = 16;
    mc.ffn = 128;
    mc.vocab = 30;
    mc.max_len = 24;
    mc.dropout = 0.0;

    // Desk checkpoint: brief mixed-objective pretraining over documents whose
    // second sentence repeats the first. The phase is deliberately short: a
    // long run on this synthetic corpus saturates the attention logits into
    // patterns the fine-tune can no longer reshape.
    Corpus corpus;
    Rng corpus_rng(71);
    corpus.docs.resize(2000);
    for (auto& doc : corpus.docs) {
        TokenSequence sentence;
        sentence.ids = random_ids(corpus_rng, 1 + static_cast<int>(corpus_rng.below(10)), 30);
        doc = {sentence, sentence};
    }

    PretrainConfig pcfg;
    pcfg.steps = 200;
    pcfg.batch_size = 8;
    pcfg.seed = 3;
    pcfg.optimizer.peak_lr = 5e-3;
    pcfg.optimizer.warmup_steps = 50;
    pcfg.optimizer.total_steps = 400;

    Rng init_rng(pcfg.seed);
    ModelParams params = ModelParams::init(mc, init_rng);
    Adam opt(params.parameters(), pcfg.optimizer);
    Rng data_rng(pcfg.seed);
    for (int step = 0; step < pcfg.steps; ++step) {
        ClozeBatch batch = assemble_batch(corpus, pcfg, mc, data_rng);
        pretrain_step(params, batch, opt, step);
    }
    fs::path dir = fresh_dir("copy");
    const fs::path desk_path = dir / "desk.mlm";
    save_checkpoint(desk_path, params, vocab.tokens());

    // Fine-tune the saved checkpoint for exactly 300 steps on copy pairs;
    // every batch is fresh so the 300 steps exert pure generalization
    // pressure rather than memorizing a small pair set.
    Checkpoint desk = load_checkpoint(desk_path);
    PairDataset data;
    Rng pair_rng(8);
    for (int i = 0; i < 96 * 300; ++i) {
        std::vector<int> seq = random_ids(pair_rng, 1 + static_cast<int>(pair_rng.below(10)), 30);
        data.pairs.emplace_back(seq, seq);
    }
    FinetuneConfig fc;
    fc.mode = FinetuneConfig::Mode::Seq2Seq;
    fc.target_mask_prob = 0.7;
    fc.label_smoothing = 0.1;
    fc.epochs = 1;  // ceil(28800/96) = 300 steps
    fc.batch = 96;
    fc.lr = 7e-3;
    fc.dropout = 0.0;
    fc.seed = 9;
    std::vector<double> losses = run_finetune_seq2seq(desk.params, data, fc);
    require(losses.size() == 300, "fine-tuning ran " + std::to_string(losses.size()) +
                                      " steps instead of 300");

    // Beam-3 must reproduce held-out sources exactly, ending in a real EOS.
    DecodeConfig dc;
    dc.beam_size = 3;
    dc.max_out_len = 11;  // up to 10 copied tokens plus EOS
    dc.block_ngram = 0;
    dc.length_norm = 0.0;
    Rng eval_rng(10);
    int exact = 0;
    for (int i = 0; i < 200; ++i) {
        const std::vector<int> source =
            random_ids(eval_rng, 1 + static_cast<int>(eval_rng.below(10)), 30);
        Hypothesis hyp = beam_search(desk.params, source, dc);
        require(!hyp.ids.empty() && hyp.ids.back() == Vocab::kEos,
                "generation " + std::to_string(i) + " did not end with a generated EOS");
        std::vector<int> body(hyp.ids.begin(), hyp.ids.end() - 1);
        if (body == source) ++exact;
    }
    require(exact >= 190, "only " + std::to_string(exact) +
                              " of 200 held-out sources were copied exactly");
    fs::remove_all(dir);
}

// ---- criterion 8: duplicate n-grams never survive blocking --------------------

void criterion_blocking() {
    const int vocab = 50;
    for (int run = 0; run < 1000; ++run) {
        const NextTokenFn next = [run, vocab](const std::vector<int>& prefix) {
            return hash_dist(static_cast<std::uint64_t>(run) + 1, prefix, vocab);
        };
        DecodeConfig beam_cfg;
        beam_cfg.beam_size = 3;
        beam_cfg.max_out_len = 24;
        beam_cfg.block_ngram = 3;
        Hypothesis hyp = beam_search_over(next, vocab, beam_cfg);
        require(!has_duplicate_ngram(hyp.ids, 3),
                "beam output " + std::to_string(run) + " contains a duplicated trigram");

        DecodeConfig sample_cfg;
        sample_cfg.max_out_len = 24;
        sample_cfg.block_ngram = 4;
        sample_cfg.top_k = 40;
        std::vector<int> sampled =
            sample_tokens_over(next, vocab, sample_cfg, static_cast<std::uint64_t>(run) * 31 + 7);
        require(!has_duplicate_ngram(sampled, 4),
                "sampled output " + std::to_string(run) + " contains a duplicated 4-gram");
    }
}

// ---- criterion 9: beam search equals brute-force enumeration ------------------

void criterion_beam_optimality() {
    const int vocab = 5;
    const int max_len = 4;
    for (int model = 0; model < 20; ++model) {
        const std::uint64_t salt = static_cast<std::uint64_t>(model) * 777 + 5;
        const NextTokenFn next = [salt, vocab](const std::vector<int>& prefix) {
            return hash_dist(salt, prefix, vocab);
        };

        // Every terminal sequence: ends with EOS or reaches max_len.
        Hypothesis best;
        bool have_best = false;
        const std::function<void(std::vector<int>&, double)> enumerate =
            [&](std::vector<int>& prefix, double lp) {
                const std::vector<double> dist = next(prefix);
                for (int v = 0; v < vocab; ++v) {
                    prefix.push_back(v);
                    const double child_lp = lp + std::log(dist[static_cast<std::size_t>(v)]);
                    if (v == Vocab::kEos || static_cast<int>(prefix.size()) >= max_len) {
                        const bool beats =
                            !have_best || child_lp > best.log_prob ||
                            (child_lp == best.log_prob &&
                             (prefix.size() < best.ids.size() ||
                              (prefix.size() == best.ids.size() && prefix < best.ids)));
                        if (beats) {
                            best.ids = prefix;
                            best.log_prob = child_lp;
                            best.finished = true;
                            have_best = true;
                        }
                    } else {
                        enumerate(prefix, child_lp);
                    }
                    prefix.pop_back();
                }
            };
        std::vector<int> prefix;
        enumerate(prefix, 0.0);

        DecodeConfig cfg;
        cfg.beam_size = 625;  // far wider than any frontier here, so nothing is pruned
        cfg.max_out_len = max_len;
        cfg.block_ngram = 0;
        cfg.length_norm = 0.0;
        Hypothesis beam = beam_search_over(next, vocab, cfg);
        require(beam.ids == best.ids, "beam differs from exhaustive search on model " +
                                          std::to_string(model));
        require(beam.log_prob == best.log_prob,
                "beam log-probability differs from exhaustive search on model " +
                    std::to_string(model));
    }
}

// ---- criterion 10: text metric oracles ---------------------------------------

int lcs_brute(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.size() > b.size()) return lcs_brute(b, a);
    int best = 0;
    const int n = static_cast<int>(a.size());
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        std::size_t bi = 0;
        int len = 0;
        bool ok = true;
        for (int i = 0; ok && i < n; ++i) {
            if (!(mask & (1u << i))) continue;
            while (bi < b.size() && b[bi] != a[static_cast<std::size_t>(i)]) ++bi;
            if (bi == b.size()) {
                ok = false;
            } else {
                ++bi;
                ++len;
            }
        }
        if (ok) best = std::max(best, len);
    }
    return best;
}

void criterion_metric_oracles() {
    const std::vector<std::string> alphabet = {"a", "b", "c"};
    const auto nth_word_list = [&](int len, int index) {
        std::vector<std::string> words(static_cast<std::size_t>(len));
        for (int i = 0; i < len; ++i) {
            words[static_cast<std::size_t>(i)] = alphabet[static_cast<std::size_t>(index % 3)];
            index /= 3;
        }
        return words;
    };

    // Exhaustive: every hypothesis/reference pair with total length <= 10.
    for (int total = 0; total <= 10; ++total) {
        for (int lh = 0; lh <= total; ++lh) {
            const int lr = total - lh;
            int hyp_count = 1;
            for (int i = 0; i < lh; ++i) hyp_count *= 3;
            int ref_count = 1;
            for (int i = 0; i < lr; ++i) ref_count *= 3;
            for (int hi = 0; hi < hyp_count; ++hi) {
                const std::vector<std::string> hyp = nth_word_list(lh, hi);
                for (int ri = 0; ri < ref_count; ++ri) {
                    const std::vector<std::string> ref = nth_word_list(lr, ri);
                    require(lcs_length(hyp, ref) == lcs_brute(hyp, ref),
                            "LCS dynamic program disagrees with brute force");
                }
            }
        }
    }

    // Random pairs up to length 10 on each side, and the full score formula.
    Rng rng(1010);
    for (int trial = 0; trial < 5000; ++trial) {
        const auto draw = [&]() {
            std::vector<std::string> words(rng.below(11));
            for (auto& w : words) w = alphabet[rng.below(3)];
            return words;
        };
        const std::vector<std::string> hyp = draw();
        const std::vector<std::string> ref = draw();
        const int lcs = lcs_length(hyp, ref);
        require(lcs == lcs_brute(hyp, ref), "LCS mismatch on a random pair");
        if (!hyp.empty() && !ref.empty()) {
            const double p = static_cast<double>(lcs) / static_cast<double>(hyp.size());
            const double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
            const double f1 = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
            ScoreReport score = rouge_l(hyp, ref);
            require(score.precision == p && score.recall == r && score.f1 == f1,
                    "longest-common-subsequence score formula mismatch");
        }
    }

    // Hand-computed cases: 4 matching tokens against a 6-token reference gives
    // precision 1, recall 2/3, F1 exactly 0.8 in double arithmetic.
    const std::vector<std::string> hyp = {"a", "b", "c", "d"};
    const std::vector<std::string> ref = {"a", "b", "c", "d", "e", "f"};
    require(rouge_l(hyp, ref).f1 == 0.8, "hand-computed LCS F1 is not exactly 0.8");
    require(rouge_n(hyp, ref, 1).f1 == 0.8, "hand-computed unigram F1 is not exactly 0.8");
    require(rouge_n(hyp, ref, 1).precision == 1.0, "hand-computed unigram precision is not 1");
    require(span_em_f1("a b c d", "a b c d e f").f1 == 0.8,
            "hand-computed span F1 is not exactly 0.8");
}

// ---- criterion 11: task heads converge and the span argmax is exact -----------

void criterion_task_heads() {
    // Two-class rule: label 1 iff token 7 appears.
    ModelConfig mc;
    mc.layers = 1;
    mc.hidden = 16;
    mc.heads = 2;
    mc.head_dim = 8;
    mc.ffn = 32;
    mc.vocab = 40;
    mc.max_len = 20;
    mc.dropout = 0.0;

    {
        Rng rng(111);
        ModelParams params = ModelParams::init(mc, rng);
        ClassifierHead head = ClassifierHead::init(mc.hidden, 2, rng);

        std::vector<PackedInput> inputs;
        std::vector<int> labels;
        Rng data_rng(112);
        for (int i = 0; i < 100; ++i) {
            std::vector<int> ids = random_ids(data_rng, 5 + static_cast<int>(data_rng.below(6)), 40, 8);
            const bool positive = i % 2 == 0;
            if (positive) ids[data_rng.below(ids.size())] = 7;
            inputs.push_back(pack_classify(ids));
            labels.push_back(positive ? 1 : 0);
        }

        OptimizerConfig ocfg;
        ocfg.peak_lr = 0.02;
        ocfg.warmup_steps = 0;
        ocfg.total_steps = 50;
        std::vector<NamedParam> all = params.parameters();
        all.push_back({"classifier.w", head.w, true});
        Adam opt(all, ocfg);
        Rng step_rng(113);
        for (int step = 0; step < 50; ++step) {
            finetune_classify_step(params, head, opt, inputs, labels, step, step_rng);
        }

        int correct = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            const std::vector<double> probs = classify(params, head, inputs[i]);
            const int pred = probs[1] > probs[0] ? 1 : 0;
            if (pred == labels[i]) ++correct;
        }
        require(correct >= 99, "classification training accuracy " + std::to_string(correct) +
                                   "/100 after 50 steps");
    }

    // Find-the-marker span task: the answer is the position of token 7.
    {
        Rng rng(121);
        ModelParams params = ModelParams::init(mc, rng);
        SpanHead head = SpanHead::init(mc.hidden, rng);

        const auto make_example = [&](Rng& r, SpanExample& ex, SpanPrediction& gold) {
            std::vector<int> passage = random_ids(r, 12, 40, 8);
            const int where = static_cast<int>(r.below(passage.size()));
            passage[static_cast<std::size_t>(where)] = 7;
            ex = pack_span_example(passage, {7});
            gold.start = ex.passage_first + where;
            gold.end = gold.start;
        };

        std::vector<SpanExample> examples(60);
        std::vector<SpanPrediction> gold(60);
        Rng data_rng(122);
        for (int i = 0; i < 60; ++i) make_example(data_rng, examples[i], gold[i]);

        OptimizerConfig ocfg;
        ocfg.peak_lr = 0.02;
        ocfg.warmup_steps = 0;
        ocfg.total_steps = 60;
        std::vector<NamedParam> all = params.parameters();
        all.push_back({"span.start_proj", head.start_proj, true});
        all.push_back({"span.end_proj", head.end_proj, true});
        Adam opt(all, ocfg);
        Rng step_rng(123);
        for (int step = 0; step < 60; ++step) {
            finetune_span_step(params, head, opt, examples, gold, step, step_rng);
        }

        int exact = 0;
        Rng eval_rng(124);
        for (int i = 0; i < 100; ++i) {
            SpanExample ex;
            SpanPrediction want;
            make_example(eval_rng, ex, want);
            SpanPrediction got = extract_span(params, head, ex.input, ex.passage_first,
                                              ex.passage_last, 16);
            if (got.start == want.start && got.end == want.end) ++exact;
        }
        require(exact >= 95, "span exact-match " + std::to_string(exact) + "/100");
    }

    // The span argmax must equal an exhaustive scan over all candidate pairs.
    {
        ModelConfig wide = mc;
        wide.max_len = 70;
        Rng rng(131);
        ModelParams params = ModelParams::init(wide, rng);
        SpanHead head = SpanHead::init(wide.hidden, rng);
        const int max_span_len = 16;
        for (int n : {1, 2, 7, 33, 64}) {
            SpanExample ex = [&] {
                std::vector<int> passage = random_ids(rng, n, 40);
                return pack_span_example(passage, {9, 10});
            }();
            SpanPrediction got = extract_span(params, head, ex.input, ex.passage_first,
                                              ex.passage_last, max_span_len);

            HiddenStates hs = forward(nullptr, params, ex.input, false, 0);
            Tensor starts = matmul(nullptr, hs.h.back(), head.start_proj);
            Tensor ends = matmul(nullptr, hs.h.back(), head.end_proj);
            int best_i = ex.passage_first, best_j = ex.passage_first;
            double best_score = -std::numeric_limits<double>::infinity();
            for (int i = ex.passage_first; i <= ex.passage_last; ++i) {
                for (int j = i; j <= std::min(ex.passage_last, i + max_span_len); ++j) {
                    const double score = starts.at(i, 0) + ends.at(j, 0);
                    if (score > best_score) {
                        best_score = score;
                        best_i = i;
                        best_j = j;
                    }
                }
            }
            require(got.start == best_i && got.end == best_j,
                    "span argmax differs from the exhaustive pair scan at passage length " +
                        std::to_string(n));
        }
    }
}

// ---- criterion 12: determinism and persistence --------------------------------

struct CmdResult {
    int exit_code = -1;
    std::string output;
};

CmdResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path capture = fs::temp_directory_path() /
                             ("masklm_accept_capture_" + std::to_string(::getpid()) + "_" +
                              std::to_string(counter++) + ".txt");
    const std::string cmd = "\"" + std::string(MASKLM_BIN) + "\" " + args + " > \"" +
                            capture.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    CmdResult result;
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    result.output = read_file(capture);
    fs::remove(capture);
    return result;
}

void criterion_determinism() {
    // (a) Checkpoint round trip is bit exact, including a re-serialized file.
    fs::path dir = fresh_dir("determinism");
    {
        ModelConfig mc;
        mc.layers = 2;
        mc.hidden = 16;
        mc.heads = 2;
        mc.head_dim = 8;
        mc.ffn = 32;
        mc.vocab = 30;
        mc.max_len = 12;
        mc.dropout = 0.0;
        Rng rng(141);
        ModelParams params = ModelParams::init(mc, rng);
        std::vector<std::string> tokens(Vocab::reserved_tokens().begin(),
                                        Vocab::reserved_tokens().end());
        for (int i = 0; i < 25; ++i) tokens.push_back("w" + std::to_string(i));
        std::map<std::string, Tensor> extras;
        extras.emplace("classifier.w", Tensor::randn({16, 2}, rng, 0.02, true));

        const fs::path first = dir / "a.mlm";
        save_checkpoint(first, params, tokens, extras);
        Checkpoint loaded = load_checkpoint(first);
        require(loaded.vocab_tokens == tokens, "round trip dropped the vocabulary");
        const std::vector<NamedParam> before = params.parameters();
        const std::vector<NamedParam> after = loaded.params.parameters();
        require(before.size() == after.size(), "round trip changed the parameter inventory");
        for (std::size_t i = 0; i < before.size(); ++i) {
            require(before[i].name == after[i].name &&
                        before[i].tensor.values() == after[i].tensor.values(),
                    "round trip changed parameter " + before[i].name);
        }
        require(loaded.extras.at("classifier.w").values() == extras.at("classifier.w").values(),
                "round trip changed an extra array");

        const fs::path second = dir / "b.mlm";
        save_checkpoint(second, loaded.params, loaded.vocab_tokens, loaded.extras);
        require(read_file(first) == read_file(second),
                "re-serializing a loaded checkpoint changed its bytes");
    }

    // (b) Resumed training reproduces the uninterrupted trajectory.
    {
        Vocab vocab = Vocab::build_from_text(read_file(fs::path(kDataDir) / "toy_corpus.txt"), 80);
        Corpus corpus = Corpus::load_file(fs::path(kDataDir) / "toy_corpus.txt", vocab);
        ModelConfig mc;
        mc.layers = 1;
        mc.hidden = 16;
        mc.heads = 2;
        mc.head_dim = 8;
        mc.ffn = 32;
        mc.vocab = vocab.size();
        mc.max_len = 48;
        mc.dropout = 0.0;

        PretrainConfig full;
        full.steps = 40;
        full.batch_size = 2;
        full.checkpoint_every = 20;
        full.seed = 13;
        full.optimizer.warmup_steps = 5;
        full.optimizer.total_steps = 40;

        fs::path dir_a = fresh_dir("resume_a");
        Rng rng_a(full.seed);
        ModelParams params_a = ModelParams::init(mc, rng_a);
        std::vector<StepRecord> straight = pretrain_loop(params_a, corpus, vocab, full, dir_a);

        PretrainConfig half = full;
        half.steps = 20;
        fs::path dir_b = fresh_dir("resume_b");
        Rng rng_b(full.seed);
        ModelParams params_b = ModelParams::init(mc, rng_b);
        pretrain_loop(params_b, corpus, vocab, half, dir_b);

        Rng rng_c(full.seed);
        ModelParams params_c = ModelParams::init(mc, rng_c);
        std::vector<StepRecord> resumed = pretrain_loop(params_c, corpus, vocab, full, dir_b,
                                                        /*resume=*/true);
        require(resumed.size() == 20, "resume replayed the wrong number of steps");
        for (int i = 0; i < 20; ++i) {
            const StepRecord& a = straight[static_cast<std::size_t>(20 + i)];
            const StepRecord& b = resumed[static_cast<std::size_t>(i)];
            require(a.step == b.step && a.loss == b.loss && a.objective == b.objective,
                    "resumed trajectory diverged at step " + std::to_string(b.step));
        }
        require(read_file(dir_a / "checkpoint_000040.mlm") ==
                    read_file(dir_b / "checkpoint_000040.mlm"),
                "final checkpoints differ between straight and resumed runs");
        require(read_file(dir_a / "metrics.jsonl") == read_file(dir_b / "metrics.jsonl"),
                "metrics logs differ between straight and resumed runs");
        fs::remove_all(dir_a);
        fs::remove_all(dir_b);
    }

    // (c) The command-line pipeline is byte-identical across reruns and fits
    // the smoke-test budget.
    {
        const auto t0 = std::chrono::steady_clock::now();
        const fs::path corpus = fs::path(kDataDir) / "toy_corpus.txt";
        const fs::path pairs = fs::path(kDataDir) / "toy_pairs.tsv";

        const auto pipeline = [&](const fs::path& root) {
            fs::create_directories(root);
            write_file(root / "config.json",
                       "{\"model\": {\"layers\": 1, \"hidden\": 16, \"heads\": 2, \"head_dim\": 8,"
                       " \"ffn\": 32, \"max_len\": 48, \"dropout\": 0.0},"
                       " \"optimizer\": {\"warmup_steps\": 5, \"total_steps\": 50}}");
            write_file(root / "prompts.txt", "the wind\na door\n");
            CmdResult r = run_cli("build-vocab --corpus \"" + corpus.string() +
                                  "\" --size 80 --out \"" + (root / "vocab.json").string() + "\"");
            require(r.exit_code == 0, "build-vocab failed: " + r.output);
            r = run_cli("pretrain --config \"" + (root / "config.json").string() +
                        "\" --corpus \"" + corpus.string() + "\" --vocab \"" +
                        (root / "vocab.json").string() + "\" --out \"" +
                        (root / "run").string() +
                        "\" --steps 50 --batch 2 --checkpoint-every 25 --seed 7");
            require(r.exit_code == 0, "pretrain failed: " + r.output);
            r = run_cli("finetune --mode seq2seq --train \"" + pairs.string() + "\" --init \"" +
                        (root / "run" / "checkpoint_000050.mlm").string() + "\" --out \"" +
                        (root / "finetuned.mlm").string() +
                        "\" --epochs 17 --batch 4 --lr 0.001 --seed 4");
            require(r.exit_code == 0, "finetune failed: " + r.output);
            r = run_cli("generate --checkpoint \"" + (root / "finetuned.mlm").string() +
                        "\" --input \"" + (root / "prompts.txt").string() + "\" --out \"" +
                        (root / "generated.txt").string() +
                        "\" --mode beam --beam 2 --max-out-len 8 --block-ngram 0");
            require(r.exit_code == 0, "generate failed: " + r.output);
            r = run_cli("eval --metric rouge1 --hyp \"" + (root / "generated.txt").string() +
                        "\" --ref \"" + (root / "prompts.txt").string() + "\"");
            require(r.exit_code == 0, "eval failed: " + r.output);
            return r.output;
        };

        const std::string eval_a = pipeline(dir / "cli_a");
        const double first_run_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        require(first_run_seconds < 120.0, "smoke pipeline took " +
                                               std::to_string(first_run_seconds) + "s (budget 120s)");
        const std::string eval_b = pipeline(dir / "cli_b");

        require(eval_a == eval_b, "eval output differs between identical seeded runs");
        for (const std::string rel : {"vocab.json", "run/checkpoint_000050.mlm",
                                      "run/metrics.jsonl", "finetuned.mlm", "generated.txt"}) {
            require(read_file(dir / "cli_a" / rel) == read_file(dir / "cli_b" / rel),
                    std::string(rel) + " differs between identical seeded runs");
        }
    }
    fs::remove_all(dir);
}

struct Criterion {
    int id;
    const char* name;
    double time_budget_seconds;  // 0 = no stated budget
    std::function<void()> run;
};

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        if (std::string(argv[i]) == "--criterion" && i + 1 < argc) only = std::atoi(argv[++i]);
    }

    const std::vector<Criterion> criteria = {
        {1, "mask block structure and transpose relation", 5.0, criterion_masks},
        {2, "causality under every directional objective", 60.0, criterion_causality},
        {3, "gradient oracle against finite differences", 120.0, criterion_gradients},
        {4, "corruption proportions", 30.0, criterion_corruption_stats},
        {5, "objective mixing ratios", 5.0, criterion_mixing},
        {6, "joint pretraining convergence and determinism", 600.0,
         criterion_pretraining_convergence},
        {7, "seq2seq copy task after fine-tuning", 300.0, criterion_copy_task},
        {8, "duplicate n-gram blocking soundness", 120.0, criterion_blocking},
        {9, "beam search optimality oracle", 60.0, criterion_beam_optimality},
        {10, "text metric oracles", 0.0, criterion_metric_oracles},
        {11, "task-head convergence and span argmax", 0.0, criterion_task_heads},
        {12, "determinism and persistence", 0.0, criterion_determinism},
    };

    bool all_ok = true;
    for (const Criterion& c : criteria) {
        if (only != 0 && c.id != only) continue;
        const auto t0 = std::chrono::steady_clock::now();
        std::string failure;
        try {
            c.run();
        } catch (const std::exception& e) {
            failure = e.what();
        }
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (failure.empty() && c.time_budget_seconds > 0.0 && seconds > c.time_budget_seconds) {
            std::ostringstream os;
            os << "exceeded the " << c.time_budget_seconds << "s budget";
            failure = os.str();
        }
        std::ostringstream line;
        line.setf(std::ios::fixed);
        line.precision(1);
        line << (failure.empty() ? "[PASS] " : "[FAIL] ") << c.id << ". " << c.name << " ("
             << seconds << "s)";
        if (!failure.empty()) line << " — " << failure;
        std::cout << line.str() << std::endl;
        all_ok = all_ok && failure.empty();
    }
    return all_ok ? 0 : 1;
}
