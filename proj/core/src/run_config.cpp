#include "masklm/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "masklm/error.hpp"

namespace masklm {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& section, const std::set<std::string>& known,
                         const std::string& origin, const std::string& section_name) {
    if (!section.is_object()) {
        throw DataError(origin + ": section '" + section_name + "' must be a JSON object");
    }
    for (const auto& [key, value] : section.items()) {
        if (!known.contains(key)) {
            throw DataError(origin + ": unknown key '" + key + "' in section '" + section_name +
                            "'");
        }
    }
}

template <typename T>
void read_into(const json& section, const char* key, T& out) {
    if (section.contains(key)) out = section.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::defaults() { return RunConfig{}; }

RunConfig RunConfig::from_json_text(const std::string& text, const std::string& origin) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw DataError(origin + ": not valid JSON: " + e.what());
    }
    if (!doc.is_object()) throw DataError(origin + ": config root must be a JSON object");

    RunConfig cfg;
    reject_unknown_keys(
        doc, {"model", "optimizer", "corruption", "mix", "pretrain", "finetune", "decode"},
        origin, "(root)");

    if (doc.contains("model")) {
        const json& s = doc["model"];
        reject_unknown_keys(s,
                            {"layers", "hidden", "heads", "head_dim", "ffn", "vocab", "max_len",
                             "segments", "dropout"},
                            origin, "model");
        read_into(s, "layers", cfg.model.layers);
        read_into(s, "hidden", cfg.model.hidden);
        read_into(s, "heads", cfg.model.heads);
        read_into(s, "head_dim", cfg.model.head_dim);
        read_into(s, "ffn", cfg.model.ffn);
        read_into(s, "vocab", cfg.model.vocab);
        read_into(s, "max_len", cfg.model.max_len);
        read_into(s, "segments", cfg.model.segments);
        read_into(s, "dropout", cfg.model.dropout);
    }
    if (doc.contains("optimizer")) {
        const json& s = doc["optimizer"];
        reject_unknown_keys(s,
                            {"peak_lr", "warmup_steps", "total_steps", "beta1", "beta2", "eps",
                             "weight_decay", "grad_clip_norm"},
                            origin, "optimizer");
        OptimizerConfig& o = cfg.pretrain.optimizer;
        read_into(s, "peak_lr", o.peak_lr);
        read_into(s, "warmup_steps", o.warmup_steps);
        read_into(s, "total_steps", o.total_steps);
        read_into(s, "beta1", o.beta1);
        read_into(s, "beta2", o.beta2);
        read_into(s, "eps", o.eps);
        read_into(s, "weight_decay", o.weight_decay);
        read_into(s, "grad_clip_norm", o.grad_clip_norm);
    }
    if (doc.contains("corruption")) {
        const json& s = doc["corruption"];
        reject_unknown_keys(s,
                            {"mask_prob", "replace_mask", "replace_random", "keep_original",
                             "span_unigram", "span_bigram_or_trigram"},
                            origin, "corruption");
        CorruptionPolicy& c = cfg.pretrain.corruption;
        read_into(s, "mask_prob", c.mask_prob);
        read_into(s, "replace_mask", c.replace_mask);
        read_into(s, "replace_random", c.replace_random);
        read_into(s, "keep_original", c.keep_original);
        read_into(s, "span_unigram", c.span_unigram);
        read_into(s, "span_bigram_or_trigram", c.span_bigram_or_trigram);
    }
    if (doc.contains("mix")) {
        const json& s = doc["mix"];
        reject_unknown_keys(s, {"bidirectional", "seq2seq", "left_to_right", "right_to_left"},
                            origin, "mix");
        MixSchedule& m = cfg.pretrain.mix;
        read_into(s, "bidirectional", m.bidirectional);
        read_into(s, "seq2seq", m.seq2seq);
        read_into(s, "left_to_right", m.left_to_right);
        read_into(s, "right_to_left", m.right_to_left);
    }
    if (doc.contains("pretrain")) {
        const json& s = doc["pretrain"];
        reject_unknown_keys(s, {"steps", "batch_size", "checkpoint_every", "seed"}, origin,
                            "pretrain");
        read_into(s, "steps", cfg.pretrain.steps);
        read_into(s, "batch_size", cfg.pretrain.batch_size);
        read_into(s, "checkpoint_every", cfg.pretrain.checkpoint_every);
        read_into(s, "seed", cfg.pretrain.seed);
    }
    if (doc.contains("finetune")) {
        const json& s = doc["finetune"];
        reject_unknown_keys(s,
                            {"mode", "target_mask_prob", "label_smoothing", "epochs", "batch",
                             "lr", "dropout", "max_span_len", "seed"},
                            origin, "finetune");
        FinetuneConfig& f = cfg.finetune;
        if (s.contains("mode")) f.mode = finetune_mode_from_name(s.at("mode").get<std::string>());
        read_into(s, "target_mask_prob", f.target_mask_prob);
        read_into(s, "label_smoothing", f.label_smoothing);
        read_into(s, "epochs", f.epochs);
        read_into(s, "batch", f.batch);
        read_into(s, "lr", f.lr);
        read_into(s, "dropout", f.dropout);
        read_into(s, "max_span_len", f.max_span_len);
        read_into(s, "seed", f.seed);
    }
    if (doc.contains("decode")) {
        const json& s = doc["decode"];
        reject_unknown_keys(s, {"beam_size", "max_out_len", "block_ngram", "top_k", "length_norm"},
                            origin, "decode");
        DecodeConfig& d = cfg.decode;
        read_into(s, "beam_size", d.beam_size);
        read_into(s, "max_out_len", d.max_out_len);
        read_into(s, "block_ngram", d.block_ngram);
        read_into(s, "top_k", d.top_k);
        read_into(s, "length_norm", d.length_norm);
    }

    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config file: " + path.string());
    std::ostringstream buffer;
    buffer << f.rdbuf();
    return from_json_text(buffer.str(), path.string());
}

void RunConfig::validate() const {
    if (model.vocab != 0) model.validate();
    pretrain.optimizer.validate();
    pretrain.corruption.validate();
    pretrain.mix.validate();
    if (pretrain.steps < 0 || pretrain.batch_size < 1) {
        throw DataError("pretrain section: steps must be >= 0 and batch_size >= 1");
    }
    finetune.validate();
    decode.validate();
}

std::string finetune_mode_name(FinetuneConfig::Mode mode) {
    switch (mode) {
        case FinetuneConfig::Mode::Classify: return "classify";
        case FinetuneConfig::Mode::Span: return "span";
        case FinetuneConfig::Mode::Seq2Seq: return "seq2seq";
    }
    return "unknown";
}

FinetuneConfig::Mode finetune_mode_from_name(const std::string& name) {
    if (name == "classify") return FinetuneConfig::Mode::Classify;
    if (name == "span") return FinetuneConfig::Mode::Span;
    if (name == "seq2seq") return FinetuneConfig::Mode::Seq2Seq;
    throw DataError("unknown finetune mode '" + name + "' (expected classify, span, or seq2seq)");
}

}  // namespace masklm
