#pragma once

#include <filesystem>
#include <string>

#include "masklm/decode.hpp"
#include "masklm/finetune.hpp"
#include "masklm/model.hpp"
#include "masklm/pretrain.hpp"

namespace masklm {

// One JSON document covering every tunable: sections "model", "optimizer",
// "corruption", "mix", "pretrain", "finetune", and "decode", each optional,
// each key optional (missing keys keep the built-in defaults). Unknown
// sections or keys are rejected rather than ignored.
struct RunConfig {
    ModelConfig model;        // model.vocab = 0 means "size of the vocab file"
    PretrainConfig pretrain;  // carries optimizer/corruption/mix
    FinetuneConfig finetune;
    DecodeConfig decode;

    static RunConfig defaults();
    static RunConfig from_json_text(const std::string& text, const std::string& origin = "config");
    static RunConfig load(const std::filesystem::path& path);

    // Re-validates every section; the model section only once vocab is known.
    void validate() const;
};

std::string finetune_mode_name(FinetuneConfig::Mode mode);
FinetuneConfig::Mode finetune_mode_from_name(const std::string& name);

}  // namespace masklm
