#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "masklm/error.hpp"
#include "masklm/model.hpp"

namespace masklm {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'M', 'L', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr char kStateMagic[8] = {'M', 'L', 'M', 'S', 'T', 'A', 'T', '1'};
constexpr int kVersion = 1;

// Serialized numbers are explicitly little-endian so files move between hosts.
void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

json config_to_json(const ModelConfig& c) {
    return json{{"layers", c.layers},     {"hidden", c.hidden},   {"heads", c.heads},
                {"head_dim", c.head_dim}, {"ffn", c.ffn},         {"vocab", c.vocab},
                {"max_len", c.max_len},   {"segments", c.segments}, {"dropout", c.dropout}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    try {
        c.layers = j.at("layers").get<int>();
        c.hidden = j.at("hidden").get<int>();
        c.heads = j.at("heads").get<int>();
        c.head_dim = j.at("head_dim").get<int>();
        c.ffn = j.at("ffn").get<int>();
        c.vocab = j.at("vocab").get<int>();
        c.max_len = j.at("max_len").get<int>();
        c.segments = j.at("segments").get<int>();
        c.dropout = j.at("dropout").get<double>();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint header has a bad config block: ") + e.what());
    }
    return c;
}

// Zero-valued parameter set with the shapes the config dictates; load fills it.
ModelParams empty_params(const ModelConfig& cfg) {
    ModelParams p;
    p.config = cfg;
    p.token_embedding = Tensor({cfg.vocab, cfg.hidden}, true);
    p.position_embedding = Tensor({cfg.max_len, cfg.hidden}, true);
    p.segment_embedding = Tensor({cfg.segments, cfg.hidden}, true);
    p.layer.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& lp : p.layer) {
        lp.w_q = Tensor({cfg.hidden, cfg.hidden}, true);
        lp.w_k = Tensor({cfg.hidden, cfg.hidden}, true);
        lp.w_v = Tensor({cfg.hidden, cfg.hidden}, true);
        lp.w_o = Tensor({cfg.hidden, cfg.hidden}, true);
        lp.attn_gain = Tensor({cfg.hidden}, true);
        lp.attn_bias = Tensor({cfg.hidden}, true);
        lp.ff_w1 = Tensor({cfg.hidden, cfg.ffn}, true);
        lp.ff_w2 = Tensor({cfg.ffn, cfg.hidden}, true);
        lp.ff_gain = Tensor({cfg.hidden}, true);
        lp.ff_bias = Tensor({cfg.hidden}, true);
    }
    p.nsp_head = Tensor({cfg.hidden, 2}, true);
    p.lm_bias = Tensor({cfg.vocab}, true);
    return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::vector<std::string>& vocab_tokens,
                     const std::map<std::string, Tensor>& extras) {
    std::vector<NamedParam> arrays = params.parameters();
    for (const auto& [name, tensor] : extras) arrays.push_back({name, tensor, false});

    json header;
    header["version"] = kVersion;
    header["config"] = config_to_json(params.config);
    if (!vocab_tokens.empty()) header["vocab"] = vocab_tokens;
    json meta = json::array();
    for (const auto& np : arrays) meta.push_back({{"name", np.name}, {"shape", np.tensor.shape()}});
    header["arrays"] = meta;
    const std::string header_text = header.dump();

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    const auto hlen = static_cast<std::uint32_t>(header_text.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((hlen >> (8 * i)) & 0xff));
    out += header_text;
    for (const auto& np : arrays) {
        for (double v : np.tensor.values()) append_u64_le(out, std::bit_cast<std::uint64_t>(v));
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open checkpoint file for writing: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to checkpoint file: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < sizeof(kMagic) + 4 ||
        std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw CheckpointError("not a model checkpoint (bad magic): " + path.string());
    }
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    std::uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<std::uint32_t>(u[8 + i]) << (8 * i);
    std::size_t offset = sizeof(kMagic) + 4;
    if (offset + hlen > bytes.size()) {
        throw CheckpointError("checkpoint header is truncated: " + path.string());
    }

    json header;
    try {
        header = json::parse(bytes.substr(offset, hlen));
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    offset += hlen;

    if (!header.contains("version") || header["version"].get<int>() != kVersion) {
        throw CheckpointError("unsupported checkpoint version in " + path.string());
    }
    const ModelConfig cfg = config_from_json(header.at("config"));
    try {
        cfg.validate();
    } catch (const DataError& e) {
        throw CheckpointError(std::string("checkpoint carries an invalid config: ") + e.what());
    }

    Checkpoint ckpt;
    ckpt.params = empty_params(cfg);
    if (header.contains("vocab")) {
        ckpt.vocab_tokens = header["vocab"].get<std::vector<std::string>>();
    }

    std::unordered_map<std::string, Tensor> slots;
    for (const auto& np : ckpt.params.parameters()) slots.emplace(np.name, np.tensor);

    std::size_t model_arrays_seen = 0;
    if (!header.contains("arrays") || !header["arrays"].is_array()) {
        throw CheckpointError("checkpoint header lacks the arrays list: " + path.string());
    }
    for (const auto& meta : header["arrays"]) {
        const auto name = meta.at("name").get<std::string>();
        const auto shape = meta.at("shape").get<std::vector<int>>();
        std::int64_t count = 1;
        for (int d : shape) {
            if (d <= 0) throw CheckpointError("array '" + name + "' declares a bad shape");
            count *= d;
        }

        Tensor target;
        auto it = slots.find(name);
        if (it != slots.end()) {
            target = it->second;
            ++model_arrays_seen;
            if (shape != target.shape()) {
                throw CheckpointError("array '" + name + "' has shape " + shape_string(shape) +
                                      " but the config requires " +
                                      shape_string(target.shape()));
            }
        } else {
            target = Tensor(shape, true);
            ckpt.extras.emplace(name, target);
        }

        if (offset + static_cast<std::size_t>(count) * 8 > bytes.size()) {
            throw CheckpointError("checkpoint data is truncated at array '" + name + "'");
        }
        double* dst = target.data();
        for (std::int64_t i = 0; i < count; ++i, offset += 8) {
            dst[i] = std::bit_cast<double>(read_u64_le(u + offset));
        }
    }
    if (model_arrays_seen != ckpt.params.parameters().size()) {
        throw CheckpointError("checkpoint is missing model parameter arrays: " + path.string());
    }
    if (offset != bytes.size()) {
        throw CheckpointError("checkpoint has trailing bytes after the declared arrays: " +
                              path.string());
    }
    return ckpt;
}

void save_array_file(const std::filesystem::path& path,
                     const std::map<std::string, std::string>& meta,
                     const std::vector<NamedParam>& arrays) {
    json header;
    header["version"] = kVersion;
    header["meta"] = meta;
    json list = json::array();
    for (const auto& np : arrays) list.push_back({{"name", np.name}, {"shape", np.tensor.shape()}});
    header["arrays"] = list;
    const std::string header_text = header.dump();

    std::string out;
    out.append(kStateMagic, sizeof(kStateMagic));
    const auto hlen = static_cast<std::uint32_t>(header_text.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((hlen >> (8 * i)) & 0xff));
    out += header_text;
    for (const auto& np : arrays) {
        for (double v : np.tensor.values()) append_u64_le(out, std::bit_cast<std::uint64_t>(v));
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open state file for writing: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to state file: " + path.string());
}

ArrayFile load_array_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open state file: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < sizeof(kStateMagic) + 4 ||
        std::memcmp(bytes.data(), kStateMagic, sizeof(kStateMagic)) != 0) {
        throw CheckpointError("not a training state file (bad magic): " + path.string());
    }
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    std::uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<std::uint32_t>(u[8 + i]) << (8 * i);
    std::size_t offset = sizeof(kStateMagic) + 4;
    if (offset + hlen > bytes.size()) {
        throw CheckpointError("state file header is truncated: " + path.string());
    }

    json header;
    try {
        header = json::parse(bytes.substr(offset, hlen));
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("state file header is not valid JSON: ") + e.what());
    }
    offset += hlen;

    ArrayFile out;
    if (header.contains("meta")) {
        out.meta = header["meta"].get<std::map<std::string, std::string>>();
    }
    for (const auto& meta : header.at("arrays")) {
        const auto name = meta.at("name").get<std::string>();
        const auto shape = meta.at("shape").get<std::vector<int>>();
        std::int64_t count = 1;
        for (int d : shape) {
            if (d <= 0) throw CheckpointError("array '" + name + "' declares a bad shape");
            count *= d;
        }
        if (offset + static_cast<std::size_t>(count) * 8 > bytes.size()) {
            throw CheckpointError("state file data is truncated at array '" + name + "'");
        }
        Tensor t(shape);
        double* dst = t.data();
        for (std::int64_t i = 0; i < count; ++i, offset += 8) {
            dst[i] = std::bit_cast<double>(read_u64_le(u + offset));
        }
        out.arrays.emplace(name, t);
    }
    if (offset != bytes.size()) {
        throw CheckpointError("state file has trailing bytes: " + path.string());
    }
    return out;
}

}  // namespace masklm
