#include "masklm/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "masklm/error.hpp"

namespace masklm {

const std::array<std::string, Vocab::kReservedCount>& Vocab::reserved_tokens() {
    static const std::array<std::string, kReservedCount> tokens = {
        "⟨PAD⟩", "⟨UNK⟩", "⟨SOS⟩", "⟨EOS⟩",
        "⟨MASK⟩"};
    return tokens;
}

std::vector<std::string> utf8_codepoints(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        std::size_t len = 0;
        if (c < 0x80) len = 1;
        else if ((c & 0xE0) == 0xC0) len = 2;
        else if ((c & 0xF0) == 0xE0) len = 3;
        else if ((c & 0xF8) == 0xF0) len = 4;
        else throw DataError("utf8_codepoints: invalid lead byte at offset " + std::to_string(i));
        if (i + len > text.size()) throw DataError("utf8_codepoints: truncated sequence");
        for (std::size_t k = 1; k < len; ++k) {
            if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
                throw DataError("utf8_codepoints: bad continuation byte at offset " +
                                std::to_string(i + k));
            }
        }
        out.push_back(text.substr(i, len));
        i += len;
    }
    return out;
}

void Vocab::add_token(const std::string& token) {
    token_to_id_.emplace(token, static_cast<int>(id_to_token_.size()));
    id_to_token_.push_back(token);
    max_token_bytes_ = std::max(max_token_bytes_, static_cast<int>(token.size()));
}

Vocab Vocab::build(std::istream& corpus, int target_size) {
    std::ostringstream buf;
    buf << corpus.rdbuf();
    return build_from_text(buf.str(), target_size);
}

Vocab Vocab::build_from_text(const std::string& corpus_text, int target_size) {
    if (target_size < kReservedCount + 1) {
        throw DataError("build_vocab: target size must be >= " +
                        std::to_string(kReservedCount + 1));
    }

    // Documents are lines; line breaks are separators, not vocabulary.
    std::vector<std::vector<std::string>> lines;
    {
        std::istringstream is(corpus_text);
        std::string line;
        while (std::getline(is, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) lines.push_back(utf8_codepoints(line));
        }
    }

    std::map<std::string, std::int64_t> char_freq;
    for (const auto& line : lines)
        for (const auto& ch : line) ++char_freq[ch];
    if (char_freq.empty()) throw DataError("build_vocab: empty corpus");

    Vocab v;
    for (const auto& t : reserved_tokens()) v.add_token(t);

    // Characters first, most frequent first; ties resolved by byte order.
    std::vector<std::pair<std::string, std::int64_t>> chars(char_freq.begin(), char_freq.end());
    std::stable_sort(chars.begin(), chars.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (const auto& [ch, freq] : chars) {
        if (v.size() >= target_size) break;
        if (v.token_to_id_.count(ch)) continue;  // clash with a reserved name
        v.add_token(ch);
    }

    // Greedy merges of the most frequent adjacent pair until the budget is
    // spent or no pair repeats. Characters that did not fit the budget break
    // merge chains.
    while (v.size() < target_size) {
        std::map<std::pair<std::string, std::string>, std::int64_t> pair_freq;
        for (const auto& line : lines) {
            // Retokenize the line greedily under the current vocabulary.
            std::string text;
            for (const auto& ch : line) text += ch;
            const TokenSequence seq = v.encode(text);
            for (std::size_t i = 0; i + 1 < seq.ids.size(); ++i) {
                if (is_reserved(seq.ids[i]) || is_reserved(seq.ids[i + 1])) continue;
                ++pair_freq[{v.token_of(seq.ids[i]), v.token_of(seq.ids[i + 1])}];
            }
        }
        const std::pair<std::string, std::string>* best = nullptr;
        std::int64_t best_freq = 1;  // a merge must repeat to be worth a slot
        for (const auto& [pair, freq] : pair_freq) {
            if (v.token_to_id_.count(pair.first + pair.second)) continue;
            if (freq > best_freq) {
                best = &pair;
                best_freq = freq;
            }
        }
        if (!best) break;
        v.add_token(best->first + best->second);
    }
    return v;
}

int Vocab::id_of(const std::string& token) const {
    const auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? -1 : it->second;
}

const std::string& Vocab::token_of(int id) const {
    if (id < 0 || id >= size()) {
        throw IndexError("token_of: id " + std::to_string(id) + " outside vocab of size " +
                         std::to_string(size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
}

TokenSequence Vocab::encode(const std::string& text) const {
    std::vector<std::pair<int, int>> ranges;
    return encode_with_offsets(text, ranges);
}

TokenSequence Vocab::encode_with_offsets(const std::string& text,
                                         std::vector<std::pair<int, int>>& byte_ranges) const {
    TokenSequence seq;
    seq.source_text = text;
    byte_ranges.clear();
    const std::vector<std::string> cps = utf8_codepoints(text);
    std::size_t byte_pos = 0;
    std::size_t cp_index = 0;
    while (cp_index < cps.size()) {
        // Longest vocabulary token starting here, in bytes. Tokens are whole
        // codepoint sequences, so byte matches align with codepoints.
        int matched = -1;
        std::size_t matched_bytes = 0;
        const std::size_t limit = std::min(static_cast<std::size_t>(max_token_bytes_),
                                           text.size() - byte_pos);
        for (std::size_t len = limit; len >= 1; --len) {
            const auto it = token_to_id_.find(text.substr(byte_pos, len));
            if (it != token_to_id_.end() && !is_reserved(it->second)) {
                matched = it->second;
                matched_bytes = len;
                break;
            }
        }
        if (matched >= 0) {
            seq.ids.push_back(matched);
            byte_ranges.emplace_back(static_cast<int>(byte_pos),
                                     static_cast<int>(byte_pos + matched_bytes));
            byte_pos += matched_bytes;
            while (cp_index < cps.size() && matched_bytes > 0) {
                matched_bytes -= cps[cp_index].size();
                ++cp_index;
            }
        } else {
            seq.ids.push_back(kUnk);
            byte_ranges.emplace_back(static_cast<int>(byte_pos),
                                     static_cast<int>(byte_pos + cps[cp_index].size()));
            byte_pos += cps[cp_index].size();
            ++cp_index;
        }
    }
    return seq;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) out += token_of(id);
    return out;
}

void Vocab::save(const std::filesystem::path& path) const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : id_to_token_) arr.push_back(t);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write vocab file " + path.string());
    os << arr.dump(1) << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read vocab file " + path.string());
    nlohmann::json arr;
    try {
        is >> arr;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("vocab file " + path.string() + " is not valid JSON: " + e.what());
    }
    if (!arr.is_array() || arr.size() < kReservedCount + 1) {
        throw DataError("vocab file " + path.string() + " must be an array of >= 6 tokens");
    }
    std::vector<std::string> tokens;
    tokens.reserve(arr.size());
    for (const auto& item : arr) {
        if (!item.is_string()) throw DataError("vocab file " + path.string() + ": non-string token");
        tokens.push_back(item.get<std::string>());
    }
    try {
        return from_tokens(tokens);
    } catch (const DataError& e) {
        throw DataError("vocab file " + path.string() + ": " + e.what());
    }
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < static_cast<std::size_t>(kReservedCount) + 1) {
        throw DataError("a vocabulary needs at least " + std::to_string(kReservedCount + 1) +
                        " tokens, got " + std::to_string(tokens.size()));
    }
    Vocab v;
    for (const auto& token : tokens) {
        if (v.token_to_id_.count(token)) throw DataError("duplicate token '" + token + "'");
        v.add_token(token);
    }
    for (int i = 0; i < kReservedCount; ++i) {
        if (v.id_to_token_[static_cast<std::size_t>(i)] != reserved_tokens()[static_cast<std::size_t>(i)]) {
            throw DataError("reserved token slot " + std::to_string(i) + " holds '" +
                            v.id_to_token_[static_cast<std::size_t>(i)] + "'");
        }
    }
    return v;
}

}  // namespace masklm
