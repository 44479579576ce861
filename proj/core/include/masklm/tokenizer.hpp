#pragma once

#include <array>
#include <filesystem>
#include <istream>
#include <string>
#include <unordered_map>
#include <vector>

namespace masklm {

struct TokenSequence {
    std::vector<int> ids;
    std::string source_text;
};

// Subword vocabulary with fixed reserved ids. Corpus tokens are single
// characters plus greedily merged character n-grams; reserved ids are never
// produced by corpus tokenization.
class Vocab {
  public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kSos = 2;
    static constexpr int kEos = 3;
    static constexpr int kMask = 4;
    static constexpr int kReservedCount = 5;

    static const std::array<std::string, kReservedCount>& reserved_tokens();

    // Greedy frequency-merge build: all (or the most frequent, if the budget
    // is tight) characters first, then repeated merges of the most frequent
    // adjacent token pair. Deterministic for a given corpus and size.
    static Vocab build(std::istream& corpus, int target_size);
    static Vocab build_from_text(const std::string& corpus_text, int target_size);

    int size() const { return static_cast<int>(id_to_token_.size()); }
    // -1 when the token is not in the vocabulary.
    int id_of(const std::string& token) const;
    const std::string& token_of(int id) const;
    static bool is_reserved(int id) { return id >= 0 && id < kReservedCount; }

    // Greedy longest-match left-to-right; characters outside the vocabulary
    // map to UNK. decode(encode(t)) == t whenever no UNK was emitted.
    TokenSequence encode(const std::string& text) const;
    // Like encode, also reporting each token's byte range in the input.
    TokenSequence encode_with_offsets(const std::string& text,
                                      std::vector<std::pair<int, int>>& byte_ranges) const;
    std::string decode(const std::vector<int>& ids) const;

    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);
    // Rebuilds a vocabulary from an ordered token list (e.g. one embedded in a
    // checkpoint). Validates the reserved slots like load().
    static Vocab from_tokens(const std::vector<std::string>& tokens);
    const std::vector<std::string>& tokens() const { return id_to_token_; }

    // Random non-reserved id, for corruption's random-replacement branch.
    int first_corpus_id() const { return kReservedCount; }

  private:
    Vocab() = default;
    void add_token(const std::string& token);

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
    int max_token_bytes_ = 1;
};

// Splits a UTF-8 string into codepoint substrings. Throws DataError on
// malformed input.
std::vector<std::string> utf8_codepoints(const std::string& text);

}  // namespace masklm
