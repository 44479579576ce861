#pragma once

#include <string>
#include <vector>

namespace masklm {

struct ScoreReport {
    std::string metric;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Whitespace tokenization; the convention for every text-level metric here.
std::vector<std::string> metric_tokens(const std::string& text);

// Clipped n-gram overlap precision/recall/F1. Errors on an empty reference.
ScoreReport rouge_n(const std::vector<std::string>& hyp, const std::vector<std::string>& ref,
                    int n);

// Longest-common-subsequence precision/recall/F1.
ScoreReport rouge_l(const std::vector<std::string>& hyp, const std::vector<std::string>& ref);

// LCS length by dynamic programming (exposed for the brute-force oracle tests).
int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

// Geometric mean of clipped 1..4-gram precisions times the brevity penalty
// e^(1 - ref_len/hyp_len) for short hypotheses. A zero n-gram match count is
// smoothed to (matches+1)/(count+1); an n with no hypothesis n-grams at all
// contributes precision 1 and leaves the work to the brevity penalty.
double bleu4(const std::vector<std::string>& hyp, const std::vector<std::string>& ref);

struct SpanScore {
    double exact_match = 0.0;
    double f1 = 0.0;
};

// EM after whitespace normalization; F1 over token multiset overlap.
SpanScore span_em_f1(const std::string& pred, const std::string& gold);

}  // namespace masklm
