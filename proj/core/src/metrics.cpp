#include "masklm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "masklm/error.hpp"

namespace masklm {

std::vector<std::string> metric_tokens(const std::string& text) {
    std::istringstream stream(text);
    std::vector<std::string> tokens;
    std::string token;
    while (stream >> token) tokens.push_back(token);
    return tokens;
}

namespace {

double harmonic_f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const std::vector<std::string>& tokens, int n) {
    NgramCounts counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[{tokens.begin() + static_cast<std::ptrdiff_t>(i),
                  tokens.begin() + static_cast<std::ptrdiff_t>(i) + n}];
    }
    return counts;
}

// Clipped matches: each hypothesis n-gram counts at most as often as it
// appears in the reference.
std::pair<int, int> clipped_matches(const std::vector<std::string>& hyp,
                                    const std::vector<std::string>& ref, int n) {
    const NgramCounts hyp_counts = count_ngrams(hyp, n);
    const NgramCounts ref_counts = count_ngrams(ref, n);
    int matches = 0, total = 0;
    for (const auto& [gram, count] : hyp_counts) {
        total += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches += std::min(count, it->second);
    }
    return {matches, total};
}

}  // namespace

ScoreReport rouge_n(const std::vector<std::string>& hyp, const std::vector<std::string>& ref,
                    int n) {
    if (n < 1) throw DataError("rouge_n: n must be >= 1");
    if (ref.empty()) throw DataError("rouge_n: reference is empty");
    ScoreReport report{"rouge" + std::to_string(n), 0.0, 0.0, 0.0};

    const auto [matches, hyp_total] = clipped_matches(hyp, ref, n);
    const int ref_total = static_cast<int>(ref.size()) - n + 1;
    report.precision = hyp_total > 0 ? static_cast<double>(matches) / hyp_total : 0.0;
    report.recall = ref_total > 0 ? static_cast<double>(matches) / ref_total : 0.0;
    report.f1 = harmonic_f1(report.precision, report.recall);
    return report;
}

int lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::size_t m = a.size(), n = b.size();
    std::vector<int> prev(n + 1, 0), curr(n + 1, 0);
    for (std::size_t i = 1; i <= m; ++i) {
        for (std::size_t j = 1; j <= n; ++j) {
            curr[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], curr[j - 1]);
        }
        std::swap(prev, curr);
    }
    return prev[n];
}

ScoreReport rouge_l(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
    if (ref.empty()) throw DataError("rouge_l: reference is empty");
    ScoreReport report{"rougeL", 0.0, 0.0, 0.0};
    const int lcs = lcs_length(hyp, ref);
    report.precision = hyp.empty() ? 0.0 : static_cast<double>(lcs) / static_cast<double>(hyp.size());
    report.recall = static_cast<double>(lcs) / static_cast<double>(ref.size());
    report.f1 = harmonic_f1(report.precision, report.recall);
    return report;
}

double bleu4(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
    if (hyp.empty()) return 0.0;
    double log_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        const auto [matches, total] = clipped_matches(hyp, ref, n);
        double p;
        if (total == 0) {
            p = 1.0;  // no n-grams of this order; the brevity penalty covers it
        } else if (matches == 0) {
            p = 1.0 / (total + 1);  // add-1 smoothing on zero counts
        } else {
            p = static_cast<double>(matches) / total;
        }
        log_sum += std::log(p);
    }
    const double geo_mean = std::exp(log_sum / 4.0);
    const auto h = static_cast<double>(hyp.size());
    const auto r = static_cast<double>(ref.size());
    const double brevity = h >= r ? 1.0 : std::exp(1.0 - r / h);
    return brevity * geo_mean;
}

SpanScore span_em_f1(const std::string& pred, const std::string& gold) {
    const std::vector<std::string> p = metric_tokens(pred);
    const std::vector<std::string> g = metric_tokens(gold);
    SpanScore score;
    score.exact_match = p == g ? 1.0 : 0.0;
    if (p.empty() || g.empty()) {
        score.f1 = p.empty() && g.empty() ? 1.0 : 0.0;
        return score;
    }
    std::map<std::string, int> gold_counts;
    for (const auto& t : g) ++gold_counts[t];
    int overlap = 0;
    for (const auto& t : p) {
        auto it = gold_counts.find(t);
        if (it != gold_counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
    score.f1 = harmonic_f1(precision, recall);
    return score;
}

}  // namespace masklm
