#pragma once

#include <string>
#include <vector>

#include "masklm/tensor.hpp"

namespace masklm {

// Which context a token may condition on. Seq2Seq carries the source length
// (token count up to and including the first EOS of the packed pair).
enum class ObjectiveKind { Bidirectional, LeftToRight, RightToLeft, Seq2Seq };

struct LMObjective {
    ObjectiveKind kind = ObjectiveKind::Bidirectional;
    int source_len = 0;  // Seq2Seq only

    static LMObjective bidirectional() { return {ObjectiveKind::Bidirectional, 0}; }
    static LMObjective left_to_right() { return {ObjectiveKind::LeftToRight, 0}; }
    static LMObjective right_to_left() { return {ObjectiveKind::RightToLeft, 0}; }
    static LMObjective seq2seq(int source_len) { return {ObjectiveKind::Seq2Seq, source_len}; }
};

std::string objective_name(ObjectiveKind kind);

// Additive n x n self-attention mask: 0 where query i may attend key j,
// kNegInf where attention is blocked. The diagonal is always 0.
struct AttentionMask {
    int n = 0;
    std::vector<double> entries;  // row-major n*n, values in {0, kNegInf}

    double entry(int i, int j) const { return entries[static_cast<std::size_t>(i) * n + j]; }
};

AttentionMask build_mask(const LMObjective& objective, int n);

bool allowed(const AttentionMask& mask, int i, int j);

// ASCII grid, one row per query position; '·' allowed, 'x' denied.
std::string render_mask(const AttentionMask& mask);

}  // namespace masklm
