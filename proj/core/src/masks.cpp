#include "masklm/masks.hpp"

#include <string>

#include "masklm/error.hpp"

namespace masklm {

std::string objective_name(ObjectiveKind kind) {
    switch (kind) {
        case ObjectiveKind::Bidirectional: return "bidirectional";
        case ObjectiveKind::LeftToRight: return "left_to_right";
        case ObjectiveKind::RightToLeft: return "right_to_left";
        case ObjectiveKind::Seq2Seq: return "seq2seq";
    }
    return "unknown";
}

AttentionMask build_mask(const LMObjective& objective, int n) {
    if (n < 1) throw DataError("build_mask: sequence length must be >= 1");
    AttentionMask mask;
    mask.n = n;
    mask.entries.assign(static_cast<std::size_t>(n) * n, 0.0);
    auto deny = [&](int i, int j) { mask.entries[static_cast<std::size_t>(i) * n + j] = kNegInf; };

    switch (objective.kind) {
        case ObjectiveKind::Bidirectional:
            break;  // zero matrix: everything attends to everything
        case ObjectiveKind::LeftToRight:
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < n; ++j) deny(i, j);
            break;
        case ObjectiveKind::RightToLeft:
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < i; ++j) deny(i, j);
            break;
        case ObjectiveKind::Seq2Seq: {
            const int s = objective.source_len;
            if (s < 2 || s >= n) {
                throw DataError("build_mask: seq2seq source length " + std::to_string(s) +
                                " must lie in [2, " + std::to_string(n - 1) + "]");
            }
            // Source rows see the source block only; target rows see the whole
            // source plus their leftward target context and themselves.
            for (int i = 0; i < s; ++i)
                for (int j = s; j < n; ++j) deny(i, j);
            for (int i = s; i < n; ++i)
                for (int j = i + 1; j < n; ++j) deny(i, j);
            break;
        }
    }
    return mask;
}

bool allowed(const AttentionMask& mask, int i, int j) {
    if (i < 0 || i >= mask.n || j < 0 || j >= mask.n) {
        throw IndexError("allowed: position (" + std::to_string(i) + "," + std::to_string(j) +
                         ") outside mask of size " + std::to_string(mask.n));
    }
    return mask.entry(i, j) == 0.0;
}

std::string render_mask(const AttentionMask& mask) {
    std::string out;
    for (int i = 0; i < mask.n; ++i) {
        for (int j = 0; j < mask.n; ++j) out += mask.entry(i, j) == 0.0 ? "·" : "x";
        out += '\n';
    }
    return out;
}

}  // namespace masklm
