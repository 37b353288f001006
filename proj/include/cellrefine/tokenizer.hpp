#pragma once

// =============================================================
//  rank-value tokenization + MLM masking
//
//  A cell's expression vector is turned into an ordered token
//  sequence: zero entries are dropped, the rest are divided by a
//  per-gene median factor and sorted by normalized value
//  (descending, ties broken by gene id ascending), then truncated.
// =============================================================

#include <cstdint>
#include <vector>

#include "cellrefine/vocab.hpp"

namespace cellrefine {

struct TokenSequence {
    std::vector<int> tokens;            // vocabulary indices, length t
    std::vector<int> masked_positions;  // sorted, 0-based positions into tokens
    std::vector<int> targets;           // original token at each masked position

    int length() const { return static_cast<int>(tokens.size()); }
};

// Per-gene median of nonzero values across cells (rows = cells, aligned with
// vocab gene order). Genes never observed nonzero fall back to 1.0.
std::vector<double> compute_gene_medians(const std::vector<std::vector<double>>& cells,
                                         int n_genes);

TokenSequence tokenize(const std::vector<double>& expression, const GeneVocabulary& vocab,
                       const std::vector<double>& medians, int max_len);

// Masks round(rate * t) positions chosen without replacement; masked tokens
// become MASK and their originals are recorded as targets. PAD is never masked.
TokenSequence mask_tokens(const TokenSequence& seq, double rate, std::uint64_t seed,
                          const GeneVocabulary& vocab);

}  // namespace cellrefine
