#include "cellrefine/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cellrefine/errors.hpp"
#include "cellrefine/rng.hpp"

namespace cellrefine {

using nlohmann::json;

int GeneVocabulary::id_of(const std::string& g) const {
    auto it = gene_ids.find(g);
    if (it == gene_ids.end()) throw UnknownGene(g);
    return it->second;
}

GeneVocabulary GeneVocabulary::from_genes(const std::vector<std::string>& genes) {
    GeneVocabulary v;
    v.genes = genes;
    for (int i = 0; i < static_cast<int>(genes.size()); ++i) {
        if (!v.gene_ids.emplace(genes[i], i).second) {
            throw InvalidConfig("duplicate gene id in vocabulary: " + genes[i]);
        }
    }
    return v;
}

GeneVocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary file: " + path);
    json j = json::parse(in);
    return GeneVocabulary::from_genes(j.get<std::vector<std::string>>());
}

void save_vocabulary(const GeneVocabulary& vocab, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary file: " + path);
    out << json(vocab.genes).dump(2) << "\n";
}

std::vector<double> compute_gene_medians(const std::vector<std::vector<double>>& cells,
                                         int n_genes) {
    std::vector<std::vector<double>> nonzero(n_genes);
    for (const auto& cell : cells) {
        if (static_cast<int>(cell.size()) != n_genes) {
            throw LengthMismatch("expression vector length does not match gene count");
        }
        for (int g = 0; g < n_genes; ++g) {
            if (cell[g] != 0.0) nonzero[g].push_back(cell[g]);
        }
    }
    std::vector<double> medians(n_genes, 1.0);
    for (int g = 0; g < n_genes; ++g) {
        auto& v = nonzero[g];
        if (v.empty()) continue;
        std::sort(v.begin(), v.end());
        size_t n = v.size();
        medians[g] = (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    }
    return medians;
}

TokenSequence tokenize(const std::vector<double>& expression, const GeneVocabulary& vocab,
                       const std::vector<double>& medians, int max_len) {
    if (static_cast<int>(expression.size()) != vocab.n_genes()) {
        throw LengthMismatch("expression vector length " + std::to_string(expression.size()) +
                             " != vocabulary gene count " + std::to_string(vocab.n_genes()));
    }
    if (static_cast<int>(medians.size()) != vocab.n_genes()) {
        throw LengthMismatch("median vector length does not match vocabulary");
    }
    std::vector<std::pair<double, int>> ranked;  // (normalized value, gene id)
    for (int g = 0; g < vocab.n_genes(); ++g) {
        double x = expression[g];
        if (x == 0.0) continue;
        if (!(x > 0.0) || !std::isfinite(x)) {
            throw NonFiniteInput("expression value for gene " + vocab.genes[g]);
        }
        double m = medians[g];
        ranked.emplace_back(m > 0.0 ? x / m : x, g);
    }
    if (ranked.empty()) throw AllZeroExpression("cell expresses no genes");

    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    if (static_cast<int>(ranked.size()) > max_len) ranked.resize(max_len);

    TokenSequence seq;
    seq.tokens.reserve(ranked.size());
    for (const auto& [val, g] : ranked) seq.tokens.push_back(g);
    return seq;
}

TokenSequence mask_tokens(const TokenSequence& seq, double rate, std::uint64_t seed,
                          const GeneVocabulary& vocab) {
    if (!(rate >= 0.0 && rate <= 1.0)) {
        throw RateOutOfRange("mask rate " + std::to_string(rate) + " outside [0, 1]");
    }
    if (!seq.masked_positions.empty()) {
        throw InvalidConfig("mask_tokens requires a sequence with no prior masking");
    }
    std::vector<int> candidates;
    for (int i = 0; i < seq.length(); ++i) {
        if (seq.tokens[i] != vocab.pad_id()) candidates.push_back(i);
    }
    int t = static_cast<int>(candidates.size());
    int n_mask = static_cast<int>(std::llround(rate * t));

    Rng rng(seed);
    rng.shuffle(candidates);
    candidates.resize(n_mask);
    std::sort(candidates.begin(), candidates.end());

    TokenSequence out = seq;
    for (int pos : candidates) {
        out.masked_positions.push_back(pos);
        out.targets.push_back(seq.tokens[pos]);
        out.tokens[pos] = vocab.mask_id();
    }
    return out;
}

}  // namespace cellrefine
