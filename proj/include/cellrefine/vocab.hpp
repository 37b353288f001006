#pragma once

// =============================================================
//  gene vocabulary: ordered gene ids plus MASK / PAD specials
// =============================================================

#include <map>
#include <string>
#include <vector>

namespace cellrefine {

struct GeneVocabulary {
    std::vector<std::string> genes;       // ordered; token id == index
    std::map<std::string, int> gene_ids;  // reverse lookup

    // total size including the two reserved tokens
    int size() const { return static_cast<int>(genes.size()) + 2; }
    int mask_id() const { return size() - 2; }
    int pad_id() const { return size() - 1; }
    int n_genes() const { return static_cast<int>(genes.size()); }

    bool has_gene(const std::string& g) const { return gene_ids.count(g) != 0; }
    int id_of(const std::string& g) const;

    static GeneVocabulary from_genes(const std::vector<std::string>& genes);
};

GeneVocabulary load_vocabulary(const std::string& path);
void save_vocabulary(const GeneVocabulary& vocab, const std::string& path);

}  // namespace cellrefine
