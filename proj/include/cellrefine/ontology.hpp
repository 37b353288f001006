#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace cellrefine {

// Cell-type hierarchy. A tree: every node except the single root has exactly
// one parent. Depth levels are derived from the edges (root = 0).
struct CellOntology {
    std::vector<std::string> nodes;
    std::map<std::string, std::string> parent;  // child -> parent, root absent
    std::map<std::string, int> level;

    bool contains(const std::string& node) const { return level.count(node) > 0; }
    const std::string& root() const;

    // Path from node (exclusive) up to the root (inclusive).
    std::vector<std::string> ancestors(const std::string& node) const;

    // Validates the tree shape and derives levels. Throws InvalidOntology.
    static CellOntology build(const std::vector<std::string>& nodes,
                              const std::vector<std::pair<std::string, std::string>>& edges);
};

// type -> [(gene id, specificity level)]; specificity level is the ontology
// depth of the most specific type the gene marks.
struct MarkerCatalog {
    std::map<std::string, std::vector<std::pair<std::string, int>>> entries;
};

struct Prototype {
    std::string cell_type;
    std::vector<std::string> genes;  // length K, most specific first
};

// First K markers sorted by (specificity desc, gene id asc); pads repeat-free
// from ancestors' markers when the type has fewer than K of its own.
Prototype organize_markers(const MarkerCatalog& catalog, const CellOntology& ontology,
                           const std::string& cell_type, int k);

// All unordered pairs of distinct types with identical parent and level.
// Pairs are stored with first < second lexicographically.
std::set<std::pair<std::string, std::string>> parent_lineage_pairs(const CellOntology& ontology);

// File formats: ontology {"nodes": [...], "edges": [[parent, child], ...]},
// catalog {type: [[gene, level], ...]}.
CellOntology load_ontology(const std::string& path);
void save_ontology(const CellOntology& ontology, const std::string& path);
MarkerCatalog load_catalog(const std::string& path);
void save_catalog(const MarkerCatalog& catalog, const std::string& path);

}  // namespace cellrefine
