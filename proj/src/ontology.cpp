#include "cellrefine/ontology.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "cellrefine/errors.hpp"

namespace cellrefine {

using nlohmann::json;

const std::string& CellOntology::root() const {
    for (const auto& n : nodes) {
        if (!parent.count(n)) return n;
    }
    throw InvalidOntology("ontology has no root");
}

std::vector<std::string> CellOntology::ancestors(const std::string& node) const {
    if (!contains(node)) throw UnknownCellType(node);
    std::vector<std::string> out;
    auto it = parent.find(node);
    while (it != parent.end()) {
        out.push_back(it->second);
        it = parent.find(it->second);
    }
    return out;
}

CellOntology CellOntology::build(const std::vector<std::string>& nodes,
                                 const std::vector<std::pair<std::string, std::string>>& edges) {
    CellOntology o;
    o.nodes = nodes;
    std::set<std::string> node_set(nodes.begin(), nodes.end());
    if (node_set.size() != nodes.size()) throw InvalidOntology("duplicate node names");

    for (const auto& [par, child] : edges) {
        if (!node_set.count(par)) throw InvalidOntology("edge parent not a node: " + par);
        if (!node_set.count(child)) throw InvalidOntology("edge child not a node: " + child);
        if (o.parent.count(child)) throw InvalidOntology("node has two parents: " + child);
        o.parent[child] = par;
    }

    std::vector<std::string> roots;
    for (const auto& n : nodes) {
        if (!o.parent.count(n)) roots.push_back(n);
    }
    if (roots.size() != 1) {
        throw InvalidOntology("expected exactly one root, found " + std::to_string(roots.size()));
    }

    // Derive levels; a walk longer than the node count means a parent cycle.
    for (const auto& n : nodes) {
        int depth = 0;
        auto it = o.parent.find(n);
        while (it != o.parent.end()) {
            ++depth;
            if (depth > static_cast<int>(nodes.size())) {
                throw InvalidOntology("parent relation contains a cycle");
            }
            it = o.parent.find(it->second);
        }
        o.level[n] = depth;
    }
    return o;
}

Prototype organize_markers(const MarkerCatalog& catalog, const CellOntology& ontology,
                           const std::string& cell_type, int k) {
    if (!ontology.contains(cell_type)) throw UnknownCellType(cell_type);
    auto own = catalog.entries.find(cell_type);
    if (own == catalog.entries.end() || own->second.empty()) {
        throw UnknownCellType("no catalog entry for " + cell_type);
    }

    // (specificity desc, gene id asc), own markers first, then each ancestor
    // walking rootward. Duplicate gene ids keep their first occurrence.
    std::vector<std::pair<std::string, int>> pool = own->second;
    for (const auto& anc : ontology.ancestors(cell_type)) {
        auto it = catalog.entries.find(anc);
        if (it == catalog.entries.end()) continue;
        pool.insert(pool.end(), it->second.begin(), it->second.end());
    }
    std::stable_sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Prototype proto;
    proto.cell_type = cell_type;
    std::set<std::string> seen;
    for (const auto& [gene, lvl] : pool) {
        if (seen.count(gene)) continue;
        seen.insert(gene);
        proto.genes.push_back(gene);
        if (static_cast<int>(proto.genes.size()) == k) break;
    }
    if (static_cast<int>(proto.genes.size()) < k) {
        throw InsufficientMarkers(cell_type + " has " + std::to_string(proto.genes.size()) +
                                  " distinct markers, need " + std::to_string(k));
    }
    return proto;
}

std::set<std::pair<std::string, std::string>> parent_lineage_pairs(const CellOntology& ontology) {
    // Group by parent; same parent implies same level in a tree, so the
    // level predicate holds by construction but is asserted anyway.
    std::map<std::string, std::vector<std::string>> children;
    for (const auto& [child, par] : ontology.parent) children[par].push_back(child);

    std::set<std::pair<std::string, std::string>> pairs;
    for (auto& [par, kids] : children) {
        std::sort(kids.begin(), kids.end());
        for (size_t i = 0; i < kids.size(); ++i) {
            for (size_t j = i + 1; j < kids.size(); ++j) {
                if (ontology.level.at(kids[i]) != ontology.level.at(kids[j])) continue;
                pairs.emplace(kids[i], kids[j]);
            }
        }
    }
    return pairs;
}

CellOntology load_ontology(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open ontology file: " + path);
    json j = json::parse(in);
    std::vector<std::string> nodes = j.at("nodes").get<std::vector<std::string>>();
    std::vector<std::pair<std::string, std::string>> edges;
    for (const auto& e : j.at("edges")) {
        edges.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
    }
    return CellOntology::build(nodes, edges);
}

void save_ontology(const CellOntology& ontology, const std::string& path) {
    json j;
    j["nodes"] = ontology.nodes;
    json edges = json::array();
    // Emit in node order for stable output.
    for (const auto& n : ontology.nodes) {
        auto it = ontology.parent.find(n);
        if (it != ontology.parent.end()) edges.push_back({it->second, n});
    }
    j["edges"] = edges;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write ontology file: " + path);
    out << j.dump(2) << "\n";
}

MarkerCatalog load_catalog(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open catalog file: " + path);
    json j = json::parse(in);
    MarkerCatalog cat;
    for (auto it = j.begin(); it != j.end(); ++it) {
        std::vector<std::pair<std::string, int>> entry;
        for (const auto& pair : it.value()) {
            entry.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<int>());
        }
        cat.entries[it.key()] = std::move(entry);
    }
    return cat;
}

void save_catalog(const MarkerCatalog& catalog, const std::string& path) {
    json j = json::object();
    for (const auto& [type, markers] : catalog.entries) {
        json arr = json::array();
        for (const auto& [gene, lvl] : markers) arr.push_back({gene, lvl});
        j[type] = arr;
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write catalog file: " + path);
    out << j.dump(2) << "\n";
}

}  // namespace cellrefine
