#pragma once

// =============================================================
//  synthetic single-cell corpus generator: ontology-structured
//  cell types with a heavy-tailed frequency law, marker
//  over-expression, batch effects, and sequencing-depth scaling
// =============================================================

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cellrefine/ontology.hpp"
#include "cellrefine/tensor.hpp"

namespace cellrefine {

struct GeneratorConfig {
    int num_genes = 200;
    int num_types = 12;
    int num_families = 3;
    int markers_per_type = 4;     // disjoint marker block size (leaves and families)
    double alpha_gen = 0.4;       // tail heaviness of the type frequency law
    bool uniform_frequencies = false;
    double overexpression = 2.0;  // marker fold target over baseline mean
    int num_cells = 3000;
    int min_cells_per_type = 2;
    int num_batches = 2;
    double batch_shift = 0.3;     // per-batch per-gene offset scale (x baseline mean)
    double depth_min = 1.0;       // per-cell depth multiplier range
    double depth_max = 1.0;
    double noise_sigma = 0.4;     // log-normal expression noise
    double base_log_mean = 0.0;
    double train_fraction = 0.7;
    double val_fraction = 0.15;
    int ood_cells = 0;            // extra out-of-domain cells in a fresh batch
    double ood_shift = 0.6;
    int perturb_genes = 0;        // paired post-perturbation matrix when > 0
    double perturb_magnitude = 0.0;
    double perturb_noise = 0.0;
    std::uint64_t seed = 1;
    bool seed_explicit = false;  // set when the config file named a seed

    void validate() const;
};

struct ExpressionDataset {
    std::vector<std::string> genes;
    std::vector<std::string> cell_ids;
    Matrix x;                             // cells x genes
    std::vector<std::string> type_labels;
    std::vector<int> batch_ids;
    std::vector<std::string> splits;      // "train" | "val" | "test" | "ood"
    std::optional<Matrix> post;           // paired post-perturbation expression
    std::optional<std::vector<double>> signature;

    int num_cells() const { return static_cast<int>(cell_ids.size()); }
    int num_genes() const { return static_cast<int>(genes.size()); }
    std::vector<int> split_indices(const std::string& split) const;
    std::vector<std::string> distinct_types() const;  // sorted
};

struct GeneratedData {
    ExpressionDataset data;
    CellOntology ontology;
    MarkerCatalog catalog;
};

// Deterministic allocation of total_cells across cfg.num_types categories.
// Uniform mode spreads cells evenly (counts differ by at most one). Otherwise
// the rarest 30% of types follow count_j = A * j^(-1/alpha_gen) with j = 1 at
// the largest tail count, the head continues the same exponent from a higher
// anchor, and every type keeps at least cfg.min_cells_per_type cells.
std::vector<long> allocate_type_counts(const GeneratorConfig& cfg, long total_cells);

GeneratedData generate(const GeneratorConfig& cfg);

// Adds the gene-level signature plus optional Gaussian noise to every cell,
// clipping at zero. Throws LengthMismatch if the signature length is wrong.
Matrix apply_perturbation(const ExpressionDataset& data, const std::vector<double>& signature,
                          double noise_sigma, std::uint64_t seed);

// Directory layout: expression.tsv, metadata.json, ontology.json,
// catalog.json, plus expression_post.tsv / signature.json when present.
void save_dataset(const GeneratedData& gen, const std::string& dir);
GeneratedData load_dataset(const std::string& dir);

GeneratorConfig generator_config_from_json(const std::string& text);
std::string generator_config_to_json(const GeneratorConfig& cfg);

}  // namespace cellrefine
