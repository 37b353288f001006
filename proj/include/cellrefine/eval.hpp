#pragma once

// =============================================================
//  downstream evaluation: classification metrics with per-class
//  breakdowns, top-k retrieval, masked-gene imputation scoring,
//  perturbation-response DGE correlation, and zero-shot
//  out-of-domain protocols
// =============================================================

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cellrefine/datagen.hpp"
#include "cellrefine/model.hpp"

namespace cellrefine {

struct F1Breakdown {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    long support = 0;
};

struct ClassificationSummary {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double weighted_f1 = 0.0;
    std::vector<F1Breakdown> per_class;  // indexed by class id
};

// Confusion-matrix scores over integer labels 0..K-1 with the 0/0 -> 0
// convention for empty precision/recall denominators. num_classes = 0 infers
// K from the data.
ClassificationSummary classification_summary(const std::vector<int>& y_true,
                                             const std::vector<int>& y_pred, int num_classes = 0);
double macro_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred);

// Fraction of samples whose true class is among the k highest scores; ties
// broken by ascending class index.
double recall_at_k(const std::vector<int>& y_true, const Matrix& scores, int k);

// Sample Pearson correlation; nullopt when either side has zero variance.
std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b);

struct MetricsReport {
    std::string task;
    std::string split;
    std::uint64_t seed = 0;
    std::string checkpoint_digest;
    std::map<std::string, double> values;
    std::map<std::string, std::map<std::string, double>> per_class;

    std::string to_json() const;
    std::string to_table() const;
};

// Classification on an annotated split using the fine-tuned identity head.
// few_shot_n > 0 caps the evaluated cells per class (seeded subsample).
MetricsReport identity_eval(const ModelState& state, const ExpressionDataset& data,
                            const std::string& split, const std::vector<int>& ks, int few_shot_n,
                            std::uint64_t seed);

// Masks mask_rate of each cell's tokens, decodes predicted expression for the
// masked genes, and reports per-cell Pearson/cosine means over the split.
MetricsReport imputation_eval(const ModelState& state, const ExpressionDataset& data,
                              double mask_rate, std::uint64_t seed,
                              const std::string& split = "test");

// Mean per-group Pearson between predicted and true expression deltas, groups
// keyed by cell type. group_filter restricts to one type (the held-out one).
MetricsReport perturbation_eval(const ModelState& state, const ExpressionDataset& data,
                                const std::string& split = "test",
                                const std::string& group_filter = "");

// Zero-shot classification of the "ood" split: no updates, recall@k only.
MetricsReport out_of_domain_eval(const ModelState& state, const ExpressionDataset& data,
                                 const std::vector<int>& ks = {1, 3});

// Isolated imputation decode: expected rank of each masked gene under the
// MLM-head distribution, mapped back through the cell's observed rank-value
// curve and the gene's median factor. Returns predicted raw expression per
// masked position, aligned with masked.masked_positions.
std::vector<double> decode_masked_expression(const ModelState& state, const Matrix& logits,
                                             const TokenSequence& masked,
                                             const std::vector<double>& expression);

}  // namespace cellrefine
