#pragma once

// =============================================================
//  three-stage training: masked-gene pretraining, the combined
//  post-pretraining objective, and task fine-tuning; AdamW with
//  linear warmup/decay, patience-based early stopping, and
//  purpose-keyed RNG streams for bit-reproducible runs
// =============================================================

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cellrefine/datagen.hpp"
#include "cellrefine/losses.hpp"
#include "cellrefine/model.hpp"
#include "cellrefine/ontology.hpp"
#include "cellrefine/tokenizer.hpp"

namespace cellrefine {

struct TrainConfig {
    std::string stage = "pretrain";      // pretrain | post_pretrain | fine_tune
    std::string mode = "FF";             // FF | LL | LoRA | LP (LP: fine_tune only)
    std::string task = "cell_identity";  // cell_identity | imputation | perturbation
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double lambda3 = 1.0;
    double alpha_reg = 0.0;
    double learning_rate_peak = 1e-3;
    int warmup_steps = 20;
    double weight_decay = 1e-3;
    int batch_size = 12;
    int patience = 3;
    int epoch_cap = 50;
    std::uint64_t seed = 1;
    bool seed_explicit = false;  // set when the config file named a seed
    int few_shot_n = 0;          // fine-tune: per-class training cap, 0 = off
    double mask_rate = 0.15;
    double mlm_stop_threshold = 0.0;  // stop once train MLM falls below, 0 = off
    int gmve_samples = 8;
    double proto_temperature = 1.0;
    int prototype_k = 8;
    std::string holdout_type;  // fine-tune: exclude this type from train/val

    // model shape, applied when initializing a fresh model
    int hidden_size = 64;
    int num_layers = 2;
    int num_heads = 4;
    int ffn_size = 0;  // 0 -> 4 * hidden
    int max_len = 256;
    double dropout = 0.0;
    int marker_num_layers = 2;
    int marker_max_len = 64;
    int gmve_components = 4;
    int gmve_latent_dim = 0;  // 0 -> hidden

    int adapter_rank = 8;
    double adapter_alpha = 16.0;
    double adapter_dropout = 0.05;

    void validate() const;
};

TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);  // canonical form
std::string config_digest(const TrainConfig& cfg);         // 16-hex content hash

// Linear warmup to the peak over `warmup` steps, then linear decay to zero at
// `total`. Steps are 1-based; the schedule is a pure function of its inputs.
double lr_schedule(long step, long total, long warmup, double peak);

struct EpochStats {
    int epoch = 0;
    double mlm = 0.0;
    double proto = 0.0;
    double lineage = 0.0;
    double gmve = 0.0;
    double reg = 0.0;
    double total = 0.0;
    double val = 0.0;
};

struct RunRecord {
    std::string stage;
    std::uint64_t seed = 0;
    std::string config_digest;
    std::vector<EpochStats> epochs;
    int stopped_epoch = 0;
    std::string stop_reason;  // patience | epoch_cap | mlm_threshold
    std::string to_json() const;
};

struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    std::map<std::string, std::pair<Matrix, Matrix>> slots;  // name -> (m, v)

    void step(ModelState& state, double lr, double weight_decay);
};

// Fresh model sized to the dataset: vocabulary from the gene panel, per-gene
// medians from the train split.
ModelState init_model(const ExpressionDataset& data, const TrainConfig& cfg);

struct PostPretrainSetup {
    std::vector<std::string> types;     // sorted label space
    std::vector<Prototype> prototypes;  // aligned with types (when the term is on)
    std::set<std::pair<std::string, std::string>> pairs;
};

struct BatchTerms {
    double mlm = 0.0;
    double proto = 0.0;
    double lineage = 0.0;
    double gmve = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

// The exact quantity one optimizer step descends: mean masked-gene loss plus
// the weighted regularization terms over one batch, prototypes re-encoded on
// the fly. Gradients accumulate into the parameters when `accumulate` is set;
// `setup` may be null for plain pretraining. Seed vectors are per batch cell.
BatchTerms compute_batch(ModelState& state, const std::vector<TokenSequence>& masked,
                         const std::vector<int>& type_idx, const PostPretrainSetup* setup,
                         const LossWeights& w, double proto_temperature, int gmve_samples,
                         const std::vector<std::uint64_t>& gmve_seeds,
                         const std::vector<std::uint64_t>* dropout_seeds, bool accumulate);

void pretrain(ModelState& state, const ExpressionDataset& data, const TrainConfig& cfg,
              RunRecord* record = nullptr);
void post_pretrain(ModelState& state, const ExpressionDataset& data, const CellOntology& ontology,
                   const MarkerCatalog& catalog, const TrainConfig& cfg,
                   RunRecord* record = nullptr);
void fine_tune(ModelState& state, const ExpressionDataset& data, const TrainConfig& cfg,
               RunRecord* record = nullptr);

// Seeded per-class subsample: labels[i] is the class of dataset row i; keeps
// at most per_class of each class, classes processed in sorted order.
std::vector<int> subsample_per_class(const std::vector<int>& indices,
                                     const std::vector<std::string>& labels, int per_class,
                                     std::uint64_t seed);

}  // namespace cellrefine
