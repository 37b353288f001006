#pragma once

// =============================================================
//  parameterized models: cell encoder, marker encoder, GMVE
//  head, MLM head, task heads, low-rank adapters
//
//  All parameters are plain double matrices with paired gradient
//  buffers; backward passes are written out by hand against
//  per-sequence forward tapes, so the whole artifact is
//  dependency-free and bit-reproducible.
// =============================================================

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cellrefine/ontology.hpp"
#include "cellrefine/rng.hpp"
#include "cellrefine/tensor.hpp"
#include "cellrefine/tokenizer.hpp"
#include "cellrefine/vocab.hpp"

namespace cellrefine {

struct EncoderConfig {
    int vocab_size = 0;
    int hidden_size = 64;
    int num_layers = 2;
    int num_heads = 4;
    int ffn_size = 0;  // 0 -> 4 * hidden_size
    int max_len = 256;
    double dropout = 0.0;
    double ln_eps = 1e-12;

    int head_dim() const { return hidden_size / num_heads; }
    int ffn() const { return ffn_size > 0 ? ffn_size : 4 * hidden_size; }
    void validate() const;  // throws InvalidConfig
};

struct GMVEConfig {
    int num_components = 4;  // L
    int latent_dim = 0;      // 0 -> hidden_size
    int resolved_latent(int hidden) const { return latent_dim > 0 ? latent_dim : hidden; }
};

struct AdapterConfig {
    int rank = 8;
    double alpha = 16.0;
    double dropout = 0.05;
    bool target_q = true;
    bool target_k = true;
    bool target_v = true;
    double scaling() const { return alpha / rank; }
    void validate() const;
};

// One named tensor with its gradient accumulator. `decay` marks weight
// matrices; biases and layer-norm parameters skip weight decay.
struct Param {
    std::string name;
    Matrix w;
    Matrix g;
    bool trainable = true;
    bool decay = true;

    void init_shape(const std::string& n, int rows, int cols, bool decays) {
        name = n;
        w = Matrix(rows, cols);
        g = Matrix(rows, cols);
        decay = decays;
    }
};

using ParamVisitor = std::function<void(Param&)>;

// ---------------------------------------------------------------- adapters

struct ProjAdapter {
    Param a;  // d_in x r
    Param b;  // r x d_out, zero-initialized so attachment preserves outputs
};

struct LayerAdapterSet {
    std::optional<ProjAdapter> q, k, v;
};

struct AdapterSet {
    AdapterConfig cfg;
    std::vector<LayerAdapterSet> layers;
    void visit_params(const ParamVisitor& fn);
};

// ---------------------------------------------------------------- encoder

struct EncoderLayer {
    Param ln1_g, ln1_b;
    Param wq, bq, wk, bk, wv, bv, wo, bo;
    Param ln2_g, ln2_b;
    Param w1, b1, w2, b2;
};

struct LayerTape {
    Matrix x_in;                       // t x d, layer input
    Matrix ln1_xhat;                   // t x d
    std::vector<double> ln1_inv_std;   // t
    Matrix ln1_out;                    // t x d
    Matrix q, k, v;                    // t x d
    std::vector<Matrix> probs;         // per head, t x t
    Matrix ctx;                        // t x d
    Matrix x_mid;                      // t x d, after attention residual
    Matrix ln2_xhat;
    std::vector<double> ln2_inv_std;
    Matrix ln2_out;
    Matrix h1;                         // t x ffn, post-relu
    Matrix drop_attn, drop_ffn;        // inverted-dropout factors (empty in eval mode)
    Matrix lora_uq, lora_uk, lora_uv;  // t x r when adapters present
    Matrix lora_mask_q, lora_mask_k, lora_mask_v;  // adapter-input dropout factors
};

struct EncoderTape {
    std::vector<int> tokens;
    std::vector<char> is_pad;
    int n_nonpad = 0;
    Matrix x0;  // t x d, embedding sum
    std::vector<LayerTape> layers;
    Matrix final_xhat;
    std::vector<double> final_inv_std;
    Matrix y;  // t x d, final layer-norm output
};

struct TransformerEncoder {
    EncoderConfig cfg;
    std::string prefix;
    Param tok_emb;  // vocab x d
    Param pos_emb;  // max_len x d
    std::vector<EncoderLayer> layers;
    Param lnf_g, lnf_b;

    void init(const std::string& name_prefix, const EncoderConfig& config, std::uint64_t seed);
    // dropout_rng null -> eval mode (no dropout); adapters null -> plain projections
    EncoderTape forward(const std::vector<int>& tokens, int pad_id, Rng* dropout_rng,
                        const AdapterSet* adapters) const;
    // dy: gradient on tape.y; accumulates into param gradients and adapters
    void backward(const EncoderTape& tape, const Matrix& dy, AdapterSet* adapters);
    void visit_params(const ParamVisitor& fn);
};

// ---------------------------------------------------------------- heads

struct LinearHead {
    Param w;  // in x out
    Param b;  // 1 x out
    void init(const std::string& name_prefix, int in, int out, std::uint64_t seed);
    void visit_params(const ParamVisitor& fn);
    std::vector<double> forward(const std::vector<double>& h) const;
    // accumulates gradients; adds input gradient into dh
    void backward(const std::vector<double>& h, const std::vector<double>& dout,
                  std::vector<double>& dh);
};

struct GMVEHead {
    GMVEConfig cfg;
    int hidden = 0;
    int latent = 0;
    Param w_pi, b_pi;        // d x L, 1 x L
    Param w_mu, b_mu;        // d x (L*dz)
    Param w_var, b_var;      // d x (L*dz), raw; variance = softplus(raw)
    Param prior_logits;      // 1 x L
    Param prior_mu;          // L x dz
    Param prior_var_raw;     // L x dz

    void init(int hidden_size, const GMVEConfig& config, std::uint64_t seed);
    void visit_params(const ParamVisitor& fn);
};

// Posterior parameters for one cell: mixture weights on the simplex,
// per-component means and softplus variances.
struct GmvePosterior {
    std::vector<double> logits;  // L
    std::vector<double> pi;      // L
    Matrix mu;                   // L x dz
    Matrix var_raw;              // L x dz
    Matrix var;                  // L x dz, strictly positive
};

GmvePosterior gmve_posterior(const GMVEHead& head, const std::vector<double>& h);

// Ancestral sample from the posterior: seeded component choice, then a
// reparameterized draw from the chosen Gaussian.
std::vector<double> gmve_sample(const GmvePosterior& post, Rng& rng, int* component = nullptr);

// ---------------------------------------------------------------- state

struct ModelState {
    EncoderConfig cell_cfg;
    EncoderConfig marker_cfg;
    GMVEConfig gmve_cfg;
    AdapterConfig adapter_cfg;  // meaningful only when adapters engaged
    std::string stage = "untrained";  // untrained | pt | pp | ft
    std::string task;                 // "", cell_identity, imputation, perturbation
    std::uint64_t init_seed = 0;

    GeneVocabulary vocab;
    std::vector<double> medians;          // per-gene rank-normalization factors
    std::vector<std::string> label_space;  // identity-task class names

    TransformerEncoder cell_encoder;
    TransformerEncoder marker_encoder;
    GMVEHead gmve;
    LinearHead mlm_head;
    std::optional<LinearHead> task_head;
    std::optional<AdapterSet> adapters;

    static ModelState create(const EncoderConfig& cell, const EncoderConfig& marker,
                             const GMVEConfig& gmve_cfg, const GeneVocabulary& vocab,
                             const std::vector<double>& medians, std::uint64_t seed);

    void visit_params(const ParamVisitor& fn);  // fixed order, stable across runs
    void zero_grads();
    long param_count();
    long trainable_param_count();
};

// Encoder output for one cell: forward tape, pooled embedding h (mean over
// non-PAD positions), and per-position MLM logits.
struct CellEncoding {
    EncoderTape tape;
    std::vector<double> h;
    Matrix logits;  // t x vocab (empty when want_logits=false)
};

CellEncoding encode_cell(const ModelState& state, const TokenSequence& seq,
                         Rng* dropout_rng = nullptr, bool want_logits = true);

// Backward through pooling, the MLM head, and the cell encoder. Either
// gradient may be empty.
void encode_cell_backward(ModelState& state, const CellEncoding& enc,
                          const std::vector<double>& dh, const Matrix& dlogits);

struct ProtoEncoding {
    EncoderTape tape;
    std::vector<double> z;
};

// Marker-sequence embedding; prototype gene order is preserved verbatim.
ProtoEncoding encode_prototype_full(const ModelState& state, const Prototype& proto,
                                    Rng* dropout_rng = nullptr);
std::vector<double> encode_prototype(const ModelState& state, const Prototype& proto);
void encode_prototype_backward(ModelState& state, const ProtoEncoding& enc,
                               const std::vector<double>& dz);

// Freezes base parameters and adds zero-initialized low-rank factors to the
// configured attention projections of the cell encoder.
void attach_adapters(ModelState& state, const AdapterConfig& cfg);

void save_checkpoint(ModelState& state, const std::string& path);
ModelState load_checkpoint(const std::string& path);

double softplus(double x);
void softmax_inplace(std::vector<double>& v);

}  // namespace cellrefine
