#include "cellrefine/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include <json.hpp>

#include "cellrefine/errors.hpp"
#include "cellrefine/hash.hpp"

namespace cellrefine {

namespace {

using json = nlohmann::json;

std::uint64_t key(const std::string& purpose) { return fnv1a64(purpose); }

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
    if (stage != "pretrain" && stage != "post_pretrain" && stage != "fine_tune") {
        throw InvalidConfig("unknown stage: " + stage);
    }
    if (mode != "FF" && mode != "LL" && mode != "LoRA" && mode != "LP") {
        throw InvalidConfig("unknown mode: " + mode);
    }
    if (mode == "LP" && stage != "fine_tune") {
        throw InvalidConfig("LP mode applies to fine_tune only");
    }
    if (task != "cell_identity" && task != "imputation" && task != "perturbation") {
        throw InvalidConfig("unknown task: " + task);
    }
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) {
        throw InvalidConfig("loss weights must be non-negative");
    }
    if (alpha_reg < 0.0) throw InvalidConfig("alpha_reg must be non-negative");
    if (!(learning_rate_peak > 0.0)) throw InvalidConfig("learning_rate_peak must be positive");
    if (warmup_steps < 0) throw InvalidConfig("warmup_steps must be non-negative");
    if (weight_decay < 0.0) throw InvalidConfig("weight_decay must be non-negative");
    if (batch_size < 1) throw InvalidConfig("batch_size must be positive");
    if (patience < 1) throw InvalidConfig("patience must be positive");
    if (epoch_cap < 1) throw InvalidConfig("epoch_cap must be positive");
    if (few_shot_n < 0) throw InvalidConfig("few_shot_n must be non-negative");
    if (mask_rate < 0.0 || mask_rate > 1.0) {
        throw RateOutOfRange("mask_rate must lie in [0, 1]");
    }
    if (mlm_stop_threshold < 0.0) throw InvalidConfig("mlm_stop_threshold must be non-negative");
    if (gmve_samples < 1) throw InvalidConfig("gmve_samples must be positive");
    if (!(proto_temperature > 0.0)) throw InvalidConfig("proto_temperature must be positive");
    if (prototype_k < 1) throw InvalidConfig("prototype_k must be positive");
    if (hidden_size < 1 || num_layers < 1 || num_heads < 1 || max_len < 1) {
        throw InvalidConfig("model shape fields must be positive");
    }
    if (ffn_size < 0 || gmve_latent_dim < 0) throw InvalidConfig("negative shape field");
    if (marker_num_layers < 1 || marker_max_len < 1) {
        throw InvalidConfig("marker encoder shape fields must be positive");
    }
    if (gmve_components < 1) throw InvalidConfig("gmve_components must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw InvalidConfig("dropout must lie in [0, 1)");
    if (adapter_rank < 1) throw InvalidConfig("adapter_rank must be positive");
    if (!(adapter_alpha > 0.0)) throw InvalidConfig("adapter_alpha must be positive");
    if (adapter_dropout < 0.0 || adapter_dropout >= 1.0) {
        throw InvalidConfig("adapter_dropout must lie in [0, 1)");
    }
}

TrainConfig train_config_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw InvalidConfig("malformed training config");
    TrainConfig cfg;
    for (const auto& [k, value] : j.items()) {
        if (k == "stage") cfg.stage = value.get<std::string>();
        else if (k == "mode") cfg.mode = value.get<std::string>();
        else if (k == "task") cfg.task = value.get<std::string>();
        else if (k == "lambda1") cfg.lambda1 = value.get<double>();
        else if (k == "lambda2") cfg.lambda2 = value.get<double>();
        else if (k == "lambda3") cfg.lambda3 = value.get<double>();
        else if (k == "alpha_reg") cfg.alpha_reg = value.get<double>();
        else if (k == "learning_rate_peak") cfg.learning_rate_peak = value.get<double>();
        else if (k == "warmup_steps") cfg.warmup_steps = value.get<int>();
        else if (k == "weight_decay") cfg.weight_decay = value.get<double>();
        else if (k == "batch_size") cfg.batch_size = value.get<int>();
        else if (k == "patience") cfg.patience = value.get<int>();
        else if (k == "epoch_cap") cfg.epoch_cap = value.get<int>();
        else if (k == "seed") {
            cfg.seed = value.get<std::uint64_t>();
            cfg.seed_explicit = true;
        }
        else if (k == "few_shot_n") cfg.few_shot_n = value.get<int>();
        else if (k == "mask_rate") cfg.mask_rate = value.get<double>();
        else if (k == "mlm_stop_threshold") cfg.mlm_stop_threshold = value.get<double>();
        else if (k == "gmve_samples") cfg.gmve_samples = value.get<int>();
        else if (k == "proto_temperature") cfg.proto_temperature = value.get<double>();
        else if (k == "prototype_k") cfg.prototype_k = value.get<int>();
        else if (k == "holdout_type") cfg.holdout_type = value.get<std::string>();
        else if (k == "hidden_size") cfg.hidden_size = value.get<int>();
        else if (k == "num_layers") cfg.num_layers = value.get<int>();
        else if (k == "num_heads") cfg.num_heads = value.get<int>();
        else if (k == "ffn_size") cfg.ffn_size = value.get<int>();
        else if (k == "max_len") cfg.max_len = value.get<int>();
        else if (k == "dropout") cfg.dropout = value.get<double>();
        else if (k == "marker_num_layers") cfg.marker_num_layers = value.get<int>();
        else if (k == "marker_max_len") cfg.marker_max_len = value.get<int>();
        else if (k == "gmve_components") cfg.gmve_components = value.get<int>();
        else if (k == "gmve_latent_dim") cfg.gmve_latent_dim = value.get<int>();
        else if (k == "adapter_rank") cfg.adapter_rank = value.get<int>();
        else if (k == "adapter_alpha") cfg.adapter_alpha = value.get<double>();
        else if (k == "adapter_dropout") cfg.adapter_dropout = value.get<double>();
        else throw InvalidConfig("unknown training config key: " + k);
    }
    cfg.validate();
    return cfg;
}

std::string train_config_to_json(const TrainConfig& cfg) {
    json j = {{"stage", cfg.stage},
              {"mode", cfg.mode},
              {"task", cfg.task},
              {"lambda1", cfg.lambda1},
              {"lambda2", cfg.lambda2},
              {"lambda3", cfg.lambda3},
              {"alpha_reg", cfg.alpha_reg},
              {"learning_rate_peak", cfg.learning_rate_peak},
              {"warmup_steps", cfg.warmup_steps},
              {"weight_decay", cfg.weight_decay},
              {"batch_size", cfg.batch_size},
              {"patience", cfg.patience},
              {"epoch_cap", cfg.epoch_cap},
              {"seed", cfg.seed},
              {"few_shot_n", cfg.few_shot_n},
              {"mask_rate", cfg.mask_rate},
              {"mlm_stop_threshold", cfg.mlm_stop_threshold},
              {"gmve_samples", cfg.gmve_samples},
              {"proto_temperature", cfg.proto_temperature},
              {"prototype_k", cfg.prototype_k},
              {"holdout_type", cfg.holdout_type},
              {"hidden_size", cfg.hidden_size},
              {"num_layers", cfg.num_layers},
              {"num_heads", cfg.num_heads},
              {"ffn_size", cfg.ffn_size},
              {"max_len", cfg.max_len},
              {"dropout", cfg.dropout},
              {"marker_num_layers", cfg.marker_num_layers},
              {"marker_max_len", cfg.marker_max_len},
              {"gmve_components", cfg.gmve_components},
              {"gmve_latent_dim", cfg.gmve_latent_dim},
              {"adapter_rank", cfg.adapter_rank},
              {"adapter_alpha", cfg.adapter_alpha},
              {"adapter_dropout", cfg.adapter_dropout}};
    return j.dump(1);
}

std::string config_digest(const TrainConfig& cfg) {
    return hex64(fnv1a64(train_config_to_json(cfg)));
}

double lr_schedule(long step, long total, long warmup, double peak) {
    if (total <= 0) return peak;
    step = std::max<long>(1, std::min(step, total));
    const long w = std::max<long>(0, std::min(warmup, total));
    if (step <= w) {
        return peak * static_cast<double>(step) / static_cast<double>(w);
    }
    if (total == w) return peak;
    return peak * static_cast<double>(total - step) / static_cast<double>(total - w);
}

std::string RunRecord::to_json() const {
    json eps = json::array();
    for (const EpochStats& e : epochs) {
        eps.push_back({{"epoch", e.epoch},
                       {"mlm", e.mlm},
                       {"proto", e.proto},
                       {"lineage", e.lineage},
                       {"gmve", e.gmve},
                       {"reg", e.reg},
                       {"total", e.total},
                       {"val", e.val}});
    }
    json j = {{"stage", stage},
              {"seed", seed},
              {"config_digest", config_digest},
              {"epochs", eps},
              {"stopped_epoch", stopped_epoch},
              {"stop_reason", stop_reason}};
    return j.dump(1);
}

// ---------------------------------------------------------------- optimizer

void AdamW::step(ModelState& state, double lr, double weight_decay) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    state.visit_params([&](Param& p) {
        if (!p.trainable) return;
        auto& slot = slots[p.name];
        if (slot.first.empty()) {
            slot.first = Matrix(p.w.rows, p.w.cols);
            slot.second = Matrix(p.w.rows, p.w.cols);
        }
        const double wd = p.decay ? weight_decay : 0.0;
        for (size_t i = 0; i < p.w.size(); ++i) {
            const double g = p.g.data[i];
            double& m = slot.first.data[i];
            double& v = slot.second.data[i];
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p.w.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p.w.data[i]);
        }
    });
}

// ---------------------------------------------------------------- helpers

namespace {

std::vector<Param*> layer_params(EncoderLayer& l) {
    return {&l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv,
            &l.wo,    &l.bo,    &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2};
}

void set_encoder_trainable(TransformerEncoder& enc, bool flag) {
    enc.visit_params([flag](Param& p) { p.trainable = flag; });
}

void apply_mode_to_cell_encoder(ModelState& s, const std::string& mode) {
    set_encoder_trainable(s.cell_encoder, false);
    if (s.adapters) {
        s.adapters->visit_params([](Param& p) { p.trainable = false; });
    }
    if (mode == "FF") {
        set_encoder_trainable(s.cell_encoder, true);
        if (s.adapters) s.adapters->visit_params([](Param& p) { p.trainable = true; });
    } else if (mode == "LL") {
        for (Param* p : layer_params(s.cell_encoder.layers.back())) p->trainable = true;
        s.cell_encoder.lnf_g.trainable = true;
        s.cell_encoder.lnf_b.trainable = true;
    } else if (mode == "LoRA") {
        s.adapters->visit_params([](Param& p) { p.trainable = true; });
    }
    // LP: the whole encoder stays frozen
}

// stage_kind: "pt" | "pp" | "ft"
void apply_trainability(ModelState& s, const TrainConfig& cfg, const std::string& stage_kind) {
    const std::string mode = stage_kind == "pt" ? std::string("FF") : cfg.mode;
    if (mode == "LoRA" && !s.adapters) {
        AdapterConfig ac;
        ac.rank = cfg.adapter_rank;
        ac.alpha = cfg.adapter_alpha;
        ac.dropout = cfg.adapter_dropout;
        attach_adapters(s, ac);
    }
    apply_mode_to_cell_encoder(s, mode);
    const bool pp = stage_kind == "pp";
    set_encoder_trainable(s.marker_encoder, pp && cfg.lambda1 != 0.0);
    const bool gmve_on = pp && cfg.lambda3 != 0.0;
    s.gmve.visit_params([gmve_on](Param& p) { p.trainable = gmve_on; });
    const bool mlm_on = stage_kind != "ft" || cfg.task == "imputation";
    s.mlm_head.visit_params([mlm_on](Param& p) { p.trainable = mlm_on; });
    if (s.task_head) {
        const bool head_on = stage_kind == "ft" && cfg.task != "imputation";
        s.task_head->visit_params([head_on](Param& p) { p.trainable = head_on; });
    }
}

std::vector<double> row_vector(const Matrix& m, int r) {
    return std::vector<double>(m.row(r), m.row(r) + m.cols);
}

// lazy token-sequence cache over dataset rows
struct TokenCache {
    const ModelState* state;
    const ExpressionDataset* data;
    std::vector<TokenSequence> seqs;
    std::vector<char> present;

    TokenCache(const ModelState& s, const ExpressionDataset& d)
        : state(&s), data(&d), seqs(d.num_cells()), present(d.num_cells(), 0) {}

    const TokenSequence& get(int idx) {
        if (!present[idx]) {
            seqs[idx] = tokenize(row_vector(data->x, idx), state->vocab, state->medians,
                                 state->cell_cfg.max_len);
            present[idx] = 1;
        }
        return seqs[idx];
    }
};

struct StopWatchdog {
    double best = std::numeric_limits<double>::infinity();
    int bad = 0;

    // returns true when `patience` consecutive epochs failed to improve
    bool update(double val, int patience) {
        if (val < best) {
            best = val;
            bad = 0;
        } else {
            ++bad;
        }
        return bad >= patience;
    }
};

bool dropout_active(const ModelState& s) {
    if (s.cell_cfg.dropout > 0.0) return true;
    return s.adapters.has_value() && s.adapters->cfg.dropout > 0.0;
}

}  // namespace

// ---------------------------------------------------------------- batch loss

BatchTerms compute_batch(ModelState& state, const std::vector<TokenSequence>& masked,
                         const std::vector<int>& type_idx, const PostPretrainSetup* setup,
                         const LossWeights& w, double proto_temperature, int gmve_samples,
                         const std::vector<std::uint64_t>& gmve_seeds,
                         const std::vector<std::uint64_t>* dropout_seeds, bool accumulate) {
    const int m = static_cast<int>(masked.size());
    if (m == 0) throw EmptyDataset("empty batch");
    const int d = state.cell_cfg.hidden_size;
    const bool use_proto = setup != nullptr && w.lambda1 != 0.0;
    const bool use_lineage = setup != nullptr && w.lambda2 != 0.0;
    const bool use_gmve = setup != nullptr && w.lambda3 != 0.0;
    BatchTerms out;

    // prototypes are re-encoded every call so their gradients stay live
    std::vector<ProtoEncoding> proto_enc;
    std::vector<std::vector<double>> protos_z;
    if (use_proto) {
        proto_enc.reserve(setup->prototypes.size());
        for (const Prototype& p : setup->prototypes) {
            proto_enc.push_back(encode_prototype_full(state, p));
            protos_z.push_back(proto_enc.back().z);
        }
    }

    std::vector<CellEncoding> encs(m);
    std::vector<std::vector<double>> hs(m);
    std::vector<std::vector<double>> dhs;
    std::vector<Matrix> dlogits(m);
    if (accumulate) dhs.assign(m, std::vector<double>(d, 0.0));

    const double inv_m = 1.0 / static_cast<double>(m);
    for (int i = 0; i < m; ++i) {
        Rng drop_rng(0);
        Rng* dr = nullptr;
        if (dropout_seeds != nullptr) {
            drop_rng = Rng((*dropout_seeds)[i]);
            dr = &drop_rng;
        }
        encs[i] = encode_cell(state, masked[i], dr, true);
        hs[i] = encs[i].h;
        if (!masked[i].masked_positions.empty()) {
            if (accumulate) {
                out.mlm += inv_m * mlm_loss_grad(encs[i].logits, masked[i].masked_positions,
                                                 masked[i].targets, inv_m, dlogits[i]);
            } else {
                out.mlm += inv_m * mlm_loss(encs[i].logits, masked[i].masked_positions,
                                            masked[i].targets, 0.0, 0.0);
            }
        }
    }

    if (use_proto) {
        const int l = static_cast<int>(protos_z.size());
        std::vector<std::vector<double>> dprotos;
        double raw;
        if (accumulate) {
            std::vector<std::vector<double>> dcells(m, std::vector<double>(d, 0.0));
            dprotos.assign(l, std::vector<double>(d, 0.0));
            raw = prototype_loss_grad(hs, type_idx, protos_z, w.lambda1 * inv_m, dcells, dprotos,
                                      proto_temperature);
            for (int i = 0; i < m; ++i) {
                for (int k = 0; k < d; ++k) dhs[i][k] += dcells[i][k];
            }
        } else {
            raw = prototype_loss(hs, type_idx, protos_z, proto_temperature);
        }
        out.proto = raw * inv_m;
        if (accumulate) {
            for (int j = 0; j < l; ++j) {
                encode_prototype_backward(state, proto_enc[j], dprotos[j]);
            }
        }
    }

    if (use_lineage) {
        std::map<std::string, std::vector<double>> means;
        std::map<std::string, int> counts;
        for (int i = 0; i < m; ++i) {
            const std::string& name = setup->types[type_idx[i]];
            auto& acc = means[name];
            if (acc.empty()) acc.assign(d, 0.0);
            for (int k = 0; k < d; ++k) acc[k] += hs[i][k];
            counts[name] += 1;
        }
        for (auto& [name, acc] : means) {
            const double inv = 1.0 / counts[name];
            for (double& v : acc) v *= inv;
        }
        if (accumulate) {
            std::map<std::string, std::vector<double>> dmeans;
            out.lineage = lineage_loss_grad(means, setup->pairs, w.lambda2, dmeans);
            for (int i = 0; i < m; ++i) {
                const std::string& name = setup->types[type_idx[i]];
                auto it = dmeans.find(name);
                if (it == dmeans.end()) continue;
                const double inv = 1.0 / counts[name];
                for (int k = 0; k < d; ++k) dhs[i][k] += it->second[k] * inv;
            }
        } else {
            out.lineage = lineage_loss(means, setup->pairs);
        }
    }

    if (use_gmve) {
        for (int i = 0; i < m; ++i) {
            if (accumulate) {
                out.gmve += inv_m * gmve_kl_grad(state.gmve, hs[i], gmve_samples, gmve_seeds[i],
                                                 w.lambda3 * inv_m, dhs[i]);
            } else {
                out.gmve += inv_m * gmve_kl(state.gmve, hs[i], gmve_samples, gmve_seeds[i]);
            }
        }
    }

    if (w.alpha_reg != 0.0) {
        double sq = 0.0;
        state.visit_params([&](Param& p) {
            if (!p.trainable) return;
            for (size_t i = 0; i < p.w.size(); ++i) {
                sq += p.w.data[i] * p.w.data[i];
                if (accumulate) p.g.data[i] += 2.0 * w.alpha_reg * p.w.data[i];
            }
        });
        out.reg = w.alpha_reg * sq;
    }

    if (accumulate) {
        for (int i = 0; i < m; ++i) {
            encode_cell_backward(state, encs[i], dhs[i], dlogits[i]);
        }
    }

    out.total = total_loss(out.mlm, out.proto, out.lineage, out.gmve, w) + out.reg;
    return out;
}

// ---------------------------------------------------------------- stage loops

namespace {

// Shared driver for every masked-objective stage (pretraining, the combined
// post-pretraining objective, and imputation fine-tuning). RNG streams are
// keyed purely by (seed, purpose, epoch, row index).
void run_masked_stage(ModelState& state, const ExpressionDataset& data, const TrainConfig& cfg,
                      const PostPretrainSetup* setup, const std::vector<int>& type_idx_all,
                      const std::vector<int>& train_idx, const std::vector<int>& val_idx,
                      RunRecord* record, const std::string& stage_tag) {
    TokenCache cache(state, data);
    LossWeights w;
    w.alpha_reg = cfg.alpha_reg;
    if (setup != nullptr) {
        w.lambda1 = cfg.lambda1;
        w.lambda2 = cfg.lambda2;
        w.lambda3 = cfg.lambda3;
    } else {
        w.lambda1 = w.lambda2 = w.lambda3 = 0.0;
    }

    const long n_train = static_cast<long>(train_idx.size());
    const long batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(cfg.epoch_cap) * batches_per_epoch;
    const bool use_dropout = dropout_active(state);

    AdamW opt;
    RunRecord rec;
    rec.stage = stage_tag;
    rec.seed = cfg.seed;
    rec.config_digest = cellrefine::config_digest(cfg);
    StopWatchdog watchdog;
    std::string reason = "epoch_cap";
    int last_epoch = 0;
    long step = 0;

    for (int e = 1; e <= cfg.epoch_cap; ++e) {
        last_epoch = e;
        std::vector<int> order = train_idx;
        {
            Rng shuffle_rng(Rng::derive(cfg.seed, key("shuffle/" + std::to_string(e))));
            shuffle_rng.shuffle(order);
        }
        EpochStats st;
        st.epoch = e;
        double seen = 0.0;
        for (long start = 0; start < n_train; start += cfg.batch_size) {
            const long stop = std::min(n_train, start + cfg.batch_size);
            const int bsz = static_cast<int>(stop - start);
            std::vector<TokenSequence> masked(bsz);
            std::vector<int> type_idx(bsz, 0);
            std::vector<std::uint64_t> gmve_seeds(bsz, 0);
            std::vector<std::uint64_t> drop_seeds(bsz, 0);
            const std::string e_tag = std::to_string(e) + "/";
            for (int i = 0; i < bsz; ++i) {
                const int idx = order[start + i];
                const std::string tag = e_tag + std::to_string(idx);
                masked[i] = mask_tokens(cache.get(idx), cfg.mask_rate,
                                        Rng::derive(cfg.seed, key("mask/" + tag)), state.vocab);
                if (setup != nullptr) type_idx[i] = type_idx_all[idx];
                gmve_seeds[i] = Rng::derive(cfg.seed, key("gmve/" + tag));
                drop_seeds[i] = Rng::derive(cfg.seed, key("drop/" + tag));
            }
            state.zero_grads();
            const BatchTerms terms =
                compute_batch(state, masked, type_idx, setup, w, cfg.proto_temperature,
                              cfg.gmve_samples, gmve_seeds, use_dropout ? &drop_seeds : nullptr,
                              true);
            ++step;
            const double lr =
                lr_schedule(step, total_steps, cfg.warmup_steps, cfg.learning_rate_peak);
            opt.step(state, lr, cfg.weight_decay);
            st.mlm += terms.mlm * bsz;
            st.proto += terms.proto * bsz;
            st.lineage += terms.lineage * bsz;
            st.gmve += terms.gmve * bsz;
            st.reg += terms.reg * bsz;
            st.total += terms.total * bsz;
            seen += bsz;
        }
        st.mlm /= seen;
        st.proto /= seen;
        st.lineage /= seen;
        st.gmve /= seen;
        st.reg /= seen;
        st.total /= seen;

        if (!val_idx.empty()) {
            double vtotal = 0.0;
            double vseen = 0.0;
            const long n_val = static_cast<long>(val_idx.size());
            for (long start = 0; start < n_val; start += cfg.batch_size) {
                const long stop = std::min(n_val, start + cfg.batch_size);
                const int bsz = static_cast<int>(stop - start);
                std::vector<TokenSequence> masked(bsz);
                std::vector<int> type_idx(bsz, 0);
                std::vector<std::uint64_t> gmve_seeds(bsz, 0);
                for (int i = 0; i < bsz; ++i) {
                    const int idx = val_idx[start + i];
                    const std::string tag = std::to_string(idx);
                    masked[i] =
                        mask_tokens(cache.get(idx), cfg.mask_rate,
                                    Rng::derive(cfg.seed, key("valmask/" + tag)), state.vocab);
                    if (setup != nullptr) type_idx[i] = type_idx_all[idx];
                    gmve_seeds[i] = Rng::derive(cfg.seed, key("valgmve/" + tag));
                }
                const BatchTerms terms =
                    compute_batch(state, masked, type_idx, setup, w, cfg.proto_temperature,
                                  cfg.gmve_samples, gmve_seeds, nullptr, false);
                vtotal += terms.total * bsz;
                vseen += bsz;
            }
            st.val = vtotal / vseen;
        } else {
            st.val = st.total;
        }
        rec.epochs.push_back(st);

        if (cfg.mlm_stop_threshold > 0.0 && st.mlm <= cfg.mlm_stop_threshold) {
            reason = "mlm_threshold";
            break;
        }
        if (watchdog.update(st.val, cfg.patience)) {
            reason = "patience";
            break;
        }
    }
    rec.stop_reason = reason;
    rec.stopped_epoch = last_epoch;
    if (record != nullptr) *record = rec;
}

// Supervised fine-tuning loop for the cell-identity and perturbation tasks.
void run_supervised_stage(ModelState& state, const ExpressionDataset& data,
                          const TrainConfig& cfg, const std::vector<int>& class_idx,
                          const std::vector<int>& train_idx, const std::vector<int>& val_idx,
                          RunRecord* record) {
    TokenCache cache(state, data);
    const bool identity = cfg.task == "cell_identity";
    const int n_genes = data.num_genes();
    const bool lp = cfg.mode == "LP";
    const bool use_dropout = !lp && dropout_active(state);

    // LP trains the head on frozen eval-mode embeddings: cache them once
    std::vector<std::vector<double>> h_cache(data.num_cells());
    std::vector<char> h_have(data.num_cells(), 0);
    auto frozen_h = [&](int idx) -> const std::vector<double>& {
        if (!h_have[idx]) {
            h_cache[idx] = encode_cell(state, cache.get(idx), nullptr, false).h;
            h_have[idx] = 1;
        }
        return h_cache[idx];
    };

    auto target_row = [&](int idx, std::vector<double>& tgt) {
        const double* pre = data.x.row(idx);
        const double* post = data.post->row(idx);
        tgt.resize(n_genes);
        for (int g = 0; g < n_genes; ++g) tgt[g] = post[g] - pre[g];
    };

    const long n_train = static_cast<long>(train_idx.size());
    const long batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = static_cast<long>(cfg.epoch_cap) * batches_per_epoch;

    AdamW opt;
    RunRecord rec;
    rec.stage = "ft";
    rec.seed = cfg.seed;
    rec.config_digest = cellrefine::config_digest(cfg);
    StopWatchdog watchdog;
    std::string reason = "epoch_cap";
    int last_epoch = 0;
    long step = 0;
    int cur_epoch = 0;

    // per-cell loss + gradient; returns the loss value
    auto cell_loss = [&](int idx, double scale, bool grads) -> double {
        CellEncoding enc;
        const std::vector<double>* h = nullptr;
        if (lp) {
            h = &frozen_h(idx);
        } else {
            Rng drop_rng(0);
            Rng* dr = nullptr;
            if (grads && use_dropout) {
                const std::string tag = std::to_string(cur_epoch) + "/" + std::to_string(idx);
                drop_rng = Rng(Rng::derive(cfg.seed, key("drop/" + tag)));
                dr = &drop_rng;
            }
            enc = encode_cell(state, cache.get(idx), dr, false);
            h = &enc.h;
        }
        const std::vector<double> out = state.task_head->forward(*h);
        double loss;
        std::vector<double> dout(out.size(), 0.0);
        if (identity) {
            loss = softmax_cross_entropy(out, class_idx[idx], grads ? &dout : nullptr, scale);
        } else {
            std::vector<double> tgt;
            target_row(idx, tgt);
            double sq = 0.0;
            for (int g = 0; g < n_genes; ++g) {
                const double e = out[g] - tgt[g];
                sq += e * e;
                if (grads) dout[g] = scale * 2.0 * e / n_genes;
            }
            loss = sq / n_genes;
        }
        if (grads) {
            std::vector<double> dh(h->size(), 0.0);
            state.task_head->backward(*h, dout, dh);
            if (!lp) encode_cell_backward(state, enc, dh, Matrix());
        }
        return loss;
    };

    for (int e = 1; e <= cfg.epoch_cap; ++e) {
        last_epoch = e;
        cur_epoch = e;
        std::vector<int> order = train_idx;
        {
            Rng shuffle_rng(Rng::derive(cfg.seed, key("shuffle/" + std::to_string(e))));
            shuffle_rng.shuffle(order);
        }
        EpochStats st;
        st.epoch = e;
        double seen = 0.0;
        for (long start = 0; start < n_train; start += cfg.batch_size) {
            const long stop = std::min(n_train, start + cfg.batch_size);
            const int bsz = static_cast<int>(stop - start);
            state.zero_grads();
            double batch_loss = 0.0;
            for (int i = 0; i < bsz; ++i) {
                batch_loss += cell_loss(order[start + i], 1.0 / bsz, true) / bsz;
            }
            ++step;
            const double lr =
                lr_schedule(step, total_steps, cfg.warmup_steps, cfg.learning_rate_peak);
            opt.step(state, lr, cfg.weight_decay);
            st.total += batch_loss * bsz;
            seen += bsz;
        }
        st.total /= seen;

        if (!val_idx.empty()) {
            double vtotal = 0.0;
            for (int idx : val_idx) vtotal += cell_loss(idx, 0.0, false);
            st.val = vtotal / static_cast<double>(val_idx.size());
        } else {
            st.val = st.total;
        }
        rec.epochs.push_back(st);
        if (watchdog.update(st.val, cfg.patience)) {
            reason = "patience";
            break;
        }
    }
    rec.stop_reason = reason;
    rec.stopped_epoch = last_epoch;
    if (record != nullptr) *record = rec;
}

std::vector<int> filtered_split(const ExpressionDataset& data, const std::string& split,
                                const std::string& holdout) {
    std::vector<int> idx;
    for (int i = 0; i < data.num_cells(); ++i) {
        if (data.splits[i] != split) continue;
        if (!holdout.empty() && data.type_labels[i] == holdout) continue;
        idx.push_back(i);
    }
    return idx;
}

}  // namespace

// ---------------------------------------------------------------- stages

ModelState init_model(const ExpressionDataset& data, const TrainConfig& cfg) {
    GeneVocabulary vocab = GeneVocabulary::from_genes(data.genes);
    const std::vector<int> train_idx = data.split_indices("train");
    if (train_idx.empty()) throw EmptyDataset("no train split to fit medians on");
    std::vector<std::vector<double>> rows;
    rows.reserve(train_idx.size());
    for (int idx : train_idx) rows.push_back(row_vector(data.x, idx));
    const std::vector<double> medians = compute_gene_medians(rows, data.num_genes());

    EncoderConfig cell;
    cell.vocab_size = vocab.size();
    cell.hidden_size = cfg.hidden_size;
    cell.num_layers = cfg.num_layers;
    cell.num_heads = cfg.num_heads;
    cell.ffn_size = cfg.ffn_size;
    cell.max_len = cfg.max_len;
    cell.dropout = cfg.dropout;

    EncoderConfig marker = cell;
    marker.num_layers = cfg.marker_num_layers;
    marker.max_len = cfg.marker_max_len;
    marker.dropout = 0.0;  // prototype encoding stays deterministic

    GMVEConfig gmve;
    gmve.num_components = cfg.gmve_components;
    gmve.latent_dim = cfg.gmve_latent_dim;

    return ModelState::create(cell, marker, gmve, vocab, medians, cfg.seed);
}

void pretrain(ModelState& state, const ExpressionDataset& data, const TrainConfig& cfg,
              RunRecord* record) {
    cfg.validate();
    if (state.stage != "untrained" && state.stage != "pt") {
        throw StageOrderViolation("pretrain requires an untrained or pt model, got " +
                                  state.stage);
    }
    const std::vector<int> train_idx = data.split_indices("train");
    const std::vector<int> val_idx = data.split_indices("val");
    if (train_idx.empty()) throw EmptyDataset("no train cells");
    apply_trainability(state, cfg, "pt");
    run_masked_stage(state, data, cfg, nullptr, {}, train_idx, val_idx, record, "pt");
    state.stage = "pt";
}

void post_pretrain(ModelState& state, const ExpressionDataset& data, const CellOntology& ontology,
                   const MarkerCatalog& catalog, const TrainConfig& cfg, RunRecord* record) {
    cfg.validate();
    if (state.stage != "pt") {
        throw StageOrderViolation("post_pretrain requires a pt model, got " + state.stage);
    }
    if (cfg.mode == "LP") throw InvalidConfig("LP mode applies to fine_tune only");
    const std::vector<int> train_idx = data.split_indices("train");
    const std::vector<int> val_idx = data.split_indices("val");
    if (train_idx.empty()) throw EmptyDataset("no train cells");

    PostPretrainSetup setup;
    setup.types = data.distinct_types();
    if (cfg.lambda1 != 0.0) {
        for (const std::string& t : setup.types) {
            try {
                setup.prototypes.push_back(organize_markers(catalog, ontology, t, cfg.prototype_k));
            } catch (const DomainError& e) {
                throw MissingPrototype("cannot build a prototype for " + t + ": " + e.what());
            }
        }
    }
    if (cfg.lambda2 != 0.0) setup.pairs = parent_lineage_pairs(ontology);

    std::map<std::string, int> pos;
    for (size_t i = 0; i < setup.types.size(); ++i) pos[setup.types[i]] = static_cast<int>(i);
    std::vector<int> type_idx_all(data.num_cells(), 0);
    for (int i = 0; i < data.num_cells(); ++i) type_idx_all[i] = pos.at(data.type_labels[i]);

    apply_trainability(state, cfg, "pp");
    run_masked_stage(state, data, cfg, &setup, type_idx_all, train_idx, val_idx, record, "pp");
    state.stage = "pp";
}

void fine_tune(ModelState& state, const ExpressionDataset& data, const TrainConfig& cfg,
               RunRecord* record) {
    cfg.validate();
    if (state.stage != "pt" && state.stage != "pp") {
        throw StageOrderViolation("fine_tune requires a pt or pp model, got " + state.stage);
    }
    std::vector<int> train_idx = filtered_split(data, "train", cfg.holdout_type);
    const std::vector<int> val_idx = filtered_split(data, "val", cfg.holdout_type);
    if (cfg.few_shot_n > 0) {
        train_idx = subsample_per_class(train_idx, data.type_labels, cfg.few_shot_n, cfg.seed);
    }
    if (train_idx.empty()) throw EmptyDataset("no train cells after filtering");

    if (cfg.task == "imputation") {
        state.task_head.reset();  // the masked-gene head is the task head here
        apply_trainability(state, cfg, "ft");
        run_masked_stage(state, data, cfg, nullptr, {}, train_idx, val_idx, record, "ft");
    } else if (cfg.task == "cell_identity") {
        state.label_space = data.distinct_types();
        std::map<std::string, int> pos;
        for (size_t i = 0; i < state.label_space.size(); ++i) {
            pos[state.label_space[i]] = static_cast<int>(i);
        }
        std::vector<int> class_idx(data.num_cells(), 0);
        for (int i = 0; i < data.num_cells(); ++i) class_idx[i] = pos.at(data.type_labels[i]);
        state.task_head.emplace();
        state.task_head->init("task", state.cell_cfg.hidden_size,
                              static_cast<int>(state.label_space.size()),
                              Rng::derive(cfg.seed, key("task_head")));
        apply_trainability(state, cfg, "ft");
        run_supervised_stage(state, data, cfg, class_idx, train_idx, val_idx, record);
    } else {  // perturbation
        if (!data.post.has_value()) {
            throw IncompatibleTask("perturbation task requires paired post-perturbation data");
        }
        state.task_head.emplace();
        state.task_head->init("task", state.cell_cfg.hidden_size, data.num_genes(),
                              Rng::derive(cfg.seed, key("task_head")));
        apply_trainability(state, cfg, "ft");
        run_supervised_stage(state, data, cfg, {}, train_idx, val_idx, record);
    }
    state.stage = "ft";
    state.task = cfg.task;
}

std::vector<int> subsample_per_class(const std::vector<int>& indices,
                                     const std::vector<std::string>& labels, int per_class,
                                     std::uint64_t seed) {
    if (per_class <= 0) return indices;
    std::map<std::string, std::vector<int>> by_class;
    for (int i : indices) by_class[labels[i]].push_back(i);
    std::vector<int> out;
    for (auto& [name, members] : by_class) {
        Rng rng(Rng::derive(seed, key("fewshot/" + name)));
        rng.shuffle(members);
        if (static_cast<int>(members.size()) > per_class) members.resize(per_class);
        out.insert(out.end(), members.begin(), members.end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace cellrefine
