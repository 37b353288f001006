#include "cellrefine/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cellrefine/errors.hpp"
#include "cellrefine/hash.hpp"

namespace cellrefine {

using nlohmann::json;

double softplus(double x) {
    if (x > 30.0) return x;
    return std::log1p(std::exp(x));
}

void softmax_inplace(std::vector<double>& v) {
    double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (auto& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (auto& x : v) x /= sum;
}

void EncoderConfig::validate() const {
    if (vocab_size <= 0 || hidden_size <= 0 || num_layers <= 0 || num_heads <= 0 ||
        max_len <= 0) {
        throw InvalidConfig("encoder config counts must be positive");
    }
    if (hidden_size % num_heads != 0) {
        throw InvalidConfig("hidden_size must be divisible by num_heads");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw InvalidConfig("encoder dropout outside [0, 1)");
}

void AdapterConfig::validate() const {
    if (rank < 1) throw InvalidConfig("adapter rank must be >= 1");
    if (alpha <= 0.0) throw InvalidConfig("adapter alpha must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw InvalidConfig("adapter dropout outside [0, 1)");
    if (!target_q && !target_k && !target_v) {
        throw InvalidConfig("adapter config targets no projection");
    }
}

// ------------------------------------------------------------------ helpers

static void init_weight(Param& p, std::uint64_t seed, double sd) {
    Rng rng(Rng::derive(seed, fnv1a64(p.name)));
    p.w.fill_normal(rng, sd);
}

static void add_col_sums(const Matrix& m, Matrix& out) {
    assert(out.rows == 1 && out.cols == m.cols);
    for (int i = 0; i < m.rows; ++i) {
        const double* r = m.row(i);
        for (int j = 0; j < m.cols; ++j) out.data[j] += r[j];
    }
}

static void layer_norm_forward(const Matrix& x, const Param& g, const Param& b, double eps,
                               Matrix& xhat, std::vector<double>& inv_std, Matrix& out) {
    const int t = x.rows, d = x.cols;
    xhat = Matrix(t, d);
    out = Matrix(t, d);
    inv_std.assign(t, 0.0);
    for (int i = 0; i < t; ++i) {
        const double* xi = x.row(i);
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xi[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xi[j] - mean;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        double* xh = xhat.row(i);
        double* oi = out.row(i);
        for (int j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mean) * is;
            oi[j] = g.w.data[j] * xh[j] + b.w.data[j];
        }
    }
}

static void layer_norm_backward(const Matrix& dy, const Matrix& xhat,
                                const std::vector<double>& inv_std, Param& g, Param& b,
                                Matrix& dx_acc) {
    const int t = dy.rows, d = dy.cols;
    for (int i = 0; i < t; ++i) {
        const double* dyi = dy.row(i);
        const double* xh = xhat.row(i);
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dxh = dyi[j] * g.w.data[j];
            m1 += dxh;
            m2 += dxh * xh[j];
            g.g.data[j] += dyi[j] * xh[j];
            b.g.data[j] += dyi[j];
        }
        m1 /= d;
        m2 /= d;
        double* dxi = dx_acc.row(i);
        const double is = inv_std[i];
        for (int j = 0; j < d; ++j) {
            const double dxh = dyi[j] * g.w.data[j];
            dxi[j] += is * (dxh - m1 - xh[j] * m2);
        }
    }
}

// inverted-dropout factor matrix: entries are 0 or 1/(1-p)
static Matrix dropout_mask(int rows, int cols, double p, Rng& rng) {
    Matrix m(rows, cols);
    const double keep = 1.0 / (1.0 - p);
    for (auto& v : m.data) v = (rng.uniform01() < p) ? 0.0 : keep;
    return m;
}

static void apply_mask(Matrix& x, const Matrix& mask) {
    for (size_t i = 0; i < x.data.size(); ++i) x.data[i] *= mask.data[i];
}

// ------------------------------------------------------------------ encoder

void AdapterSet::visit_params(const ParamVisitor& fn) {
    for (auto& layer : layers) {
        for (auto* proj : {&layer.q, &layer.k, &layer.v}) {
            if (proj->has_value()) {
                fn((*proj)->a);
                fn((*proj)->b);
            }
        }
    }
}

void TransformerEncoder::init(const std::string& name_prefix, const EncoderConfig& config,
                              std::uint64_t seed) {
    config.validate();
    cfg = config;
    prefix = name_prefix;
    const int d = cfg.hidden_size, f = cfg.ffn();

    tok_emb.init_shape(prefix + ".tok_emb", cfg.vocab_size, d, true);
    pos_emb.init_shape(prefix + ".pos_emb", cfg.max_len, d, true);
    init_weight(tok_emb, seed, 0.02);
    init_weight(pos_emb, seed, 0.02);

    layers.assign(cfg.num_layers, EncoderLayer{});
    for (int l = 0; l < cfg.num_layers; ++l) {
        auto& L = layers[l];
        const std::string lp = prefix + ".l" + std::to_string(l) + ".";
        L.ln1_g.init_shape(lp + "ln1.g", 1, d, false);
        L.ln1_b.init_shape(lp + "ln1.b", 1, d, false);
        L.ln1_g.w.data.assign(d, 1.0);
        L.wq.init_shape(lp + "attn.wq", d, d, true);
        L.bq.init_shape(lp + "attn.bq", 1, d, false);
        L.wk.init_shape(lp + "attn.wk", d, d, true);
        L.bk.init_shape(lp + "attn.bk", 1, d, false);
        L.wv.init_shape(lp + "attn.wv", d, d, true);
        L.bv.init_shape(lp + "attn.bv", 1, d, false);
        L.wo.init_shape(lp + "attn.wo", d, d, true);
        L.bo.init_shape(lp + "attn.bo", 1, d, false);
        L.ln2_g.init_shape(lp + "ln2.g", 1, d, false);
        L.ln2_b.init_shape(lp + "ln2.b", 1, d, false);
        L.ln2_g.w.data.assign(d, 1.0);
        L.w1.init_shape(lp + "ffn.w1", d, f, true);
        L.b1.init_shape(lp + "ffn.b1", 1, f, false);
        L.w2.init_shape(lp + "ffn.w2", f, d, true);
        L.b2.init_shape(lp + "ffn.b2", 1, d, false);
        for (auto* p : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w1, &L.w2}) init_weight(*p, seed, 0.02);
    }
    lnf_g.init_shape(prefix + ".lnf.g", 1, d, false);
    lnf_b.init_shape(prefix + ".lnf.b", 1, d, false);
    lnf_g.w.data.assign(d, 1.0);
}

void TransformerEncoder::visit_params(const ParamVisitor& fn) {
    fn(tok_emb);
    fn(pos_emb);
    for (auto& L : layers) {
        fn(L.ln1_g);
        fn(L.ln1_b);
        fn(L.wq);
        fn(L.bq);
        fn(L.wk);
        fn(L.bk);
        fn(L.wv);
        fn(L.bv);
        fn(L.wo);
        fn(L.bo);
        fn(L.ln2_g);
        fn(L.ln2_b);
        fn(L.w1);
        fn(L.b1);
        fn(L.w2);
        fn(L.b2);
    }
    fn(lnf_g);
    fn(lnf_b);
}

EncoderTape TransformerEncoder::forward(const std::vector<int>& tokens, int pad_id,
                                        Rng* dropout_rng, const AdapterSet* adapters) const {
    const int t = static_cast<int>(tokens.size());
    const int d = cfg.hidden_size, H = cfg.num_heads, hd = cfg.head_dim();
    if (t > cfg.max_len) {
        throw SequenceTooLong("length " + std::to_string(t) + " > max_len " +
                              std::to_string(cfg.max_len));
    }
    if (t == 0) throw AllZeroExpression("empty token sequence");

    EncoderTape tape;
    tape.tokens = tokens;
    tape.is_pad.assign(t, 0);
    for (int i = 0; i < t; ++i) {
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size) {
            throw UnknownGene("token id " + std::to_string(tokens[i]) + " out of range");
        }
        if (tokens[i] == pad_id) tape.is_pad[i] = 1;
    }
    tape.n_nonpad = t - static_cast<int>(std::count(tape.is_pad.begin(), tape.is_pad.end(), 1));
    if (tape.n_nonpad == 0) throw AllZeroExpression("sequence is all padding");

    tape.x0 = Matrix(t, d);
    for (int i = 0; i < t; ++i) {
        const double* te = tok_emb.w.row(tokens[i]);
        const double* pe = pos_emb.w.row(i);
        double* xi = tape.x0.row(i);
        for (int j = 0; j < d; ++j) xi[j] = te[j] + pe[j];
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const bool drop = dropout_rng != nullptr && cfg.dropout > 0.0;
    const bool adrop = dropout_rng != nullptr && adapters != nullptr && adapters->cfg.dropout > 0.0;

    Matrix x = tape.x0;
    tape.layers.resize(cfg.num_layers);
    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& L = layers[l];
        auto& T = tape.layers[l];
        T.x_in = x;

        layer_norm_forward(T.x_in, L.ln1_g, L.ln1_b, cfg.ln_eps, T.ln1_xhat, T.ln1_inv_std,
                           T.ln1_out);

        T.q = Matrix(t, d);
        T.k = Matrix(t, d);
        T.v = Matrix(t, d);
        matmul(T.ln1_out, L.wq.w, T.q);
        add_row_bias(T.q, L.bq.w);
        matmul(T.ln1_out, L.wk.w, T.k);
        add_row_bias(T.k, L.bk.w);
        matmul(T.ln1_out, L.wv.w, T.v);
        add_row_bias(T.v, L.bv.w);

        if (adapters != nullptr) {
            const auto& AL = adapters->layers[l];
            const double s = adapters->cfg.scaling();
            auto run_adapter = [&](const std::optional<ProjAdapter>& proj, Matrix& out,
                                   Matrix& u_cache, Matrix& mask_cache) {
                if (!proj.has_value()) return;
                Matrix in = T.ln1_out;
                if (adrop) {
                    mask_cache = dropout_mask(t, d, adapters->cfg.dropout, *dropout_rng);
                    apply_mask(in, mask_cache);
                }
                u_cache = Matrix(t, proj->a.w.cols);
                matmul(in, proj->a.w, u_cache);
                Matrix delta(t, d);
                matmul(u_cache, proj->b.w, delta);
                axpy(s, delta, out);
            };
            run_adapter(AL.q, T.q, T.lora_uq, T.lora_mask_q);
            run_adapter(AL.k, T.k, T.lora_uk, T.lora_mask_k);
            run_adapter(AL.v, T.v, T.lora_uv, T.lora_mask_v);
        }

        T.probs.assign(H, Matrix());
        T.ctx = Matrix(t, d);
        for (int a = 0; a < H; ++a) {
            const int c0 = a * hd;
            Matrix& P = T.probs[a];
            P = Matrix(t, t);
            for (int i = 0; i < t; ++i) {
                double* pi = P.row(i);
                double mx = -1e300;
                for (int j = 0; j < t; ++j) {
                    double s = tape.is_pad[j]
                                   ? -1e30
                                   : scale * dot(T.q.row(i) + c0, T.k.row(j) + c0, hd);
                    pi[j] = s;
                    if (s > mx) mx = s;
                }
                double sum = 0.0;
                for (int j = 0; j < t; ++j) {
                    pi[j] = std::exp(pi[j] - mx);
                    sum += pi[j];
                }
                for (int j = 0; j < t; ++j) pi[j] /= sum;
                double* ci = T.ctx.row(i);
                for (int j = 0; j < t; ++j) {
                    const double p = pi[j];
                    if (p == 0.0) continue;
                    const double* vj = T.v.row(j) + c0;
                    for (int c = 0; c < hd; ++c) ci[c0 + c] += p * vj[c];
                }
            }
        }

        Matrix attn_out(t, d);
        matmul(T.ctx, L.wo.w, attn_out);
        add_row_bias(attn_out, L.bo.w);
        if (drop) {
            T.drop_attn = dropout_mask(t, d, cfg.dropout, *dropout_rng);
            apply_mask(attn_out, T.drop_attn);
        }
        T.x_mid = T.x_in;
        axpy(1.0, attn_out, T.x_mid);

        layer_norm_forward(T.x_mid, L.ln2_g, L.ln2_b, cfg.ln_eps, T.ln2_xhat, T.ln2_inv_std,
                           T.ln2_out);

        Matrix pre1(t, cfg.ffn());
        matmul(T.ln2_out, L.w1.w, pre1);
        add_row_bias(pre1, L.b1.w);
        T.h1 = pre1;
        for (auto& vv : T.h1.data) vv = vv > 0.0 ? vv : 0.0;

        Matrix ffn_out(t, d);
        matmul(T.h1, L.w2.w, ffn_out);
        add_row_bias(ffn_out, L.b2.w);
        if (drop) {
            T.drop_ffn = dropout_mask(t, d, cfg.dropout, *dropout_rng);
            apply_mask(ffn_out, T.drop_ffn);
        }

        x = T.x_mid;
        axpy(1.0, ffn_out, x);
    }

    layer_norm_forward(x, lnf_g, lnf_b, cfg.ln_eps, tape.final_xhat, tape.final_inv_std, tape.y);
    return tape;
}

void TransformerEncoder::backward(const EncoderTape& tape, const Matrix& dy,
                                  AdapterSet* adapters) {
    const int t = static_cast<int>(tape.tokens.size());
    const int d = cfg.hidden_size, H = cfg.num_heads, hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    // final layer norm; its input was the last layer's output x
    Matrix dx(t, d);
    {
        // reconstruct nothing: xhat + inv_std suffice
        Matrix dyc = dy;
        layer_norm_backward(dyc, tape.final_xhat, tape.final_inv_std, lnf_g, lnf_b, dx);
    }

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        auto& L = layers[l];
        const auto& T = tape.layers[l];

        // ffn block: x_out = x_mid + W2(relu(W1 ln2(x_mid) + b1)) + b2
        Matrix dh2 = dx;  // gradient on ffn_out (and residual continues in dx)
        if (!T.drop_ffn.empty()) apply_mask(dh2, T.drop_ffn);
        matmul_tn_acc(T.h1, dh2, L.w2.g);
        add_col_sums(dh2, L.b2.g);
        Matrix dh1(t, cfg.ffn());
        matmul_nt(dh2, L.w2.w, dh1);
        for (size_t i = 0; i < dh1.data.size(); ++i) {
            if (T.h1.data[i] <= 0.0) dh1.data[i] = 0.0;
        }
        matmul_tn_acc(T.ln2_out, dh1, L.w1.g);
        add_col_sums(dh1, L.b1.g);
        Matrix dln2(t, d);
        matmul_nt(dh1, L.w1.w, dln2);

        Matrix dx_mid(t, d);
        layer_norm_backward(dln2, T.ln2_xhat, T.ln2_inv_std, L.ln2_g, L.ln2_b, dx_mid);
        axpy(1.0, dx, dx_mid);  // residual path

        // attention block: x_mid = x_in + Wo ctx + bo
        Matrix dattn = dx_mid;  // gradient on attn_out
        if (!T.drop_attn.empty()) apply_mask(dattn, T.drop_attn);
        matmul_tn_acc(T.ctx, dattn, L.wo.g);
        add_col_sums(dattn, L.bo.g);
        Matrix dctx(t, d);
        matmul_nt(dattn, L.wo.w, dctx);

        Matrix dq(t, d), dk(t, d), dv(t, d);
        for (int a = 0; a < H; ++a) {
            const int c0 = a * hd;
            const Matrix& P = T.probs[a];
            for (int i = 0; i < t; ++i) {
                const double* pi = P.row(i);
                const double* dci = dctx.row(i);
                // dP and the softmax Jacobian, fused row-wise
                double rowdot = 0.0;
                std::vector<double> dp(t);
                for (int j = 0; j < t; ++j) {
                    if (pi[j] == 0.0) {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = dot(dci + c0, T.v.row(j) + c0, hd);
                    rowdot += dp[j] * pi[j];
                }
                for (int j = 0; j < t; ++j) {
                    const double p = pi[j];
                    if (p == 0.0) continue;
                    const double ds = p * (dp[j] - rowdot);
                    // dV
                    double* dvj = dv.row(j) + c0;
                    const double* dcc = dci + c0;
                    for (int c = 0; c < hd; ++c) dvj[c] += p * dcc[c];
                    // dQ, dK
                    double* dqi = dq.row(i) + c0;
                    const double* kj = T.k.row(j) + c0;
                    double* dkj = dk.row(j) + c0;
                    const double* qi = T.q.row(i) + c0;
                    const double sds = scale * ds;
                    for (int c = 0; c < hd; ++c) {
                        dqi[c] += sds * kj[c];
                        dkj[c] += sds * qi[c];
                    }
                }
            }
        }

        Matrix dln1(t, d);
        auto back_proj = [&](const Matrix& dproj, Param& w, Param& bias) {
            matmul_tn_acc(T.ln1_out, dproj, w.g);
            add_col_sums(dproj, bias.g);
            matmul_nt_acc(dproj, w.w, dln1);
        };
        back_proj(dq, L.wq, L.bq);
        back_proj(dk, L.wk, L.bk);
        back_proj(dv, L.wv, L.bv);

        if (adapters != nullptr) {
            auto& AL = adapters->layers[l];
            const double s = adapters->cfg.scaling();
            auto back_adapter = [&](std::optional<ProjAdapter>& proj, const Matrix& dproj,
                                    const Matrix& u, const Matrix& mask) {
                if (!proj.has_value()) return;
                const int r = proj->a.w.cols;
                Matrix db(r, d);
                matmul_tn_acc(u, dproj, db);
                axpy(s, db, proj->b.g);
                Matrix du(t, r);
                matmul_nt(dproj, proj->b.w, du);
                for (auto& vv : du.data) vv *= s;
                if (mask.empty()) {
                    matmul_tn_acc(T.ln1_out, du, proj->a.g);
                    matmul_nt_acc(du, proj->a.w, dln1);
                } else {
                    Matrix in = T.ln1_out;
                    apply_mask(in, mask);
                    matmul_tn_acc(in, du, proj->a.g);
                    Matrix din(t, d);
                    matmul_nt(du, proj->a.w, din);
                    apply_mask(din, mask);
                    axpy(1.0, din, dln1);
                }
            };
            back_adapter(AL.q, dq, T.lora_uq, T.lora_mask_q);
            back_adapter(AL.k, dk, T.lora_uk, T.lora_mask_k);
            back_adapter(AL.v, dv, T.lora_uv, T.lora_mask_v);
        }

        Matrix dx_in(t, d);
        layer_norm_backward(dln1, T.ln1_xhat, T.ln1_inv_std, L.ln1_g, L.ln1_b, dx_in);
        axpy(1.0, dx_mid, dx_in);  // residual path
        dx = dx_in;
    }

    for (int i = 0; i < t; ++i) {
        double* dtok = tok_emb.g.row(tape.tokens[i]);
        double* dpos = pos_emb.g.row(i);
        const double* dxi = dx.row(i);
        for (int j = 0; j < d; ++j) {
            dtok[j] += dxi[j];
            dpos[j] += dxi[j];
        }
    }
}

// ------------------------------------------------------------------ heads

void LinearHead::init(const std::string& name_prefix, int in, int out, std::uint64_t seed) {
    w.init_shape(name_prefix + ".w", in, out, true);
    b.init_shape(name_prefix + ".b", 1, out, false);
    init_weight(w, seed, 0.02);
}

void LinearHead::visit_params(const ParamVisitor& fn) {
    fn(w);
    fn(b);
}

std::vector<double> LinearHead::forward(const std::vector<double>& h) const {
    const int in = w.w.rows, out = w.w.cols;
    if (static_cast<int>(h.size()) != in) throw LengthMismatch("linear head input size");
    std::vector<double> y(b.w.data.begin(), b.w.data.end());
    for (int i = 0; i < in; ++i) {
        const double hi = h[i];
        if (hi == 0.0) continue;
        const double* wr = w.w.row(i);
        for (int j = 0; j < out; ++j) y[j] += hi * wr[j];
    }
    return y;
}

void LinearHead::backward(const std::vector<double>& h, const std::vector<double>& dout,
                          std::vector<double>& dh) {
    const int in = w.w.rows, out = w.w.cols;
    for (int j = 0; j < out; ++j) b.g.data[j] += dout[j];
    for (int i = 0; i < in; ++i) {
        double* gr = w.g.row(i);
        const double* wr = w.w.row(i);
        double acc = 0.0;
        for (int j = 0; j < out; ++j) {
            gr[j] += h[i] * dout[j];
            acc += wr[j] * dout[j];
        }
        dh[i] += acc;
    }
}

void GMVEHead::init(int hidden_size, const GMVEConfig& config, std::uint64_t seed) {
    cfg = config;
    hidden = hidden_size;
    latent = cfg.resolved_latent(hidden_size);
    if (cfg.num_components < 1) throw InvalidConfig("GMVE needs >= 1 component");
    const int L = cfg.num_components, dz = latent;
    w_pi.init_shape("gmve.w_pi", hidden, L, true);
    b_pi.init_shape("gmve.b_pi", 1, L, false);
    w_mu.init_shape("gmve.w_mu", hidden, L * dz, true);
    b_mu.init_shape("gmve.b_mu", 1, L * dz, false);
    w_var.init_shape("gmve.w_var", hidden, L * dz, true);
    b_var.init_shape("gmve.b_var", 1, L * dz, false);
    prior_logits.init_shape("gmve.prior_logits", 1, L, false);
    prior_mu.init_shape("gmve.prior_mu", L, dz, true);
    prior_var_raw.init_shape("gmve.prior_var_raw", L, dz, false);
    init_weight(w_pi, seed, 0.02);
    init_weight(w_mu, seed, 0.02);
    init_weight(w_var, seed, 0.02);
    init_weight(prior_mu, seed, 0.5);
}

void GMVEHead::visit_params(const ParamVisitor& fn) {
    fn(w_pi);
    fn(b_pi);
    fn(w_mu);
    fn(b_mu);
    fn(w_var);
    fn(b_var);
    fn(prior_logits);
    fn(prior_mu);
    fn(prior_var_raw);
}

GmvePosterior gmve_posterior(const GMVEHead& head, const std::vector<double>& h) {
    if (static_cast<int>(h.size()) != head.hidden) {
        throw LengthMismatch("GMVE input size " + std::to_string(h.size()));
    }
    const int L = head.cfg.num_components, dz = head.latent;
    GmvePosterior post;
    post.logits.assign(head.b_pi.w.data.begin(), head.b_pi.w.data.end());
    post.mu = Matrix(L, dz);
    post.var_raw = Matrix(L, dz);
    std::copy(head.b_mu.w.data.begin(), head.b_mu.w.data.end(), post.mu.data.begin());
    std::copy(head.b_var.w.data.begin(), head.b_var.w.data.end(), post.var_raw.data.begin());
    for (int i = 0; i < head.hidden; ++i) {
        const double hi = h[i];
        if (hi == 0.0) continue;
        const double* wp = head.w_pi.w.row(i);
        for (int l = 0; l < L; ++l) post.logits[l] += hi * wp[l];
        const double* wm = head.w_mu.w.row(i);
        const double* wv = head.w_var.w.row(i);
        for (int j = 0; j < L * dz; ++j) {
            post.mu.data[j] += hi * wm[j];
            post.var_raw.data[j] += hi * wv[j];
        }
    }
    post.pi = post.logits;
    softmax_inplace(post.pi);
    post.var = post.var_raw;
    for (auto& v : post.var.data) v = softplus(v);
    return post;
}

std::vector<double> gmve_sample(const GmvePosterior& post, Rng& rng, int* component) {
    const int L = post.mu.rows, dz = post.mu.cols;
    const double u = rng.uniform01();
    int c = L - 1;
    double acc = 0.0;
    for (int l = 0; l < L; ++l) {
        acc += post.pi[l];
        if (u < acc) {
            c = l;
            break;
        }
    }
    if (component != nullptr) *component = c;
    std::vector<double> z(dz);
    for (int k = 0; k < dz; ++k) {
        z[k] = post.mu.at(c, k) + std::sqrt(post.var.at(c, k)) * rng.normal();
    }
    return z;
}

// ------------------------------------------------------------------ state

ModelState ModelState::create(const EncoderConfig& cell, const EncoderConfig& marker,
                              const GMVEConfig& gmve_config, const GeneVocabulary& vocab,
                              const std::vector<double>& medians, std::uint64_t seed) {
    if (marker.hidden_size != cell.hidden_size) {
        throw InvalidConfig("marker encoder hidden size must match cell encoder");
    }
    if (static_cast<int>(medians.size()) != vocab.n_genes()) {
        throw LengthMismatch("median vector length does not match vocabulary");
    }
    ModelState s;
    s.cell_cfg = cell;
    s.marker_cfg = marker;
    if (s.cell_cfg.vocab_size == 0) s.cell_cfg.vocab_size = vocab.size();
    if (s.marker_cfg.vocab_size == 0) s.marker_cfg.vocab_size = vocab.size();
    if (s.cell_cfg.vocab_size != vocab.size() || s.marker_cfg.vocab_size != vocab.size()) {
        throw InvalidConfig("encoder vocab_size does not match vocabulary");
    }
    s.gmve_cfg = gmve_config;
    s.init_seed = seed;
    s.vocab = vocab;
    s.medians = medians;
    s.cell_encoder.init("cell", s.cell_cfg, seed);
    s.marker_encoder.init("marker", s.marker_cfg, seed);
    s.gmve.init(cell.hidden_size, gmve_config, seed);
    s.mlm_head.init("mlm", cell.hidden_size, s.cell_cfg.vocab_size, seed);
    return s;
}

void ModelState::visit_params(const ParamVisitor& fn) {
    cell_encoder.visit_params(fn);
    marker_encoder.visit_params(fn);
    gmve.visit_params(fn);
    mlm_head.visit_params(fn);
    if (task_head.has_value()) task_head->visit_params(fn);
    if (adapters.has_value()) adapters->visit_params(fn);
}

void ModelState::zero_grads() {
    visit_params([](Param& p) { p.g.zero(); });
}

long ModelState::param_count() {
    long n = 0;
    visit_params([&](Param& p) { n += static_cast<long>(p.w.size()); });
    return n;
}

long ModelState::trainable_param_count() {
    long n = 0;
    visit_params([&](Param& p) {
        if (p.trainable) n += static_cast<long>(p.w.size());
    });
    return n;
}

// ------------------------------------------------------------------ encode

CellEncoding encode_cell(const ModelState& state, const TokenSequence& seq, Rng* dropout_rng,
                         bool want_logits) {
    CellEncoding enc;
    const AdapterSet* ad = state.adapters.has_value() ? &*state.adapters : nullptr;
    enc.tape = state.cell_encoder.forward(seq.tokens, state.vocab.pad_id(), dropout_rng, ad);
    const int t = static_cast<int>(seq.tokens.size());
    const int d = state.cell_cfg.hidden_size;
    enc.h.assign(d, 0.0);
    for (int i = 0; i < t; ++i) {
        if (enc.tape.is_pad[i]) continue;
        const double* yi = enc.tape.y.row(i);
        for (int j = 0; j < d; ++j) enc.h[j] += yi[j];
    }
    for (auto& v : enc.h) v /= enc.tape.n_nonpad;
    if (want_logits) {
        enc.logits = Matrix(t, state.cell_cfg.vocab_size);
        matmul(enc.tape.y, state.mlm_head.w.w, enc.logits);
        add_row_bias(enc.logits, state.mlm_head.b.w);
    }
    return enc;
}

void encode_cell_backward(ModelState& state, const CellEncoding& enc,
                          const std::vector<double>& dh, const Matrix& dlogits) {
    const int t = static_cast<int>(enc.tape.tokens.size());
    const int d = state.cell_cfg.hidden_size;
    Matrix dy(t, d);
    if (!dh.empty()) {
        const double inv = 1.0 / enc.tape.n_nonpad;
        for (int i = 0; i < t; ++i) {
            if (enc.tape.is_pad[i]) continue;
            double* dyi = dy.row(i);
            for (int j = 0; j < d; ++j) dyi[j] += dh[j] * inv;
        }
    }
    if (!dlogits.empty()) {
        matmul_tn_acc(enc.tape.y, dlogits, state.mlm_head.w.g);
        add_col_sums(dlogits, state.mlm_head.b.g);
        matmul_nt_acc(dlogits, state.mlm_head.w.w, dy);
    }
    AdapterSet* ad = state.adapters.has_value() ? &*state.adapters : nullptr;
    state.cell_encoder.backward(enc.tape, dy, ad);
}

ProtoEncoding encode_prototype_full(const ModelState& state, const Prototype& proto,
                                    Rng* dropout_rng) {
    std::vector<int> tokens;
    tokens.reserve(proto.genes.size());
    for (const auto& g : proto.genes) tokens.push_back(state.vocab.id_of(g));
    ProtoEncoding enc;
    enc.tape = state.marker_encoder.forward(tokens, state.vocab.pad_id(), dropout_rng, nullptr);
    const int t = static_cast<int>(tokens.size());
    const int d = state.marker_cfg.hidden_size;
    enc.z.assign(d, 0.0);
    for (int i = 0; i < t; ++i) {
        const double* yi = enc.tape.y.row(i);
        for (int j = 0; j < d; ++j) enc.z[j] += yi[j];
    }
    for (auto& v : enc.z) v /= t;
    return enc;
}

std::vector<double> encode_prototype(const ModelState& state, const Prototype& proto) {
    return encode_prototype_full(state, proto).z;
}

void encode_prototype_backward(ModelState& state, const ProtoEncoding& enc,
                               const std::vector<double>& dz) {
    const int t = static_cast<int>(enc.tape.tokens.size());
    const int d = state.marker_cfg.hidden_size;
    Matrix dy(t, d);
    const double inv = 1.0 / t;
    for (int i = 0; i < t; ++i) {
        double* dyi = dy.row(i);
        for (int j = 0; j < d; ++j) dyi[j] = dz[j] * inv;
    }
    state.marker_encoder.backward(enc.tape, dy, nullptr);
}

// ------------------------------------------------------------------ adapters

void attach_adapters(ModelState& state, const AdapterConfig& cfg) {
    cfg.validate();
    if (state.adapters.has_value()) {
        throw AdaptersAlreadyAttached("model already carries low-rank adapters");
    }
    AdapterSet set;
    set.cfg = cfg;
    set.layers.resize(state.cell_cfg.num_layers);
    const int d = state.cell_cfg.hidden_size;
    for (int l = 0; l < state.cell_cfg.num_layers; ++l) {
        const std::string lp = "lora.l" + std::to_string(l) + ".";
        auto make = [&](const char* tag) {
            ProjAdapter pa;
            pa.a.init_shape(lp + tag + std::string(".a"), d, cfg.rank, true);
            pa.b.init_shape(lp + tag + std::string(".b"), cfg.rank, d, true);
            init_weight(pa.a, state.init_seed, 0.02);
            // pa.b stays zero so attachment is output-preserving
            return pa;
        };
        if (cfg.target_q) set.layers[l].q = make("q");
        if (cfg.target_k) set.layers[l].k = make("k");
        if (cfg.target_v) set.layers[l].v = make("v");
    }
    state.adapter_cfg = cfg;
    state.adapters = std::move(set);
    state.cell_encoder.visit_params([](Param& p) { p.trainable = false; });
    state.adapters->visit_params([](Param& p) { p.trainable = true; });
}

// ------------------------------------------------------------------ checkpoint

static json encoder_cfg_json(const EncoderConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"hidden_size", c.hidden_size},
                {"num_layers", c.num_layers}, {"num_heads", c.num_heads},
                {"ffn_size", c.ffn_size},     {"max_len", c.max_len},
                {"dropout", c.dropout},       {"ln_eps", c.ln_eps}};
}

static EncoderConfig encoder_cfg_from_json(const json& j) {
    EncoderConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.hidden_size = j.at("hidden_size").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.ffn_size = j.at("ffn_size").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.ln_eps = j.at("ln_eps").get<double>();
    return c;
}

static const char kCheckpointMagic[8] = {'C', 'R', 'C', 'K', 'P', 'T', '0', '1'};

void save_checkpoint(ModelState& state, const std::string& path) {
    json header;
    header["format"] = 1;
    header["stage"] = state.stage;
    header["task"] = state.task;
    header["init_seed"] = state.init_seed;
    header["cell_cfg"] = encoder_cfg_json(state.cell_cfg);
    header["marker_cfg"] = encoder_cfg_json(state.marker_cfg);
    header["gmve_cfg"] = json{{"num_components", state.gmve_cfg.num_components},
                              {"latent_dim", state.gmve_cfg.latent_dim}};
    header["has_adapters"] = state.adapters.has_value();
    if (state.adapters.has_value()) {
        const auto& a = state.adapter_cfg;
        header["adapter_cfg"] = json{{"rank", a.rank},         {"alpha", a.alpha},
                                     {"dropout", a.dropout},   {"target_q", a.target_q},
                                     {"target_k", a.target_k}, {"target_v", a.target_v}};
    }
    header["has_task_head"] = state.task_head.has_value();
    if (state.task_head.has_value()) header["task_head_out"] = state.task_head->w.w.cols;
    header["vocab"] = state.vocab.genes;
    header["medians"] = state.medians;
    header["label_space"] = state.label_space;

    json params = json::array();
    state.visit_params([&](Param& p) {
        params.push_back(json{{"name", p.name}, {"rows", p.w.rows}, {"cols", p.w.cols}});
    });
    header["params"] = params;

    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, 8);
    const std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    state.visit_params([&](Param& p) {
        out.write(reinterpret_cast<const char*>(p.w.data.data()),
                  static_cast<std::streamsize>(p.w.size() * sizeof(double)));
    });
    if (!out) throw IoError("short write to checkpoint: " + path);
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw IoError("not a checkpoint file: " + path);
    }
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("truncated checkpoint header: " + path);
    json header = json::parse(hs);

    const EncoderConfig cell = encoder_cfg_from_json(header.at("cell_cfg"));
    const EncoderConfig marker = encoder_cfg_from_json(header.at("marker_cfg"));
    GMVEConfig gcfg;
    gcfg.num_components = header.at("gmve_cfg").at("num_components").get<int>();
    gcfg.latent_dim = header.at("gmve_cfg").at("latent_dim").get<int>();
    const auto genes = header.at("vocab").get<std::vector<std::string>>();
    const auto medians = header.at("medians").get<std::vector<double>>();

    ModelState s = ModelState::create(cell, marker, gcfg, GeneVocabulary::from_genes(genes),
                                      medians, header.at("init_seed").get<std::uint64_t>());
    s.stage = header.at("stage").get<std::string>();
    s.task = header.at("task").get<std::string>();
    s.label_space = header.at("label_space").get<std::vector<std::string>>();

    if (header.at("has_adapters").get<bool>()) {
        const auto& aj = header.at("adapter_cfg");
        AdapterConfig acfg;
        acfg.rank = aj.at("rank").get<int>();
        acfg.alpha = aj.at("alpha").get<double>();
        acfg.dropout = aj.at("dropout").get<double>();
        acfg.target_q = aj.at("target_q").get<bool>();
        acfg.target_k = aj.at("target_k").get<bool>();
        acfg.target_v = aj.at("target_v").get<bool>();
        attach_adapters(s, acfg);
    }
    if (header.at("has_task_head").get<bool>()) {
        s.task_head.emplace();
        s.task_head->init("task", cell.hidden_size, header.at("task_head_out").get<int>(),
                          s.init_seed);
    }

    size_t idx = 0;
    const auto& plist = header.at("params");
    bool corrupt = false;
    s.visit_params([&](Param& p) {
        if (corrupt || idx >= plist.size()) {
            corrupt = true;
            return;
        }
        const auto& pj = plist[idx++];
        if (pj.at("name").get<std::string>() != p.name || pj.at("rows").get<int>() != p.w.rows ||
            pj.at("cols").get<int>() != p.w.cols) {
            corrupt = true;
            return;
        }
        in.read(reinterpret_cast<char*>(p.w.data.data()),
                static_cast<std::streamsize>(p.w.size() * sizeof(double)));
        if (!in) corrupt = true;
    });
    if (corrupt || idx != plist.size()) {
        throw IoError("checkpoint parameter layout mismatch: " + path);
    }
    return s;
}

}  // namespace cellrefine
