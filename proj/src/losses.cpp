#include "cellrefine/losses.hpp"

#include <algorithm>
#include <cmath>

#include "cellrefine/errors.hpp"
#include "cellrefine/rng.hpp"

namespace cellrefine {

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw LengthMismatch("cosine of unequal-length vectors");
    const int n = static_cast<int>(a.size());
    const double na = norm2(a.data(), n);
    const double nb = norm2(b.data(), n);
    if (na == 0.0 || nb == 0.0) throw ZeroVector("cosine of zero-norm vector");
    return dot(a.data(), b.data(), n) / (na * nb);
}

void cosine_backward(const std::vector<double>& a, const std::vector<double>& b, double dcos,
                     std::vector<double>& da, std::vector<double>& db) {
    const int n = static_cast<int>(a.size());
    const double na = norm2(a.data(), n);
    const double nb = norm2(b.data(), n);
    const double ab = dot(a.data(), b.data(), n);
    const double inv = 1.0 / (na * nb);
    const double ca = ab / (na * na * na * nb);
    const double cb = ab / (na * nb * nb * nb);
    for (int i = 0; i < n; ++i) {
        da[i] += dcos * (b[i] * inv - a[i] * ca);
        db[i] += dcos * (a[i] * inv - b[i] * cb);
    }
}

// ---------------------------------------------------------------- prototype

static void proto_check(const std::vector<std::vector<double>>& cells,
                        const std::vector<int>& true_types,
                        const std::vector<std::vector<double>>& prototypes) {
    if (cells.size() != true_types.size()) {
        throw LengthMismatch("one true type per cell required");
    }
    if (prototypes.empty()) throw MissingPrototype("no prototype embeddings");
    for (int y : true_types) {
        if (y < 0 || y >= static_cast<int>(prototypes.size())) {
            throw MissingPrototype("true type index " + std::to_string(y) +
                                   " has no prototype");
        }
    }
}

double prototype_loss(const std::vector<std::vector<double>>& cells,
                      const std::vector<int>& true_types,
                      const std::vector<std::vector<double>>& prototypes, double temperature) {
    proto_check(cells, true_types, prototypes);
    const int l = static_cast<int>(prototypes.size());
    double loss = 0.0;
    for (size_t i = 0; i < cells.size(); ++i) {
        std::vector<double> s(l);
        for (int j = 0; j < l; ++j) {
            s[j] = cosine_similarity(cells[i], prototypes[j]) / temperature;
        }
        loss += softmax_cross_entropy(s, true_types[i]);
    }
    return loss;
}

double prototype_loss_grad(const std::vector<std::vector<double>>& cells,
                           const std::vector<int>& true_types,
                           const std::vector<std::vector<double>>& prototypes, double scale,
                           std::vector<std::vector<double>>& dcells,
                           std::vector<std::vector<double>>& dprotos, double temperature) {
    proto_check(cells, true_types, prototypes);
    const int l = static_cast<int>(prototypes.size());
    double loss = 0.0;
    for (size_t i = 0; i < cells.size(); ++i) {
        std::vector<double> s(l);
        for (int j = 0; j < l; ++j) {
            s[j] = cosine_similarity(cells[i], prototypes[j]) / temperature;
        }
        std::vector<double> ds(l, 0.0);
        loss += softmax_cross_entropy(s, true_types[i], &ds, 1.0);
        for (int j = 0; j < l; ++j) {
            const double d = ds[j] * scale / temperature;
            if (d == 0.0) continue;
            cosine_backward(cells[i], prototypes[j], d, dcells[i], dprotos[j]);
        }
    }
    return loss;
}

// ---------------------------------------------------------------- lineage

static std::vector<std::pair<std::string, std::string>> present_pairs(
    const std::map<std::string, std::vector<double>>& type_means,
    const std::set<std::pair<std::string, std::string>>& pairs) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& pr : pairs) {
        if (type_means.count(pr.first) && type_means.count(pr.second)) out.push_back(pr);
    }
    return out;
}

double lineage_loss(const std::map<std::string, std::vector<double>>& type_means,
                    const std::set<std::pair<std::string, std::string>>& pairs) {
    const auto rb = present_pairs(type_means, pairs);
    if (rb.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& [a, b] : rb) {
        sum += cosine_similarity(type_means.at(a), type_means.at(b));
    }
    return sum / static_cast<double>(rb.size());
}

double lineage_loss_grad(const std::map<std::string, std::vector<double>>& type_means,
                         const std::set<std::pair<std::string, std::string>>& pairs, double scale,
                         std::map<std::string, std::vector<double>>& dmeans) {
    const auto rb = present_pairs(type_means, pairs);
    if (rb.empty()) return 0.0;
    const double w = scale / static_cast<double>(rb.size());
    double sum = 0.0;
    for (const auto& [a, b] : rb) {
        const auto& va = type_means.at(a);
        const auto& vb = type_means.at(b);
        sum += cosine_similarity(va, vb);
        auto& da = dmeans[a];
        auto& db = dmeans[b];
        if (da.empty()) da.assign(va.size(), 0.0);
        if (db.empty()) db.assign(vb.size(), 0.0);
        cosine_backward(va, vb, w, da, db);
    }
    return sum / static_cast<double>(rb.size());
}

// ---------------------------------------------------------------- GMVE KL

namespace {

struct MixtureDensity {
    double logp = 0.0;
    std::vector<double> resp;      // responsibilities at z
    std::vector<double> comp_log;  // per-component log pi_l + log N_l
};

MixtureDensity mixture_log_density(const std::vector<double>& log_weights, const Matrix& mu,
                                   const Matrix& var, const std::vector<double>& z) {
    const int L = mu.rows, dz = mu.cols;
    MixtureDensity out;
    out.comp_log.resize(L);
    constexpr double kLog2Pi = 1.8378770664093453;
    for (int l = 0; l < L; ++l) {
        double ll = log_weights[l];
        const double* m = mu.row(l);
        const double* v = var.row(l);
        for (int k = 0; k < dz; ++k) {
            const double c = z[k] - m[k];
            ll -= 0.5 * (kLog2Pi + std::log(v[k]) + c * c / v[k]);
        }
        out.comp_log[l] = ll;
    }
    const double mx = *std::max_element(out.comp_log.begin(), out.comp_log.end());
    double sum = 0.0;
    out.resp.resize(L);
    for (int l = 0; l < L; ++l) {
        out.resp[l] = std::exp(out.comp_log[l] - mx);
        sum += out.resp[l];
    }
    out.logp = mx + std::log(sum);
    for (int l = 0; l < L; ++l) out.resp[l] /= sum;
    return out;
}

std::vector<double> log_simplex(const std::vector<double>& logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double x : logits) sum += std::exp(x - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// shared estimator; when grad != nullptr, also accumulates scaled gradients
double gmve_kl_impl(const GMVEHead& head, const std::vector<double>& h, int num_samples,
                    std::uint64_t seed, GMVEHead* grad, double scale, std::vector<double>* dh) {
    if (num_samples < 1) throw InvalidConfig("gmve_kl needs num_samples >= 1");
    const int L = head.cfg.num_components, dz = head.latent;
    const GmvePosterior post = gmve_posterior(head, h);

    std::vector<double> prior_logw = log_simplex(head.prior_logits.w.data);
    std::vector<double> prior_p(L);
    for (int l = 0; l < L; ++l) prior_p[l] = std::exp(prior_logw[l]);
    Matrix prior_var(L, dz);
    for (int l = 0; l < L; ++l) {
        for (int k = 0; k < dz; ++k) {
            prior_var.at(l, k) = softplus(head.prior_var_raw.w.at(l, k));
        }
    }
    std::vector<double> post_logw(L);
    for (int l = 0; l < L; ++l) post_logw[l] = std::log(post.pi[l]);

    // gradient accumulators in posterior-parameter space
    std::vector<double> da_pi(L, 0.0);
    Matrix dmu(L, dz), dvraw(L, dz);
    std::vector<double> dap(L, 0.0);
    Matrix dM(L, dz), dVraw(L, dz);

    Rng rng(seed);
    double value = 0.0;
    std::vector<double> eps(dz);
    for (int s = 0; s < num_samples; ++s) {
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
        std::vector<double> z(dz);
        for (int k = 0; k < dz; ++k) {
            eps[k] = rng.normal();
            z[k] = post.mu.at(c, k) + std::sqrt(post.var.at(c, k)) * eps[k];
        }
        const MixtureDensity q = mixture_log_density(post_logw, post.mu, post.var, z);
        const MixtureDensity p = mixture_log_density(prior_logw, head.prior_mu.w, prior_var, z);
        value += q.logp - p.logp;
        if (grad == nullptr) continue;

        // d(f)/dz, needed for the pathwise route through the chosen component
        std::vector<double> dfdz(dz, 0.0);
        for (int l = 0; l < L; ++l) {
            const double rq = q.resp[l];
            const double rp = p.resp[l];
            for (int k = 0; k < dz; ++k) {
                dfdz[k] += rq * (post.mu.at(l, k) - z[k]) / post.var.at(l, k);
                dfdz[k] -= rp * (head.prior_mu.w.at(l, k) - z[k]) / prior_var.at(l, k);
            }
        }
        for (int l = 0; l < L; ++l) {
            da_pi[l] += q.resp[l] - post.pi[l];
            dap[l] += prior_p[l] - p.resp[l];
            for (int k = 0; k < dz; ++k) {
                const double cq = z[k] - post.mu.at(l, k);
                const double vq = post.var.at(l, k);
                dmu.at(l, k) += q.resp[l] * cq / vq;
                dvraw.at(l, k) += q.resp[l] * (-0.5 / vq + 0.5 * cq * cq / (vq * vq)) *
                                  sigmoid(post.var_raw.at(l, k));
                const double cp = z[k] - head.prior_mu.w.at(l, k);
                const double vp = prior_var.at(l, k);
                dM.at(l, k) -= p.resp[l] * cp / vp;
                dVraw.at(l, k) -= p.resp[l] * (-0.5 / vp + 0.5 * cp * cp / (vp * vp)) *
                                  sigmoid(head.prior_var_raw.w.at(l, k));
            }
        }
        for (int k = 0; k < dz; ++k) {
            dmu.at(c, k) += dfdz[k];
            dvraw.at(c, k) += dfdz[k] * eps[k] / (2.0 * std::sqrt(post.var.at(c, k))) *
                              sigmoid(post.var_raw.at(c, k));
        }
    }
    value /= num_samples;
    if (grad == nullptr) return value;

    const double w = scale / num_samples;
    for (int l = 0; l < L; ++l) {
        grad->prior_logits.g.data[l] += w * dap[l];
        for (int k = 0; k < dz; ++k) {
            grad->prior_mu.g.at(l, k) += w * dM.at(l, k);
            grad->prior_var_raw.g.at(l, k) += w * dVraw.at(l, k);
        }
    }
    // posterior networks: logits = h W_pi + b_pi, mu/var analogous
    for (int l = 0; l < L; ++l) grad->b_pi.g.data[l] += w * da_pi[l];
    for (int j = 0; j < L * dz; ++j) {
        grad->b_mu.g.data[j] += w * dmu.data[j];
        grad->b_var.g.data[j] += w * dvraw.data[j];
    }
    for (int i = 0; i < head.hidden; ++i) {
        const double hi = h[i];
        double acc = 0.0;
        double* gp = grad->w_pi.g.row(i);
        const double* wp = head.w_pi.w.row(i);
        for (int l = 0; l < L; ++l) {
            gp[l] += w * da_pi[l] * hi;
            acc += wp[l] * da_pi[l];
        }
        double* gm = grad->w_mu.g.row(i);
        const double* wm = head.w_mu.w.row(i);
        double* gv = grad->w_var.g.row(i);
        const double* wv = head.w_var.w.row(i);
        for (int j = 0; j < L * dz; ++j) {
            gm[j] += w * dmu.data[j] * hi;
            gv[j] += w * dvraw.data[j] * hi;
            acc += wm[j] * dmu.data[j] + wv[j] * dvraw.data[j];
        }
        if (dh != nullptr) (*dh)[i] += w * acc;
    }
    return value;
}

}  // namespace

double gmve_kl(const GMVEHead& head, const std::vector<double>& h, int num_samples,
               std::uint64_t seed) {
    return gmve_kl_impl(head, h, num_samples, seed, nullptr, 0.0, nullptr);
}

double gmve_kl_grad(GMVEHead& head, const std::vector<double>& h, int num_samples,
                    std::uint64_t seed, double scale, std::vector<double>& dh) {
    return gmve_kl_impl(head, h, num_samples, seed, &head, scale, &dh);
}

// ---------------------------------------------------------------- MLM

double mlm_loss(const Matrix& token_logits, const std::vector<int>& masked_positions,
                const std::vector<int>& targets, double alpha_reg, double regularizer_value) {
    Matrix unused;
    const double base = mlm_loss_grad(token_logits, masked_positions, targets, 0.0, unused);
    return base + alpha_reg * regularizer_value;
}

double mlm_loss_grad(const Matrix& token_logits, const std::vector<int>& masked_positions,
                     const std::vector<int>& targets, double scale, Matrix& dlogits) {
    if (masked_positions.empty()) throw EmptyMaskSet("MLM loss over an empty mask set");
    if (masked_positions.size() != targets.size()) {
        throw LengthMismatch("masked positions and targets differ in length");
    }
    const bool want_grad = scale != 0.0;
    if (want_grad && dlogits.empty()) dlogits = Matrix(token_logits.rows, token_logits.cols);
    double loss = 0.0;
    const int v = token_logits.cols;
    for (size_t m = 0; m < masked_positions.size(); ++m) {
        const int pos = masked_positions[m];
        const int tgt = targets[m];
        if (pos < 0 || pos >= token_logits.rows || tgt < 0 || tgt >= v) {
            throw LengthMismatch("masked position or target outside logits");
        }
        std::vector<double> row(token_logits.row(pos), token_logits.row(pos) + v);
        std::vector<double> drow;
        if (want_grad) drow.assign(v, 0.0);
        loss += softmax_cross_entropy(row, tgt, want_grad ? &drow : nullptr, scale);
        if (want_grad) {
            double* dr = dlogits.row(pos);
            for (int j = 0; j < v; ++j) dr[j] += drow[j];
        }
    }
    return loss;
}

double total_loss(double mlm, double proto, double lineage, double gmve, const LossWeights& w) {
    for (double x : {mlm, proto, lineage, gmve}) {
        if (!std::isfinite(x)) throw NonFiniteInput("loss component is not finite");
    }
    return mlm + w.lambda1 * proto + w.lambda2 * lineage + w.lambda3 * gmve;
}

double softmax_cross_entropy(const std::vector<double>& logits, int target,
                             std::vector<double>* dlogits, double scale) {
    const int n = static_cast<int>(logits.size());
    if (target < 0 || target >= n) throw LengthMismatch("cross-entropy target out of range");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double x : logits) sum += std::exp(x - mx);
    const double lse = mx + std::log(sum);
    if (dlogits != nullptr) {
        for (int j = 0; j < n; ++j) {
            double p = std::exp(logits[j] - lse);
            (*dlogits)[j] += scale * (p - (j == target ? 1.0 : 0.0));
        }
    }
    return lse - logits[target];
}

}  // namespace cellrefine
