#pragma once

// =============================================================
//  objective terms: masked-token cross-entropy, prototype
//  contrastive term, lineage separation term, GMVE mixture KL,
//  and their weighted combination
//
//  Each term has a value form and a *_grad form that additionally
//  accumulates analytic gradients scaled by a caller factor, so
//  batch aggregation stays in the training loop.
// =============================================================

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cellrefine/model.hpp"
#include "cellrefine/tensor.hpp"

namespace cellrefine {

struct LossWeights {
    double lambda1 = 1.0;  // prototype term
    double lambda2 = 1.0;  // lineage term
    double lambda3 = 1.0;  // GMVE term
    double alpha_reg = 0.0;
};

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);
// accumulates dcos * d(cos)/d{a,b} into da and db
void cosine_backward(const std::vector<double>& a, const std::vector<double>& b, double dcos,
                     std::vector<double>& da, std::vector<double>& db);

// -sum over cells of log softmax over all prototypes at the true index
double prototype_loss(const std::vector<std::vector<double>>& cells,
                      const std::vector<int>& true_types,
                      const std::vector<std::vector<double>>& prototypes,
                      double temperature = 1.0);
double prototype_loss_grad(const std::vector<std::vector<double>>& cells,
                           const std::vector<int>& true_types,
                           const std::vector<std::vector<double>>& prototypes, double scale,
                           std::vector<std::vector<double>>& dcells,
                           std::vector<std::vector<double>>& dprotos, double temperature = 1.0);

// mean cosine over sibling pairs whose both types are present; 0 when none are
double lineage_loss(const std::map<std::string, std::vector<double>>& type_means,
                    const std::set<std::pair<std::string, std::string>>& pairs);
double lineage_loss_grad(const std::map<std::string, std::vector<double>>& type_means,
                         const std::set<std::pair<std::string, std::string>>& pairs, double scale,
                         std::map<std::string, std::vector<double>>& dmeans);

// Monte Carlo estimate of KL(q(z|h) || learned mixture prior) with
// reparameterized sampling from the chosen component
double gmve_kl(const GMVEHead& head, const std::vector<double>& h, int num_samples,
               std::uint64_t seed);
double gmve_kl_grad(GMVEHead& head, const std::vector<double>& h, int num_samples,
                    std::uint64_t seed, double scale, std::vector<double>& dh);

// -sum over masked positions of log softmax at the recorded target,
// plus alpha_reg * regularizer_value
double mlm_loss(const Matrix& token_logits, const std::vector<int>& masked_positions,
                const std::vector<int>& targets, double alpha_reg, double regularizer_value);
// fills dlogits rows at masked positions with scale * (softmax - onehot);
// returns the unregularized value
double mlm_loss_grad(const Matrix& token_logits, const std::vector<int>& masked_positions,
                     const std::vector<int>& targets, double scale, Matrix& dlogits);

double total_loss(double mlm, double proto, double lineage, double gmve, const LossWeights& w);

// generic softmax cross-entropy on a single logit vector (task heads)
double softmax_cross_entropy(const std::vector<double>& logits, int target,
                             std::vector<double>* dlogits = nullptr, double scale = 1.0);

}  // namespace cellrefine
