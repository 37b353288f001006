#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "cellrefine/losses.hpp"
#include "cellrefine/model.hpp"
#include "cellrefine/tokenizer.hpp"
#include "cellrefine/training.hpp"

using namespace cellrefine;

namespace {

constexpr double kStep = 1e-4;
constexpr double kRetryStep = 1e-5;  // relu kinks corrupt isolated FD points; real
                                     // gradient errors survive a step change
constexpr double kTol = 1e-4;

struct Fixture {
    ModelState state;
    std::vector<TokenSequence> masked;
    std::vector<int> type_idx;
    PostPretrainSetup setup;
    std::vector<std::uint64_t> gmve_seeds;

    static Fixture make(bool with_adapters) {
        std::vector<std::string> genes;
        for (int g = 0; g < 14; ++g) genes.push_back("g" + std::to_string(g));
        GeneVocabulary vocab = GeneVocabulary::from_genes(genes);  // 16 with specials

        EncoderConfig cell;
        cell.vocab_size = vocab.size();
        cell.hidden_size = 8;
        cell.num_layers = 1;
        cell.num_heads = 2;
        cell.max_len = 12;
        EncoderConfig marker = cell;
        marker.max_len = 6;
        GMVEConfig gmve;
        gmve.num_components = 2;
        gmve.latent_dim = 3;

        std::vector<double> medians(vocab.n_genes(), 1.0);
        Fixture f{ModelState::create(cell, marker, gmve, vocab, medians, 91), {}, {}, {}, {}};
        if (with_adapters) {
            AdapterConfig acfg;
            acfg.rank = 2;
            acfg.alpha = 4.0;
            acfg.dropout = 0.0;
            attach_adapters(f.state, acfg);
        }

        // batch of 4 cells over 3 types
        Rng rng(55);
        for (int i = 0; i < 4; ++i) {
            std::vector<double> expr(14, 0.0);
            for (int g = 0; g < 14; ++g) {
                expr[g] = (rng.uniform01() < 0.45) ? 0.0 : std::exp(rng.normal(0.0, 0.5));
            }
            expr[i] += 2.0;  // guarantee nonzero
            TokenSequence seq = tokenize(expr, vocab, medians, cell.max_len);
            f.masked.push_back(mask_tokens(seq, 0.3, 400 + i, vocab));
        }
        f.type_idx = {0, 1, 2, 1};
        f.setup.types = {"T0", "T1", "T2"};
        f.setup.prototypes = {{"T0", {"g0", "g1", "g2", "g3"}},
                              {"T1", {"g4", "g5", "g6", "g7"}},
                              {"T2", {"g8", "g9", "g10", "g11"}}};
        f.setup.pairs = {{"T0", "T1"}, {"T0", "T2"}, {"T1", "T2"}};
        f.gmve_seeds = {1001, 1002, 1003, 1004};
        return f;
    }

    BatchTerms run(const LossWeights& w, bool accumulate) {
        return compute_batch(state, masked, type_idx, &setup, w, 1.0, 6, gmve_seeds, nullptr,
                             accumulate);
    }
};

struct Slot {
    std::string name;
    Param* param;
    size_t index;
};

// strided sample: up to `per_tensor` entries of every named tensor
std::vector<Slot> sample_slots(ModelState& state, size_t per_tensor) {
    std::vector<Slot> slots;
    state.visit_params([&](Param& p) {
        const size_t n = p.w.size();
        const size_t stride = std::max<size_t>(1, n / per_tensor);
        for (size_t i = 0; i < n; i += stride) slots.push_back({p.name, &p, i});
        if (n > 1 && (n - 1) % stride != 0) slots.push_back({p.name, &p, n - 1});
    });
    return slots;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-6);
}

struct TermGrads {
    std::vector<double> mlm, proto, lineage, gmve, total;
};

// analytic per-term gradients at the sampled slots, isolated by lambda configs
TermGrads analytic_grads(Fixture& f, const std::vector<Slot>& slots) {
    auto grads_under = [&](const LossWeights& w) {
        f.state.zero_grads();
        f.run(w, true);
        std::vector<double> g(slots.size());
        for (size_t i = 0; i < slots.size(); ++i) g[i] = slots[i].param->g.data[slots[i].index];
        return g;
    };
    LossWeights base;  // all lambdas zero
    base.lambda1 = base.lambda2 = base.lambda3 = 0.0;
    LossWeights lp = base, ll = base, lg = base;
    lp.lambda1 = 1.0;
    ll.lambda2 = 1.0;
    lg.lambda3 = 1.0;
    LossWeights wt;
    wt.lambda1 = 0.6;
    wt.lambda2 = 0.8;
    wt.lambda3 = 1.2;
    wt.alpha_reg = 0.01;

    TermGrads out;
    out.mlm = grads_under(base);
    out.proto = grads_under(lp);
    out.lineage = grads_under(ll);
    out.gmve = grads_under(lg);
    out.total = grads_under(wt);
    for (size_t i = 0; i < slots.size(); ++i) {
        out.proto[i] -= out.mlm[i];
        out.lineage[i] -= out.mlm[i];
        out.gmve[i] -= out.mlm[i];
    }
    return out;
}

struct CheckStats {
    int failures = 0;
    double worst = 0.0;
    std::string worst_name;

    void feed(const std::string& label, const Slot& s, double analytic, double fd) {
        const double r = rel_err(analytic, fd);
        if (r > worst) {
            worst = r;
            worst_name = label + " " + s.name + "[" + std::to_string(s.index) + "]";
        }
        if (r >= kTol) {
            ++failures;
            if (failures <= 8) {
                std::printf("  FD mismatch %s %s[%zu]: analytic=%.8g fd=%.8g rel=%.3g\n",
                            label.c_str(), s.name.c_str(), s.index, analytic, fd, r);
            }
        }
    }
};

void run_suite(Fixture& f, size_t per_tensor, CheckStats& stats) {
    std::vector<Slot> slots = sample_slots(f.state, per_tensor);
    REQUIRE(slots.size() > 100);
    TermGrads g = analytic_grads(f, slots);

    LossWeights all_on;  // per-term values read from one eval pair
    all_on.lambda1 = all_on.lambda2 = all_on.lambda3 = 1.0;
    LossWeights wt;
    wt.lambda1 = 0.6;
    wt.lambda2 = 0.8;
    wt.lambda3 = 1.2;
    wt.alpha_reg = 0.01;

    struct FiveFd {
        double mlm, proto, lineage, gmve, total;
    };
    auto fd_at = [&](Slot& s, double step) {
        double& theta = s.param->w.data[s.index];
        const double keep = theta;
        theta = keep + step;
        const BatchTerms up = f.run(all_on, false);
        const BatchTerms up_t = f.run(wt, false);
        theta = keep - step;
        const BatchTerms dn = f.run(all_on, false);
        const BatchTerms dn_t = f.run(wt, false);
        theta = keep;
        const double inv = 1.0 / (2.0 * step);
        return FiveFd{(up.mlm - dn.mlm) * inv, (up.proto - dn.proto) * inv,
                      (up.lineage - dn.lineage) * inv, (up.gmve - dn.gmve) * inv,
                      (up_t.total - dn_t.total) * inv};
    };

    for (size_t i = 0; i < slots.size(); ++i) {
        FiveFd fd = fd_at(slots[i], kStep);
        const double worst_here = std::max(
            {rel_err(g.mlm[i], fd.mlm), rel_err(g.proto[i], fd.proto),
             rel_err(g.lineage[i], fd.lineage), rel_err(g.gmve[i], fd.gmve),
             rel_err(g.total[i], fd.total)});
        if (worst_here >= kTol) fd = fd_at(slots[i], kRetryStep);
        stats.feed("mlm", slots[i], g.mlm[i], fd.mlm);
        stats.feed("proto", slots[i], g.proto[i], fd.proto);
        stats.feed("lineage", slots[i], g.lineage[i], fd.lineage);
        stats.feed("gmve", slots[i], g.gmve[i], fd.gmve);
        stats.feed("total", slots[i], g.total[i], fd.total);
    }
}

}  // namespace

TEST_CASE("analytic gradients of every term match central differences") {
    Fixture f = Fixture::make(false);
    CheckStats stats;
    run_suite(f, 10, stats);
    std::printf("gradcheck: worst relative error %.3g at %s\n", stats.worst,
                stats.worst_name.c_str());
    CHECK(stats.failures == 0);
    CHECK(stats.worst < kTol);
}

TEST_CASE("adapter factors receive correct gradients") {
    Fixture f = Fixture::make(true);
    // restrict slots to the adapter tensors; term isolation machinery reused
    std::vector<Slot> slots;
    f.state.adapters->visit_params([&](Param& p) {
        for (size_t i = 0; i < p.w.size(); i += std::max<size_t>(1, p.w.size() / 8)) {
            slots.push_back({p.name, &p, i});
        }
    });
    REQUIRE(slots.size() > 20);

    LossWeights wt;
    wt.lambda1 = 0.6;
    wt.lambda2 = 0.8;
    wt.lambda3 = 1.2;
    wt.alpha_reg = 0.01;

    f.state.zero_grads();
    f.run(wt, true);
    std::vector<double> analytic(slots.size());
    for (size_t i = 0; i < slots.size(); ++i) {
        analytic[i] = slots[i].param->g.data[slots[i].index];
    }

    CheckStats stats;
    for (size_t i = 0; i < slots.size(); ++i) {
        double& theta = slots[i].param->w.data[slots[i].index];
        const double keep = theta;
        theta = keep + kStep;
        const double up = f.run(wt, false).total;
        theta = keep - kStep;
        const double dn = f.run(wt, false).total;
        theta = keep;
        stats.feed("lora-total", slots[i], analytic[i], (up - dn) / (2.0 * kStep));
    }
    std::printf("lora gradcheck: worst relative error %.3g at %s\n", stats.worst,
                stats.worst_name.c_str());
    CHECK(stats.failures == 0);

    // the b factors start at zero; training signal must still reach the a factors
    bool any_nonzero = false;
    for (size_t i = 0; i < slots.size(); ++i) any_nonzero |= analytic[i] != 0.0;
    CHECK(any_nonzero);
}

TEST_CASE("total gradient equals the lambda-weighted sum of term gradients") {
    Fixture f = Fixture::make(false);
    std::vector<Slot> slots = sample_slots(f.state, 6);
    TermGrads g = analytic_grads(f, slots);
    for (size_t i = 0; i < slots.size(); ++i) {
        // reg gradient under the total config: 2 * alpha * theta
        const double reg = 2.0 * 0.01 * slots[i].param->w.data[slots[i].index];
        const double combo =
            g.mlm[i] + 0.6 * g.proto[i] + 0.8 * g.lineage[i] + 1.2 * g.gmve[i] + reg;
        CHECK(std::abs(combo - g.total[i]) < 1e-6);
    }
}
