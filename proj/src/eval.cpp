#include "cellrefine/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cellrefine/errors.hpp"
#include "cellrefine/hash.hpp"
#include "cellrefine/losses.hpp"
#include "cellrefine/tokenizer.hpp"
#include "cellrefine/training.hpp"

namespace cellrefine {

namespace {

using json = nlohmann::json;

std::vector<double> matrix_row(const Matrix& m, int r) {
    return std::vector<double>(m.row(r), m.row(r) + m.cols);
}

int infer_classes(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    int k = 0;
    for (int v : y_true) k = std::max(k, v + 1);
    for (int v : y_pred) k = std::max(k, v + 1);
    return k;
}

}  // namespace

ClassificationSummary classification_summary(const std::vector<int>& y_true,
                                             const std::vector<int>& y_pred, int num_classes) {
    if (y_true.size() != y_pred.size()) {
        throw LengthMismatch("label vectors differ in length");
    }
    if (y_true.empty()) throw EmptyDataset("no samples to score");
    const int k = num_classes > 0 ? num_classes : infer_classes(y_true, y_pred);
    for (size_t i = 0; i < y_true.size(); ++i) {
        if (y_true[i] < 0 || y_true[i] >= k || y_pred[i] < 0 || y_pred[i] >= k) {
            throw LengthMismatch("label outside class range");
        }
    }
    std::vector<long> tp(k, 0), fp(k, 0), fn(k, 0);
    long correct = 0;
    for (size_t i = 0; i < y_true.size(); ++i) {
        if (y_true[i] == y_pred[i]) {
            ++tp[y_true[i]];
            ++correct;
        } else {
            ++fp[y_pred[i]];
            ++fn[y_true[i]];
        }
    }
    ClassificationSummary s;
    s.per_class.resize(k);
    double macro = 0.0, weighted = 0.0;
    for (int c = 0; c < k; ++c) {
        F1Breakdown& b = s.per_class[c];
        b.support = tp[c] + fn[c];
        const long pd = tp[c] + fp[c];
        b.precision = pd > 0 ? static_cast<double>(tp[c]) / pd : 0.0;
        b.recall = b.support > 0 ? static_cast<double>(tp[c]) / b.support : 0.0;
        const double denom = b.precision + b.recall;
        b.f1 = denom > 0.0 ? 2.0 * b.precision * b.recall / denom : 0.0;
        macro += b.f1;
        weighted += b.f1 * b.support;
    }
    s.accuracy = static_cast<double>(correct) / static_cast<double>(y_true.size());
    s.macro_f1 = macro / k;
    s.weighted_f1 = weighted / static_cast<double>(y_true.size());
    return s;
}

double macro_f1(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    return classification_summary(y_true, y_pred).macro_f1;
}

double recall_at_k(const std::vector<int>& y_true, const Matrix& scores, int k) {
    if (static_cast<int>(y_true.size()) != scores.rows) {
        throw LengthMismatch("labels and score rows differ");
    }
    if (k < 1 || k > scores.cols) {
        throw KOutOfRange("k = " + std::to_string(k) + " with " + std::to_string(scores.cols) +
                          " classes");
    }
    if (y_true.empty()) throw EmptyDataset("no samples to score");
    long hits = 0;
    std::vector<int> idx(scores.cols);
    for (int i = 0; i < scores.rows; ++i) {
        const double* row = scores.row(i);
        for (int c = 0; c < scores.cols; ++c) {
            if (!std::isfinite(row[c])) throw NonFiniteInput("score is not finite");
        }
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return a < b;  // ties: ascending class index
        });
        for (int j = 0; j < k; ++j) {
            if (idx[j] == y_true[i]) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(y_true.size());
}

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw LengthMismatch("Pearson inputs differ in length");
    if (a.size() < 2) return std::nullopt;
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
    return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------- report

std::string MetricsReport::to_json() const {
    json vals = json::object();
    for (const auto& [k, v] : values) vals[k] = v;
    json classes = json::object();
    for (const auto& [name, metrics] : per_class) {
        json entry = json::object();
        for (const auto& [k, v] : metrics) entry[k] = v;
        classes[name] = entry;
    }
    json j = {{"task", task},         {"split", split},
              {"seed", seed},         {"checkpoint_digest", checkpoint_digest},
              {"values", vals},       {"per_class", classes}};
    return j.dump(1);
}

std::string MetricsReport::to_table() const {
    std::ostringstream out;
    out << "task: " << task << "  split: " << split << "  seed: " << seed << '\n';
    size_t width = 6;
    for (const auto& [k, v] : values) width = std::max(width, k.size());
    for (const auto& [k, v] : values) {
        out << "  " << k << std::string(width - k.size() + 2, ' ');
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        out << buf << '\n';
    }
    if (!per_class.empty()) {
        out << "  per class:\n";
        size_t cw = 5;
        for (const auto& [name, metrics] : per_class) cw = std::max(cw, name.size());
        for (const auto& [name, metrics] : per_class) {
            out << "    " << name << std::string(cw - name.size() + 2, ' ');
            bool first = true;
            for (const auto& [k, v] : metrics) {
                char buf[48];
                std::snprintf(buf, sizeof(buf), "%s%s=%.4f", first ? "" : "  ", k.c_str(), v);
                out << buf;
                first = false;
            }
            out << '\n';
        }
    }
    return out.str();
}

// ---------------------------------------------------------------- identity

namespace {

std::vector<int> eval_indices(const ExpressionDataset& data, const std::string& split,
                              int few_shot_n, std::uint64_t seed) {
    std::vector<int> idx = data.split_indices(split);
    if (few_shot_n > 0) {
        idx = subsample_per_class(idx, data.type_labels, few_shot_n, seed);
    }
    if (idx.empty()) throw EmptyDataset("no cells in split " + split);
    return idx;
}

// logits per cell over the identity label space
Matrix identity_scores(const ModelState& state, const ExpressionDataset& data,
                       const std::vector<int>& idx, std::vector<int>& y_true) {
    if (!state.task_head.has_value() || state.task != "cell_identity") {
        throw IncompatibleTask("model lacks a fine-tuned identity head");
    }
    std::map<std::string, int> pos;
    for (size_t i = 0; i < state.label_space.size(); ++i) {
        pos[state.label_space[i]] = static_cast<int>(i);
    }
    const int k = static_cast<int>(state.label_space.size());
    Matrix scores(static_cast<int>(idx.size()), k);
    y_true.resize(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto it = pos.find(data.type_labels[idx[i]]);
        if (it == pos.end()) {
            throw LabelSpaceMismatch("label " + data.type_labels[idx[i]] +
                                     " absent from the model's label space");
        }
        y_true[i] = it->second;
        const TokenSequence seq = tokenize(matrix_row(data.x, idx[i]), state.vocab,
                                           state.medians, state.cell_cfg.max_len);
        const CellEncoding enc = encode_cell(state, seq, nullptr, false);
        const std::vector<double> out = state.task_head->forward(enc.h);
        for (int c = 0; c < k; ++c) scores.at(static_cast<int>(i), c) = out[c];
    }
    return scores;
}

int argmax_tie_asc(const double* row, int n) {
    int best = 0;
    for (int c = 1; c < n; ++c) {
        if (row[c] > row[best]) best = c;
    }
    return best;
}

}  // namespace

MetricsReport identity_eval(const ModelState& state, const ExpressionDataset& data,
                            const std::string& split, const std::vector<int>& ks, int few_shot_n,
                            std::uint64_t seed) {
    const std::vector<int> idx = eval_indices(data, split, few_shot_n, seed);
    std::vector<int> y_true;
    const Matrix scores = identity_scores(state, data, idx, y_true);
    std::vector<int> y_pred(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
        y_pred[i] = argmax_tie_asc(scores.row(static_cast<int>(i)), scores.cols);
    }
    const ClassificationSummary s =
        classification_summary(y_true, y_pred, static_cast<int>(state.label_space.size()));

    MetricsReport rep;
    rep.task = "cell_identity";
    rep.split = split;
    rep.seed = seed;
    rep.values["accuracy"] = s.accuracy;
    rep.values["macro_f1"] = s.macro_f1;
    rep.values["weighted_f1"] = s.weighted_f1;
    rep.values["num_cells"] = static_cast<double>(idx.size());
    for (int k : ks) {
        rep.values["recall@" + std::to_string(k)] = recall_at_k(y_true, scores, k);
    }
    for (size_t c = 0; c < state.label_space.size(); ++c) {
        auto& entry = rep.per_class[state.label_space[c]];
        entry["precision"] = s.per_class[c].precision;
        entry["recall"] = s.per_class[c].recall;
        entry["f1"] = s.per_class[c].f1;
        entry["support"] = static_cast<double>(s.per_class[c].support);
    }
    return rep;
}

// ---------------------------------------------------------------- imputation

std::vector<double> decode_masked_expression(const ModelState& state, const Matrix& logits,
                                             const TokenSequence& masked,
                                             const std::vector<double>& expression) {
    const std::vector<int>& mpos = masked.masked_positions;
    const int t = masked.length();

    // observed rank-value curve: normalized values at the unmasked positions
    std::vector<char> is_masked(t, 0);
    for (int p : mpos) is_masked[p] = 1;
    std::vector<int> upos;
    std::vector<double> uval;
    for (int p = 0; p < t; ++p) {
        const int tok = masked.tokens[p];
        if (is_masked[p] || tok == state.vocab.mask_id() || tok == state.vocab.pad_id()) continue;
        upos.push_back(p);
        uval.push_back(expression[tok] / state.medians[tok]);
    }

    // per masked position: softmax over the vocabulary
    std::vector<std::vector<double>> probs;
    probs.reserve(mpos.size());
    for (int p : mpos) {
        std::vector<double> row(logits.row(p), logits.row(p) + logits.cols);
        softmax_inplace(row);
        probs.push_back(std::move(row));
    }

    std::vector<double> out(mpos.size(), 0.0);
    for (size_t j = 0; j < mpos.size(); ++j) {
        const int gene = masked.targets[j];
        // expected rank of this gene across the masked slots
        double num = 0.0, den = 0.0;
        for (size_t q = 0; q < mpos.size(); ++q) {
            const double pr = probs[q][gene];
            num += pr * static_cast<double>(mpos[q]);
            den += pr;
        }
        const double rank = den > 0.0 ? num / den : static_cast<double>(mpos[j]);

        // map the rank back through the observed curve (clamped linear interp)
        double norm_value = 1.0;  // all-masked fallback: the median itself
        if (!upos.empty()) {
            if (rank <= upos.front()) {
                norm_value = uval.front();
            } else if (rank >= upos.back()) {
                norm_value = uval.back();
            } else {
                size_t hi = 1;
                while (hi < upos.size() && upos[hi] < rank) ++hi;
                const double x0 = upos[hi - 1], x1 = upos[hi];
                const double frac = (rank - x0) / (x1 - x0);
                norm_value = uval[hi - 1] + frac * (uval[hi] - uval[hi - 1]);
            }
        }
        out[j] = norm_value * state.medians[gene];
    }
    return out;
}

MetricsReport imputation_eval(const ModelState& state, const ExpressionDataset& data,
                              double mask_rate, std::uint64_t seed, const std::string& split) {
    if (state.stage == "untrained") throw IncompatibleTask("model has not been trained");
    const std::vector<int> idx = eval_indices(data, split, 0, seed);

    double sum_pearson = 0.0, sum_cosine = 0.0;
    long used = 0, excluded = 0;
    for (int row : idx) {
        const std::vector<double> expr = matrix_row(data.x, row);
        const TokenSequence seq = tokenize(expr, state.vocab, state.medians,
                                           state.cell_cfg.max_len);
        const TokenSequence masked = mask_tokens(
            seq, mask_rate, Rng::derive(seed, fnv1a64("impute/" + std::to_string(row))),
            state.vocab);
        if (masked.masked_positions.size() < 2) {
            ++excluded;
            continue;
        }
        const CellEncoding enc = encode_cell(state, masked, nullptr, true);
        const std::vector<double> pred =
            decode_masked_expression(state, enc.logits, masked, expr);
        std::vector<double> truth(masked.targets.size());
        for (size_t j = 0; j < masked.targets.size(); ++j) truth[j] = expr[masked.targets[j]];

        const std::optional<double> r = pearson(truth, pred);
        if (!r.has_value()) {  // constant truth or prediction: no defined score
            ++excluded;
            continue;
        }
        double cos;
        try {
            cos = cosine_similarity(truth, pred);
        } catch (const ZeroVector&) {
            ++excluded;
            continue;
        }
        sum_pearson += *r;
        sum_cosine += cos;
        ++used;
    }
    if (used == 0) throw DegenerateCell("every cell in split " + split + " was degenerate");

    MetricsReport rep;
    rep.task = "imputation";
    rep.split = split;
    rep.seed = seed;
    rep.values["pearson"] = sum_pearson / used;
    rep.values["cosine"] = sum_cosine / used;
    rep.values["cells_evaluated"] = static_cast<double>(used);
    rep.values["cells_excluded"] = static_cast<double>(excluded);
    rep.values["mask_rate"] = mask_rate;
    return rep;
}

// ---------------------------------------------------------------- perturbation

MetricsReport perturbation_eval(const ModelState& state, const ExpressionDataset& data,
                                const std::string& split, const std::string& group_filter) {
    if (!state.task_head.has_value() || state.task != "perturbation") {
        throw IncompatibleTask("model lacks a fine-tuned perturbation head");
    }
    if (!data.post.has_value()) {
        throw IncompatibleTask("dataset has no paired post-perturbation expression");
    }
    const int n_genes = data.num_genes();
    std::vector<int> idx = data.split_indices(split);
    if (!group_filter.empty()) {
        std::vector<int> kept;
        for (int i : idx) {
            if (data.type_labels[i] == group_filter) kept.push_back(i);
        }
        idx = std::move(kept);
    }
    if (idx.empty()) throw EmptyDataset("no cells to evaluate in split " + split);

    std::map<std::string, std::vector<int>> groups;
    for (int i : idx) groups[data.type_labels[i]].push_back(i);

    MetricsReport rep;
    rep.task = "perturbation";
    rep.split = split;
    double sum = 0.0;
    for (const auto& [name, members] : groups) {
        std::vector<double> true_delta(n_genes, 0.0), pred_delta(n_genes, 0.0);
        for (int i : members) {
            const std::vector<double> expr = matrix_row(data.x, i);
            const TokenSequence seq =
                tokenize(expr, state.vocab, state.medians, state.cell_cfg.max_len);
            const CellEncoding enc = encode_cell(state, seq, nullptr, false);
            const std::vector<double> pred = state.task_head->forward(enc.h);
            const double* post = data.post->row(i);
            for (int g = 0; g < n_genes; ++g) {
                true_delta[g] += post[g] - expr[g];
                pred_delta[g] += pred[g];
            }
        }
        const double inv = 1.0 / static_cast<double>(members.size());
        for (int g = 0; g < n_genes; ++g) {
            true_delta[g] *= inv;
            pred_delta[g] *= inv;
        }
        const std::optional<double> r = pearson(true_delta, pred_delta);
        if (!r.has_value()) {
            throw DegenerateGroup("group " + name + " has a constant delta vector");
        }
        rep.per_class[name]["pearson"] = *r;
        rep.per_class[name]["cells"] = static_cast<double>(members.size());
        sum += *r;
    }
    rep.values["dge_pearson"] = sum / static_cast<double>(groups.size());
    rep.values["num_groups"] = static_cast<double>(groups.size());
    return rep;
}

// ---------------------------------------------------------------- out of domain

MetricsReport out_of_domain_eval(const ModelState& state, const ExpressionDataset& data,
                                 const std::vector<int>& ks) {
    const std::vector<int> idx = eval_indices(data, "ood", 0, 0);
    std::vector<int> y_true;
    const Matrix scores = identity_scores(state, data, idx, y_true);

    MetricsReport rep;
    rep.task = "out_of_domain";
    rep.split = "ood";
    rep.values["num_cells"] = static_cast<double>(idx.size());
    for (int k : ks) {
        rep.values["recall@" + std::to_string(k)] = recall_at_k(y_true, scores, k);
    }
    return rep;
}

}  // namespace cellrefine
