#include "cellrefine/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cellrefine/errors.hpp"
#include "cellrefine/hash.hpp"
#include "cellrefine/rng.hpp"

namespace cellrefine {

namespace {

using json = nlohmann::json;

std::string padded(const std::string& prefix, int index, int width) {
    std::string digits = std::to_string(index);
    while (static_cast<int>(digits.size()) < width) digits.insert(digits.begin(), '0');
    return prefix + digits;
}

std::uint64_t stream_key(const std::string& purpose) { return fnv1a64(purpose); }

std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void GeneratorConfig::validate() const {
    if (num_genes < 1) throw InvalidConfig("num_genes must be positive");
    if (num_types < 1) throw InvalidConfig("num_types must be positive");
    if (num_families < 1) throw InvalidConfig("num_families must be positive");
    if (num_families > num_types) throw InvalidConfig("num_families exceeds num_types");
    if (markers_per_type < 1) throw InvalidConfig("markers_per_type must be positive");
    if ((num_types + num_families) * markers_per_type > num_genes) {
        throw InvalidConfig("marker blocks exceed gene count");
    }
    if (!(alpha_gen > 0.0)) throw InvalidConfig("alpha_gen must be positive");
    if (overexpression < 0.0) throw InvalidConfig("overexpression must be non-negative");
    if (num_cells < num_types) throw InvalidConfig("num_cells below one cell per type");
    if (min_cells_per_type < 1) throw InvalidConfig("min_cells_per_type must be positive");
    if (static_cast<long>(min_cells_per_type) * num_types > num_cells) {
        throw InvalidConfig("min_cells_per_type * num_types exceeds num_cells");
    }
    if (num_batches < 1) throw InvalidConfig("num_batches must be positive");
    if (batch_shift < 0.0) throw InvalidConfig("batch_shift must be non-negative");
    if (!(depth_min > 0.0) || depth_max < depth_min) {
        throw InvalidConfig("need 0 < depth_min <= depth_max");
    }
    if (noise_sigma < 0.0) throw InvalidConfig("noise_sigma must be non-negative");
    if (!(train_fraction > 0.0) || !(val_fraction >= 0.0) ||
        train_fraction + val_fraction >= 1.0) {
        throw InvalidConfig("need train_fraction > 0 and train + val < 1");
    }
    if (ood_cells < 0) throw InvalidConfig("ood_cells must be non-negative");
    if (ood_shift < 0.0) throw InvalidConfig("ood_shift must be non-negative");
    if (perturb_genes < 0 || perturb_genes > num_genes) {
        throw InvalidConfig("perturb_genes out of range");
    }
    if (perturb_noise < 0.0) throw InvalidConfig("perturb_noise must be non-negative");
}

std::vector<int> ExpressionDataset::split_indices(const std::string& split) const {
    std::vector<int> idx;
    for (int i = 0; i < num_cells(); ++i) {
        if (splits[i] == split) idx.push_back(i);
    }
    return idx;
}

std::vector<std::string> ExpressionDataset::distinct_types() const {
    std::vector<std::string> types(type_labels.begin(), type_labels.end());
    std::sort(types.begin(), types.end());
    types.erase(std::unique(types.begin(), types.end()), types.end());
    return types;
}

std::vector<long> allocate_type_counts(const GeneratorConfig& cfg, long total_cells) {
    const int n = cfg.num_types;
    if (total_cells < n) throw InvalidConfig("fewer cells than types");
    std::vector<long> counts(n, 0);

    if (cfg.uniform_frequencies) {
        const long base = total_cells / n;
        const long rem = total_cells % n;
        for (int i = 0; i < n; ++i) counts[i] = base + (i < rem ? 1 : 0);
        return counts;
    }

    // Frequency-ranked weights. The rarest max(3, floor(0.3 n)) types form the
    // tail; within it the count law is exactly w_j = j^(-1/alpha) with j = 1 at
    // the largest tail type. The head continues the same exponent from a higher
    // anchor so the tail's top weight sits at 0.8x the head's smallest weight.
    const int m = std::min(n, std::max(3, static_cast<int>(std::floor(0.3 * n))));
    const int head_n = n - m;
    const double inv_alpha = 1.0 / cfg.alpha_gen;
    std::vector<double> weights(n, 0.0);
    for (int r = 1; r <= head_n; ++r) {
        weights[r - 1] = std::pow(static_cast<double>(r), -inv_alpha);
    }
    const double anchor =
        head_n > 0 ? 0.8 * std::pow(static_cast<double>(head_n), -inv_alpha) : 1.0;
    for (int j = 1; j <= m; ++j) {
        weights[head_n + j - 1] = anchor * std::pow(static_cast<double>(j), -inv_alpha);
    }
    double total_w = std::accumulate(weights.begin(), weights.end(), 0.0);

    long assigned = 0;
    for (int i = 0; i < n; ++i) {
        counts[i] = std::llround(static_cast<double>(total_cells) * weights[i] / total_w);
        assigned += counts[i];
    }
    counts[0] += total_cells - assigned;  // absorb rounding drift in the head

    // Enforce the per-type floor, shaving the overflow off the largest types.
    const long floor_c = cfg.min_cells_per_type;
    long deficit = 0;
    for (int i = 0; i < n; ++i) {
        if (counts[i] < floor_c) {
            deficit += floor_c - counts[i];
            counts[i] = floor_c;
        }
    }
    int donor = 0;
    while (deficit > 0) {
        donor = 0;
        for (int i = 1; i < n; ++i) {
            if (counts[i] > counts[donor]) donor = i;
        }
        const long give = std::min(deficit, counts[donor] - floor_c);
        if (give <= 0) throw InvalidConfig("cannot satisfy min_cells_per_type");
        counts[donor] -= give;
        deficit -= give;
    }
    return counts;
}

namespace {

struct CellPlan {
    int type_index = 0;
    int batch = 0;
    std::string split;
    std::uint64_t rng_key = 0;
};

void render_cell(const GeneratorConfig& cfg, const CellPlan& plan,
                 const std::vector<std::vector<int>>& signal_genes,
                 const std::vector<std::vector<double>>& batch_offsets, double base_scale,
                 Rng& rng, double* out) {
    const double depth = rng.uniform(cfg.depth_min, cfg.depth_max);
    const double signal = 2.0 * cfg.overexpression * base_scale;
    for (int g = 0; g < cfg.num_genes; ++g) {
        out[g] = std::exp(rng.normal(cfg.base_log_mean, cfg.noise_sigma));
    }
    for (int g : signal_genes[plan.type_index]) out[g] += signal;
    const std::vector<double>& off = batch_offsets[plan.batch];
    for (int g = 0; g < cfg.num_genes; ++g) {
        out[g] = std::max(0.0, out[g] + off[g]) * depth;
    }
}

}  // namespace

GeneratedData generate(const GeneratorConfig& cfg) {
    cfg.validate();
    GeneratedData gen;

    // --- gene / type / family names -------------------------------------
    std::vector<std::string> genes(cfg.num_genes);
    for (int g = 0; g < cfg.num_genes; ++g) genes[g] = padded("G", g + 1, 5);
    const int type_width = cfg.num_types >= 100 ? 3 : 2;
    std::vector<std::string> types(cfg.num_types);
    for (int t = 0; t < cfg.num_types; ++t) types[t] = padded("T", t + 1, type_width);
    std::vector<std::string> families(cfg.num_families);
    for (int f = 0; f < cfg.num_families; ++f) families[f] = "F" + std::to_string(f + 1);

    // --- ontology: root -> families -> leaf types (round-robin) ----------
    std::vector<std::string> nodes;
    nodes.push_back("root");
    for (const auto& f : families) nodes.push_back(f);
    for (const auto& t : types) nodes.push_back(t);
    std::vector<std::pair<std::string, std::string>> edges;
    for (const auto& f : families) edges.emplace_back("root", f);
    std::vector<int> family_of(cfg.num_types);
    for (int t = 0; t < cfg.num_types; ++t) {
        family_of[t] = t % cfg.num_families;
        edges.emplace_back(families[family_of[t]], types[t]);
    }
    gen.ontology = CellOntology::build(nodes, edges);

    // --- disjoint marker blocks: leaves first, then families --------------
    const int mpt = cfg.markers_per_type;
    std::vector<std::vector<int>> leaf_markers(cfg.num_types), family_markers(cfg.num_families);
    for (int t = 0; t < cfg.num_types; ++t) {
        for (int k = 0; k < mpt; ++k) leaf_markers[t].push_back(t * mpt + k);
    }
    for (int f = 0; f < cfg.num_families; ++f) {
        for (int k = 0; k < mpt; ++k) {
            family_markers[f].push_back((cfg.num_types + f) * mpt + k);
        }
    }
    for (int t = 0; t < cfg.num_types; ++t) {
        auto& entry = gen.catalog.entries[types[t]];
        for (int g : leaf_markers[t]) entry.emplace_back(genes[g], 2);
    }
    for (int f = 0; f < cfg.num_families; ++f) {
        auto& entry = gen.catalog.entries[families[f]];
        for (int g : family_markers[f]) entry.emplace_back(genes[g], 1);
    }

    // Signal genes per leaf: own markers plus the parent family's markers.
    std::vector<std::vector<int>> signal_genes(cfg.num_types);
    for (int t = 0; t < cfg.num_types; ++t) {
        signal_genes[t] = leaf_markers[t];
        for (int g : family_markers[family_of[t]]) signal_genes[t].push_back(g);
    }

    // --- per-batch per-gene offsets ---------------------------------------
    const double base_scale = std::exp(cfg.base_log_mean + 0.5 * cfg.noise_sigma * cfg.noise_sigma);
    const int total_batches = cfg.num_batches + (cfg.ood_cells > 0 ? 1 : 0);
    std::vector<std::vector<double>> batch_offsets(total_batches,
                                                   std::vector<double>(cfg.num_genes, 0.0));
    for (int b = 0; b < cfg.num_batches; ++b) {
        Rng rng(Rng::derive(cfg.seed, stream_key("batch/" + std::to_string(b))));
        for (int g = 0; g < cfg.num_genes; ++g) {
            batch_offsets[b][g] = rng.normal(0.0, cfg.batch_shift * base_scale);
        }
    }
    if (cfg.ood_cells > 0) {
        Rng rng(Rng::derive(cfg.seed, stream_key("batch/ood")));
        for (int g = 0; g < cfg.num_genes; ++g) {
            batch_offsets[cfg.num_batches][g] = rng.normal(0.0, cfg.ood_shift * base_scale);
        }
    }

    // --- cell plans: type counts, batches, stratified splits ---------------
    const std::vector<long> counts = allocate_type_counts(cfg, cfg.num_cells);
    std::vector<CellPlan> plans;
    plans.reserve(cfg.num_cells);
    Rng assign_rng(Rng::derive(cfg.seed, stream_key("assign")));
    for (int t = 0; t < cfg.num_types; ++t) {
        for (long c = 0; c < counts[t]; ++c) {
            CellPlan p;
            p.type_index = t;
            p.batch = static_cast<int>(assign_rng.below(cfg.num_batches));
            p.rng_key = stream_key("cell/" + std::to_string(plans.size()));
            plans.push_back(p);
        }
    }
    for (int t = 0; t < cfg.num_types; ++t) {
        std::vector<int> members;
        for (int i = 0; i < static_cast<int>(plans.size()); ++i) {
            if (plans[i].type_index == t) members.push_back(i);
        }
        Rng split_rng(Rng::derive(cfg.seed, stream_key("split/" + types[t])));
        split_rng.shuffle(members);
        const long c = static_cast<long>(members.size());
        long n_train = std::max<long>(1, static_cast<long>(std::floor(c * cfg.train_fraction)));
        long n_val = static_cast<long>(std::floor(c * cfg.val_fraction));
        if (n_train + n_val > c) n_val = c - n_train;
        for (long i = 0; i < c; ++i) {
            plans[members[i]].split =
                i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
        }
    }

    // --- output row order: seeded permutation of the in-domain cells -------
    std::vector<int> order(plans.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng(Rng::derive(cfg.seed, stream_key("order")));
    order_rng.shuffle(order);

    // --- out-of-domain extension -------------------------------------------
    std::vector<CellPlan> ood_plans;
    if (cfg.ood_cells > 0) {
        GeneratorConfig ood_cfg = cfg;
        ood_cfg.min_cells_per_type = 1;
        const std::vector<long> ood_counts = allocate_type_counts(ood_cfg, cfg.ood_cells);
        for (int t = 0; t < cfg.num_types; ++t) {
            for (long c = 0; c < ood_counts[t]; ++c) {
                CellPlan p;
                p.type_index = t;
                p.batch = cfg.num_batches;
                p.split = "ood";
                p.rng_key = stream_key("oodcell/" + std::to_string(ood_plans.size()));
                ood_plans.push_back(p);
            }
        }
    }

    // --- render expression --------------------------------------------------
    const int n_rows = static_cast<int>(plans.size() + ood_plans.size());
    ExpressionDataset& data = gen.data;
    data.genes = genes;
    data.x = Matrix(n_rows, cfg.num_genes);
    data.cell_ids.resize(n_rows);
    data.type_labels.resize(n_rows);
    data.batch_ids.resize(n_rows);
    data.splits.resize(n_rows);
    for (int r = 0; r < n_rows; ++r) {
        const CellPlan& p = r < static_cast<int>(order.size())
                                ? plans[order[r]]
                                : ood_plans[r - static_cast<int>(order.size())];
        data.cell_ids[r] = padded("C", r + 1, 6);
        data.type_labels[r] = types[p.type_index];
        data.batch_ids[r] = p.batch;
        data.splits[r] = p.split;
        Rng rng(Rng::derive(cfg.seed, p.rng_key));
        render_cell(cfg, p, signal_genes, batch_offsets, base_scale, rng, data.x.row(r));
    }

    // --- paired perturbation -------------------------------------------------
    if (cfg.perturb_genes > 0 && cfg.perturb_magnitude != 0.0) {
        std::vector<double> signature(cfg.num_genes, 0.0);
        for (int k = 0; k < cfg.perturb_genes; ++k) {
            const int g = cfg.num_genes - cfg.perturb_genes + k;
            signature[g] = (k % 2 == 0 ? 1.0 : -1.0) * cfg.perturb_magnitude * base_scale;
        }
        data.signature = signature;
        data.post = apply_perturbation(data, signature, cfg.perturb_noise,
                                       Rng::derive(cfg.seed, stream_key("perturb")));
    }
    return gen;
}

Matrix apply_perturbation(const ExpressionDataset& data, const std::vector<double>& signature,
                          double noise_sigma, std::uint64_t seed) {
    if (static_cast<int>(signature.size()) != data.num_genes()) {
        throw LengthMismatch("signature length " + std::to_string(signature.size()) +
                             " vs " + std::to_string(data.num_genes()) + " genes");
    }
    Matrix post(data.num_cells(), data.num_genes());
    for (int i = 0; i < data.num_cells(); ++i) {
        Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i)));
        const double* src = data.x.row(i);
        double* dst = post.row(i);
        for (int g = 0; g < data.num_genes(); ++g) {
            double v = src[g] + signature[g];
            if (noise_sigma > 0.0) v += rng.normal(0.0, noise_sigma);
            dst[g] = std::max(0.0, v);
        }
    }
    return post;
}

namespace {

void write_expression_tsv(const std::string& path, const ExpressionDataset& data,
                          const Matrix& values) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "cell";
    for (const auto& g : data.genes) out << '\t' << g;
    out << '\n';
    for (int i = 0; i < data.num_cells(); ++i) {
        out << data.cell_ids[i];
        const double* row = values.row(i);
        for (int g = 0; g < data.num_genes(); ++g) out << '\t' << format_value(row[g]);
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path);
}

Matrix read_expression_tsv(const std::string& path, std::vector<std::string>& genes,
                           std::vector<std::string>& cell_ids) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty expression file " + path);
    genes.clear();
    cell_ids.clear();
    {
        std::stringstream header(line);
        std::string field;
        bool first = true;
        while (std::getline(header, field, '\t')) {
            if (first) {
                first = false;
            } else {
                genes.push_back(field);
            }
        }
    }
    if (genes.empty()) throw IoError("no gene columns in " + path);
    std::vector<double> values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const char* p = line.c_str();
        const char* tab = std::strchr(p, '\t');
        if (!tab) throw IoError("malformed row in " + path);
        cell_ids.emplace_back(p, tab);
        p = tab + 1;
        for (std::size_t g = 0; g < genes.size(); ++g) {
            char* end = nullptr;
            values.push_back(std::strtod(p, &end));
            if (end == p) throw IoError("malformed value in " + path);
            p = (*end == '\t') ? end + 1 : end;
        }
    }
    Matrix x(static_cast<int>(cell_ids.size()), static_cast<int>(genes.size()));
    std::copy(values.begin(), values.end(), x.data.begin());
    return x;
}

}  // namespace

void save_dataset(const GeneratedData& gen, const std::string& dir) {
    const ExpressionDataset& data = gen.data;
    write_expression_tsv(dir + "/expression.tsv", data, data.x);

    json meta = json::array();
    for (int i = 0; i < data.num_cells(); ++i) {
        meta.push_back({{"cell", data.cell_ids[i]},
                        {"type", data.type_labels[i]},
                        {"batch", data.batch_ids[i]},
                        {"split", data.splits[i]}});
    }
    std::ofstream mf(dir + "/metadata.json");
    if (!mf) throw IoError("cannot write " + dir + "/metadata.json");
    mf << meta.dump(1) << '\n';

    save_ontology(gen.ontology, dir + "/ontology.json");
    save_catalog(gen.catalog, dir + "/catalog.json");

    if (data.post.has_value()) {
        write_expression_tsv(dir + "/expression_post.tsv", data, *data.post);
    }
    if (data.signature.has_value()) {
        json sig = json::array();
        for (double v : *data.signature) sig.push_back(v);
        std::ofstream sf(dir + "/signature.json");
        if (!sf) throw IoError("cannot write " + dir + "/signature.json");
        sf << sig.dump(1) << '\n';
    }
}

GeneratedData load_dataset(const std::string& dir) {
    GeneratedData gen;
    ExpressionDataset& data = gen.data;
    data.x = read_expression_tsv(dir + "/expression.tsv", data.genes, data.cell_ids);

    std::ifstream mf(dir + "/metadata.json");
    if (!mf) throw IoError("cannot open " + dir + "/metadata.json");
    json meta = json::parse(mf, nullptr, false);
    if (meta.is_discarded() || !meta.is_array()) {
        throw IoError("malformed metadata in " + dir);
    }
    if (meta.size() != data.cell_ids.size()) {
        throw IoError("metadata rows do not match expression rows in " + dir);
    }
    data.type_labels.resize(meta.size());
    data.batch_ids.resize(meta.size());
    data.splits.resize(meta.size());
    for (std::size_t i = 0; i < meta.size(); ++i) {
        const json& row = meta[i];
        if (row.value("cell", std::string()) != data.cell_ids[i]) {
            throw IoError("metadata cell order mismatch in " + dir);
        }
        data.type_labels[i] = row.at("type").get<std::string>();
        data.batch_ids[i] = row.at("batch").get<int>();
        data.splits[i] = row.at("split").get<std::string>();
    }

    gen.ontology = load_ontology(dir + "/ontology.json");
    gen.catalog = load_catalog(dir + "/catalog.json");

    if (std::ifstream probe(dir + "/expression_post.tsv"); probe.good()) {
        std::vector<std::string> genes2, ids2;
        Matrix post = read_expression_tsv(dir + "/expression_post.tsv", genes2, ids2);
        if (genes2 != data.genes || ids2 != data.cell_ids) {
            throw IoError("post-perturbation matrix does not align in " + dir);
        }
        data.post = std::move(post);
    }
    if (std::ifstream sf(dir + "/signature.json"); sf.good()) {
        json sig = json::parse(sf, nullptr, false);
        if (sig.is_discarded() || !sig.is_array()) throw IoError("malformed signature in " + dir);
        std::vector<double> values;
        for (const auto& v : sig) values.push_back(v.get<double>());
        if (values.size() != data.genes.size()) {
            throw IoError("signature length mismatch in " + dir);
        }
        data.signature = std::move(values);
    }
    return gen;
}

GeneratorConfig generator_config_from_json(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw InvalidConfig("malformed generator config");
    GeneratorConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "num_genes") cfg.num_genes = value.get<int>();
        else if (key == "num_types") cfg.num_types = value.get<int>();
        else if (key == "num_families") cfg.num_families = value.get<int>();
        else if (key == "markers_per_type") cfg.markers_per_type = value.get<int>();
        else if (key == "alpha_gen") cfg.alpha_gen = value.get<double>();
        else if (key == "uniform_frequencies") cfg.uniform_frequencies = value.get<bool>();
        else if (key == "overexpression") cfg.overexpression = value.get<double>();
        else if (key == "num_cells") cfg.num_cells = value.get<int>();
        else if (key == "min_cells_per_type") cfg.min_cells_per_type = value.get<int>();
        else if (key == "num_batches") cfg.num_batches = value.get<int>();
        else if (key == "batch_shift") cfg.batch_shift = value.get<double>();
        else if (key == "depth_min") cfg.depth_min = value.get<double>();
        else if (key == "depth_max") cfg.depth_max = value.get<double>();
        else if (key == "noise_sigma") cfg.noise_sigma = value.get<double>();
        else if (key == "base_log_mean") cfg.base_log_mean = value.get<double>();
        else if (key == "train_fraction") cfg.train_fraction = value.get<double>();
        else if (key == "val_fraction") cfg.val_fraction = value.get<double>();
        else if (key == "ood_cells") cfg.ood_cells = value.get<int>();
        else if (key == "ood_shift") cfg.ood_shift = value.get<double>();
        else if (key == "perturb_genes") cfg.perturb_genes = value.get<int>();
        else if (key == "perturb_magnitude") cfg.perturb_magnitude = value.get<double>();
        else if (key == "perturb_noise") cfg.perturb_noise = value.get<double>();
        else if (key == "seed") {
            cfg.seed = value.get<std::uint64_t>();
            cfg.seed_explicit = true;
        }
        else throw InvalidConfig("unknown generator config key: " + key);
    }
    cfg.validate();
    return cfg;
}

std::string generator_config_to_json(const GeneratorConfig& cfg) {
    json j = {{"num_genes", cfg.num_genes},
              {"num_types", cfg.num_types},
              {"num_families", cfg.num_families},
              {"markers_per_type", cfg.markers_per_type},
              {"alpha_gen", cfg.alpha_gen},
              {"uniform_frequencies", cfg.uniform_frequencies},
              {"overexpression", cfg.overexpression},
              {"num_cells", cfg.num_cells},
              {"min_cells_per_type", cfg.min_cells_per_type},
              {"num_batches", cfg.num_batches},
              {"batch_shift", cfg.batch_shift},
              {"depth_min", cfg.depth_min},
              {"depth_max", cfg.depth_max},
              {"noise_sigma", cfg.noise_sigma},
              {"base_log_mean", cfg.base_log_mean},
              {"train_fraction", cfg.train_fraction},
              {"val_fraction", cfg.val_fraction},
              {"ood_cells", cfg.ood_cells},
              {"ood_shift", cfg.ood_shift},
              {"perturb_genes", cfg.perturb_genes},
              {"perturb_magnitude", cfg.perturb_magnitude},
              {"perturb_noise", cfg.perturb_noise},
              {"seed", cfg.seed}};
    return j.dump(1);
}

}  // namespace cellrefine
