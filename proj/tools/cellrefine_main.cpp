// cellrefine: data generation, staged training, evaluation, tail analysis,
// and embedding export behind one binary. Exit codes: 0 success, 1 domain
// error, 2 usage/config error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cellrefine/datagen.hpp"
#include "cellrefine/errors.hpp"
#include "cellrefine/eval.hpp"
#include "cellrefine/longtail.hpp"
#include "cellrefine/manifest.hpp"
#include "cellrefine/model.hpp"
#include "cellrefine/training.hpp"

namespace fs = std::filesystem;
using cellrefine::ConfigError;
using cellrefine::DomainError;
using json = nlohmann::json;

namespace {

std::string read_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw ConfigError(std::string(what) + " not found: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::uint64_t env_seed_or(std::uint64_t fallback) {
    const char* env = std::getenv("CELLREFINE_SEED");
    if (env == nullptr || *env == '\0') return fallback;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
        throw ConfigError("CELLREFINE_SEED is not an unsigned integer");
    }
    return static_cast<std::uint64_t>(v);
}

struct ManifestWriter {
    json j;
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

    explicit ManifestWriter(const std::string& command) {
        j["command"] = command;
        j["inputs"] = json::object();
        j["outputs"] = json::object();
    }
    void input(const std::string& path) { j["inputs"][path] = cellrefine::file_digest(path); }
    void output(const std::string& path) { j["outputs"][path] = cellrefine::file_digest(path); }
    void write(const std::string& path) {
        const auto elapsed = std::chrono::steady_clock::now() - started;
        j["wall_clock_seconds"] =
            std::chrono::duration_cast<std::chrono::milliseconds>(elapsed).count() / 1000.0;
        std::ofstream out(path);
        if (!out) throw cellrefine::IoError("cannot write " + path);
        out << j.dump(1) << '\n';
    }
};

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw cellrefine::IoError("cannot create directory " + dir);
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
    const std::string text = read_file(config_path, "config");
    cellrefine::GeneratorConfig cfg;
    try {
        cfg = cellrefine::generator_config_from_json(text);
    } catch (const cellrefine::InvalidConfig& e) {
        throw ConfigError(e.what());
    }
    if (!cfg.seed_explicit) cfg.seed = env_seed_or(cfg.seed);
    ensure_dir(out_dir);
    const cellrefine::GeneratedData gen = cellrefine::generate(cfg);
    cellrefine::save_dataset(gen, out_dir);

    ManifestWriter man("gen-data");
    man.j["config_path"] = config_path;
    man.j["config"] = json::parse(cellrefine::generator_config_to_json(cfg));
    man.j["seed"] = cfg.seed;
    man.input(config_path);
    for (const char* f : {"expression.tsv", "metadata.json", "ontology.json", "catalog.json"}) {
        man.output(out_dir + "/" + f);
    }
    if (gen.data.post.has_value()) {
        man.output(out_dir + "/expression_post.tsv");
        man.output(out_dir + "/signature.json");
    }
    man.write(out_dir + "/manifest.json");
    std::cout << "generated " << gen.data.num_cells() << " cells x " << gen.data.num_genes()
              << " genes -> " << out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------- train

int cmd_train(const std::string& stage_flag, const std::string& config_path,
              const std::string& data_dir, const std::string& init_path,
              const std::string& out_dir) {
    const std::string text = read_file(config_path, "config");
    cellrefine::TrainConfig cfg;
    try {
        cfg = cellrefine::train_config_from_json(text);
        if (!stage_flag.empty()) {
            std::string stage = stage_flag;
            if (stage == "post-pretrain") stage = "post_pretrain";
            if (stage == "fine-tune") stage = "fine_tune";
            cfg.stage = stage;
        }
        if (!cfg.seed_explicit) cfg.seed = env_seed_or(cfg.seed);
        cfg.validate();
    } catch (const cellrefine::InvalidConfig& e) {
        throw ConfigError(e.what());
    }

    const cellrefine::GeneratedData gen = cellrefine::load_dataset(data_dir);

    cellrefine::ModelState state;
    if (!init_path.empty()) {
        state = cellrefine::load_checkpoint(init_path);
    } else if (cfg.stage == "pretrain") {
        state = cellrefine::init_model(gen.data, cfg);
    } else {
        throw ConfigError("--init checkpoint required for stage " + cfg.stage);
    }

    cellrefine::RunRecord record;
    if (cfg.stage == "pretrain") {
        cellrefine::pretrain(state, gen.data, cfg, &record);
    } else if (cfg.stage == "post_pretrain") {
        cellrefine::post_pretrain(state, gen.data, gen.ontology, gen.catalog, cfg, &record);
    } else {
        cellrefine::fine_tune(state, gen.data, cfg, &record);
    }

    ensure_dir(out_dir);
    const std::string ckpt = out_dir + "/model.ckpt";
    cellrefine::save_checkpoint(state, ckpt);
    {
        std::ofstream rr(out_dir + "/run_record.json");
        if (!rr) throw cellrefine::IoError("cannot write run_record.json");
        rr << record.to_json() << '\n';
    }

    ManifestWriter man("train");
    man.j["config_path"] = config_path;
    man.j["config"] = json::parse(cellrefine::train_config_to_json(cfg));
    man.j["seed"] = cfg.seed;
    man.j["stage"] = cfg.stage;
    man.input(config_path);
    man.input(data_dir + "/expression.tsv");
    if (!init_path.empty()) man.input(init_path);
    man.output(ckpt);
    man.output(out_dir + "/run_record.json");
    man.write(out_dir + "/manifest.json");
    std::cout << "stage " << cfg.stage << " done: " << record.epochs.size() << " epochs, stop="
              << record.stop_reason << ", checkpoint " << ckpt << "\n";
    return 0;
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const std::string& task, const std::string& ckpt_path,
                 const std::string& data_dir, const std::string& out_path,
                 const std::string& k_list, int few_shot, const std::string& split,
                 double mask_rate, const std::string& group, std::uint64_t seed_flag,
                 bool seed_given) {
    const cellrefine::ModelState state = cellrefine::load_checkpoint(ckpt_path);
    const cellrefine::GeneratedData gen = cellrefine::load_dataset(data_dir);
    const std::uint64_t seed = seed_given ? seed_flag : env_seed_or(1);

    std::vector<int> ks;
    {
        std::stringstream ss(k_list);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) ks.push_back(std::stoi(item));
        }
        if (ks.empty()) ks = {1, 3};
    }

    cellrefine::MetricsReport rep;
    if (task == "identity") {
        rep = cellrefine::identity_eval(state, gen.data, split, ks, few_shot, seed);
    } else if (task == "imputation") {
        rep = cellrefine::imputation_eval(state, gen.data, mask_rate, seed, split);
    } else if (task == "perturbation") {
        rep = cellrefine::perturbation_eval(state, gen.data, split, group);
    } else if (task == "ood") {
        rep = cellrefine::out_of_domain_eval(state, gen.data, ks);
    } else {
        throw ConfigError("unknown task: " + task);
    }
    rep.checkpoint_digest = cellrefine::file_digest(ckpt_path);

    {
        std::ofstream out(out_path);
        if (!out) throw cellrefine::IoError("cannot write " + out_path);
        out << rep.to_json() << '\n';
    }
    std::cout << rep.to_table();

    ManifestWriter man("evaluate");
    man.j["task"] = task;
    man.j["seed"] = seed;
    man.input(ckpt_path);
    man.input(data_dir + "/expression.tsv");
    man.output(out_path);
    man.write(out_path + ".manifest.json");
    return 0;
}

// ---------------------------------------------------------------- tail-fit

int cmd_tail_fit(const std::string& counts_path, const std::string& data_dir,
                 const std::string& out_path, double fraction, bool full_distribution) {
    std::vector<long> counts;
    if (!counts_path.empty()) {
        const std::string text = read_file(counts_path, "counts file");
        json j = json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ConfigError("malformed counts file " + counts_path);
        if (j.is_array()) {
            for (const auto& v : j) counts.push_back(v.get<long>());
        } else if (j.is_object()) {
            for (const auto& [k, v] : j.items()) counts.push_back(v.get<long>());
        } else {
            throw ConfigError("counts file must hold an array or an object");
        }
    } else if (!data_dir.empty()) {
        const std::string text = read_file(data_dir + "/metadata.json", "metadata");
        json meta = json::parse(text, nullptr, false);
        if (meta.is_discarded() || !meta.is_array()) {
            throw ConfigError("malformed metadata in " + data_dir);
        }
        std::map<std::string, long> per_type;
        for (const auto& row : meta) {
            if (row.value("split", "") == "ood") continue;  // in-domain frequency law only
            per_type[row.at("type").get<std::string>()] += 1;
        }
        for (const auto& [k, v] : per_type) counts.push_back(v);
    } else {
        throw ConfigError("tail-fit needs --counts or --data");
    }

    const cellrefine::CcdfMode mode = full_distribution
                                          ? cellrefine::CcdfMode::full_distribution
                                          : cellrefine::CcdfMode::tail_only;
    const cellrefine::TailFit fit = cellrefine::fit_tail_exponent(counts, fraction, mode);

    json j = {{"alpha", fit.alpha},
              {"r2", fit.r2},
              {"num_points", fit.num_points},
              {"num_categories", counts.size()},
              {"tail_fraction", fraction},
              {"ccdf_mode", full_distribution ? "full_distribution" : "tail_only"}};
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw cellrefine::IoError("cannot write " + out_path);
        out << j.dump(1) << '\n';
    }
    std::printf("alpha=%.4f r2=%.4f points=%d\n", fit.alpha, fit.r2, fit.num_points);
    return 0;
}

// ---------------------------------------------------------------- export

int cmd_export(const std::string& ckpt_path, const std::string& data_dir,
               const std::string& out_path, const std::string& split) {
    const cellrefine::ModelState state = cellrefine::load_checkpoint(ckpt_path);
    const cellrefine::GeneratedData gen = cellrefine::load_dataset(data_dir);
    const cellrefine::ExpressionDataset& data = gen.data;

    std::ofstream out(out_path);
    if (!out) throw cellrefine::IoError("cannot write " + out_path);
    out << "cell\ttype";
    for (int k = 0; k < state.cell_cfg.hidden_size; ++k) out << "\th" << k;
    out << '\n';
    char buf[40];
    for (int i = 0; i < data.num_cells(); ++i) {
        if (!split.empty() && data.splits[i] != split) continue;
        std::vector<double> row(data.x.row(i), data.x.row(i) + data.num_genes());
        const cellrefine::TokenSequence seq =
            cellrefine::tokenize(row, state.vocab, state.medians, state.cell_cfg.max_len);
        const cellrefine::CellEncoding enc = cellrefine::encode_cell(state, seq, nullptr, false);
        out << data.cell_ids[i] << '\t' << data.type_labels[i];
        for (double v : enc.h) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            out << '\t' << buf;
        }
        out << '\n';
    }
    out.flush();
    if (!out) throw cellrefine::IoError("failed writing " + out_path);

    ManifestWriter man("export-embeddings");
    man.input(ckpt_path);
    man.input(data_dir + "/expression.tsv");
    man.output(out_path);
    man.write(out_path + ".manifest.json");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CellRefine: long-tail-aware single-cell representation learning"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::string gen_config, gen_out;
    gen->add_option("--config", gen_config, "generator config JSON")->required();
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "run one training stage");
    std::string tr_stage, tr_config, tr_data, tr_init, tr_out;
    train->add_option("--stage", tr_stage, "pretrain | post-pretrain | fine-tune");
    train->add_option("--config", tr_config, "training config JSON")->required();
    train->add_option("--data", tr_data, "dataset directory")->required();
    train->add_option("--init", tr_init, "initial checkpoint");
    train->add_option("--out", tr_out, "output directory")->required();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint");
    std::string ev_task, ev_ckpt, ev_data, ev_out, ev_k = "1,3", ev_split = "test", ev_group;
    int ev_few_shot = 0;
    double ev_mask_rate = 0.15;
    std::uint64_t ev_seed = 1;
    ev->add_option("--task", ev_task, "identity | imputation | perturbation | ood")->required();
    ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--out", ev_out, "metrics JSON output path")->required();
    ev->add_option("--k", ev_k, "comma-separated recall@k values");
    ev->add_option("--few-shot", ev_few_shot, "per-class cap on evaluated cells");
    ev->add_option("--split", ev_split, "dataset split to evaluate");
    ev->add_option("--mask-rate", ev_mask_rate, "imputation mask rate");
    ev->add_option("--group", ev_group, "perturbation: restrict to one cell type");
    auto* seed_opt = ev->add_option("--seed", ev_seed, "evaluation seed");

    // tail-fit
    auto* tail = app.add_subcommand("tail-fit", "fit the tail exponent of category counts");
    std::string tf_counts, tf_data, tf_out;
    double tf_fraction = 0.30;
    bool tf_full = false;
    tail->add_option("--counts", tf_counts, "JSON count table (array or name->count)");
    tail->add_option("--data", tf_data, "dataset directory (counts from metadata)");
    tail->add_option("--out", tf_out, "TailFit JSON output path");
    tail->add_option("--fraction", tf_fraction, "tail fraction");
    tail->add_flag("--full-distribution", tf_full, "CCDF over all categories");

    // export-embeddings
    auto* ex = app.add_subcommand("export-embeddings", "write per-cell embeddings as TSV");
    std::string ex_ckpt, ex_data, ex_out, ex_split;
    ex->add_option("--checkpoint", ex_ckpt, "model checkpoint")->required();
    ex->add_option("--data", ex_data, "dataset directory")->required();
    ex->add_option("--out", ex_out, "output TSV path")->required();
    ex->add_option("--split", ex_split, "restrict to one split");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_config, gen_out);
        if (train->parsed()) return cmd_train(tr_stage, tr_config, tr_data, tr_init, tr_out);
        if (ev->parsed()) {
            return cmd_evaluate(ev_task, ev_ckpt, ev_data, ev_out, ev_k, ev_few_shot, ev_split,
                                ev_mask_rate, ev_group, ev_seed, seed_opt->count() > 0);
        }
        if (tail->parsed()) return cmd_tail_fit(tf_counts, tf_data, tf_out, tf_fraction, tf_full);
        if (ex->parsed()) return cmd_export(ex_ckpt, ex_data, ex_out, ex_split);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const cellrefine::InvalidConfig& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const DomainError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
