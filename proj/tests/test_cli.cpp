#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::string& binary() {
    static std::string bin = [] {
        const char* env = std::getenv("CELLREFINE_BIN");
        REQUIRE_MESSAGE(env != nullptr, "CELLREFINE_BIN must point at the cli binary");
        return std::string(env);
    }();
    return bin;
}

const fs::path& scratch() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "cr_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return {};
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

RunResult run_raw(const std::string& command) {
    static int counter = 0;
    const fs::path so = scratch() / ("stdout." + std::to_string(counter));
    const fs::path se = scratch() / ("stderr." + std::to_string(counter));
    ++counter;
    const std::string full = command + " > " + so.string() + " 2> " + se.string();
    const int status = std::system(full.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(so);
    r.err = slurp(se);
    return r;
}

RunResult run_cli(const std::string& args) { return run_raw(binary() + " " + args); }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    REQUIRE(out.good());
    out << text;
}

json gen_config() {
    return json{{"num_genes", 40},    {"num_types", 4},         {"num_families", 2},
                {"markers_per_type", 3}, {"uniform_frequencies", true}, {"num_cells", 100},
                {"num_batches", 2},   {"ood_cells", 10},        {"perturb_genes", 4},
                {"perturb_magnitude", 1.5}, {"seed", 5}};
}

json train_config(const std::string& stage) {
    json j = {{"stage", stage},        {"hidden_size", 16},   {"num_layers", 2},
              {"num_heads", 2},        {"ffn_size", 32},      {"max_len", 20},
              {"marker_num_layers", 1}, {"marker_max_len", 8}, {"gmve_components", 2},
              {"gmve_latent_dim", 4},  {"gmve_samples", 4},   {"prototype_k", 6},
              {"batch_size", 16},      {"epoch_cap", 1},      {"patience", 10},
              {"seed", 6}};
    return j;
}

// the chain below builds these once; later cases reuse them
const fs::path kData = scratch() / "data";
const fs::path kPt = scratch() / "pt";
const fs::path kPp = scratch() / "pp";
const fs::path kFt = scratch() / "ft";

int tsv_rows(const std::string& text) {
    int rows = 0;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (!line.empty()) ++rows;
    }
    return rows;
}

int tsv_cols(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    if (!std::getline(ss, line)) return 0;
    int cols = 1;
    for (char c : line) {
        if (c == '\t') ++cols;
    }
    return cols;
}

}  // namespace

TEST_CASE("missing config file exits with usage error") {
    RunResult r = run_cli("gen-data --config /definitely/not/here.json --out " +
                          (scratch() / "x").string());
    CHECK(r.code == 2);
    CHECK(r.err.find("config not found") != std::string::npos);
}

TEST_CASE("argument parsing errors exit with code 2, help with 0") {
    CHECK(run_cli("no-such-command").code == 2);
    CHECK(run_cli("gen-data").code == 2);             // missing required options
    CHECK(run_cli("train --config x").code == 2);     // missing required options
    CHECK(run_cli("--help").code == 0);
    CHECK(run_cli("gen-data --help").code == 0);
}

TEST_CASE("dataset generation") {
    write_text(scratch() / "gen.json", gen_config().dump());
    RunResult r = run_cli("gen-data --config " + (scratch() / "gen.json").string() + " --out " +
                          kData.string());
    REQUIRE(r.code == 0);
    CHECK(r.out.find("generated 110 cells x 40 genes") != std::string::npos);
    for (const char* f : {"expression.tsv", "metadata.json", "ontology.json", "catalog.json",
                          "expression_post.tsv", "signature.json", "manifest.json"}) {
        CHECK(fs::exists(kData / f));
    }
    json man = json::parse(slurp(kData / "manifest.json"));
    CHECK(man.at("command") == "gen-data");
    CHECK(man.at("seed") == 5);
    CHECK(man.at("outputs").size() >= 4);
    CHECK(man.at("inputs").size() == 1);

    // same config, fresh directory: byte-identical corpus
    RunResult again = run_cli("gen-data --config " + (scratch() / "gen.json").string() +
                              " --out " + (scratch() / "data2").string());
    REQUIRE(again.code == 0);
    CHECK(slurp(kData / "expression.tsv") == slurp(scratch() / "data2" / "expression.tsv"));
}

TEST_CASE("malformed generator config exits with usage error") {
    write_text(scratch() / "bad.json", "{\"num_genes\": ") ;
    CHECK(run_cli("gen-data --config " + (scratch() / "bad.json").string() + " --out " +
                  (scratch() / "nope").string())
              .code == 2);
    write_text(scratch() / "unknown.json", "{\"frobnicate\": 3}");
    RunResult r = run_cli("gen-data --config " + (scratch() / "unknown.json").string() +
                          " --out " + (scratch() / "nope").string());
    CHECK(r.code == 2);
    CHECK(r.err.find("unknown generator config key") != std::string::npos);
}

TEST_CASE("staged training chain") {
    REQUIRE(fs::exists(kData / "expression.tsv"));  // produced above

    write_text(scratch() / "pt.json", train_config("pretrain").dump());
    RunResult pt = run_cli("train --config " + (scratch() / "pt.json").string() + " --data " +
                           kData.string() + " --out " + kPt.string());
    REQUIRE_MESSAGE(pt.code == 0, pt.err);
    CHECK(pt.out.find("stage pretrain done") != std::string::npos);
    CHECK(fs::exists(kPt / "model.ckpt"));
    CHECK(fs::exists(kPt / "run_record.json"));
    json rec = json::parse(slurp(kPt / "run_record.json"));
    CHECK(rec.at("stage") == "pt");
    CHECK(rec.at("epochs").size() == 1);

    // hyphenated stage flag maps onto the config stage
    write_text(scratch() / "pp.json", train_config("pretrain").dump());
    RunResult pp = run_cli("train --stage post-pretrain --config " +
                           (scratch() / "pp.json").string() + " --data " + kData.string() +
                           " --init " + (kPt / "model.ckpt").string() + " --out " + kPp.string());
    REQUIRE_MESSAGE(pp.code == 0, pp.err);
    CHECK(pp.out.find("stage post_pretrain done") != std::string::npos);
    CHECK(json::parse(slurp(kPp / "run_record.json")).at("stage") == "pp");

    write_text(scratch() / "ft.json", [] {
        json j = train_config("fine_tune");
        j["mode"] = "LP";
        j["epoch_cap"] = 3;
        return j.dump();
    }());
    RunResult ft = run_cli("train --config " + (scratch() / "ft.json").string() + " --data " +
                           kData.string() + " --init " + (kPp / "model.ckpt").string() +
                           " --out " + kFt.string());
    REQUIRE_MESSAGE(ft.code == 0, ft.err);
    CHECK(ft.out.find("stage fine_tune done") != std::string::npos);
}

TEST_CASE("non-pretrain stages demand an initial checkpoint") {
    write_text(scratch() / "pp2.json", train_config("post_pretrain").dump());
    RunResult r = run_cli("train --config " + (scratch() / "pp2.json").string() + " --data " +
                          kData.string() + " --out " + (scratch() / "nope").string());
    CHECK(r.code == 2);
    CHECK(r.err.find("--init checkpoint required") != std::string::npos);
}

TEST_CASE("stage order violations exit with domain error") {
    // fine-tuning from the fine-tuned checkpoint violates the stage ordering
    RunResult r = run_cli("train --config " + (scratch() / "ft.json").string() + " --data " +
                          kData.string() + " --init " + (kFt / "model.ckpt").string() +
                          " --out " + (scratch() / "nope2").string());
    CHECK(r.code == 1);
    CHECK(r.err.find("StageOrderViolation") != std::string::npos);
}

TEST_CASE("evaluation writes reproducible metrics") {
    REQUIRE(fs::exists(kFt / "model.ckpt"));
    const std::string base = "evaluate --task identity --checkpoint " +
                             (kFt / "model.ckpt").string() + " --data " + kData.string() +
                             " --seed 3 --out ";
    RunResult a = run_cli(base + (scratch() / "m1.json").string());
    REQUIRE_MESSAGE(a.code == 0, a.err);
    CHECK(a.out.find("task: cell_identity  split: test  seed: 3") != std::string::npos);
    CHECK(a.out.find("macro_f1") != std::string::npos);

    json m = json::parse(slurp(scratch() / "m1.json"));
    CHECK(m.at("task") == "cell_identity");
    CHECK(m.at("split") == "test");
    CHECK(m.at("seed") == 3);
    CHECK(m.at("values").contains("macro_f1"));
    CHECK(m.at("values").contains("accuracy"));
    CHECK(m.at("checkpoint_digest").get<std::string>().size() == 16);
    CHECK_FALSE(m.at("per_class").empty());

    RunResult b = run_cli(base + (scratch() / "m2.json").string());
    REQUIRE(b.code == 0);
    CHECK(slurp(scratch() / "m1.json") == slurp(scratch() / "m2.json"));

    CHECK(fs::exists(scratch() / "m1.json.manifest.json"));
}

TEST_CASE("imputation and out-of-domain evaluation run end to end") {
    RunResult imp = run_cli("evaluate --task imputation --checkpoint " +
                            (kPt / "model.ckpt").string() + " --data " + kData.string() +
                            " --seed 2 --out " + (scratch() / "imp.json").string());
    REQUIRE_MESSAGE(imp.code == 0, imp.err);
    json mi = json::parse(slurp(scratch() / "imp.json"));
    CHECK(mi.at("task") == "imputation");

    RunResult ood = run_cli("evaluate --task ood --checkpoint " + (kFt / "model.ckpt").string() +
                            " --data " + kData.string() + " --out " +
                            (scratch() / "ood.json").string());
    REQUIRE_MESSAGE(ood.code == 0, ood.err);
    json mo = json::parse(slurp(scratch() / "ood.json"));
    CHECK(mo.at("task") == "out_of_domain");

    RunResult bad = run_cli("evaluate --task telepathy --checkpoint " +
                            (kPt / "model.ckpt").string() + " --data " + kData.string() +
                            " --out " + (scratch() / "t.json").string());
    CHECK(bad.code == 2);
    CHECK(bad.err.find("unknown task") != std::string::npos);
}

TEST_CASE("tail fitting from a counts file") {
    write_text(scratch() / "blood.json",
               "[20757, 16645, 8775, 6185, 5877, 3059, 2847, 2095, 1871, 242, 97]");
    RunResult r = run_cli("tail-fit --counts " + (scratch() / "blood.json").string() + " --out " +
                          (scratch() / "fit.json").string());
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("alpha=0.3658 r2=0.9955 points=3") != std::string::npos);
    json fit = json::parse(slurp(scratch() / "fit.json"));
    CHECK(fit.at("num_points") == 3);
    CHECK(fit.at("num_categories") == 11);
    CHECK(fit.at("ccdf_mode") == "tail_only");

    // named-count object form with the full-distribution convention
    write_text(scratch() / "named.json",
               "{\"a\": 20757, \"b\": 16645, \"c\": 8775, \"d\": 6185, \"e\": 5877,"
               " \"f\": 3059, \"g\": 2847, \"h\": 2095, \"i\": 1871, \"j\": 242, \"k\": 97}");
    RunResult full = run_cli("tail-fit --counts " + (scratch() / "named.json").string() +
                             " --full-distribution");
    REQUIRE(full.code == 0);
    CHECK(full.out.find("alpha=0.3658") == std::string::npos);  // differing convention

    // domain failure: too few categories
    write_text(scratch() / "two.json", "[5, 10]");
    RunResult two = run_cli("tail-fit --counts " + (scratch() / "two.json").string());
    CHECK(two.code == 1);
    CHECK(two.err.find("TooFewCategories") != std::string::npos);

    // config failure: unparseable counts
    write_text(scratch() / "garbage.json", "]]]");
    CHECK(run_cli("tail-fit --counts " + (scratch() / "garbage.json").string()).code == 2);

    // counts derived from dataset metadata need ranked frequencies to be fittable
    json ranked = {{"num_genes", 30},   {"num_types", 12},  {"num_families", 2},
                   {"markers_per_type", 2}, {"uniform_frequencies", false}, {"alpha_gen", 0.5},
                   {"num_cells", 3000}, {"num_batches", 1}, {"seed", 8}};
    write_text(scratch() / "ranked.json", ranked.dump());
    RunResult rgen = run_cli("gen-data --config " + (scratch() / "ranked.json").string() +
                             " --out " + (scratch() / "ranked").string());
    REQUIRE_MESSAGE(rgen.code == 0, rgen.err);
    RunResult data = run_cli("tail-fit --data " + (scratch() / "ranked").string());
    REQUIRE_MESSAGE(data.code == 0, data.err);
    CHECK(data.out.find("points=") != std::string::npos);
}

TEST_CASE("embedding export shape") {
    const fs::path tsv = scratch() / "emb.tsv";
    RunResult r = run_cli("export-embeddings --checkpoint " + (kFt / "model.ckpt").string() +
                          " --data " + kData.string() + " --out " + tsv.string());
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const std::string text = slurp(tsv);
    CHECK(tsv_rows(text) == 111);     // header + every cell
    CHECK(tsv_cols(text) == 2 + 16);  // cell, type, hidden dims

    RunResult test_only = run_cli("export-embeddings --checkpoint " +
                                  (kFt / "model.ckpt").string() + " --data " + kData.string() +
                                  " --split ood --out " + (scratch() / "emb_ood.tsv").string());
    REQUIRE(test_only.code == 0);
    CHECK(tsv_rows(slurp(scratch() / "emb_ood.tsv")) == 11);  // header + ood block
}

TEST_CASE("environment seed applies only when the config names none") {
    json noseed = gen_config();
    noseed.erase("seed");
    write_text(scratch() / "noseed.json", noseed.dump());
    json seeded = gen_config();
    seeded["seed"] = 99;
    write_text(scratch() / "seed99.json", seeded.dump());

    RunResult env_run =
        run_raw("CELLREFINE_SEED=99 " + binary() + " gen-data --config " +
                (scratch() / "noseed.json").string() + " --out " + (scratch() / "env99").string());
    REQUIRE_MESSAGE(env_run.code == 0, env_run.err);
    RunResult cfg_run = run_cli("gen-data --config " + (scratch() / "seed99.json").string() +
                                " --out " + (scratch() / "cfg99").string());
    REQUIRE(cfg_run.code == 0);
    CHECK(slurp(scratch() / "env99" / "expression.tsv") ==
          slurp(scratch() / "cfg99" / "expression.tsv"));

    // an explicit config seed wins over the environment
    RunResult both =
        run_raw("CELLREFINE_SEED=1234 " + binary() + " gen-data --config " +
                (scratch() / "seed99.json").string() + " --out " + (scratch() / "both").string());
    REQUIRE(both.code == 0);
    CHECK(slurp(scratch() / "both" / "expression.tsv") ==
          slurp(scratch() / "cfg99" / "expression.tsv"));

    RunResult junk = run_raw("CELLREFINE_SEED=nope " + binary() + " gen-data --config " +
                             (scratch() / "noseed.json").string() + " --out " +
                             (scratch() / "junkseed").string());
    CHECK(junk.code == 2);
}
