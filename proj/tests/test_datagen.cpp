#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cellrefine/datagen.hpp"
#include "cellrefine/errors.hpp"
#include "cellrefine/longtail.hpp"

using namespace cellrefine;

namespace {

GeneratorConfig small_cfg() {
    GeneratorConfig cfg;
    cfg.num_genes = 40;
    cfg.num_types = 4;
    cfg.num_families = 2;
    cfg.markers_per_type = 3;
    cfg.num_cells = 80;
    cfg.num_batches = 2;
    cfg.ood_cells = 10;
    cfg.perturb_genes = 4;
    cfg.perturb_magnitude = 1.5;
    cfg.perturb_noise = 0.0;
    cfg.seed = 7;
    return cfg;
}

double base_scale_of(const GeneratorConfig& cfg) {
    return std::exp(cfg.base_log_mean + 0.5 * cfg.noise_sigma * cfg.noise_sigma);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("uniform allocation spreads cells evenly") {
    GeneratorConfig cfg;
    cfg.num_types = 7;
    cfg.uniform_frequencies = true;
    auto counts = allocate_type_counts(cfg, 100);
    REQUIRE(counts.size() == 7);
    long total = 0;
    long lo = counts[0], hi = counts[0];
    for (long c : counts) {
        total += c;
        lo = std::min(lo, c);
        hi = std::max(hi, c);
    }
    CHECK(total == 100);
    CHECK(hi - lo <= 1);
}

TEST_CASE("ranked allocation preserves the total and the floor") {
    GeneratorConfig cfg;
    cfg.num_types = 12;
    cfg.alpha_gen = 0.4;
    cfg.min_cells_per_type = 3;
    auto counts = allocate_type_counts(cfg, 40);
    long total = 0;
    for (long c : counts) {
        total += c;
        CHECK(c >= 3);
    }
    CHECK(total == 40);

    CHECK_THROWS_AS(allocate_type_counts(cfg, 5), InvalidConfig);
}

TEST_CASE("allocation is deterministic") {
    GeneratorConfig cfg;
    cfg.num_types = 15;
    cfg.alpha_gen = 0.5;
    CHECK(allocate_type_counts(cfg, 12345) == allocate_type_counts(cfg, 12345));
}

TEST_CASE("the tail estimator recovers the generating exponent") {
    for (double alpha : {0.3, 0.5, 0.7}) {
        GeneratorConfig cfg;
        cfg.num_types = 12;
        cfg.alpha_gen = alpha;
        cfg.min_cells_per_type = 2;
        auto counts = allocate_type_counts(cfg, 2000000);
        TailFit fit = fit_tail_exponent(counts);
        INFO("alpha_gen = " << alpha << " estimated " << fit.alpha);
        CHECK(std::abs(fit.alpha - alpha) <= 0.1);
        CHECK(fit.r2 > 0.95);
    }
}

TEST_CASE("config validation rejects inconsistent settings") {
    auto bad = [](auto&& tweak) {
        GeneratorConfig cfg;
        tweak(cfg);
        CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
    };
    bad([](GeneratorConfig& c) { c.num_genes = 0; });
    bad([](GeneratorConfig& c) { c.num_families = c.num_types + 1; });
    bad([](GeneratorConfig& c) {  // marker blocks exceed the gene panel
        c.num_genes = 10;
        c.num_types = 4;
        c.num_families = 2;
        c.markers_per_type = 2;
    });
    bad([](GeneratorConfig& c) { c.alpha_gen = 0.0; });
    bad([](GeneratorConfig& c) { c.num_cells = c.num_types - 1; });
    bad([](GeneratorConfig& c) {
        c.min_cells_per_type = 1000;
        c.num_cells = 100;
    });
    bad([](GeneratorConfig& c) {
        c.depth_min = 2.0;
        c.depth_max = 1.0;
    });
    bad([](GeneratorConfig& c) {
        c.train_fraction = 0.8;
        c.val_fraction = 0.3;
    });
    bad([](GeneratorConfig& c) { c.perturb_genes = c.num_genes + 1; });
    GeneratorConfig ok;
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("generated corpus structure") {
    GeneratorConfig cfg = small_cfg();
    GeneratedData gen = generate(cfg);
    const ExpressionDataset& d = gen.data;

    CHECK(d.num_cells() == 90);  // 80 in-domain + 10 out-of-domain
    CHECK(d.num_genes() == 40);
    CHECK(d.x.rows == 90);
    CHECK(d.x.cols == 40);
    for (double v : d.x.data) {
        CHECK(std::isfinite(v));
        CHECK(v >= 0.0);
    }

    std::set<std::string> ids(d.cell_ids.begin(), d.cell_ids.end());
    CHECK(ids.size() == 90);

    CHECK(d.distinct_types() == std::vector<std::string>{"T01", "T02", "T03", "T04"});

    // out-of-domain rows sit at the end, in a fresh batch
    for (int i = 0; i < 80; ++i) {
        CHECK(d.splits[i] != "ood");
        CHECK(d.batch_ids[i] < 2);
    }
    for (int i = 80; i < 90; ++i) {
        CHECK(d.splits[i] == "ood");
        CHECK(d.batch_ids[i] == 2);
    }
    CHECK(d.split_indices("ood").size() == 10);

    // per-type split sizes follow the stated fractions exactly
    for (const std::string& t : d.distinct_types()) {
        long c = 0, n_train = 0, n_val = 0, n_test = 0;
        for (int i = 0; i < d.num_cells(); ++i) {
            if (d.type_labels[i] != t || d.splits[i] == "ood") continue;
            ++c;
            if (d.splits[i] == "train") ++n_train;
            else if (d.splits[i] == "val") ++n_val;
            else if (d.splits[i] == "test") ++n_test;
        }
        REQUIRE(c > 0);
        long want_train = std::max<long>(1, static_cast<long>(std::floor(c * cfg.train_fraction)));
        long want_val = static_cast<long>(std::floor(c * cfg.val_fraction));
        if (want_train + want_val > c) want_val = c - want_train;
        CHECK(n_train == want_train);
        CHECK(n_val == want_val);
        CHECK(n_test == c - want_train - want_val);
    }

    // ontology: root -> 2 families -> 4 leaves, round-robin family assignment
    CHECK(gen.ontology.root() == "root");
    CHECK(gen.ontology.level.at("F1") == 1);
    CHECK(gen.ontology.level.at("T01") == 2);
    CHECK(gen.ontology.parent.at("T01") == "F1");
    CHECK(gen.ontology.parent.at("T02") == "F2");
    CHECK(gen.ontology.parent.at("T03") == "F1");
    CHECK(gen.ontology.parent.at("T04") == "F2");
    auto pairs = parent_lineage_pairs(gen.ontology);
    CHECK(pairs.size() == 3);
    CHECK(pairs.count({"T01", "T03"}) == 1);
    CHECK(pairs.count({"T02", "T04"}) == 1);
    CHECK(pairs.count({"F1", "F2"}) == 1);

    // disjoint marker blocks with leaf rank 2, family rank 1
    std::set<std::string> all_markers;
    for (const auto& [type, markers] : gen.catalog.entries) {
        const bool leaf = type[0] == 'T';
        CHECK(markers.size() == 3);
        for (const auto& [gene, rank] : markers) {
            CHECK(rank == (leaf ? 2 : 1));
            all_markers.insert(gene);
        }
    }
    CHECK(all_markers.size() == 18);  // (4 leaves + 2 families) x 3, no overlap
}

TEST_CASE("perturbation pair ships an alternating signature on the last genes") {
    GeneratorConfig cfg = small_cfg();
    GeneratedData gen = generate(cfg);
    const ExpressionDataset& d = gen.data;
    REQUIRE(d.signature.has_value());
    REQUIRE(d.post.has_value());
    const std::vector<double>& sig = *d.signature;
    REQUIRE(static_cast<int>(sig.size()) == cfg.num_genes);
    const double unit = cfg.perturb_magnitude * base_scale_of(cfg);
    for (int g = 0; g < cfg.num_genes - cfg.perturb_genes; ++g) CHECK(sig[g] == 0.0);
    for (int k = 0; k < cfg.perturb_genes; ++k) {
        const int g = cfg.num_genes - cfg.perturb_genes + k;
        CHECK(sig[g] == doctest::Approx((k % 2 == 0 ? 1.0 : -1.0) * unit).epsilon(1e-12));
    }
    // with zero perturbation noise the pair is exactly clip(x + signature)
    for (int i = 0; i < d.num_cells(); ++i) {
        for (int g = 0; g < d.num_genes(); ++g) {
            CHECK(d.post->at(i, g) == std::max(0.0, d.x.at(i, g) + sig[g]));
        }
    }
}

TEST_CASE("marker genes separate from baseline genes at high confidence") {
    GeneratorConfig cfg;
    cfg.num_genes = 60;
    cfg.num_types = 4;
    cfg.num_families = 2;
    cfg.markers_per_type = 4;
    cfg.uniform_frequencies = true;
    cfg.num_cells = 500;
    cfg.num_batches = 1;
    cfg.batch_shift = 0.0;
    cfg.seed = 11;
    GeneratedData gen = generate(cfg);
    const ExpressionDataset& d = gen.data;

    const double floor_gap = cfg.overexpression * base_scale_of(cfg);
    const int signal_block = (cfg.num_types + cfg.num_families) * cfg.markers_per_type;
    for (int t = 0; t < cfg.num_types; ++t) {
        const std::string label = "T0" + std::to_string(t + 1);
        const Prototype proto = organize_markers(gen.catalog, gen.ontology, label, 8);
        std::set<std::string> signal(proto.genes.begin(), proto.genes.end());
        double marker_sum = 0.0, other_sum = 0.0;
        long marker_n = 0, other_n = 0;
        for (int i = 0; i < d.num_cells(); ++i) {
            if (d.type_labels[i] != label) continue;
            for (int g = 0; g < d.num_genes(); ++g) {
                if (signal.count(d.genes[g])) {
                    marker_sum += d.x.at(i, g);
                    ++marker_n;
                } else if (g >= signal_block) {  // skip other types' marker blocks
                    other_sum += d.x.at(i, g);
                    ++other_n;
                }
            }
        }
        REQUIRE(marker_n > 0);
        REQUIRE(other_n > 0);
        const double gap = marker_sum / marker_n - other_sum / other_n;
        INFO("type " << label << " marker-baseline gap " << gap);
        CHECK(gap >= floor_gap);
    }
}

TEST_CASE("zero batch shift leaves no detectable batch signal") {
    GeneratorConfig cfg;
    cfg.num_genes = 30;
    cfg.num_types = 3;
    cfg.num_families = 1;
    cfg.markers_per_type = 3;
    cfg.uniform_frequencies = true;
    cfg.num_cells = 2000;
    cfg.num_batches = 2;
    cfg.batch_shift = 0.0;
    cfg.seed = 13;
    GeneratedData gen = generate(cfg);
    const ExpressionDataset& d = gen.data;

    int violations = 0;
    for (int g = 0; g < d.num_genes(); ++g) {
        double s0 = 0, s1 = 0, q0 = 0, q1 = 0;
        long n0 = 0, n1 = 0;
        for (int i = 0; i < d.num_cells(); ++i) {
            const double v = d.x.at(i, g);
            if (d.batch_ids[i] == 0) {
                s0 += v;
                q0 += v * v;
                ++n0;
            } else {
                s1 += v;
                q1 += v * v;
                ++n1;
            }
        }
        const double m0 = s0 / n0, m1 = s1 / n1;
        const double v0 = q0 / n0 - m0 * m0, v1 = q1 / n1 - m1 * m1;
        const double se = std::sqrt(v0 / n0 + v1 / n1);
        if (std::abs(m0 - m1) > 3.0 * se) ++violations;
    }
    CHECK(violations <= 2);  // ~0.3% of 30 genes expected by chance

    // and a real shift is detected on most genes
    cfg.batch_shift = 0.5;
    GeneratedData shifted = generate(cfg);
    int separated = 0;
    for (int g = 0; g < shifted.data.num_genes(); ++g) {
        double s0 = 0, s1 = 0, q0 = 0, q1 = 0;
        long n0 = 0, n1 = 0;
        for (int i = 0; i < shifted.data.num_cells(); ++i) {
            const double v = shifted.data.x.at(i, g);
            if (shifted.data.batch_ids[i] == 0) {
                s0 += v;
                q0 += v * v;
                ++n0;
            } else {
                s1 += v;
                q1 += v * v;
                ++n1;
            }
        }
        const double m0 = s0 / n0, m1 = s1 / n1;
        const double se = std::sqrt((q0 / n0 - m0 * m0) / n0 + (q1 / n1 - m1 * m1) / n1);
        if (std::abs(m0 - m1) > 3.0 * se) ++separated;
    }
    CHECK(separated >= 15);
}

TEST_CASE("sequencing depth scales every value linearly") {
    GeneratorConfig cfg;
    cfg.num_genes = 25;
    cfg.num_types = 3;
    cfg.num_families = 1;
    cfg.markers_per_type = 3;
    cfg.num_cells = 60;
    cfg.num_batches = 1;
    cfg.batch_shift = 0.0;
    cfg.seed = 21;
    GeneratedData unit = generate(cfg);
    cfg.depth_min = cfg.depth_max = 3.0;
    GeneratedData deep = generate(cfg);
    REQUIRE(unit.data.x.data.size() == deep.data.x.data.size());
    for (std::size_t i = 0; i < unit.data.x.data.size(); ++i) {
        CHECK(deep.data.x.data[i] == unit.data.x.data[i] * 3.0);
    }
}

TEST_CASE("generation is bit-deterministic in the seed") {
    GeneratorConfig cfg = small_cfg();
    GeneratedData a = generate(cfg);
    GeneratedData b = generate(cfg);
    CHECK(a.data.x.data == b.data.x.data);
    CHECK(a.data.cell_ids == b.data.cell_ids);
    CHECK(a.data.type_labels == b.data.type_labels);
    CHECK(a.data.batch_ids == b.data.batch_ids);
    CHECK(a.data.splits == b.data.splits);
    CHECK(a.data.post->data == b.data.post->data);

    cfg.seed = 8;
    GeneratedData c = generate(cfg);
    CHECK(a.data.x.data != c.data.x.data);
}

TEST_CASE("saved datasets are byte-identical across runs and round-trip exactly") {
    GeneratorConfig cfg = small_cfg();
    auto dir_a = fresh_dir("cr_datagen_a");
    auto dir_b = fresh_dir("cr_datagen_b");
    GeneratedData gen = generate(cfg);
    save_dataset(gen, dir_a.string());
    save_dataset(generate(cfg), dir_b.string());
    for (const char* name : {"expression.tsv", "metadata.json", "ontology.json", "catalog.json",
                             "expression_post.tsv", "signature.json"}) {
        INFO("file " << name);
        CHECK(slurp((dir_a / name).string()) == slurp((dir_b / name).string()));
    }

    GeneratedData loaded = load_dataset(dir_a.string());
    CHECK(loaded.data.x.data == gen.data.x.data);  // %.17g keeps doubles exact
    CHECK(loaded.data.genes == gen.data.genes);
    CHECK(loaded.data.cell_ids == gen.data.cell_ids);
    CHECK(loaded.data.type_labels == gen.data.type_labels);
    CHECK(loaded.data.batch_ids == gen.data.batch_ids);
    CHECK(loaded.data.splits == gen.data.splits);
    REQUIRE(loaded.data.post.has_value());
    CHECK(loaded.data.post->data == gen.data.post->data);
    REQUIRE(loaded.data.signature.has_value());
    CHECK(*loaded.data.signature == *gen.data.signature);
    CHECK(loaded.ontology.nodes == gen.ontology.nodes);
    CHECK(loaded.ontology.parent == gen.ontology.parent);
    CHECK(loaded.catalog.entries == gen.catalog.entries);

    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
}

TEST_CASE("perturbation application on a hand-built matrix") {
    ExpressionDataset d;
    d.genes = {"g1", "g2"};
    d.cell_ids = {"c1", "c2"};
    d.x = Matrix(2, 2);
    d.x.at(0, 0) = 1.0;
    d.x.at(0, 1) = 2.0;
    d.x.at(1, 0) = 3.0;
    d.x.at(1, 1) = 4.0;

    Matrix same = apply_perturbation(d, {0.0, 0.0}, 0.0, 99);
    CHECK(same.data == d.x.data);

    Matrix shifted = apply_perturbation(d, {0.5, -10.0}, 0.0, 99);
    CHECK(shifted.at(0, 0) == 1.5);
    CHECK(shifted.at(1, 0) == 3.5);
    CHECK(shifted.at(0, 1) == 0.0);  // clipped at zero
    CHECK(shifted.at(1, 1) == 0.0);

    CHECK_THROWS_AS(apply_perturbation(d, {1.0, 2.0, 3.0}, 0.0, 99), LengthMismatch);

    Matrix n1 = apply_perturbation(d, {0.5, 0.5}, 0.2, 5);
    Matrix n2 = apply_perturbation(d, {0.5, 0.5}, 0.2, 5);
    Matrix n3 = apply_perturbation(d, {0.5, 0.5}, 0.2, 6);
    CHECK(n1.data == n2.data);
    CHECK(n1.data != n3.data);
}

TEST_CASE("generator config json round-trip and strictness") {
    CHECK_THROWS_AS(generator_config_from_json("{\"bogus_key\": 1}"), InvalidConfig);
    CHECK_THROWS_AS(generator_config_from_json("not json"), InvalidConfig);
    CHECK_THROWS_AS(generator_config_from_json("[1,2]"), InvalidConfig);

    GeneratorConfig defaults = generator_config_from_json("{}");
    CHECK(defaults.seed == 1);
    CHECK_FALSE(defaults.seed_explicit);

    GeneratorConfig seeded = generator_config_from_json("{\"seed\": 42}");
    CHECK(seeded.seed == 42);
    CHECK(seeded.seed_explicit);

    GeneratorConfig cfg = small_cfg();
    cfg.alpha_gen = 0.55;
    cfg.depth_max = 1.5;
    GeneratorConfig back = generator_config_from_json(generator_config_to_json(cfg));
    CHECK(back.num_genes == cfg.num_genes);
    CHECK(back.num_types == cfg.num_types);
    CHECK(back.num_families == cfg.num_families);
    CHECK(back.markers_per_type == cfg.markers_per_type);
    CHECK(back.alpha_gen == cfg.alpha_gen);
    CHECK(back.overexpression == cfg.overexpression);
    CHECK(back.num_cells == cfg.num_cells);
    CHECK(back.num_batches == cfg.num_batches);
    CHECK(back.batch_shift == cfg.batch_shift);
    CHECK(back.depth_max == cfg.depth_max);
    CHECK(back.noise_sigma == cfg.noise_sigma);
    CHECK(back.train_fraction == cfg.train_fraction);
    CHECK(back.val_fraction == cfg.val_fraction);
    CHECK(back.ood_cells == cfg.ood_cells);
    CHECK(back.perturb_genes == cfg.perturb_genes);
    CHECK(back.perturb_magnitude == cfg.perturb_magnitude);
    CHECK(back.seed == cfg.seed);
    CHECK(back.seed_explicit);

    // config validation runs at parse time
    CHECK_THROWS_AS(generator_config_from_json("{\"num_genes\": -1}"), InvalidConfig);
}
