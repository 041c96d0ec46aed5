#include <deepconn/deepconn.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "testutil.hpp"

using namespace deepconn;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// 5 users x 6 items, every pair reviewed once; rating = (u+i) % 5 + 1 with
/// rating-correlated word choices.
std::string corpus_jsonl() {
    const char* positive[] = {"bright crisp picture with solid build",
                              "smooth crisp sound and solid unit"};
    const char* negative[] = {"dim flimsy box with rough edges",
                              "buzzy rough sound and flimsy unit"};
    const char* neutral[] = {"the unit came boxed with a manual",
                             "plain unit in a plain box"};
    std::ostringstream out;
    std::size_t k = 0;
    for (std::size_t u = 0; u < 5; ++u) {
        for (std::size_t i = 0; i < 6; ++i, ++k) {
            const double rating = static_cast<double>((u + i) % 5 + 1);
            const char* text = rating >= 4.0   ? positive[k % 2]
                               : rating <= 2.0 ? negative[k % 2]
                                               : neutral[k % 2];
            nlohmann::json j;
            j["user"] = "u" + std::to_string(u);
            j["item"] = "i" + std::to_string(i);
            j["rating"] = rating;
            j["text"] = text;
            out << j.dump() << '\n';
        }
    }
    return out.str();
}

/// Covers every word the corpus uses, so coverage comes out exactly 1.
std::string embeddings_text(int c) {
    const char* words[] = {"bright", "crisp", "picture", "with", "solid", "build", "smooth",
                           "sound",  "and",   "unit",    "dim",  "flimsy", "box",  "rough",
                           "edges",  "buzzy", "the",     "came", "boxed",  "a",    "manual",
                           "plain",  "in"};
    std::ostringstream out;
    out.imbue(std::locale::classic());
    int h = 0;
    for (const char* w : words) {
        out << w;
        for (int d = 0; d < c; ++d) out << ' ' << (0.05 * ((h + d) % 9) - 0.2);
        out << '\n';
        ++h;
    }
    return out.str();
}

struct HarnessFixture {
    testutil::TempFile data;
    testutil::TempFile vecs;
    RunConfig config;

    HarnessFixture() : data(corpus_jsonl(), ".jsonl"), vecs(embeddings_text(6), ".txt") {
        config.data = data.path();
        config.embeddings = vecs.path();
        config.rep = "embed";
        config.embed_dim = 6;
        config.n_max = 12;
        config.window = 2;
        config.kernels = 4;
        config.tower_dim = 3;
        config.fm_factors = 2;
        config.lr = 0.01;
        config.batch_size = 6;
        config.epochs = 2;
        config.patience = 3;
        config.seed = 5;
        config.dropout = 0.0;
        config.factors = 2;
        config.reg = 0.1;
        config.sweeps = 5;
        config.mf_grid_factors = {1, 2};
        config.mf_grid_regs = {0.1, 1.0};
        config.bucket_edges = {2, 5};
    }
};

}  // namespace

TEST_CASE("pipeline assembles split, documents, vocabulary, and stats") {
    HarnessFixture fx;
    Pipeline pipe(fx.config);

    CHECK(pipe.split.train.size() == 24);
    CHECK(pipe.split.valid.size() == 3);
    CHECK(pipe.split.test.size() == 3);
    CHECK(pipe.train_tokens.size() == 24);
    CHECK(pipe.vocab.size() > 0);

    double sum = 0.0;
    for (const auto& r : pipe.split.train) sum += r.rating;
    CHECK(pipe.stats.mean_rating == Catch::Approx(sum / 24.0));
    CHECK(pipe.stats.user_ids == pipe.user_docs.entity_ids());
    CHECK(pipe.stats.item_ids == pipe.item_docs.entity_ids());
    CHECK(std::is_sorted(pipe.stats.user_ids.begin(), pipe.stats.user_ids.end()));
}

TEST_CASE("pipeline rejects an invalid configuration up front") {
    HarnessFixture fx;
    fx.config.variant = "bogus";
    CHECK_THROWS_AS(Pipeline(fx.config), std::invalid_argument);
}

TEST_CASE("builders cover each representation") {
    HarnessFixture fx;
    Pipeline pipe(fx.config);

    SECTION("pretrained vectors load with full coverage") {
        double coverage = -2.0;
        auto builder = make_builder<double>(pipe, fx.config, &coverage);
        CHECK(coverage == 1.0);
        CHECK(builder.table.c == 6);
        CHECK(builder.table.vectors.rows() == pipe.vocab.size());
        auto m = builder.build(pipe.user_docs.document("u0"));
        CHECK(m.values.allFinite());
    }

    SECTION("pretrained representation without a vector file is an error") {
        RunConfig c2 = fx.config;
        c2.embeddings.clear();
        CHECK_THROWS_WITH(make_builder<double>(pipe, c2),
                          "rep=embed requires an embeddings file");
    }

    SECTION("random representation needs no file") {
        RunConfig c2 = fx.config;
        c2.rep = "random";
        c2.embeddings.clear();
        double coverage = -2.0;
        auto builder = make_builder<double>(pipe, c2, &coverage);
        CHECK(coverage == -1.0);
        CHECK(builder.build(pipe.item_docs.document("i0")).values.allFinite());
    }

    SECTION("frequency-weighted representation is fitted on training reviews") {
        RunConfig c2 = fx.config;
        c2.rep = "tfidf";
        c2.embeddings.clear();
        auto builder = make_builder<double>(pipe, c2);
        auto m = builder.build(pipe.user_docs.document("u1"));
        CHECK(m.values.allFinite());
        CHECK(m.values.cwiseAbs().sum() > 0.0);
    }
}

TEST_CASE("variant training produces a scoreable model") {
    HarnessFixture fx;
    Pipeline pipe(fx.config);
    auto out = train_variant<double>(pipe, fx.config);

    CHECK(out->kind == VariantKind::Full);
    CHECK(out->fit.history.size() >= 1);
    CHECK(out->fit.history.size() <= 2);
    CHECK_NOTHROW(out->params.at("user.conv.weight"));
    CHECK_NOTHROW(out->params.at("head.v"));
    CHECK_THROWS(out->params.at("embeddings"));  // not training the table here

    std::vector<double> preds;
    const EvalReport report = evaluate_outcome(pipe, *out, pipe.split.test, &preds);
    CHECK(report.count == 3);
    CHECK(preds.size() == 3);
    CHECK(std::isfinite(report.mse));
    for (double p : preds) CHECK(std::isfinite(p));
}

TEST_CASE("table-backed and dot-product variants train through the same path") {
    HarnessFixture fx;
    Pipeline pipe(fx.config);
    for (const char* variant : {"user-only", "item-only", "dot-product"}) {
        RunConfig c2 = fx.config;
        c2.variant = variant;
        auto out = train_variant<double>(pipe, c2);
        const EvalReport report = evaluate_outcome(pipe, *out, pipe.split.test);
        INFO(variant);
        CHECK(std::isfinite(report.mse));
    }
}

TEST_CASE("trainable embeddings update the table and rebuild the inputs") {
    HarnessFixture fx;
    Pipeline pipe(fx.config);
    RunConfig c2 = fx.config;
    c2.train_embeddings = true;

    const auto initial = make_builder<double>(pipe, c2).table.vectors;
    auto out = train_variant<double>(pipe, c2);

    CHECK_NOTHROW(out->params.at("embeddings"));
    CHECK(out->builder.table.vectors.rows() == initial.rows());
    CHECK((out->builder.table.vectors - initial).cwiseAbs().maxCoeff() > 0.0);

    // pre-built matrices must agree with the final table
    for (const auto& id : pipe.stats.user_ids) {
        const auto fresh = out->builder.build(pipe.user_docs.document(id));
        CHECK((fresh.values - out->user_matrices.at(id).values).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("ablation suite trains every row on one shared split") {
    HarnessFixture fx;
    Pipeline pipe(fx.config);
    const AblationTable table = ablation_suite<double>(pipe, fx.config);

    REQUIRE(table.rows.size() == 6);
    const char* expected[] = {"user-only",    "item-only",   "tfidf-input",
                              "random-input", "dot-product", "full"};
    for (std::size_t i = 0; i < 6; ++i) CHECK(table.rows[i].name == expected[i]);

    std::size_t best_count = 0;
    std::set<std::string> fps;
    for (const auto& row : table.rows) {
        INFO(row.name << ": " << row.error);
        CHECK_FALSE(row.failed);
        CHECK(std::isfinite(row.test_mse));
        fps.insert(row.shared_fp);
        if (row.best) ++best_count;
    }
    CHECK(best_count == 1);
    CHECK(fps.size() == 1);  // only the studied factor differs between rows

    const std::string csv = ablation_csv(table);
    CHECK(csv.rfind("name,variant,rep,status,valid_mse,test_mse,best_epoch,epochs_run,best\n",
                    0) == 0);
    CHECK(ablation_json(table)["rows"].size() == 6);
    CHECK(ablation_text(table).find("full") != std::string::npos);
}

TEST_CASE("a failing ablation row is recorded and the suite continues") {
    HarnessFixture fx;
    fx.config.embeddings.clear();  // rows that keep rep=embed cannot build inputs
    Pipeline pipe(fx.config);
    const AblationTable table = ablation_suite<double>(pipe, fx.config);

    REQUIRE(table.rows.size() == 6);
    std::size_t best_count = 0;
    for (const auto& row : table.rows) {
        if (row.rep == "embed") {
            CHECK(row.failed);
            CHECK(row.error == "rep=embed requires an embeddings file");
            CHECK_FALSE(row.best);
        } else {
            CHECK_FALSE(row.failed);
            CHECK(std::isfinite(row.test_mse));
        }
        if (row.best) ++best_count;
    }
    CHECK(best_count == 1);

    const auto j = ablation_json(table);
    CHECK(j["rows"][0]["status"] == "failed");
    CHECK(j["rows"][0]["test_mse"].is_null());
    CHECK(j["rows"][2]["status"] == "ok");
}

TEST_CASE("baseline grid search flags exactly the best cell") {
    HarnessFixture fx;
    Pipeline pipe(fx.config);
    const auto cells = mf_grid_search<double>(pipe, fx.config);

    REQUIRE(cells.size() == 4);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : cells) {
        CHECK(std::isfinite(c.valid_mse));
        best = std::min(best, c.valid_mse);
    }
    std::size_t best_count = 0;
    for (const auto& c : cells)
        if (c.best) {
            ++best_count;
            CHECK(c.valid_mse == best);
        }
    CHECK(best_count == 1);
    CHECK(mf_grid_json(cells)["cells"].size() == 4);
}

TEST_CASE("report bundle compares the model and the baseline per bucket") {
    HarnessFixture fx;
    Pipeline pipe(fx.config);
    const auto bundle = run_report<double>(pipe, fx.config);

    CHECK(bundle.model_report.count == 3);
    CHECK(bundle.baseline_report.count == 3);
    CHECK(std::isfinite(bundle.model_report.mse));
    CHECK(std::isfinite(bundle.baseline_report.mse));
    CHECK(bundle.buckets.edges == fx.config.bucket_edges);
    // per side: one row per bucket, including the open-ended last bucket
    CHECK(bundle.buckets.rows.size() == 2 * (fx.config.bucket_edges.size() + 1));

    bool grid_best = false;
    for (const auto& c : bundle.grid) grid_best |= c.best;
    CHECK(grid_best);
    CHECK((bundle.mf_factors == 1 || bundle.mf_factors == 2));

    CHECK_FALSE(bucket_report_csv(bundle.buckets).empty());
}

TEST_CASE("run outputs are byte-stable across full rebuilds") {
    HarnessFixture fx;

    const auto render = [&]() {
        Pipeline pipe(fx.config);
        const auto bundle = run_report<double>(pipe, fx.config);
        std::string blob;
        blob += config_json(fx.config).dump(2);
        blob += history_json(bundle.outcome->fit).dump(2);
        blob += eval_report_json(bundle.model_report).dump(2);
        blob += mf_grid_json(bundle.grid).dump(2);
        blob += bucket_report_csv(bundle.buckets);
        blob += bucket_report_json(bundle.buckets).dump(2);
        blob += ablation_csv(ablation_suite<double>(pipe, fx.config));
        return blob;
    };

    CHECK(render() == render());
}

TEST_CASE("history serialization keeps every epoch") {
    HarnessFixture fx;
    Pipeline pipe(fx.config);
    auto out = train_variant<double>(pipe, fx.config);

    const auto j = history_json(out->fit);
    REQUIRE(j["epochs"].size() == out->fit.history.size());
    CHECK(j["epochs"][0]["epoch"] == 0);
    CHECK(j["epochs"][0].contains("train_loss"));
    CHECK(j["epochs"][0].contains("valid_mse"));
    CHECK(j.contains("best_epoch"));
    CHECK(j.contains("stopped_early"));
    CHECK(j.contains("diverged"));
}

TEST_CASE("file writer round-trips and surfaces failures") {
    testutil::TempFile target("placeholder", ".txt");
    write_file(target.path(), "alpha\nbeta\n");
    CHECK(slurp(target.path()) == "alpha\nbeta\n");
    CHECK_THROWS_AS(write_file("/nonexistent-dir-zz/x.txt", "y"), std::runtime_error);
}
