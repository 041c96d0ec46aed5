#include <deepconn/train.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "testutil.hpp"

using namespace deepconn;

namespace {

DocumentMatrix<double> random_doc(Index c, Index n, Index n_real, Rng& rng) {
    DocumentMatrix<double> m;
    m.values = MatrixX<double>::Zero(c, n);
    m.mask.assign(static_cast<std::size_t>(n), 0);
    m.row_ids.assign(static_cast<std::size_t>(n), kPadRow);
    for (Index j = 0; j < n_real; ++j) {
        for (Index i = 0; i < c; ++i) m.values(i, j) = rng.uniform(-1.0, 1.0);
        m.mask[static_cast<std::size_t>(j)] = 1;
        m.row_ids[static_cast<std::size_t>(j)] = 0;
    }
    return m;
}

/// Two users x two items with fixed ratings, mapped onto `n_examples`
/// training rows by cycling through the pairs.
struct TinyCorpus {
    ModelConfig config;
    DeepConnModel<double> model;
    ParameterSet<double> params;
    std::vector<DocumentMatrix<double>> user_docs;
    std::vector<DocumentMatrix<double>> item_docs;
    std::vector<TrainExample<double>> examples;

    explicit TinyCorpus(std::uint64_t seed, std::size_t n_examples = 4, Index n1 = 3) {
        config.c = 4;
        config.t = 2;
        config.n1 = n1;
        config.n2 = 2;
        config.k = 2;
        config.seed = seed;

        CorpusStats stats;
        stats.mean_rating = 3.625;
        stats.user_ids = {"u0", "u1"};
        stats.item_ids = {"i0", "i1"};
        model = make_variant<double>(VariantKind::Full, config, stats);
        model.add_parameters(params);

        Rng doc_rng(mix_seed(seed, {0xd0c5ULL}));
        user_docs.push_back(random_doc(config.c, 5, 4, doc_rng));
        user_docs.push_back(random_doc(config.c, 5, 5, doc_rng));
        item_docs.push_back(random_doc(config.c, 5, 5, doc_rng));
        item_docs.push_back(random_doc(config.c, 5, 3, doc_rng));

        const double ratings[4] = {4.0, 2.5, 3.0, 5.0};
        for (std::size_t idx = 0; idx < n_examples; ++idx) {
            TrainExample<double> ex;
            ex.user_matrix = &user_docs[idx % 2];
            ex.item_matrix = &item_docs[(idx / 2) % 2];
            ex.user_id = idx % 2 == 0 ? "u0" : "u1";
            ex.item_id = (idx / 2) % 2 == 0 ? "i0" : "i1";
            ex.rating = ratings[idx % 4];
            examples.push_back(ex);
        }
    }

    double eval_mse() {
        Rng dummy(0);
        double sum = 0.0;
        for (const auto& ex : examples) {
            ForwardCache<double> cache;
            ModelInput<double> in{ex.user_matrix, ex.item_matrix, ex.user_id, ex.item_id};
            const double y = predict(model, in, 0.0, false, dummy, cache);
            sum += (y - ex.rating) * (y - ex.rating);
        }
        return sum / static_cast<double>(examples.size());
    }
};

/// Single scalar parameter wired into a ParameterSet, for optimizer algebra.
struct Scalar {
    VectorX<double> theta;
    ParameterSet<double> params;

    explicit Scalar(double value) {
        theta.resize(1);
        theta[0] = value;
        params.add("theta", theta);
    }

    void set_grad(double g) { params.at("theta").grad[0] = g; }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

// ---------------------------------------------------------------------------
// optimizer step
// ---------------------------------------------------------------------------

TEST_CASE("adaptive step matches the hand-computed scalar trace") {
    Scalar s(1.0);
    TrainConfig cfg;
    cfg.lr = 0.002;

    s.set_grad(1.0);
    rmsprop_step(s.params, cfg);
    const double step1 = 0.002 / (std::sqrt(0.9) + 1e-8);
    CHECK(s.theta[0] == Catch::Approx(1.0 - step1).epsilon(1e-14));
    // documented first-step magnitude for a unit gradient at the default rate
    CHECK(std::abs((1.0 - s.theta[0]) - 0.0021082) < 1e-6);

    s.set_grad(1.0);
    rmsprop_step(s.params, cfg);
    const double step2 = 0.002 / (std::sqrt(0.9 + 0.1 * 0.9) + 1e-8);
    CHECK(s.theta[0] == Catch::Approx(1.0 - step1 - step2).epsilon(1e-12));
}

TEST_CASE("a zero gradient decays the accumulator but leaves the value untouched") {
    Scalar s(0.75);
    TrainConfig cfg;
    s.set_grad(1.0);
    rmsprop_step(s.params, cfg);
    const double after_first = s.theta[0];

    s.set_grad(0.0);
    rmsprop_step(s.params, cfg);
    CHECK(s.theta[0] == after_first);  // exactly: the applied delta is zero
    CHECK(s.params.at("theta").rms[0] == Catch::Approx(0.1 * 0.9).epsilon(1e-14));
}

TEST_CASE("the update always moves against the gradient") {
    Rng rng(77);
    for (int rep = 0; rep < 50; ++rep) {
        const double start = rng.uniform(-2, 2);
        const double g = rng.uniform(-3, 3);
        if (g == 0.0) continue;
        Scalar s(start);
        TrainConfig cfg;
        s.set_grad(g);
        rmsprop_step(s.params, cfg);
        const double delta = s.theta[0] - start;
        CHECK(delta * g < 0.0);
    }
}

TEST_CASE("swapped accumulator weighting changes the first step accordingly") {
    Scalar s(1.0);
    TrainConfig cfg;
    cfg.decay_sq = 0.1;
    cfg.decay_hist = 0.9;
    s.set_grad(1.0);
    rmsprop_step(s.params, cfg);
    CHECK(s.theta[0] == Catch::Approx(1.0 - 0.002 / (std::sqrt(0.1) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("accumulators stay nonnegative and gradients are cleared") {
    Scalar s(0.0);
    TrainConfig cfg;
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
        s.set_grad(rng.uniform(-4, 4));
        rmsprop_step(s.params, cfg);
        CHECK(s.params.at("theta").rms[0] >= 0.0);
        CHECK(s.params.at("theta").grad[0] == 0.0);
    }
}

TEST_CASE("a non-finite gradient is reported with the parameter name") {
    Scalar s(1.0);
    TrainConfig cfg;
    s.set_grad(std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_WITH(rmsprop_step(s.params, cfg),
                      Catch::Matchers::ContainsSubstring("theta"));
}

TEST_CASE("weight decay pulls an idle parameter toward zero") {
    Scalar s(5.0);
    TrainConfig cfg;
    cfg.weight_decay = 0.01;
    s.set_grad(0.0);
    rmsprop_step(s.params, cfg);
    CHECK(s.theta[0] < 5.0);
    CHECK(s.theta[0] > 4.9);
}

TEST_CASE("training settings are validated") {
    TrainConfig cfg;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.decay_sq = 0.5;  // weights no longer sum to 1
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.lr = -1.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.patience = -1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.eps = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    cfg.max_epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = {};
    CHECK_NOTHROW(cfg.validate());
}

// ---------------------------------------------------------------------------
// epoch loop
// ---------------------------------------------------------------------------

TEST_CASE("an epoch covers every example, final short batch included") {
    TinyCorpus tc(11, 250);
    TrainConfig cfg;
    cfg.seed = 3;
    const EpochStats stats = train_epoch(tc.model, tc.params, tc.examples, cfg, 0);
    CHECK(stats.batches == 3);  // 100 + 100 + 50
    CHECK(stats.examples == 250);
}

TEST_CASE("an empty example set is rejected") {
    TinyCorpus tc(11, 4);
    TrainConfig cfg;
    std::vector<TrainExample<double>> none;
    CHECK_THROWS_AS(train_epoch(tc.model, tc.params, none, cfg, 0), std::invalid_argument);
}

TEST_CASE("zero learning rate leaves every parameter numerically unchanged") {
    TinyCorpus tc(19, 8);
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.seed = 5;
    const std::vector<double> before = tc.params.flatten();
    train_epoch(tc.model, tc.params, tc.examples, cfg, 0);
    const std::vector<double> after = tc.params.flatten();
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("the same seed reproduces the epoch exactly") {
    TinyCorpus a(23, 12), b(23, 12);
    TrainConfig cfg;
    cfg.seed = 7;
    cfg.batch_size = 5;
    const EpochStats sa = train_epoch(a.model, a.params, a.examples, cfg, 0);
    const EpochStats sb = train_epoch(b.model, b.params, b.examples, cfg, 0);
    CHECK(sa.mean_loss == sb.mean_loss);
    const auto fa = a.params.flatten(), fb = b.params.flatten();
    REQUIRE(fa.size() == fb.size());
    for (std::size_t i = 0; i < fa.size(); ++i) CHECK(fa[i] == fb[i]);

    TinyCorpus c(23, 12);
    TrainConfig other = cfg;
    other.seed = 8;  // different shuffle + dropout draws
    const EpochStats sc = train_epoch(c.model, c.params, c.examples, other, 0);
    CHECK(sc.mean_loss != sa.mean_loss);
}

TEST_CASE("a single-batch epoch reports the pre-update mean loss") {
    TinyCorpus tc(31, 4);
    TrainConfig cfg;
    cfg.seed = 2;
    cfg.dropout = 0.0;  // deterministic forward, equal to evaluation mode
    const double expected = tc.eval_mse();
    const EpochStats stats = train_epoch(tc.model, tc.params, tc.examples, cfg, 0);
    CHECK(stats.mean_loss == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("the worker count does not change the result") {
    TrainConfig cfg;
    cfg.seed = 13;
    cfg.batch_size = 4;
    cfg.dropout = 0.5;
    cfg.max_epochs = 3;
    cfg.patience = 10;
    int calls = 0;
    const auto script = [&calls]() { return 3.0 - calls++; };

    ::setenv("DEEPCONN_THREADS", "3", 1);
    TinyCorpus a(41, 8);
    int calls_a = 0;
    const FitResult ra = fit(a.model, a.params, a.examples, cfg,
                             [&calls_a]() { return 3.0 - calls_a++; });
    ::unsetenv("DEEPCONN_THREADS");

    TinyCorpus b(41, 8);
    const FitResult rb = fit(b.model, b.params, b.examples, cfg, script);

    REQUIRE(ra.history.size() == rb.history.size());
    for (std::size_t i = 0; i < ra.history.size(); ++i)
        CHECK(ra.history[i].train_loss == rb.history[i].train_loss);
    const auto fa = a.params.flatten(), fb = b.params.flatten();
    REQUIRE(fa.size() == fb.size());
    for (std::size_t i = 0; i < fa.size(); ++i) CHECK(fa[i] == fb[i]);
}

// ---------------------------------------------------------------------------
// early stopping
// ---------------------------------------------------------------------------

namespace {

/// Scripted validation scores, one per call.
struct Script {
    std::vector<double> values;
    std::size_t at = 0;
    double operator()() { return values.at(at++); }
};

}  // namespace

TEST_CASE("early stopping obeys the patience budget") {
    TrainConfig cfg;
    cfg.seed = 1;
    cfg.max_epochs = 50;

    SECTION("patience zero stops on the first non-improving epoch") {
        cfg.patience = 0;
        TinyCorpus tc(3, 4);
        Script script{{5.0, 4.0, 4.5, 4.6, 4.7, 4.8}, 0};
        const FitResult r = fit(tc.model, tc.params, tc.examples, cfg, std::ref(script));
        CHECK(r.history.size() == 3);
        CHECK(r.best_epoch == 1);
        CHECK(r.best_valid_mse == 4.0);
        CHECK(r.stopped_early);
        CHECK_FALSE(r.diverged);
    }

    SECTION("patience one tolerates a single bad epoch") {
        cfg.patience = 1;
        TinyCorpus tc(3, 4);
        Script script{{5.0, 4.0, 4.5, 4.6, 4.7, 4.8}, 0};
        const FitResult r = fit(tc.model, tc.params, tc.examples, cfg, std::ref(script));
        CHECK(r.history.size() == 4);
        CHECK(r.best_epoch == 1);
        CHECK(r.stopped_early);
    }
}

TEST_CASE("an equal validation score does not count as improvement") {
    TrainConfig cfg;
    cfg.seed = 1;
    cfg.patience = 0;
    TinyCorpus tc(5, 4);
    Script script{{5.0, 5.0, 5.0}, 0};
    const FitResult r = fit(tc.model, tc.params, tc.examples, cfg, std::ref(script));
    CHECK(r.history.size() == 2);
    CHECK(r.best_epoch == 0);
}

TEST_CASE("the history never exceeds the epoch budget") {
    TrainConfig cfg;
    cfg.seed = 1;
    cfg.max_epochs = 3;
    cfg.patience = 50;
    TinyCorpus tc(7, 4);
    Script script{{9.0, 8.0, 7.0}, 0};
    const FitResult r = fit(tc.model, tc.params, tc.examples, cfg, std::ref(script));
    CHECK(r.history.size() == 3);
    CHECK(r.best_epoch == 2);
    CHECK_FALSE(r.stopped_early);
    for (std::size_t i = 0; i < r.history.size(); ++i)
        CHECK(r.history[i].epoch == static_cast<Index>(i));
}

TEST_CASE("a non-finite validation score flags divergence") {
    TrainConfig cfg;
    cfg.seed = 1;
    TinyCorpus tc(9, 4);
    std::vector<double> captured;
    int call = 0;
    const FitResult r = fit(tc.model, tc.params, tc.examples, cfg, [&]() -> double {
        if (call++ == 0) {
            captured = tc.params.flatten();
            return 4.0;
        }
        return std::numeric_limits<double>::quiet_NaN();
    });
    CHECK(r.diverged);
    CHECK(r.history.size() == 2);
    CHECK(r.best_epoch == 0);
    const auto now = tc.params.flatten();
    REQUIRE(now.size() == captured.size());
    for (std::size_t i = 0; i < now.size(); ++i) CHECK(now[i] == captured[i]);
}

TEST_CASE("the best parameters are restored after stopping") {
    TrainConfig cfg;
    cfg.seed = 6;
    cfg.patience = 2;
    TinyCorpus tc(13, 4);
    Script script{{3.0, 1.0, 2.0, 2.0, 2.0}, 0};
    std::vector<double> best_snapshot;
    int call = 0;
    const FitResult r = fit(tc.model, tc.params, tc.examples, cfg, [&]() {
        const double v = script();
        if (call++ == 1) best_snapshot = tc.params.flatten();
        return v;
    });
    CHECK(r.history.size() == 5);
    CHECK(r.best_epoch == 1);
    CHECK(r.best_valid_mse == 1.0);
    const auto now = tc.params.flatten();
    REQUIRE(now.size() == best_snapshot.size());
    for (std::size_t i = 0; i < now.size(); ++i) CHECK(now[i] == best_snapshot[i]);
}

TEST_CASE("training fits a small consistent corpus") {
    TinyCorpus tc(17, 4);
    TrainConfig cfg;
    cfg.seed = 4;
    cfg.lr = 0.01;
    cfg.dropout = 0.0;
    cfg.max_epochs = 60;
    cfg.patience = 60;
    // ratings {4, 2.5, 3, 5}: predicting their mean scores 0.921875
    const double mean_mse = 0.921875;
    const FitResult r = fit(tc.model, tc.params, tc.examples, cfg, [&]() { return tc.eval_mse(); });
    REQUIRE(r.best_epoch >= 0);
    CHECK(r.best_valid_mse < 0.25 * mean_mse);
    CHECK(tc.eval_mse() == Catch::Approx(r.best_valid_mse).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round-trip restores every parameter") {
    TinyCorpus tc(21, 4);
    const std::vector<double> original = tc.params.flatten();

    testutil::TempFile file("", ".ckpt");
    nlohmann::ordered_json extra;
    extra["epoch"] = 7;
    extra["vocab_fingerprint"] = "f00f";
    save_checkpoint(file.path(), tc.params, extra);

    for (auto& e : tc.params.entries()) e.values().array() += 1.0;

    const std::string expected_fp = "f00f";
    const nlohmann::ordered_json header = load_checkpoint(file.path(), tc.params, &expected_fp);
    CHECK(header.at("epoch").get<int>() == 7);
    CHECK(header.at("params").size() == tc.params.entries().size());

    const std::vector<double> restored = tc.params.flatten();
    REQUIRE(restored.size() == original.size());
    for (std::size_t i = 0; i < restored.size(); ++i) {
        // payload precision is 32-bit; the round-trip is exact at that width
        CHECK(restored[i] == static_cast<double>(static_cast<float>(original[i])));
    }
}

TEST_CASE("a corrupted magic is rejected") {
    TinyCorpus tc(25, 4);
    testutil::TempFile file("", ".ckpt");
    save_checkpoint(file.path(), tc.params, {});
    std::string bytes = slurp(file.path());
    bytes[0] = 'X';
    testutil::TempFile bad(bytes, ".ckpt");
    CHECK_THROWS_WITH(load_checkpoint(bad.path(), tc.params),
                      Catch::Matchers::ContainsSubstring("not a checkpoint"));
}

TEST_CASE("an unsupported version is rejected") {
    TinyCorpus tc(25, 4);
    testutil::TempFile file("", ".ckpt");
    save_checkpoint(file.path(), tc.params, {});
    std::string bytes = slurp(file.path());
    bytes[8] = static_cast<char>(9);  // version field follows the 8-byte magic
    testutil::TempFile bad(bytes, ".ckpt");
    CHECK_THROWS_WITH(load_checkpoint(bad.path(), tc.params),
                      Catch::Matchers::ContainsSubstring("version"));
}

TEST_CASE("a truncated payload is rejected") {
    TinyCorpus tc(27, 4);
    testutil::TempFile file("", ".ckpt");
    save_checkpoint(file.path(), tc.params, {});
    std::string bytes = slurp(file.path());
    bytes.resize(bytes.size() - 4);
    testutil::TempFile bad(bytes, ".ckpt");
    CHECK_THROWS_WITH(load_checkpoint(bad.path(), tc.params),
                      Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("trailing bytes beyond the payload are rejected") {
    TinyCorpus tc(27, 4);
    testutil::TempFile file("", ".ckpt");
    save_checkpoint(file.path(), tc.params, {});
    std::string bytes = slurp(file.path()) + std::string(4, '\0');
    testutil::TempFile bad(bytes, ".ckpt");
    CHECK_THROWS_WITH(load_checkpoint(bad.path(), tc.params),
                      Catch::Matchers::ContainsSubstring("trailing"));
}

TEST_CASE("a vocabulary fingerprint mismatch is rejected") {
    TinyCorpus tc(29, 4);
    testutil::TempFile file("", ".ckpt");
    nlohmann::ordered_json extra;
    extra["vocab_fingerprint"] = "aaaa";
    save_checkpoint(file.path(), tc.params, extra);
    const std::string other = "bbbb";
    CHECK_THROWS_WITH(load_checkpoint(file.path(), tc.params, &other),
                      Catch::Matchers::ContainsSubstring("fingerprint"));
}

TEST_CASE("mismatched parameter shapes are rejected") {
    TinyCorpus small(33, 4, /*n1=*/3);
    testutil::TempFile file("", ".ckpt");
    save_checkpoint(file.path(), small.params, {});

    TinyCorpus wide(33, 4, /*n1=*/4);
    CHECK_THROWS_WITH(load_checkpoint(file.path(), wide.params),
                      Catch::Matchers::ContainsSubstring("shape mismatch"));
}

TEST_CASE("a missing checkpoint file is reported") {
    TinyCorpus tc(35, 4);
    CHECK_THROWS_WITH(load_checkpoint("/nonexistent/dir/model.ckpt", tc.params),
                      Catch::Matchers::ContainsSubstring("cannot read"));
}
