#pragma once

#include <deepconn/baselines.hpp>
#include <deepconn/common.hpp>
#include <deepconn/config.hpp>
#include <deepconn/eval.hpp>
#include <deepconn/ingest.hpp>
#include <deepconn/model.hpp>
#include <deepconn/textrep.hpp>
#include <deepconn/train.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <locale>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace deepconn {

// ---------------------------------------------------------------------------
// Corpus pipeline
// ---------------------------------------------------------------------------
// Everything downstream of the raw file that does NOT depend on the text
// representation: records, split, per-side document stores, vocabulary,
// rating statistics. Ablation rows share one Pipeline so their splits are
// identical by construction.

namespace detail {

inline const RunConfig& validated(const RunConfig& config) {
    validate(config);
    return config;
}

}  // namespace detail

struct Pipeline {
    RunConfig config;
    LoadResult load;
    CorpusSplit split;
    DocumentStore user_docs;
    DocumentStore item_docs;
    std::vector<std::vector<std::string>> train_tokens;  // one list per training review
    Vocabulary vocab;
    CorpusStats stats;

    explicit Pipeline(const RunConfig& cfg)
        : config(detail::validated(cfg)),
          load(load_reviews(config.data)),
          split(split_corpus(load.records,
                             SplitRatios{config.ratio_train, config.ratio_valid, config.ratio_test},
                             config.split_seed, config.stratify)),
          user_docs(split.train, Side::User, [](const std::string& s) { return tokenize(s); }),
          item_docs(split.train, Side::Item, [](const std::string& s) { return tokenize(s); }) {
        finish();
    }

    /// Pre-assembled constituents, for synthetic corpora that never touch a
    /// file. The split must already be populated.
    Pipeline(const RunConfig& cfg, CorpusSplit ready_split)
        : config(detail::validated(cfg)),
          split(std::move(ready_split)),
          user_docs(split.train, Side::User, [](const std::string& s) { return tokenize(s); }),
          item_docs(split.train, Side::Item, [](const std::string& s) { return tokenize(s); }) {
        finish();
    }

private:
    void finish() {
        if (split.train.empty()) throw std::invalid_argument("training split is empty");
        train_tokens.reserve(split.train.size());
        for (const auto& r : split.train) train_tokens.push_back(tokenize(r.text));
        vocab = build_vocabulary(train_tokens, static_cast<std::size_t>(config.min_count));

        double sum = 0.0;
        for (const auto& r : split.train) sum += r.rating;
        stats.mean_rating = sum / static_cast<double>(split.train.size());
        stats.user_ids = user_docs.entity_ids();
        stats.item_ids = item_docs.entity_ids();
    }
};

/// Builds the token→column machinery for one representation choice; pretrained
/// vectors load from disk, the other representations draw seeded tables.
template <typename Real>
MatrixBuilder<Real> make_builder(const Pipeline& pipe, const RunConfig& config,
                                 double* coverage_out = nullptr) {
    MatrixBuilder<Real> builder;
    builder.rep = rep_from_name(config.rep);
    builder.vocab = pipe.vocab;
    builder.n_max = config.n_max;
    if (builder.rep == RepKind::Embed) {
        if (config.embeddings.empty())
            throw std::invalid_argument("rep=embed requires an embeddings file");
        auto loaded = load_embeddings<Real>(config.embeddings, pipe.vocab, config.embed_dim,
                                            config.seed);
        builder.table = std::move(loaded.table);
        if (coverage_out) *coverage_out = loaded.coverage;
    } else {
        builder.table = random_table<Real>(pipe.vocab, config.embed_dim, config.seed);
        if (coverage_out) *coverage_out = -1.0;
    }
    if (builder.rep == RepKind::Tfidf) builder.tfidf = fit_tfidf(pipe.train_tokens);
    return builder;
}

// ---------------------------------------------------------------------------
// Variant training
// ---------------------------------------------------------------------------

/// A trained model bundled with everything needed to use it: the input
/// builder, the registered parameters, and the fit history. Heap-allocate
/// and do not move — the parameter set points into the model.
template <typename Real>
struct TrainOutcome {
    RunConfig config;  // the row-effective configuration
    VariantKind kind = VariantKind::Full;
    MatrixBuilder<Real> builder;
    double embedding_coverage = -1.0;
    DeepConnModel<Real> model;
    ParameterSet<Real> params;
    FitResult fit;

    /// Pre-built full-document matrices per training entity (training inputs
    /// include the target's own review; only evaluation excludes it).
    std::map<std::string, DocumentMatrix<Real>> user_matrices;
    std::map<std::string, DocumentMatrix<Real>> item_matrices;

    void rebuild_matrices(const Pipeline& pipe) {
        for (auto& [id, m] : user_matrices) m = builder.build(pipe.user_docs.document(id));
        for (auto& [id, m] : item_matrices) m = builder.build(pipe.item_docs.document(id));
    }
};

/// Validation score used for early stopping: exclusion-aware MSE on the
/// validation split.
template <typename Real>
double validation_mse(const Pipeline& pipe, const TrainOutcome<Real>& out) {
    return evaluate(out.model, pipe.split.valid, pipe.user_docs, pipe.item_docs, out.builder,
                    out.config.exclude_target)
        .mse;
}

/// Trains one variant on the pipeline's corpus under the given (possibly
/// row-specific) configuration.
template <typename Real>
std::unique_ptr<TrainOutcome<Real>> train_variant(const Pipeline& pipe, const RunConfig& config) {
    validate(config);
    auto out = std::make_unique<TrainOutcome<Real>>();
    out->config = config;
    out->kind = variant_from_name(config.variant);
    out->builder = make_builder<Real>(pipe, config, &out->embedding_coverage);
    out->model = make_variant<Real>(out->kind, make_model_config(config), pipe.stats);
    out->model.add_parameters(out->params);

    typename ParameterSet<Real>::Entry* embed_entry = nullptr;
    if (config.train_embeddings) {
        out->params.add("embeddings", out->builder.table.vectors);
        embed_entry = &out->params.at("embeddings");
    }

    for (const auto& id : pipe.stats.user_ids)
        out->user_matrices[id] = out->builder.build(pipe.user_docs.document(id));
    for (const auto& id : pipe.stats.item_ids)
        out->item_matrices[id] = out->builder.build(pipe.item_docs.document(id));

    std::vector<TrainExample<Real>> examples;
    examples.reserve(pipe.split.train.size());
    for (const auto& r : pipe.split.train) {
        TrainExample<Real> ex;
        ex.user_matrix = &out->user_matrices.at(r.user_id);
        ex.item_matrix = &out->item_matrices.at(r.item_id);
        ex.user_id = r.user_id;
        ex.item_id = r.item_id;
        ex.rating = r.rating;
        examples.push_back(ex);
    }

    // training a representation invalidates pre-built inputs batch by batch
    std::function<void()> refresh;
    TrainOutcome<Real>* raw = out.get();
    if (config.train_embeddings) refresh = [raw, &pipe]() { raw->rebuild_matrices(pipe); };

    out->fit = fit(out->model, out->params, examples, make_train_config(config),
                   [raw, &pipe]() { return validation_mse(pipe, *raw); }, embed_entry, refresh);
    if (config.train_embeddings) out->rebuild_matrices(pipe);  // sync with restored snapshot
    return out;
}

/// Exclusion-aware evaluation of a trained variant on an arbitrary pair list.
template <typename Real>
EvalReport evaluate_outcome(const Pipeline& pipe, const TrainOutcome<Real>& out,
                            const std::vector<ReviewRecord>& pairs,
                            std::vector<double>* predictions = nullptr,
                            LeakProbe* probe = nullptr) {
    return evaluate(out.model, pairs, pipe.user_docs, pipe.item_docs, out.builder,
                    out.config.exclude_target, predictions, probe);
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    std::string variant;
    std::string rep;
    bool failed = false;
    std::string error;
    double valid_mse = std::numeric_limits<double>::quiet_NaN();
    double test_mse = std::numeric_limits<double>::quiet_NaN();
    Index best_epoch = -1;
    Index epochs_run = 0;
    std::string shared_fp;
    bool best = false;
};

struct AblationTable {
    std::vector<AblationRow> rows;
};

/// Trains the six model/input variants under one shared corpus, split, seed,
/// and budget; only the factor under study changes per row. A failing row is
/// recorded and the suite continues.
template <typename Real>
AblationTable ablation_suite(const Pipeline& pipe, const RunConfig& base) {
    struct Cell {
        const char* name;
        const char* variant;
        const char* rep;  // nullptr keeps the base representation
    };
    // one tower silenced, then input representations, then the head swap,
    // then the reference model
    const Cell cells[6] = {
        {"user-only", "user-only", nullptr}, {"item-only", "item-only", nullptr},
        {"tfidf-input", "full", "tfidf"},    {"random-input", "full", "random"},
        {"dot-product", "dot-product", nullptr}, {"full", "full", nullptr},
    };

    AblationTable table;
    for (const Cell& cell : cells) {
        RunConfig row_config = base;
        row_config.variant = cell.variant;
        if (cell.rep) row_config.rep = cell.rep;

        AblationRow row;
        row.name = cell.name;
        row.variant = row_config.variant;
        row.rep = row_config.rep;
        row.shared_fp = shared_fingerprint(row_config);
        try {
            auto outcome = train_variant<Real>(pipe, row_config);
            row.valid_mse = outcome->fit.best_epoch >= 0
                                ? outcome->fit.best_valid_mse
                                : std::numeric_limits<double>::quiet_NaN();
            row.test_mse = evaluate_outcome(pipe, *outcome, pipe.split.test).mse;
            row.best_epoch = outcome->fit.best_epoch;
            row.epochs_run = static_cast<Index>(outcome->fit.history.size());
            if (outcome->fit.diverged) {
                row.failed = true;
                row.error = "training diverged";
            }
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        table.rows.push_back(std::move(row));
    }

    double best = std::numeric_limits<double>::infinity();
    Index best_at = -1;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const AblationRow& row = table.rows[i];
        if (!row.failed && std::isfinite(row.test_mse) && row.test_mse < best) {
            best = row.test_mse;
            best_at = static_cast<Index>(i);
        }
    }
    if (best_at >= 0) table.rows[static_cast<std::size_t>(best_at)].best = true;
    return table;
}

inline std::string ablation_csv(const AblationTable& table) {
    std::ostringstream out;
    out << "name,variant,rep,status,valid_mse,test_mse,best_epoch,epochs_run,best\n";
    for (const auto& row : table.rows) {
        out << row.name << ',' << row.variant << ',' << row.rep << ','
            << (row.failed ? "failed" : "ok") << ',';
        if (std::isfinite(row.valid_mse)) out << detail::format_real(row.valid_mse);
        out << ',';
        if (std::isfinite(row.test_mse)) out << detail::format_real(row.test_mse);
        out << ',' << row.best_epoch << ',' << row.epochs_run << ',' << (row.best ? 1 : 0) << '\n';
    }
    return out.str();
}

inline nlohmann::ordered_json ablation_json(const AblationTable& table) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& row : table.rows) {
        nlohmann::ordered_json r;
        r["name"] = row.name;
        r["variant"] = row.variant;
        r["rep"] = row.rep;
        r["status"] = row.failed ? "failed" : "ok";
        if (row.failed) r["error"] = row.error;
        r["valid_mse"] = std::isfinite(row.valid_mse) ? nlohmann::ordered_json(row.valid_mse)
                                                      : nlohmann::ordered_json(nullptr);
        r["test_mse"] = std::isfinite(row.test_mse) ? nlohmann::ordered_json(row.test_mse)
                                                    : nlohmann::ordered_json(nullptr);
        r["best_epoch"] = row.best_epoch;
        r["epochs_run"] = row.epochs_run;
        r["shared_fingerprint"] = row.shared_fp;
        r["best"] = row.best;
        rows.push_back(std::move(r));
    }
    nlohmann::ordered_json j;
    j["rows"] = std::move(rows);
    return j;
}

inline std::string ablation_text(const AblationTable& table) {
    std::ostringstream out;
    out << std::left << std::setw(14) << "name" << std::setw(13) << "variant" << std::setw(8)
        << "rep" << std::setw(8) << "status" << std::right << std::setw(12) << "valid_mse"
        << std::setw(12) << "test_mse" << "  best\n";
    for (const auto& row : table.rows) {
        out << std::left << std::setw(14) << row.name << std::setw(13) << row.variant
            << std::setw(8) << row.rep << std::setw(8) << (row.failed ? "failed" : "ok")
            << std::right;
        const auto cell = [&](double v) {
            std::ostringstream c;
            if (std::isfinite(v)) {
                c.imbue(std::locale::classic());
                c << std::fixed << std::setprecision(4) << v;
            } else {
                c << "-";
            }
            out << std::setw(12) << c.str();
        };
        cell(row.valid_mse);
        cell(row.test_mse);
        out << "  " << (row.best ? "*" : "") << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Rating-only baseline search
// ---------------------------------------------------------------------------

struct MfGridCell {
    Index factors = 0;
    double reg = 0.0;
    double valid_mse = std::numeric_limits<double>::quiet_NaN();
    bool best = false;
};

/// Fits the factorization at every (rank, regularization) grid point and
/// scores each on the validation split; the best cell is flagged.
template <typename Real>
std::vector<MfGridCell> mf_grid_search(const Pipeline& pipe, const RunConfig& config) {
    std::vector<MfGridCell> cells;
    double best = std::numeric_limits<double>::infinity();
    Index best_at = -1;
    for (const Index f : config.mf_grid_factors) {
        for (const double reg : config.mf_grid_regs) {
            const auto model = fit_mf_als<Real>(pipe.split.train, f, reg, config.sweeps,
                                                config.seed);
            std::vector<double> preds, truths;
            preds.reserve(pipe.split.valid.size());
            for (const auto& r : pipe.split.valid) {
                preds.push_back(static_cast<double>(predict_mf(model, r.user_id, r.item_id)));
                truths.push_back(r.rating);
            }
            MfGridCell cell;
            cell.factors = f;
            cell.reg = reg;
            cell.valid_mse = mse(preds, truths);
            if (cell.valid_mse < best) {
                best = cell.valid_mse;
                best_at = static_cast<Index>(cells.size());
            }
            cells.push_back(cell);
        }
    }
    if (best_at >= 0) cells[static_cast<std::size_t>(best_at)].best = true;
    return cells;
}

inline nlohmann::ordered_json mf_grid_json(const std::vector<MfGridCell>& cells) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& c : cells) {
        nlohmann::ordered_json r;
        r["factors"] = c.factors;
        r["reg"] = c.reg;
        r["valid_mse"] = c.valid_mse;
        r["best"] = c.best;
        rows.push_back(std::move(r));
    }
    nlohmann::ordered_json j;
    j["cells"] = std::move(rows);
    return j;
}

// ---------------------------------------------------------------------------
// Combined sparsity report
// ---------------------------------------------------------------------------

template <typename Real>
struct ReportBundle {
    std::unique_ptr<TrainOutcome<Real>> outcome;
    std::vector<MfGridCell> grid;
    Index mf_factors = 0;
    double mf_reg = 0.0;
    EvalReport model_report;
    EvalReport baseline_report;
    BucketReport buckets;
};

/// Trains the configured variant, grid-searches the rating-only baseline,
/// and compares both on the test split bucketed by training review count.
template <typename Real>
ReportBundle<Real> run_report(const Pipeline& pipe, const RunConfig& config) {
    ReportBundle<Real> bundle;
    bundle.outcome = train_variant<Real>(pipe, config);

    bundle.grid = mf_grid_search<Real>(pipe, config);
    Index best_f = config.factors;
    double best_reg = config.reg;
    for (const auto& cell : bundle.grid)
        if (cell.best) {
            best_f = cell.factors;
            best_reg = cell.reg;
        }
    bundle.mf_factors = best_f;
    bundle.mf_reg = best_reg;
    const auto mf = fit_mf_als<Real>(pipe.split.train, best_f, best_reg, config.sweeps,
                                     config.seed);

    std::vector<double> model_preds;
    bundle.model_report = evaluate_outcome(pipe, *bundle.outcome, pipe.split.test, &model_preds);

    std::vector<double> baseline_preds, truths;
    baseline_preds.reserve(pipe.split.test.size());
    for (const auto& r : pipe.split.test) {
        baseline_preds.push_back(static_cast<double>(predict_mf(mf, r.user_id, r.item_id)));
        truths.push_back(r.rating);
    }
    bundle.baseline_report.mse = mse(baseline_preds, truths);
    bundle.baseline_report.count = pipe.split.test.size();
    for (const auto& r : pipe.split.test)
        if (!mf.user_index.count(r.user_id) || !mf.item_index.count(r.item_id))
            ++bundle.baseline_report.coldstart_count;

    const auto [user_buckets, item_buckets] = bucket_by_count(pipe.split.train,
                                                              config.bucket_edges);
    bundle.buckets =
        sparsity_report(pipe.split.test, model_preds, baseline_preds, user_buckets, item_buckets);
    return bundle;
}

// ---------------------------------------------------------------------------
// Run outputs
// ---------------------------------------------------------------------------

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline nlohmann::ordered_json history_json(const FitResult& fit) {
    nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
    for (const auto& rec : fit.history) {
        nlohmann::ordered_json e;
        e["epoch"] = rec.epoch;
        e["train_loss"] = rec.train_loss;
        e["valid_mse"] = std::isfinite(rec.valid_mse) ? nlohmann::ordered_json(rec.valid_mse)
                                                      : nlohmann::ordered_json(nullptr);
        epochs.push_back(std::move(e));
    }
    nlohmann::ordered_json j;
    j["epochs"] = std::move(epochs);
    j["best_epoch"] = fit.best_epoch;
    j["best_valid_mse"] = fit.best_epoch >= 0 ? nlohmann::ordered_json(fit.best_valid_mse)
                                              : nlohmann::ordered_json(nullptr);
    j["stopped_early"] = fit.stopped_early;
    j["diverged"] = fit.diverged;
    return j;
}

}  // namespace deepconn
