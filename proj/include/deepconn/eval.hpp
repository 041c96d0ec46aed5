#pragma once

#include <deepconn/common.hpp>
#include <deepconn/ingest.hpp>
#include <deepconn/model.hpp>
#include <deepconn/textrep.hpp>

#include <nlohmann/json.hpp>

#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

namespace deepconn {

// ---------------------------------------------------------------------------
// Mean squared error
// ---------------------------------------------------------------------------

inline double mse(const std::vector<double>& predictions, const std::vector<double>& truths) {
    if (predictions.size() != truths.size())
        throw std::invalid_argument("prediction and truth lists differ in length");
    if (predictions.empty()) throw std::invalid_argument("cannot average zero residuals");
    double sum = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double e = truths[i] - predictions[i];
        sum += e * e;
    }
    return sum / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------------
// Split evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
    double mse = 0.0;
    std::size_t count = 0;
    std::size_t coldstart_count = 0;  // pairs served by a fallback path
};

/// Provenance instrument: reviews whose ordinals land in `forbidden` must
/// never contribute text to an evaluation-time document. evaluate() counts
/// offending documents and their token mass.
struct LeakProbe {
    std::unordered_set<std::size_t> forbidden;
    std::size_t violating_documents = 0;
    std::size_t violating_tokens = 0;
};

/// Scores every (user, item, rating) pair in eval mode. Tower inputs are
/// rebuilt per pair from the document stores, dropping the pair's own
/// review(s) unless `exclude_target` is off; table-backed sides fall back to
/// a zero row for unseen ids. A pair is cold-start when either side has no
/// training reviews.
template <typename Real>
EvalReport evaluate(const DeepConnModel<Real>& model, const std::vector<ReviewRecord>& pairs,
                    const DocumentStore& user_docs, const DocumentStore& item_docs,
                    const MatrixBuilder<Real>& builder, bool exclude_target = true,
                    std::vector<double>* predictions_out = nullptr, LeakProbe* probe = nullptr) {
    if (pairs.empty()) throw std::invalid_argument("cannot evaluate an empty pair list");

    std::vector<double> predictions(pairs.size());
    std::vector<double> truths(pairs.size());
    std::vector<std::uint8_t> cold(pairs.size(), 0);
    std::vector<std::size_t> bad_docs(pairs.size(), 0), bad_tokens(pairs.size(), 0);

    const auto probe_document = [&](const EntityDocument& doc, const DocumentStore& store,
                                    std::size_t slot) {
        std::size_t tokens = 0;
        for (const std::size_t ord : doc.source_ordinals)
            if (probe->forbidden.count(ord)) tokens += store.tokens_of(ord);
        if (tokens > 0) {
            bad_docs[slot] += 1;
            bad_tokens[slot] += tokens;
        }
    };

    parallel_for(pairs.size(), configured_threads(), [&](std::size_t i) {
        const ReviewRecord& pair = pairs[i];
        ModelInput<Real> input;
        input.user_id = pair.user_id;
        input.item_id = pair.item_id;

        DocumentMatrix<Real> user_matrix, item_matrix;
        bool user_cold = false, item_cold = false;
        if (model.user_tower) {
            const EntityDocument doc =
                user_docs.document(pair.user_id, exclude_target ? &pair.item_id : nullptr);
            if (probe) probe_document(doc, user_docs, i);
            user_matrix = builder.build(doc);
            input.user_matrix = &user_matrix;
            user_cold = !user_docs.has(pair.user_id);
        } else {
            user_cold = model.user_rows.find(pair.user_id) == model.user_rows.end();
        }
        if (model.item_tower) {
            const EntityDocument doc =
                item_docs.document(pair.item_id, exclude_target ? &pair.user_id : nullptr);
            if (probe) probe_document(doc, item_docs, i);
            item_matrix = builder.build(doc);
            input.item_matrix = &item_matrix;
            item_cold = !item_docs.has(pair.item_id);
        } else {
            item_cold = model.item_rows.find(pair.item_id) == model.item_rows.end();
        }

        Rng unused(0);  // eval mode draws nothing
        ForwardCache<Real> cache;
        predictions[i] = static_cast<double>(
            predict(model, input, 0.0, false, unused, cache, UnknownEntity::ZeroVector));
        truths[i] = pair.rating;
        cold[i] = user_cold || item_cold;
    });

    EvalReport report;
    report.mse = mse(predictions, truths);
    report.count = pairs.size();
    for (const auto c : cold) report.coldstart_count += c;
    if (probe) {
        for (const auto d : bad_docs) probe->violating_documents += d;
        for (const auto t : bad_tokens) probe->violating_tokens += t;
    }
    if (predictions_out) *predictions_out = std::move(predictions);
    return report;
}

// ---------------------------------------------------------------------------
// Review-count sparsity report
// ---------------------------------------------------------------------------

struct BucketRow {
    std::string side;  // "user" or "item"
    std::size_t bucket = 0;
    std::string label;
    std::size_t entity_count = 0;  // distinct evaluated entities in the bucket
    std::size_t pair_count = 0;
    std::optional<double> model_mse;
    std::optional<double> baseline_mse;
    std::optional<double> reduction;  // baseline − model
};

struct BucketReport {
    std::vector<std::size_t> edges;
    std::vector<BucketRow> rows;  // user-side rows first, then item-side
};

namespace detail {

inline std::string bucket_label(const std::vector<std::size_t>& edges, std::size_t j) {
    if (edges.empty()) return "all";
    if (j < edges.size()) return "<=" + std::to_string(edges[j]);
    return ">" + std::to_string(edges.back());
}

}  // namespace detail

/// Per-bucket MSE of two prediction lists over the same pairs, grouped by
/// the training-review count of the pair's user (then item). Entities absent
/// from the bucket assignment count as zero reviews.
inline BucketReport sparsity_report(const std::vector<ReviewRecord>& pairs,
                                    const std::vector<double>& model_predictions,
                                    const std::vector<double>& baseline_predictions,
                                    const CountBuckets& user_buckets,
                                    const CountBuckets& item_buckets) {
    if (model_predictions.size() != pairs.size() || baseline_predictions.size() != pairs.size())
        throw std::invalid_argument("prediction lists must cover every pair exactly once");
    if (user_buckets.edges != item_buckets.edges)
        throw std::invalid_argument("user and item bucketings must share their edges");

    BucketReport report;
    report.edges = user_buckets.edges;
    const std::size_t n_buckets = user_buckets.bucket_count();

    const auto side_rows = [&](const std::string& side, const CountBuckets& buckets) {
        std::vector<double> model_sq(n_buckets, 0.0), base_sq(n_buckets, 0.0);
        std::vector<std::size_t> pair_counts(n_buckets, 0);
        std::vector<std::set<std::string>> members(n_buckets);

        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const std::string& id = side == "user" ? pairs[i].user_id : pairs[i].item_id;
            const auto it = buckets.assignment.find(id);
            const std::size_t j = it != buckets.assignment.end() ? it->second : buckets.bucket_of(0);
            const double em = pairs[i].rating - model_predictions[i];
            const double eb = pairs[i].rating - baseline_predictions[i];
            model_sq[j] += em * em;
            base_sq[j] += eb * eb;
            pair_counts[j] += 1;
            members[j].insert(id);
        }

        for (std::size_t j = 0; j < n_buckets; ++j) {
            BucketRow row;
            row.side = side;
            row.bucket = j;
            row.label = detail::bucket_label(report.edges, j);
            row.entity_count = members[j].size();
            row.pair_count = pair_counts[j];
            if (pair_counts[j] > 0) {
                row.model_mse = model_sq[j] / static_cast<double>(pair_counts[j]);
                row.baseline_mse = base_sq[j] / static_cast<double>(pair_counts[j]);
                row.reduction = *row.baseline_mse - *row.model_mse;
            }
            report.rows.push_back(std::move(row));
        }
    };
    side_rows("user", user_buckets);
    side_rows("item", item_buckets);
    return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace detail {

/// Round-trip-exact, locale-independent formatting; identical inputs always
/// produce identical bytes.
inline std::string format_real(double v) {
    std::ostringstream out;
    out.imbue(std::locale::classic());
    out << std::setprecision(17) << v;
    return out.str();
}

}  // namespace detail

inline nlohmann::ordered_json eval_report_json(const EvalReport& report) {
    nlohmann::ordered_json j;
    j["mse"] = report.mse;
    j["count"] = report.count;
    j["coldstart_count"] = report.coldstart_count;
    return j;
}

inline std::string bucket_report_csv(const BucketReport& report) {
    std::ostringstream out;
    out << "side,bucket,label,entity_count,pair_count,model_mse,baseline_mse,reduction\n";
    for (const auto& row : report.rows) {
        out << row.side << ',' << row.bucket << ',' << row.label << ',' << row.entity_count << ','
            << row.pair_count << ',';
        if (row.model_mse) out << detail::format_real(*row.model_mse);
        out << ',';
        if (row.baseline_mse) out << detail::format_real(*row.baseline_mse);
        out << ',';
        if (row.reduction) out << detail::format_real(*row.reduction);
        out << '\n';
    }
    return out.str();
}

inline nlohmann::ordered_json bucket_report_json(const BucketReport& report) {
    nlohmann::ordered_json j;
    j["edges"] = report.edges;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : report.rows) {
        nlohmann::ordered_json r;
        r["side"] = row.side;
        r["bucket"] = row.bucket;
        r["label"] = row.label;
        r["entity_count"] = row.entity_count;
        r["pair_count"] = row.pair_count;
        r["model_mse"] = row.model_mse ? nlohmann::ordered_json(*row.model_mse)
                                       : nlohmann::ordered_json(nullptr);
        r["baseline_mse"] = row.baseline_mse ? nlohmann::ordered_json(*row.baseline_mse)
                                             : nlohmann::ordered_json(nullptr);
        r["reduction"] = row.reduction ? nlohmann::ordered_json(*row.reduction)
                                       : nlohmann::ordered_json(nullptr);
        j["rows"].push_back(std::move(r));
    }
    return j;
}

inline std::string bucket_report_text(const BucketReport& report) {
    std::ostringstream out;
    out << std::left << std::setw(6) << "side" << std::setw(8) << "bucket" << std::setw(8)
        << "label" << std::right << std::setw(10) << "entities" << std::setw(8) << "pairs"
        << std::setw(14) << "model" << std::setw(14) << "baseline" << std::setw(14) << "reduction"
        << '\n';
    for (const auto& row : report.rows) {
        out << std::left << std::setw(6) << row.side << std::setw(8) << row.bucket << std::setw(8)
            << row.label << std::right << std::setw(10) << row.entity_count << std::setw(8)
            << row.pair_count;
        const auto cell = [&](const std::optional<double>& v) {
            std::ostringstream c;
            if (v) {
                c.imbue(std::locale::classic());
                c << std::fixed << std::setprecision(6) << *v;
            } else {
                c << "-";
            }
            out << std::setw(14) << c.str();
        };
        cell(row.model_mse);
        cell(row.baseline_mse);
        cell(row.reduction);
        out << '\n';
    }
    return out.str();
}

}  // namespace deepconn
