#pragma once

#include <deepconn/common.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace deepconn {

/// One (user, item, rating, review text) tuple. `ordinal` is the input-order
/// line index and is unique within a corpus.
struct ReviewRecord {
    std::string user_id;
    std::string item_id;
    double rating = 0.0;
    std::string text;
    std::size_t ordinal = 0;
};

struct LoadResult {
    std::vector<ReviewRecord> records;
    std::vector<std::string> diagnostics;  // one entry per skipped line
    std::size_t skipped = 0;
};

/// Reads a JSON Lines corpus: one object per line with keys
/// user (string), item (string), rating (number), text (string).
/// Unknown keys are ignored; blank lines are ignored. A malformed line is
/// skipped with a diagnostic, or fatal in strict mode.
inline LoadResult load_reviews(const std::string& path, bool strict = false) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open review file: " + path);

    LoadResult out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        const std::size_t ordinal = line_no++;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;

        std::string problem;
        nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
        if (obj.is_discarded() || !obj.is_object()) {
            problem = "not a JSON object";
        } else if (!obj.contains("user") || !obj["user"].is_string()) {
            problem = "missing or non-string \"user\"";
        } else if (!obj.contains("item") || !obj["item"].is_string()) {
            problem = "missing or non-string \"item\"";
        } else if (!obj.contains("rating") || !obj["rating"].is_number()) {
            problem = "missing or non-numeric \"rating\"";
        } else if (!obj.contains("text") || !obj["text"].is_string()) {
            problem = "missing or non-string \"text\"";
        } else if (!std::isfinite(obj["rating"].get<double>())) {
            problem = "non-finite rating";
        }

        if (!problem.empty()) {
            std::ostringstream diag;
            diag << path << ":" << (ordinal + 1) << ": " << problem << ", line skipped";
            if (strict) throw std::runtime_error(diag.str());
            out.diagnostics.push_back(diag.str());
            ++out.skipped;
            continue;
        }

        ReviewRecord rec;
        rec.user_id = obj["user"].get<std::string>();
        rec.item_id = obj["item"].get<std::string>();
        rec.rating = obj["rating"].get<double>();
        rec.text = obj["text"].get<std::string>();
        rec.ordinal = ordinal;
        out.records.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Corpus splitting
// ---------------------------------------------------------------------------

struct SplitRatios {
    double train = 0.8;
    double valid = 0.1;
    double test = 0.1;
};

struct CorpusSplit {
    std::vector<ReviewRecord> train;
    std::vector<ReviewRecord> valid;
    std::vector<ReviewRecord> test;
    std::uint64_t seed = 0;
};

namespace detail {

// |train| = floor(a*N); the remainder is split between valid and test with
// the odd record going to valid when N is odd, to test otherwise.
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& r) {
    const auto n_train = static_cast<std::size_t>(std::floor(r.train * static_cast<double>(n)));
    const std::size_t rest = n - n_train;
    const double vt = r.valid + r.test;
    auto n_valid = static_cast<std::size_t>(std::floor(static_cast<double>(rest) * r.valid / vt));
    auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(rest) * r.test / vt));
    if (n_valid + n_test < rest) {
        if (n % 2 == 1) {
            ++n_valid;
        } else {
            ++n_test;
        }
    }
    return {n_train, n_valid, n_test};
}

inline void check_ratios(const SplitRatios& r) {
    if (!(r.train > 0.0 && r.valid > 0.0 && r.test > 0.0))
        throw std::invalid_argument("split ratios must be positive");
    if (std::abs(r.train + r.valid + r.test - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must sum to 1");
}

}  // namespace detail

/// Deterministic shuffle under `seed`, then contiguous partition.
/// With `stratify_by_user`, the partition is applied per user instead, and
/// every user keeps at least one training review.
inline CorpusSplit split_corpus(const std::vector<ReviewRecord>& records, const SplitRatios& ratios,
                                std::uint64_t seed, bool stratify_by_user = false) {
    detail::check_ratios(ratios);
    if (records.size() < 3)
        throw std::invalid_argument("need at least 3 records to populate train/valid/test");

    CorpusSplit out;
    out.seed = seed;

    if (!stratify_by_user) {
        std::vector<std::size_t> idx(records.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng rng(mix_seed(seed, {0x73706c6974ULL}));  // stream tag "split"
        fisher_yates_shuffle(idx, rng);

        const auto sizes = detail::split_sizes(records.size(), ratios);
        std::size_t at = 0;
        for (std::size_t i = 0; i < sizes[0]; ++i) out.train.push_back(records[idx[at++]]);
        for (std::size_t i = 0; i < sizes[1]; ++i) out.valid.push_back(records[idx[at++]]);
        for (std::size_t i = 0; i < sizes[2]; ++i) out.test.push_back(records[idx[at++]]);
        return out;
    }

    std::map<std::string, std::vector<std::size_t>> by_user;
    for (std::size_t i = 0; i < records.size(); ++i) by_user[records[i].user_id].push_back(i);
    for (auto& [user, idx] : by_user) {
        Rng rng(mix_seed(seed, {fnv1a64(user)}));
        fisher_yates_shuffle(idx, rng);
        auto sizes = detail::split_sizes(idx.size(), ratios);
        if (sizes[0] == 0) {  // a user's first review always trains
            sizes[0] = 1;
            if (sizes[1] > 0) {
                --sizes[1];
            } else {
                --sizes[2];
            }
        }
        std::size_t at = 0;
        for (std::size_t i = 0; i < sizes[0]; ++i) out.train.push_back(records[idx[at++]]);
        for (std::size_t i = 0; i < sizes[1]; ++i) out.valid.push_back(records[idx[at++]]);
        for (std::size_t i = 0; i < sizes[2]; ++i) out.test.push_back(records[idx[at++]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Merged per-entity documents
// ---------------------------------------------------------------------------

/// All tokens of one user's (or item's) training reviews, concatenated in
/// ascending ordinal with within-review order preserved.
struct EntityDocument {
    std::string entity_id;
    std::vector<std::string> tokens;
    std::vector<std::size_t> source_ordinals;
};

enum class Side { User, Item };

/// Tokenised training reviews grouped per entity. Documents are materialised
/// on demand so the target pair's own review can be excluded per prediction.
class DocumentStore {
public:
    struct Entry {
        std::size_t ordinal;
        std::string counterpart_id;
        std::vector<std::string> tokens;
    };

    template <typename Tokenizer>
    DocumentStore(const std::vector<ReviewRecord>& records, Side side, Tokenizer&& tok)
        : side_(side) {
        for (const auto& rec : records) {
            const std::string& id = side == Side::User ? rec.user_id : rec.item_id;
            const std::string& other = side == Side::User ? rec.item_id : rec.user_id;
            entries_[id].push_back(Entry{rec.ordinal, other, tok(rec.text)});
        }
        for (auto& [id, list] : entries_) {
            std::sort(list.begin(), list.end(),
                      [](const Entry& a, const Entry& b) { return a.ordinal < b.ordinal; });
            for (const Entry& e : list) tokens_by_ordinal_[e.ordinal] = e.tokens.size();
        }
    }

    bool has(const std::string& entity_id) const { return entries_.count(entity_id) > 0; }

    std::size_t review_count(const std::string& entity_id) const {
        auto it = entries_.find(entity_id);
        return it == entries_.end() ? 0 : it->second.size();
    }

    /// Token count of one stored review; 0 if the ordinal is not in the store.
    std::size_t tokens_of(std::size_t ordinal) const {
        auto it = tokens_by_ordinal_.find(ordinal);
        return it == tokens_by_ordinal_.end() ? 0 : it->second;
    }

    /// Entity ids in lexicographic order.
    std::vector<std::string> entity_ids() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [id, _] : entries_) out.push_back(id);
        return out;
    }

    /// Merged document for one entity; an unknown entity yields an empty
    /// document. `exclude_counterpart` drops reviews of that (user,item) pair.
    EntityDocument document(const std::string& entity_id,
                            const std::string* exclude_counterpart = nullptr) const {
        EntityDocument doc;
        doc.entity_id = entity_id;
        auto it = entries_.find(entity_id);
        if (it == entries_.end()) return doc;
        for (const Entry& e : it->second) {
            if (exclude_counterpart && e.counterpart_id == *exclude_counterpart) continue;
            doc.tokens.insert(doc.tokens.end(), e.tokens.begin(), e.tokens.end());
            doc.source_ordinals.push_back(e.ordinal);
        }
        return doc;
    }

    Side side() const { return side_; }

private:
    Side side_;
    std::map<std::string, std::vector<Entry>> entries_;
    std::unordered_map<std::size_t, std::size_t> tokens_by_ordinal_;
};

/// Materialises every entity's document, honouring a static exclusion set of
/// (user, item) pairs.
template <typename Tokenizer>
std::map<std::string, EntityDocument> build_documents(
    const std::vector<ReviewRecord>& records, Tokenizer&& tok, Side side,
    const std::set<std::pair<std::string, std::string>>* exclude = nullptr) {
    std::map<std::string, std::vector<const ReviewRecord*>> by_entity;
    for (const auto& rec : records) {
        const std::string& id = side == Side::User ? rec.user_id : rec.item_id;
        by_entity[id];  // entity survives even if every review is excluded
        if (exclude && exclude->count({rec.user_id, rec.item_id})) continue;
        by_entity[id].push_back(&rec);
    }
    std::map<std::string, EntityDocument> out;
    for (auto& [id, mine] : by_entity) {
        std::sort(mine.begin(), mine.end(),
                  [](const ReviewRecord* a, const ReviewRecord* b) { return a->ordinal < b->ordinal; });
        EntityDocument doc;
        doc.entity_id = id;
        for (const ReviewRecord* rec : mine) {
            auto toks = tok(rec->text);
            doc.tokens.insert(doc.tokens.end(), toks.begin(), toks.end());
            doc.source_ordinals.push_back(rec->ordinal);
        }
        out.emplace(id, std::move(doc));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Review-count buckets
// ---------------------------------------------------------------------------

/// Entities grouped by training-review count: an entity with k reviews falls
/// in bucket j where edges[j-1] < k <= edges[j]; k beyond the last edge goes
/// to the final open bucket (index edges.size()).
struct CountBuckets {
    std::vector<std::size_t> edges;
    std::map<std::string, std::size_t> assignment;

    std::size_t bucket_count() const { return edges.size() + 1; }

    std::size_t bucket_of(std::size_t k) const {
        for (std::size_t j = 0; j < edges.size(); ++j)
            if (k <= edges[j]) return j;
        return edges.size();
    }
};

inline std::pair<CountBuckets, CountBuckets> bucket_by_count(const std::vector<ReviewRecord>& train,
                                                             const std::vector<std::size_t>& edges) {
    for (std::size_t j = 1; j < edges.size(); ++j)
        if (edges[j] <= edges[j - 1]) throw std::invalid_argument("bucket edges must be strictly ascending");

    std::map<std::string, std::size_t> user_counts, item_counts;
    for (const auto& rec : train) {
        ++user_counts[rec.user_id];
        ++item_counts[rec.item_id];
    }
    CountBuckets users{edges, {}}, items{edges, {}};
    for (const auto& [id, k] : user_counts) users.assignment[id] = users.bucket_of(k);
    for (const auto& [id, k] : item_counts) items.assignment[id] = items.bucket_of(k);
    return {std::move(users), std::move(items)};
}

}  // namespace deepconn
