#pragma once

#include <deepconn/common.hpp>
#include <deepconn/ingest.hpp>

#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace deepconn {

/// Lowercases and splits on maximal runs of non-alphanumeric characters.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto uc = static_cast<unsigned char>(ch);
        if (std::isalnum(uc)) {
            cur.push_back(static_cast<char>(std::tolower(uc)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Dense token ↔ index bijection, indices assigned by descending frequency
/// then lexicographic order.
class Vocabulary {
public:
    Vocabulary() = default;

    Index size() const { return static_cast<Index>(tokens_.size()); }

    /// Index of `token`, or -1 when out of vocabulary.
    Index index_of(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? Index(-1) : it->second;
    }

    const std::string& token_at(Index i) const { return tokens_.at(static_cast<std::size_t>(i)); }

    const std::vector<std::string>& tokens() const { return tokens_; }

    friend Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>&, std::size_t);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, Index> index_;
};

inline Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& documents,
                                   std::size_t min_count = 1) {
    std::map<std::string, std::size_t> freq;
    for (const auto& doc : documents)
        for (const auto& tok : doc) ++freq[tok];

    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [tok, n] : freq)
        if (n >= min_count) kept.emplace_back(tok, n);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (kept.empty()) throw std::runtime_error("vocabulary is empty");

    Vocabulary v;
    v.tokens_.reserve(kept.size());
    for (const auto& [tok, n] : kept) {
        v.index_.emplace(tok, static_cast<Index>(v.tokens_.size()));
        v.tokens_.push_back(tok);
    }
    return v;
}

/// Stable hex digest of the vocabulary contents, for checkpoint validation.
inline std::string vocab_fingerprint(const Vocabulary& vocab) {
    std::uint64_t h = fnv1a64("vocab");
    for (const auto& tok : vocab.tokens()) {
        h = fnv1a64(tok, h);
        h = fnv1a64("\n", h);
    }
    return to_hex(h);
}

// ---------------------------------------------------------------------------
// Embedding tables
// ---------------------------------------------------------------------------

/// Word-vector lookup: one row per vocabulary index, a shared vector for
/// out-of-vocabulary tokens, and an all-zero padding vector.
template <typename Real>
struct EmbeddingTable {
    Index c = 0;
    MatrixX<Real> vectors;    // size × c
    VectorX<Real> oov_vector; // c
    VectorX<Real> pad_vector; // c, exactly zero

    Index size() const { return vectors.rows(); }

    /// Vector of a vocabulary row, or the shared OOV vector for row -1.
    VectorX<Real> row(Index i) const {
        return i < 0 ? oov_vector : VectorX<Real>(vectors.row(i).transpose());
    }
};

namespace detail {

template <typename Real>
VectorX<Real> draw_uniform_vector(Index c, Rng& rng, double half_range) {
    VectorX<Real> v(c);
    for (Index i = 0; i < c; ++i)
        v[i] = static_cast<Real>(rng.uniform(-half_range, half_range));
    return v;
}

}  // namespace detail

template <typename Real>
struct LoadedEmbeddings {
    EmbeddingTable<Real> table;
    double coverage = 0.0;  // |vocab tokens found in file| / |vocab|
    std::size_t found = 0;
    std::vector<std::string> diagnostics;
};

/// Reads a whitespace-separated text embedding file (optional "count dim"
/// header). Vocabulary tokens absent from the file fall back to the shared
/// OOV vector, which is drawn uniform [-0.25, 0.25] under `seed`.
template <typename Real>
LoadedEmbeddings<Real> load_embeddings(const std::string& path, const Vocabulary& vocab, Index c,
                                       std::uint64_t seed) {
    if (c < 1) throw std::invalid_argument("embedding dimension must be >= 1");
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open embedding file: " + path);

    LoadedEmbeddings<Real> out;
    Rng rng(mix_seed(seed, {0x6f6f76ULL}));  // stream tag "oov"
    out.table.c = c;
    out.table.oov_vector = detail::draw_uniform_vector<Real>(c, rng, 0.25);
    out.table.pad_vector = VectorX<Real>::Zero(c);
    out.table.vectors = out.table.oov_vector.transpose().replicate(vocab.size(), 1);

    std::vector<char> filled(static_cast<std::size_t>(vocab.size()), 0);
    std::string line;
    std::size_t line_no = 0;
    bool first = true;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;

        if (first) {
            first = false;
            // header = exactly two integer fields
            std::istringstream hs(line);
            long long count = 0, dim = 0;
            if (hs >> count >> dim && (hs >> std::ws).eof()) {
                if (dim != c) {
                    std::ostringstream msg;
                    msg << path << ": header declares dimension " << dim << " but " << c
                        << " is configured";
                    throw std::runtime_error(msg.str());
                }
                continue;
            }
        }

        std::istringstream fs(line);
        std::string token;
        fs >> token;
        VectorX<Real> vec(c);
        bool ok = !token.empty();
        for (Index i = 0; ok && i < c; ++i) {
            double x;
            if (!(fs >> x) || !std::isfinite(x)) {
                ok = false;
            } else {
                vec[i] = static_cast<Real>(x);
            }
        }
        if (ok && !(fs >> std::ws).eof()) ok = false;
        if (!ok) {
            std::ostringstream diag;
            diag << path << ":" << line_no << ": unparseable embedding line, skipped";
            out.diagnostics.push_back(diag.str());
            continue;
        }

        const Index row = vocab.index_of(token);
        if (row < 0) continue;
        out.table.vectors.row(row) = vec.transpose();
        filled[static_cast<std::size_t>(row)] = 1;
    }

    for (char f : filled) out.found += static_cast<std::size_t>(f);
    out.coverage = vocab.size() == 0
                       ? 0.0
                       : static_cast<double>(out.found) / static_cast<double>(vocab.size());
    return out;
}

/// Fixed random word vectors, i.i.d. uniform on [-0.25, 0.25] under `seed`.
template <typename Real>
EmbeddingTable<Real> random_table(const Vocabulary& vocab, Index c, std::uint64_t seed) {
    if (c < 1) throw std::invalid_argument("embedding dimension must be >= 1");
    EmbeddingTable<Real> t;
    t.c = c;
    t.vectors.resize(vocab.size(), c);
    Rng rng(mix_seed(seed, {0x72616e64ULL}));  // stream tag "rand"
    for (Index r = 0; r < vocab.size(); ++r)
        for (Index j = 0; j < c; ++j) t.vectors(r, j) = static_cast<Real>(rng.uniform(-0.25, 0.25));
    t.oov_vector = detail::draw_uniform_vector<Real>(c, rng, 0.25);
    t.pad_vector = VectorX<Real>::Zero(c);
    return t;
}

// ---------------------------------------------------------------------------
// Document matrices
// ---------------------------------------------------------------------------

constexpr Index kOovRow = -1;
constexpr Index kPadRow = -2;

/// A document rendered as word-vector columns: values is c×n with one column
/// per position, mask flags real (non-pad) positions, row_ids records the
/// table row behind each column (kOovRow / kPadRow for the special vectors).
template <typename Real>
struct DocumentMatrix {
    MatrixX<Real> values;
    std::vector<std::uint8_t> mask;
    std::vector<Index> row_ids;

    Index n() const { return values.cols(); }
    Index c() const { return values.rows(); }
};

/// First min(|tokens|, n_max) tokens become columns; the rest is padding.
template <typename Real>
DocumentMatrix<Real> document_matrix(const EntityDocument& doc, const Vocabulary& vocab,
                                     const EmbeddingTable<Real>& table, Index n_max) {
    if (n_max < 1) throw std::invalid_argument("n_max must be >= 1");
    DocumentMatrix<Real> m;
    m.values = MatrixX<Real>::Zero(table.c, n_max);
    m.mask.assign(static_cast<std::size_t>(n_max), 0);
    m.row_ids.assign(static_cast<std::size_t>(n_max), kPadRow);

    const Index n_real = std::min<Index>(static_cast<Index>(doc.tokens.size()), n_max);
    for (Index j = 0; j < n_real; ++j) {
        const Index row = vocab.index_of(doc.tokens[static_cast<std::size_t>(j)]);
        m.values.col(j) = table.row(row);
        m.mask[static_cast<std::size_t>(j)] = 1;
        m.row_ids[static_cast<std::size_t>(j)] = row < 0 ? kOovRow : row;
    }
    return m;
}

// ---------------------------------------------------------------------------
// TF-IDF representation
// ---------------------------------------------------------------------------

/// Smoothed inverse document frequency over the fitted training documents:
/// idf = ln(D / (1 + df)) + 1, so an unseen token gets ln(D) + 1.
struct TfidfModel {
    std::size_t doc_count = 0;
    std::map<std::string, std::size_t> df;

    double idf(const std::string& token) const {
        auto it = df.find(token);
        const auto d = it == df.end() ? std::size_t(0) : it->second;
        return std::log(static_cast<double>(doc_count) / (1.0 + static_cast<double>(d))) + 1.0;
    }
};

inline TfidfModel fit_tfidf(const std::vector<std::vector<std::string>>& documents) {
    if (documents.empty()) throw std::runtime_error("cannot fit tf-idf on an empty collection");
    TfidfModel m;
    m.doc_count = documents.size();
    for (const auto& doc : documents) {
        std::map<std::string, char> seen;
        for (const auto& tok : doc) seen[tok] = 1;
        for (const auto& [tok, _] : seen) ++m.df[tok];
    }
    return m;
}

/// Column j = random word vector of token_j, scaled by tf(token_j, doc) ·
/// idf(token_j). tf counts occurrences over the whole document, before the
/// n_max truncation.
template <typename Real>
DocumentMatrix<Real> tfidf_matrix(const EntityDocument& doc, const TfidfModel& model,
                                  const Vocabulary& vocab, const EmbeddingTable<Real>& rand_table,
                                  Index n_max) {
    std::map<std::string, std::size_t> tf;
    for (const auto& tok : doc.tokens) ++tf[tok];

    DocumentMatrix<Real> m = document_matrix(doc, vocab, rand_table, n_max);
    const Index n_real = std::min<Index>(static_cast<Index>(doc.tokens.size()), n_max);
    for (Index j = 0; j < n_real; ++j) {
        const std::string& tok = doc.tokens[static_cast<std::size_t>(j)];
        const double scale = static_cast<double>(tf[tok]) * model.idf(tok);
        m.values.col(j) *= static_cast<Real>(scale);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Unified representation front-end
// ---------------------------------------------------------------------------

enum class RepKind { Embed, Tfidf, Random };

inline const char* rep_name(RepKind k) {
    switch (k) {
        case RepKind::Embed: return "embed";
        case RepKind::Tfidf: return "tfidf";
        case RepKind::Random: return "random";
    }
    return "?";
}

inline RepKind rep_from_name(const std::string& s) {
    if (s == "embed") return RepKind::Embed;
    if (s == "tfidf") return RepKind::Tfidf;
    if (s == "random") return RepKind::Random;
    throw std::invalid_argument("unknown representation: " + s + " (expected embed|tfidf|random)");
}

/// One object that turns an entity document into its input matrix, whatever
/// the configured representation.
template <typename Real>
struct MatrixBuilder {
    RepKind rep = RepKind::Embed;
    Vocabulary vocab;
    EmbeddingTable<Real> table;  // pretrained for Embed, random otherwise
    TfidfModel tfidf;            // fitted only when rep == Tfidf
    Index n_max = 300;

    DocumentMatrix<Real> build(const EntityDocument& doc) const {
        if (rep == RepKind::Tfidf) return tfidf_matrix(doc, tfidf, vocab, table, n_max);
        return document_matrix(doc, vocab, table, n_max);
    }
};

}  // namespace deepconn
