#pragma once

#include <deepconn/common.hpp>
#include <deepconn/nnkernel.hpp>
#include <deepconn/textrep.hpp>

#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace deepconn {

// ---------------------------------------------------------------------------
// Factorization-machine head
// ---------------------------------------------------------------------------

/// Second-order factorization machine over the joint feature vector:
/// y = w0 + Σ_i w_i z_i + Σ_{i<j} ⟨v_i, v_j⟩ z_i z_j.
template <typename Real>
struct FmHead {
    Real w0 = 0;
    VectorX<Real> w;  // |z|
    MatrixX<Real> v;  // |z| × k, row i = factor vector of feature i

    Index z_size() const { return w.size(); }
    Index k() const { return v.cols(); }
};

/// Forward pass in the factorized O(|z|·k) form
/// ½ Σ_f [(Σ_i v_if z_i)² − Σ_i v_if² z_i²]; `s_out`, when given, receives
/// the per-factor sums Σ_i v_if z_i needed by the backward pass.
template <typename Real>
Real fm_forward(const VectorX<Real>& z, const FmHead<Real>& head, VectorX<Real>* s_out = nullptr) {
    if (z.size() != head.w.size() || head.v.rows() != z.size())
        throw std::invalid_argument("feature vector size does not match the head");

    VectorX<Real> s = head.v.transpose() * z;                       // k
    const VectorX<Real> sq = (head.v.array().square().matrix()).transpose() *
                             (z.array().square().matrix());          // k
    const Real pairwise = Real(0.5) * (s.squaredNorm() - sq.sum());
    const Real y = head.w0 + head.w.dot(z) + pairwise;
    if (s_out) *s_out = std::move(s);
    return y;
}

template <typename Real>
struct FmGrads {
    Real d_w0 = 0;
    VectorX<Real> d_w;
    MatrixX<Real> d_v;
    VectorX<Real> d_z;
};

/// Analytic gradients of the head output, scaled by `upstream`. The feature
/// gradient uses the full symmetric pair sum:
/// ∂y/∂z_i = w_i + Σ_{j≠i} ⟨v_i, v_j⟩ z_j = w_i + Σ_f v_if (s_f − v_if z_i).
template <typename Real>
FmGrads<Real> fm_backward(const VectorX<Real>& z, const FmHead<Real>& head,
                          const VectorX<Real>& s, Real upstream) {
    FmGrads<Real> g;
    g.d_w0 = upstream;
    g.d_w = upstream * z;

    // d_v(i,f) = z_i (s_f − v_if z_i); d_z_i = w_i + Σ_f v_if (s_f − v_if z_i)
    MatrixX<Real> residual = s.transpose().replicate(z.size(), 1);  // |z| × k
    residual -= (head.v.array().colwise() * z.array()).matrix();
    g.d_v = upstream * (residual.array().colwise() * z.array()).matrix();
    g.d_z = upstream * (head.w + (head.v.array() * residual.array()).matrix().rowwise().sum());
    return g;
}

// ---------------------------------------------------------------------------
// Model variants
// ---------------------------------------------------------------------------

enum class VariantKind { Full, UserOnly, ItemOnly, DotProduct };

inline const char* variant_name(VariantKind k) {
    switch (k) {
        case VariantKind::Full: return "full";
        case VariantKind::UserOnly: return "user-only";
        case VariantKind::ItemOnly: return "item-only";
        case VariantKind::DotProduct: return "dot-product";
    }
    return "?";
}

inline VariantKind variant_from_name(const std::string& name) {
    if (name == "full") return VariantKind::Full;
    if (name == "user-only") return VariantKind::UserOnly;
    if (name == "item-only") return VariantKind::ItemOnly;
    if (name == "dot-product") return VariantKind::DotProduct;
    throw std::invalid_argument("unknown model variant: " + name);
}

struct ModelConfig {
    Index c = 300;   // word-vector dimensionality
    Index t = 3;     // conv window width
    Index n1 = 100;  // conv kernels per tower
    Index n2 = 50;   // tower output size
    Index k = 0;     // FM factor count; 0 means |z|
    std::uint64_t seed = 0;
};

struct CorpusStats {
    double mean_rating = 0.0;
    std::vector<std::string> user_ids;  // sorted, training entities
    std::vector<std::string> item_ids;
};

/// Two text towers coupled by a shared head. Table-backed variants replace
/// one tower with a trainable per-entity row; the dot-product variant
/// replaces the head.
template <typename Real>
struct DeepConnModel {
    VariantKind variant = VariantKind::Full;
    ModelConfig config;

    std::optional<Tower<Real>> user_tower;
    std::optional<Tower<Real>> item_tower;
    std::optional<FmHead<Real>> head;

    MatrixX<Real> user_table;  // |users| × n2, ItemOnly variant
    MatrixX<Real> item_table;  // |items| × n2, UserOnly variant
    std::map<std::string, Index> user_rows;
    std::map<std::string, Index> item_rows;

    Index z_size() const { return 2 * config.n2; }

    /// Registers every trainable tensor under stable names.
    void add_parameters(ParameterSet<Real>& params) {
        auto add_tower = [&](const char* prefix, Tower<Real>& tw) {
            params.add(std::string(prefix) + ".conv.weight", tw.conv.weight);
            params.add(std::string(prefix) + ".conv.bias", tw.conv.bias);
            params.add(std::string(prefix) + ".dense.weight", tw.dense.weight);
            params.add(std::string(prefix) + ".dense.bias", tw.dense.bias);
        };
        if (user_tower) add_tower("user", *user_tower);
        if (item_tower) add_tower("item", *item_tower);
        if (head) {
            params.add("head.w0", &head->w0, 1, 1);
            params.add("head.w", head->w);
            params.add("head.v", head->v);
        }
        if (user_table.size() > 0) params.add("user_table", user_table);
        if (item_table.size() > 0) params.add("item_table", item_table);
    }
};

template <typename Real>
DeepConnModel<Real> make_variant(VariantKind kind, const ModelConfig& config,
                                 const CorpusStats& stats) {
    DeepConnModel<Real> m;
    m.variant = kind;
    m.config = config;
    if (m.config.k == 0) m.config.k = 2 * config.n2;

    Rng user_rng(mix_seed(config.seed, {0x746f776572ULL, 0}));  // stream tag "tower",side
    Rng item_rng(mix_seed(config.seed, {0x746f776572ULL, 1}));
    Rng head_rng(mix_seed(config.seed, {0x68656164ULL}));       // stream tag "head"
    Rng table_rng(mix_seed(config.seed, {0x7461626c65ULL}));    // stream tag "table"

    const bool user_side = kind != VariantKind::ItemOnly;
    const bool item_side = kind != VariantKind::UserOnly;
    switch (kind) {
        case VariantKind::Full:
        case VariantKind::UserOnly:
        case VariantKind::ItemOnly:
        case VariantKind::DotProduct:
            break;
        default:
            throw std::invalid_argument("unknown model variant");
    }

    if (user_side) m.user_tower = make_tower<Real>(config.c, config.t, config.n1, config.n2, user_rng);
    if (item_side) m.item_tower = make_tower<Real>(config.c, config.t, config.n1, config.n2, item_rng);

    auto fill_table = [&](MatrixX<Real>& table, std::map<std::string, Index>& rows,
                          const std::vector<std::string>& ids) {
        table.resize(static_cast<Index>(ids.size()), config.n2);
        for (Index r = 0; r < table.rows(); ++r)
            for (Index c2 = 0; c2 < table.cols(); ++c2)
                table(r, c2) = static_cast<Real>(table_rng.normal(0.0, 0.01));
        Index at = 0;
        for (const auto& id : ids) rows[id] = at++;
    };
    if (kind == VariantKind::UserOnly) fill_table(m.item_table, m.item_rows, stats.item_ids);
    if (kind == VariantKind::ItemOnly) fill_table(m.user_table, m.user_rows, stats.user_ids);

    if (kind != VariantKind::DotProduct) {
        FmHead<Real> head;
        head.w0 = static_cast<Real>(stats.mean_rating);  // predictions start at the mean
        head.w = VectorX<Real>::Zero(m.z_size());
        head.v.resize(m.z_size(), m.config.k);
        for (Index i = 0; i < head.v.rows(); ++i)
            for (Index f = 0; f < head.v.cols(); ++f)
                head.v(i, f) = static_cast<Real>(head_rng.normal(0.0, 0.01));
        m.head = std::move(head);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

template <typename Real>
struct ModelInput {
    const DocumentMatrix<Real>* user_matrix = nullptr;
    const DocumentMatrix<Real>* item_matrix = nullptr;
    std::string user_id;  // consulted only by table-backed variants
    std::string item_id;
};

template <typename Real>
struct ForwardCache {
    TowerCache<Real> user_cache;
    TowerCache<Real> item_cache;
    VectorX<Real> x_u;  // user feature vector as consumed by the head
    VectorX<Real> y_i;
    VectorX<Real> z;    // concatenation
    VectorX<Real> fm_s;
    Index user_row = -1;
    Index item_row = -1;
    Real y_hat = 0;
};

/// What a table-backed branch does with an id it has never seen: training
/// treats it as a bug, evaluation substitutes a zero factor row (the
/// cold-start fallback).
enum class UnknownEntity { Error, ZeroVector };

/// Runs both branches and the head; `train` enables dropout (drawing masks
/// from `rng`) and fills the cache for a following backward pass.
template <typename Real>
Real predict(const DeepConnModel<Real>& model, const ModelInput<Real>& input, double dropout_rate,
             bool train, Rng& rng, ForwardCache<Real>& cache,
             UnknownEntity unknown = UnknownEntity::Error) {
    if (model.user_tower) {
        if (!input.user_matrix) throw std::invalid_argument("user document matrix required");
        cache.x_u = tower_forward(*input.user_matrix, *model.user_tower, dropout_rate, train, rng,
                                  cache.user_cache);
    } else {
        auto it = model.user_rows.find(input.user_id);
        if (it == model.user_rows.end()) {
            if (unknown == UnknownEntity::Error)
                throw std::runtime_error("user id not in the entity table: " + input.user_id);
            cache.user_row = -1;
            cache.x_u = VectorX<Real>::Zero(model.config.n2);
        } else {
            cache.user_row = it->second;
            cache.x_u = model.user_table.row(cache.user_row).transpose();
        }
    }

    if (model.item_tower) {
        if (!input.item_matrix) throw std::invalid_argument("item document matrix required");
        cache.y_i = tower_forward(*input.item_matrix, *model.item_tower, dropout_rate, train, rng,
                                  cache.item_cache);
    } else {
        auto it = model.item_rows.find(input.item_id);
        if (it == model.item_rows.end()) {
            if (unknown == UnknownEntity::Error)
                throw std::runtime_error("item id not in the entity table: " + input.item_id);
            cache.item_row = -1;
            cache.y_i = VectorX<Real>::Zero(model.config.n2);
        } else {
            cache.item_row = it->second;
            cache.y_i = model.item_table.row(cache.item_row).transpose();
        }
    }

    if (model.variant == VariantKind::DotProduct) {
        cache.y_hat = cache.x_u.dot(cache.y_i);
        return cache.y_hat;
    }

    cache.z.resize(cache.x_u.size() + cache.y_i.size());
    cache.z << cache.x_u, cache.y_i;
    cache.y_hat = fm_forward(cache.z, *model.head, &cache.fm_s);
    return cache.y_hat;
}

// ---------------------------------------------------------------------------
// Loss and full backward
// ---------------------------------------------------------------------------

/// Squared-error loss with gradients accumulated into `params` under the
/// names add_parameters registered. `weight` scales this example's
/// contribution (1/batch for mean reduction). When `embed_grads` is given,
/// input gradients are folded into embedding rows through each column's
/// recorded row id; padding and out-of-vocabulary columns train nothing.
template <typename Real>
Real loss_and_backward(const DeepConnModel<Real>& model, const ModelInput<Real>& input,
                       const ForwardCache<Real>& cache, double rating, Real weight,
                       ParameterSet<Real>& params,
                       typename ParameterSet<Real>::Entry* embed_grads = nullptr) {
    const Real err = cache.y_hat - static_cast<Real>(rating);
    const Real loss = err * err;
    if (!std::isfinite(static_cast<double>(loss))) {
        std::ostringstream msg;
        msg << "non-finite loss for user " << input.user_id << ", item " << input.item_id
            << " (prediction " << cache.y_hat << ", rating " << rating << ")";
        throw std::runtime_error(msg.str());
    }
    const Real upstream = weight * Real(2) * err;

    VectorX<Real> d_x_u, d_y_i;
    if (model.variant == VariantKind::DotProduct) {
        d_x_u = upstream * cache.y_i;
        d_y_i = upstream * cache.x_u;
    } else {
        FmGrads<Real> fm = fm_backward(cache.z, *model.head, cache.fm_s, upstream);
        params.at("head.w0").grad[0] += fm.d_w0;
        params.at("head.w").grad_vector() += fm.d_w;
        params.at("head.v").grad_matrix() += fm.d_v;
        d_x_u = fm.d_z.head(cache.x_u.size());
        d_y_i = fm.d_z.tail(cache.y_i.size());
    }

    auto backprop_tower = [&](const char* prefix, const Tower<Real>& tower,
                              const TowerCache<Real>& tcache, const VectorX<Real>& d_out,
                              const DocumentMatrix<Real>& matrix) {
        const std::string p(prefix);
        MatrixX<Real> d_input;
        tower_backward(tower, tcache, d_out, params.at(p + ".conv.weight").grad_matrix(),
                       params.at(p + ".conv.bias").grad_vector(),
                       params.at(p + ".dense.weight").grad_matrix(),
                       params.at(p + ".dense.bias").grad_vector(),
                       embed_grads ? &d_input : nullptr);
        if (embed_grads) {
            auto g = embed_grads->grad_matrix();  // vocab rows × c
            for (Index j = 0; j < d_input.cols(); ++j) {
                const Index row = matrix.row_ids[static_cast<std::size_t>(j)];
                if (row >= 0) g.row(row) += d_input.col(j).transpose();
            }
        }
    };

    if (model.user_tower) {
        backprop_tower("user", *model.user_tower, cache.user_cache, d_x_u, *input.user_matrix);
    } else {
        params.at("user_table").grad_matrix().row(cache.user_row) += d_x_u.transpose();
    }
    if (model.item_tower) {
        backprop_tower("item", *model.item_tower, cache.item_cache, d_y_i, *input.item_matrix);
    } else {
        params.at("item_table").grad_matrix().row(cache.item_row) += d_y_i.transpose();
    }
    return loss;
}

}  // namespace deepconn
