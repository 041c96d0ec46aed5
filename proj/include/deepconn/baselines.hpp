#pragma once

#include <deepconn/common.hpp>
#include <deepconn/ingest.hpp>

#include <Eigen/Cholesky>

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace deepconn {

// ---------------------------------------------------------------------------
// Global mean
// ---------------------------------------------------------------------------

/// Predicts the training mean for every pair; the cheapest sanity floor.
struct GlobalMeanModel {
    double mean = 0.0;

    double predict(const std::string&, const std::string&) const { return mean; }
};

inline GlobalMeanModel fit_global_mean(const std::vector<ReviewRecord>& train) {
    if (train.empty()) throw std::invalid_argument("cannot fit a mean on an empty training set");
    double sum = 0.0;
    for (const auto& r : train) sum += r.rating;
    return GlobalMeanModel{sum / static_cast<double>(train.size())};
}

// ---------------------------------------------------------------------------
// Matrix factorization via alternating least squares
// ---------------------------------------------------------------------------

/// Rating-only low-rank model: prediction is μ + p_u·q_i, with zero factors
/// (hence μ) for entities outside the training set.
template <typename Real>
struct MfModel {
    MatrixX<Real> user_factors;  // |users| × f
    MatrixX<Real> item_factors;  // |items| × f
    Real global_mean = 0;
    double reg = 0.0;
    Index f = 0;
    std::unordered_map<std::string, Index> user_index;
    std::unordered_map<std::string, Index> item_index;
    std::vector<double> objective_trace;  // initial value, then one entry per sweep
};

template <typename Real>
Real predict_mf(const MfModel<Real>& model, const std::string& user, const std::string& item) {
    const auto u = model.user_index.find(user);
    const auto i = model.item_index.find(item);
    if (u == model.user_index.end() || i == model.item_index.end()) return model.global_mean;
    return model.global_mean +
           model.user_factors.row(u->second).dot(model.item_factors.row(i->second));
}

namespace detail {

/// Σ (r − μ − p_u·q_i)² + reg·(‖P‖² + ‖Q‖²) over the given ratings.
template <typename Real>
double mf_objective_impl(const MfModel<Real>& model,
                         const std::vector<std::tuple<Index, Index, double>>& entries) {
    double obj = 0.0;
    for (const auto& [u, i, r] : entries) {
        const double e = r - static_cast<double>(model.global_mean) -
                         static_cast<double>(
                             model.user_factors.row(u).dot(model.item_factors.row(i)));
        obj += e * e;
    }
    obj += model.reg * (static_cast<double>(model.user_factors.squaredNorm()) +
                        static_cast<double>(model.item_factors.squaredNorm()));
    return obj;
}

/// One half-sweep: exact ridge solve of every row of `solved` against the
/// fixed `fixed` side. Rows are independent, so they parallelize.
template <typename Real>
void mf_half_sweep(MatrixX<Real>& solved, const MatrixX<Real>& fixed,
                   const std::vector<std::vector<std::pair<Index, double>>>& by_row, double reg) {
    const Index f = solved.cols();
    parallel_for(static_cast<std::size_t>(solved.rows()), configured_threads(), [&](std::size_t row) {
        const auto& obs = by_row[row];
        if (obs.empty()) {
            solved.row(static_cast<Index>(row)).setZero();  // ridge of an empty system
            return;
        }
        MatrixX<Real> a = MatrixX<Real>::Identity(f, f) * static_cast<Real>(reg);
        VectorX<Real> b = VectorX<Real>::Zero(f);
        for (const auto& [other, residual] : obs) {
            a.noalias() += fixed.row(other).transpose() * fixed.row(other);
            b.noalias() += fixed.row(other).transpose() * static_cast<Real>(residual);
        }
        Eigen::LDLT<MatrixX<Real>> ldlt(a);
        if (ldlt.info() != Eigen::Success)
            throw std::runtime_error("ridge system failed to factorize");
        solved.row(static_cast<Index>(row)) = ldlt.solve(b).transpose();
    });
}

}  // namespace detail

/// Recomputes the ALS objective on the given ratings, for verification.
template <typename Real>
double mf_objective(const MfModel<Real>& model, const std::vector<ReviewRecord>& ratings) {
    std::vector<std::tuple<Index, Index, double>> entries;
    entries.reserve(ratings.size());
    for (const auto& r : ratings) {
        const auto u = model.user_index.find(r.user_id);
        const auto i = model.item_index.find(r.item_id);
        if (u == model.user_index.end() || i == model.item_index.end())
            throw std::invalid_argument("rating references an entity outside the model");
        entries.emplace_back(u->second, i->second, r.rating);
    }
    return detail::mf_objective_impl(model, entries);
}

/// Alternating exact ridge solves, one user half-sweep then one item
/// half-sweep per sweep. Each half-sweep minimizes the objective over its
/// block, so the per-sweep objective sequence never increases; an increase
/// beyond 1e-10 relative aborts the fit.
template <typename Real>
MfModel<Real> fit_mf_als(const std::vector<ReviewRecord>& train, Index f, double reg, Index sweeps,
                         std::uint64_t seed = 0) {
    if (train.empty()) throw std::invalid_argument("cannot factorize an empty training set");
    if (f < 1) throw std::invalid_argument("factor rank must be >= 1");
    if (!(reg > 0.0)) throw std::invalid_argument("regularization must be positive");
    if (sweeps < 0) throw std::invalid_argument("sweep count must be >= 0");

    MfModel<Real> model;
    model.f = f;
    model.reg = reg;

    double sum = 0.0;
    for (const auto& r : train) sum += r.rating;
    model.global_mean = static_cast<Real>(sum / static_cast<double>(train.size()));

    // deterministic index assignment in first-appearance order
    for (const auto& r : train) {
        model.user_index.emplace(r.user_id, static_cast<Index>(model.user_index.size()));
        model.item_index.emplace(r.item_id, static_cast<Index>(model.item_index.size()));
    }
    const Index n_users = static_cast<Index>(model.user_index.size());
    const Index n_items = static_cast<Index>(model.item_index.size());

    std::vector<std::vector<std::pair<Index, double>>> by_user(n_users), by_item(n_items);
    std::vector<std::tuple<Index, Index, double>> entries;
    entries.reserve(train.size());
    for (const auto& r : train) {
        const Index u = model.user_index.at(r.user_id);
        const Index i = model.item_index.at(r.item_id);
        const double residual = r.rating - static_cast<double>(model.global_mean);
        by_user[u].emplace_back(i, residual);
        by_item[i].emplace_back(u, residual);
        entries.emplace_back(u, i, r.rating);
    }

    // a zero start is a fixed point of the alternation, so the item side
    // begins at small random values; the first user half-sweep is then a
    // proper ridge solve
    model.user_factors = MatrixX<Real>::Zero(n_users, f);
    model.item_factors.resize(n_items, f);
    Rng rng(mix_seed(seed, {0x616c73ULL}));  // stream tag "als"
    for (Index i = 0; i < n_items; ++i)
        for (Index j = 0; j < f; ++j)
            model.item_factors(i, j) = static_cast<Real>(rng.uniform(-0.1, 0.1));

    model.objective_trace.push_back(detail::mf_objective_impl(model, entries));
    for (Index sweep = 0; sweep < sweeps; ++sweep) {
        detail::mf_half_sweep(model.user_factors, model.item_factors, by_user, reg);
        detail::mf_half_sweep(model.item_factors, model.user_factors, by_item, reg);
        const double obj = detail::mf_objective_impl(model, entries);
        const double prev = model.objective_trace.back();
        if (obj > prev + 1e-10 * std::max(1.0, std::abs(prev)))
            throw std::runtime_error("alternating least squares objective increased");
        model.objective_trace.push_back(obj);
    }
    return model;
}

}  // namespace deepconn
