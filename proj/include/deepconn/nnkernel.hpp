#pragma once

#include <deepconn/common.hpp>
#include <deepconn/textrep.hpp>

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

namespace deepconn {

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// 1-D valid convolution over word-vector columns. Column j of `weight` is
/// kernel j, a c×t patch flattened column-major, so the forward pass is a
/// single GEMM against the unrolled window matrix.
template <typename Real>
struct ConvLayer {
    Index c = 0;   // word-vector dimensionality
    Index t = 0;   // window width
    Index n1 = 0;  // kernel count
    MatrixX<Real> weight;  // (c*t) × n1
    VectorX<Real> bias;    // n1

    auto kernel(Index j) const {
        return Eigen::Map<const MatrixX<Real>>(weight.col(j).data(), c, t);
    }
};

template <typename Real>
struct DenseLayer {
    MatrixX<Real> weight;  // n2 × n1
    VectorX<Real> bias;    // n2
};

/// Scaled uniform init on ±sqrt(6/(fan_in+fan_out)); biases start at zero.
template <typename Real>
void init_weight(MatrixX<Real>& w, Index fan_in, Index fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (Index j = 0; j < w.cols(); ++j)
        for (Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Real>(rng.uniform(-bound, bound));
}

template <typename Real>
ConvLayer<Real> make_conv_layer(Index c, Index t, Index n1, Rng& rng) {
    if (c < 1 || t < 1 || n1 < 1) throw std::invalid_argument("conv layer dims must be >= 1");
    ConvLayer<Real> layer;
    layer.c = c;
    layer.t = t;
    layer.n1 = n1;
    layer.weight.resize(c * t, n1);
    init_weight(layer.weight, c * t, n1, rng);
    layer.bias = VectorX<Real>::Zero(n1);
    return layer;
}

template <typename Real>
DenseLayer<Real> make_dense_layer(Index in, Index out, Rng& rng) {
    if (in < 1 || out < 1) throw std::invalid_argument("dense layer dims must be >= 1");
    DenseLayer<Real> layer;
    layer.weight.resize(out, in);
    init_weight(layer.weight, in, out, rng);
    layer.bias = VectorX<Real>::Zero(out);
    return layer;
}

// ---------------------------------------------------------------------------
// Forward primitives
// ---------------------------------------------------------------------------

/// Post-activation feature maps of one conv pass: values(j, p) is kernel j's
/// output on window p. Windows made purely of padding are forced to zero and
/// never win the pooling argmax; `all_masked` marks a document with no usable
/// window at all.
template <typename Real>
struct FeatureMaps {
    MatrixX<Real> values;              // n1 × (n - t + 1)
    std::vector<Index> argmax;         // filled by maxpool; -1 when all_masked
    std::vector<std::uint8_t> window_valid;
    bool all_masked = false;
};

/// Unrolls document columns into the window matrix: column p stacks V columns
/// [p, p+t) so conv becomes weightᵀ·X.
template <typename Real>
MatrixX<Real> unroll_windows(const MatrixX<Real>& values, Index t) {
    const Index c = values.rows();
    const Index n = values.cols();
    const Index p_count = n - t + 1;
    MatrixX<Real> x(c * t, p_count);
    for (Index p = 0; p < p_count; ++p)
        for (Index w = 0; w < t; ++w) x.block(w * c, p, c, 1) = values.col(p + w);
    return x;
}

template <typename Real>
FeatureMaps<Real> conv_forward(const DocumentMatrix<Real>& v, const ConvLayer<Real>& layer,
                               const MatrixX<Real>* unrolled = nullptr) {
    if (v.c() != layer.c) throw std::invalid_argument("document and kernel channel counts differ");
    if (v.n() < layer.t) throw std::invalid_argument("document shorter than the conv window");

    const Index p_count = v.n() - layer.t + 1;
    MatrixX<Real> local;
    if (!unrolled) {
        local = unroll_windows(v.values, layer.t);
        unrolled = &local;
    }

    FeatureMaps<Real> fm;
    fm.values = (layer.weight.transpose() * (*unrolled)).colwise() + layer.bias;
    fm.values = fm.values.cwiseMax(Real(0));

    // a window is usable iff it covers at least one real token
    fm.window_valid.assign(static_cast<std::size_t>(p_count), 0);
    std::vector<Index> prefix(static_cast<std::size_t>(v.n()) + 1, 0);
    for (Index i = 0; i < v.n(); ++i)
        prefix[static_cast<std::size_t>(i) + 1] =
            prefix[static_cast<std::size_t>(i)] + (v.mask[static_cast<std::size_t>(i)] ? 1 : 0);
    fm.all_masked = true;
    for (Index p = 0; p < p_count; ++p) {
        const bool valid = prefix[static_cast<std::size_t>(p + layer.t)] - prefix[static_cast<std::size_t>(p)] > 0;
        fm.window_valid[static_cast<std::size_t>(p)] = valid ? 1 : 0;
        if (valid) {
            fm.all_masked = false;
        } else {
            fm.values.col(p).setZero();
        }
    }
    return fm;
}

/// Row-wise max over valid windows; ties break to the lowest index. Records
/// the winning window per row for the backward pass. A fully masked document
/// pools to the zero vector with argmax -1 throughout.
template <typename Real>
VectorX<Real> maxpool(FeatureMaps<Real>& fm) {
    const Index n1 = fm.values.rows();
    const Index p_count = fm.values.cols();
    fm.argmax.assign(static_cast<std::size_t>(n1), -1);
    VectorX<Real> o = VectorX<Real>::Zero(n1);
    if (fm.all_masked) return o;

    for (Index j = 0; j < n1; ++j) {
        Index best = -1;
        Real best_val = 0;
        for (Index p = 0; p < p_count; ++p) {
            if (!fm.window_valid[static_cast<std::size_t>(p)]) continue;
            const Real val = fm.values(j, p);
            if (best < 0 || val > best_val) {
                best = p;
                best_val = val;
            }
        }
        fm.argmax[static_cast<std::size_t>(j)] = best;
        o[j] = best_val;
    }
    return o;
}

template <typename Real>
VectorX<Real> dense_forward(const VectorX<Real>& o, const DenseLayer<Real>& layer) {
    if (o.size() != layer.weight.cols()) throw std::invalid_argument("dense input size mismatch");
    return ((layer.weight * o + layer.bias).cwiseMax(Real(0))).eval();
}

/// Inverted dropout. Train mode zeroes each coordinate with probability
/// `rate` and scales survivors by 1/(1-rate); eval mode is the identity,
/// bit for bit. `mult_out` receives the per-coordinate multiplier.
template <typename Real>
VectorX<Real> dropout(const VectorX<Real>& x, double rate, bool train, Rng& rng,
                      ArrayX<Real>* mult_out = nullptr) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
    if (!train || rate == 0.0) {
        if (mult_out) *mult_out = ArrayX<Real>::Ones(x.size());
        return x;
    }
    const Real keep_scale = static_cast<Real>(1.0 / (1.0 - rate));
    ArrayX<Real> mult(x.size());
    for (Index i = 0; i < x.size(); ++i)
        mult[i] = rng.next_double() >= rate ? keep_scale : Real(0);
    if (mult_out) *mult_out = mult;
    return (x.array() * mult).matrix();
}

// ---------------------------------------------------------------------------
// One text tower: conv → ReLU → max-pool → dense → ReLU → dropout
// ---------------------------------------------------------------------------

template <typename Real>
struct Tower {
    ConvLayer<Real> conv;
    DenseLayer<Real> dense;

    Index n2() const { return dense.weight.rows(); }
};

template <typename Real>
Tower<Real> make_tower(Index c, Index t, Index n1, Index n2, Rng& rng) {
    Tower<Real> tw;
    tw.conv = make_conv_layer<Real>(c, t, n1, rng);
    tw.dense = make_dense_layer<Real>(n1, n2, rng);
    return tw;
}

/// Every intermediate the backward pass needs, captured during forward.
template <typename Real>
struct TowerCache {
    MatrixX<Real> unrolled;            // (c·t) × windows
    FeatureMaps<Real> fm;
    VectorX<Real> pooled;              // n1
    VectorX<Real> dense_out;           // n2, post-ReLU, pre-dropout
    ArrayX<Real> drop_mult;            // n2 dropout multipliers
    VectorX<Real> out;                 // n2, what the head consumed
    std::vector<std::uint8_t> mask;    // input positions
    Index n = 0;
};

template <typename Real>
VectorX<Real> tower_forward(const DocumentMatrix<Real>& v, const Tower<Real>& tower,
                            double dropout_rate, bool train, Rng& rng, TowerCache<Real>& cache) {
    cache.n = v.n();
    cache.mask = v.mask;
    cache.unrolled = unroll_windows(v.values, tower.conv.t);
    cache.fm = conv_forward(v, tower.conv, &cache.unrolled);
    cache.pooled = maxpool(cache.fm);
    cache.dense_out = dense_forward(cache.pooled, tower.dense);
    cache.out = dropout(cache.dense_out, dropout_rate, train, rng, &cache.drop_mult);
    return cache.out;
}

/// Analytic gradients for one tower, accumulated (+=) into the given slots.
/// Pool backward routes each row's gradient to its recorded argmax window;
/// `d_input`, when requested, gets zero columns at masked positions.
template <typename Real>
void tower_backward(const Tower<Real>& tower, const TowerCache<Real>& cache,
                    const VectorX<std::type_identity_t<Real>>& d_out,
                    Eigen::Ref<MatrixX<std::type_identity_t<Real>>> d_conv_weight,
                    Eigen::Ref<VectorX<std::type_identity_t<Real>>> d_conv_bias,
                    Eigen::Ref<MatrixX<std::type_identity_t<Real>>> d_dense_weight,
                    Eigen::Ref<VectorX<std::type_identity_t<Real>>> d_dense_bias,
                    MatrixX<Real>* d_input = nullptr) {
    const Index n1 = tower.conv.n1;
    const Index n2 = tower.n2();
    if (cache.pooled.size() != n1 || cache.dense_out.size() != n2 ||
        cache.unrolled.rows() != tower.conv.c * tower.conv.t)
        throw std::runtime_error("tower cache does not match the layer shapes");
    if (d_out.size() != n2) throw std::invalid_argument("upstream gradient size mismatch");

    // dropout, then the dense ReLU
    VectorX<Real> d_dense_out = (d_out.array() * cache.drop_mult).matrix();
    VectorX<Real> d_pre =
        (d_dense_out.array() * (cache.dense_out.array() > Real(0)).template cast<Real>()).matrix();

    d_dense_weight += d_pre * cache.pooled.transpose();
    d_dense_bias += d_pre;
    VectorX<Real> d_pooled = tower.dense.weight.transpose() * d_pre;

    if (d_input) {
        d_input->setZero(tower.conv.c, cache.n);
    }

    // pool + conv ReLU backward: each row touches one window at most
    for (Index j = 0; j < n1; ++j) {
        const Index p = cache.fm.argmax[static_cast<std::size_t>(j)];
        if (p < 0) continue;
        if (!(cache.fm.values(j, p) > Real(0))) continue;  // ReLU gate closed
        const Real g = d_pooled[j];
        if (g == Real(0)) continue;
        d_conv_weight.col(j) += g * cache.unrolled.col(p);
        d_conv_bias[j] += g;
        if (d_input) {
            for (Index w = 0; w < tower.conv.t; ++w)
                d_input->col(p + w) += g * tower.conv.weight.block(w * tower.conv.c, j, tower.conv.c, 1);
        }
    }

    if (d_input) {
        for (Index i = 0; i < cache.n; ++i)
            if (!cache.mask[static_cast<std::size_t>(i)]) d_input->col(i).setZero();
    }
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping
// ---------------------------------------------------------------------------

/// Flat named view over every trainable tensor, with parallel gradient and
/// optimizer-accumulator storage. Entries alias model memory; the model must
/// outlive the set and never reallocate its tensors.
template <typename Real>
class ParameterSet {
public:
    struct Entry {
        std::string name;
        Real* data = nullptr;
        Index rows = 0;
        Index cols = 0;
        ArrayX<Real> grad;
        ArrayX<Real> rms;

        Index size() const { return rows * cols; }
        Eigen::Map<MatrixX<Real>> values() { return {data, rows, cols}; }
        Eigen::Map<const MatrixX<Real>> values() const { return {data, rows, cols}; }
        Eigen::Map<MatrixX<Real>> grad_matrix() { return {grad.data(), rows, cols}; }
        Eigen::Map<VectorX<Real>> grad_vector() { return {grad.data(), rows * cols}; }
    };

    void add(const std::string& name, Real* data, Index rows, Index cols) {
        for (const auto& e : entries_)
            if (e.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
        Entry e;
        e.name = name;
        e.data = data;
        e.rows = rows;
        e.cols = cols;
        e.grad = ArrayX<Real>::Zero(rows * cols);
        e.rms = ArrayX<Real>::Zero(rows * cols);
        entries_.push_back(std::move(e));
    }

    void add(const std::string& name, MatrixX<Real>& m) { add(name, m.data(), m.rows(), m.cols()); }
    void add(const std::string& name, VectorX<Real>& v) { add(name, v.data(), v.size(), 1); }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    Entry& at(const std::string& name) {
        for (auto& e : entries_)
            if (e.name == name) return e;
        throw std::invalid_argument("unknown parameter: " + name);
    }

    Index total_size() const {
        Index n = 0;
        for (const auto& e : entries_) n += e.size();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) e.grad.setZero();
    }

    /// Copies current values into one flat vector (snapshot).
    std::vector<Real> flatten() const {
        std::vector<Real> out;
        out.reserve(static_cast<std::size_t>(total_size()));
        for (const auto& e : entries_)
            out.insert(out.end(), e.data, e.data + e.size());
        return out;
    }

    void unflatten(const std::vector<Real>& flat) {
        if (static_cast<Index>(flat.size()) != total_size())
            throw std::invalid_argument("snapshot length does not match parameter count");
        std::size_t at = 0;
        for (auto& e : entries_) {
            std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at),
                      flat.begin() + static_cast<std::ptrdiff_t>(at + static_cast<std::size_t>(e.size())),
                      e.data);
            at += static_cast<std::size_t>(e.size());
        }
    }

private:
    std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    Index worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Central-difference check of the analytic gradients already stored in
/// `params` against `loss()`, which must be a deterministic pure function of
/// the parameter values. Relative error is |a-n| / max(|a|+|n|, floor).
template <typename Real, typename LossFn>
GradCheckReport grad_check(ParameterSet<Real>& params, LossFn&& loss, double eps = 1e-5) {
    GradCheckReport report;
    for (auto& e : params.entries()) {
        for (Index i = 0; i < e.size(); ++i) {
            const Real saved = e.data[i];
            if (!std::isfinite(static_cast<double>(saved)))
                throw std::runtime_error("non-finite parameter value in " + e.name);

            e.data[i] = saved + static_cast<Real>(eps);
            const double loss_plus = static_cast<double>(loss());
            e.data[i] = saved - static_cast<Real>(eps);
            const double loss_minus = static_cast<double>(loss());
            e.data[i] = saved;

            const double numeric = (loss_plus - loss_minus) / (2.0 * eps);
            const double analytic = static_cast<double>(e.grad[i]);
            if (!std::isfinite(numeric) || !std::isfinite(analytic))
                throw std::runtime_error("non-finite gradient while checking " + e.name);

            const double rel =
                std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-12);
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = e.name;
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace deepconn
