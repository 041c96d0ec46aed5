#pragma once

#include <deepconn/common.hpp>
#include <deepconn/model.hpp>
#include <deepconn/nnkernel.hpp>

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace deepconn {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 0.002;
    Index batch_size = 100;
    double eps = 1e-8;
    // accumulator update r ← decay_sq·g² + decay_hist·r; the default weighting
    // favours the instantaneous squared gradient
    double decay_sq = 0.9;
    double decay_hist = 0.1;
    Index max_epochs = 50;
    Index patience = 5;
    std::uint64_t seed = 0;
    double dropout = 0.5;
    double weight_decay = 0.0;

    void validate() const {
        if (!(lr >= 0.0)) throw std::invalid_argument("learning rate must be nonnegative");
        if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
        if (!(decay_sq > 0.0 && decay_hist > 0.0) || std::abs(decay_sq + decay_hist - 1.0) > 1e-12)
            throw std::invalid_argument("accumulator decay weights must be positive and sum to 1");
        if (!(eps > 0.0)) throw std::invalid_argument("stability constant must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
        if (max_epochs < 1) throw std::invalid_argument("max epochs must be >= 1");
        if (patience < 0) throw std::invalid_argument("patience must be >= 0");
        if (weight_decay < 0.0) throw std::invalid_argument("weight decay must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Optimizer step
// ---------------------------------------------------------------------------

/// One adaptive update per parameter element:
///   r ← decay_sq·g² + decay_hist·r
///   θ ← θ − (lr / (√r + eps))·g
/// Gradients are cleared afterwards. Weight decay, when enabled, folds
/// decay·θ into g first.
template <typename Real>
void rmsprop_step(ParameterSet<Real>& params, const TrainConfig& config) {
    for (auto& e : params.entries()) {
        for (Index i = 0; i < e.size(); ++i) {
            Real g = e.grad[i];
            if (config.weight_decay > 0.0) g += static_cast<Real>(config.weight_decay) * e.data[i];
            if (!std::isfinite(static_cast<double>(g)))
                throw std::runtime_error("non-finite gradient in parameter " + e.name);
            const Real r = static_cast<Real>(config.decay_sq) * g * g +
                           static_cast<Real>(config.decay_hist) * e.rms[i];
            e.rms[i] = r;
            e.data[i] -= static_cast<Real>(config.lr) /
                         (std::sqrt(r) + static_cast<Real>(config.eps)) * g;
        }
        e.grad.setZero();
    }
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

/// One training example: prebuilt document matrices plus identities for the
/// table-backed variants.
template <typename Real>
struct TrainExample {
    const DocumentMatrix<Real>* user_matrix = nullptr;
    const DocumentMatrix<Real>* item_matrix = nullptr;
    std::string user_id;
    std::string item_id;
    double rating = 0.0;
};

struct EpochStats {
    double mean_loss = 0.0;
    Index batches = 0;
    Index examples = 0;
};

namespace detail {

inline constexpr std::uint64_t kShuffleTag = 0x73687566666cULL;  // "shuffl"
inline constexpr std::uint64_t kDropTag = 0x64726f70ULL;          // "drop"

}  // namespace detail

/// Shuffles under (seed, epoch), then trains consecutive batches; the final
/// short batch is trained, not dropped. Per-example dropout streams are a
/// pure function of (seed, epoch, position), and forward passes run on up to
/// DEEPCONN_THREADS workers while gradients reduce in position order, so the
/// result is identical for any worker count. `refresh_inputs`, when set, runs
/// before each batch — the hook for rebuilding document matrices when the
/// embedding table itself is being trained.
template <typename Real>
EpochStats train_epoch(DeepConnModel<Real>& model, ParameterSet<Real>& params,
                       const std::vector<TrainExample<Real>>& examples, const TrainConfig& config,
                       Index epoch,
                       typename ParameterSet<Real>::Entry* embed_grads = nullptr,
                       const std::function<void()>& refresh_inputs = {}) {
    config.validate();
    if (examples.empty()) throw std::invalid_argument("cannot train on an empty example set");

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(config.seed, {detail::kShuffleTag, static_cast<std::uint64_t>(epoch)}));
    fisher_yates_shuffle(order, shuffle_rng);

    const int threads = configured_threads();
    EpochStats stats;
    double loss_sum = 0.0;

    std::size_t at = 0;
    while (at < order.size()) {
        if (refresh_inputs) refresh_inputs();
        const std::size_t batch = std::min<std::size_t>(
            static_cast<std::size_t>(config.batch_size), order.size() - at);
        const Real weight = Real(1) / static_cast<Real>(batch);

        // forward in parallel chunks, backward strictly in position order
        std::vector<ForwardCache<Real>> caches(batch);
        std::size_t done = 0;
        while (done < batch) {
            const std::size_t chunk =
                std::min<std::size_t>(static_cast<std::size_t>(threads), batch - done);
            parallel_for(chunk, threads, [&](std::size_t w) {
                const std::size_t pos = at + done + w;
                const TrainExample<Real>& ex = examples[order[pos]];
                ModelInput<Real> in{ex.user_matrix, ex.item_matrix, ex.user_id, ex.item_id};
                Rng drop_rng(mix_seed(config.seed, {detail::kDropTag, static_cast<std::uint64_t>(epoch),
                                                    static_cast<std::uint64_t>(pos)}));
                predict(model, in, config.dropout, true, drop_rng, caches[done + w]);
            });
            done += chunk;
        }
        for (std::size_t i = 0; i < batch; ++i) {
            const TrainExample<Real>& ex = examples[order[at + i]];
            ModelInput<Real> in{ex.user_matrix, ex.item_matrix, ex.user_id, ex.item_id};
            loss_sum += static_cast<double>(
                loss_and_backward(model, in, caches[i], ex.rating, weight, params, embed_grads));
        }
        rmsprop_step(params, config);
        ++stats.batches;
        at += batch;
    }

    stats.examples = static_cast<Index>(order.size());
    stats.mean_loss = loss_sum / static_cast<double>(order.size());
    return stats;
}

// ---------------------------------------------------------------------------
// Fitting with early stopping
// ---------------------------------------------------------------------------

struct EpochRecord {
    Index epoch = 0;
    double train_loss = 0.0;
    double valid_mse = 0.0;
};

struct FitResult {
    std::vector<EpochRecord> history;
    Index best_epoch = -1;
    double best_valid_mse = 0.0;
    bool stopped_early = false;
    bool diverged = false;
};

/// Trains until validation stops improving: after `patience` consecutive
/// non-improving epochs the loop ends, and the best-validation snapshot is
/// restored into the parameters. A non-finite validation score aborts with
/// the history collected so far (flagged, best snapshot restored).
template <typename Real>
FitResult fit(DeepConnModel<Real>& model, ParameterSet<Real>& params,
              const std::vector<TrainExample<Real>>& examples, const TrainConfig& config,
              const std::function<double()>& valid_mse,
              typename ParameterSet<Real>::Entry* embed_grads = nullptr,
              const std::function<void()>& refresh_inputs = {}) {
    config.validate();
    FitResult result;
    std::vector<Real> best_snapshot = params.flatten();
    Index bad_epochs = 0;

    for (Index epoch = 0; epoch < config.max_epochs; ++epoch) {
        const EpochStats stats =
            train_epoch(model, params, examples, config, epoch, embed_grads, refresh_inputs);
        const double v = valid_mse();
        result.history.push_back({epoch, stats.mean_loss, v});

        if (!std::isfinite(v)) {
            result.diverged = true;
            break;
        }
        if (result.best_epoch < 0 || v < result.best_valid_mse) {
            result.best_epoch = epoch;
            result.best_valid_mse = v;
            best_snapshot = params.flatten();
            bad_epochs = 0;
        } else {
            ++bad_epochs;
            if (bad_epochs > config.patience) {
                result.stopped_early = true;
                break;
            }
        }
    }

    if (result.best_epoch >= 0) params.unflatten(best_snapshot);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
// header, then every parameter tensor in registration order as raw
// little-endian 32-bit reals.

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'D', 'C', 'N', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_u32le(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

inline void write_u64le(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

inline void write_f32le(std::ostream& out, float v) {
    write_u32le(out, std::bit_cast<std::uint32_t>(v));
}

inline bool read_u32le(std::istream& in, std::uint32_t& v) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return true;
}

inline bool read_u64le(std::istream& in, std::uint64_t& v) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) return false;
    v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return true;
}

inline bool read_f32le(std::istream& in, float& v) {
    std::uint32_t u;
    if (!read_u32le(in, u)) return false;
    v = std::bit_cast<float>(u);
    return true;
}

}  // namespace detail

/// Writes parameters plus caller metadata (config, fingerprints, epoch,
/// metrics land inside `extra`).
template <typename Real>
void save_checkpoint(const std::string& path, const ParameterSet<Real>& params,
                     const nlohmann::ordered_json& extra) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);

    nlohmann::ordered_json header;
    header["params"] = nlohmann::ordered_json::array();
    for (const auto& e : params.entries())
        header["params"].push_back({{"name", e.name}, {"rows", e.rows}, {"cols", e.cols}});
    for (const auto& [key, value] : extra.items()) header[key] = value;

    const std::string header_text = header.dump();
    out.write(detail::kCheckpointMagic, 8);
    detail::write_u32le(out, detail::kCheckpointVersion);
    detail::write_u64le(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& e : params.entries())
        for (Index i = 0; i < e.size(); ++i)
            detail::write_f32le(out, static_cast<float>(e.data[i]));
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

/// Reads only the metadata header, without touching the payload. Lets a
/// caller reconstruct the run configuration before it can build the
/// parameter set the full load requires.
inline nlohmann::ordered_json read_checkpoint_header(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);

    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    std::uint32_t version;
    if (!detail::read_u32le(in, version) || version != detail::kCheckpointVersion) {
        std::ostringstream msg;
        msg << path << ": unsupported checkpoint version";
        throw std::runtime_error(msg.str());
    }
    std::uint64_t header_len;
    if (!detail::read_u64le(in, header_len)) throw std::runtime_error("truncated checkpoint header");
    std::string header_text(header_len, '\0');
    if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len)))
        throw std::runtime_error("truncated checkpoint header");

    nlohmann::ordered_json header = nlohmann::ordered_json::parse(header_text, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error("corrupt checkpoint header JSON");
    return header;
}

/// Restores parameter values in place; shapes, names, magic, version,
/// payload length, and (when given) the vocabulary fingerprint must all
/// match. Returns the header for callers that need the metadata.
template <typename Real>
nlohmann::ordered_json load_checkpoint(const std::string& path, ParameterSet<Real>& params,
                                       const std::string* expected_vocab_fingerprint = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);

    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    std::uint32_t version;
    if (!detail::read_u32le(in, version) || version != detail::kCheckpointVersion) {
        std::ostringstream msg;
        msg << path << ": unsupported checkpoint version";
        throw std::runtime_error(msg.str());
    }
    std::uint64_t header_len;
    if (!detail::read_u64le(in, header_len)) throw std::runtime_error("truncated checkpoint header");
    std::string header_text(header_len, '\0');
    if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len)))
        throw std::runtime_error("truncated checkpoint header");

    nlohmann::ordered_json header = nlohmann::ordered_json::parse(header_text, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error("corrupt checkpoint header JSON");

    if (expected_vocab_fingerprint) {
        const std::string stored = header.value("vocab_fingerprint", std::string());
        if (stored != *expected_vocab_fingerprint)
            throw std::runtime_error("checkpoint vocabulary fingerprint mismatch");
    }

    const auto& declared = header.at("params");
    if (declared.size() != params.entries().size())
        throw std::runtime_error("checkpoint parameter list does not match the model");
    for (std::size_t i = 0; i < params.entries().size(); ++i) {
        const auto& e = params.entries()[i];
        const auto& d = declared[i];
        if (d.at("name").get<std::string>() != e.name ||
            d.at("rows").get<Index>() != e.rows || d.at("cols").get<Index>() != e.cols)
            throw std::runtime_error("checkpoint shape mismatch at parameter " + e.name);
    }

    for (auto& e : params.entries()) {
        for (Index i = 0; i < e.size(); ++i) {
            float v;
            if (!detail::read_f32le(in, v))
                throw std::runtime_error("truncated checkpoint payload at " + e.name);
            e.data[i] = static_cast<Real>(v);
        }
    }
    if (in.peek() != std::ifstream::traits_type::eof())
        throw std::runtime_error("checkpoint has trailing bytes beyond the declared payload");
    return header;
}

}  // namespace deepconn
