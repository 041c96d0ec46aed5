// Command-line front end: reproducible train / evaluate / ablate / report
// runs over a JSONL review corpus, plus gradient checking and rating-only
// baselines. Exit codes: 0 success, 1 pipeline failure, 2 usage error.

#include <deepconn/deepconn.hpp>

#include <cstddef>
#include <exception>
#include <filesystem>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

using namespace deepconn;

namespace {

constexpr const char* kUsage = R"(usage: deepconn <subcommand> [--config FILE] [flags]

subcommands
  train      fit one model variant; writes config/history/metrics/checkpoint under --out
  evaluate   score a saved checkpoint on the test split (--checkpoint required)
  predict    score one --user/--item pair from a saved checkpoint
  ablate     train the six ablation rows on one shared split; writes the comparison table
  report     train the model and the rating-only baseline; writes per-bucket sparsity reports
  gradcheck  finite-difference check of the analytic gradients (--tiny = smallest preset)
  baseline   fit a rating-only baseline: baseline fit --model {mean|mf}

flags (defaults in parentheses; --flag=value also accepted)
  --data PATH              review corpus, JSON Lines: user, item, rating, text
  --out DIR                output directory; receives the effective config.json first
  --config FILE            flat key=value file applied between defaults and flags
  --rep NAME               text representation: embed | tfidf | random  (embed)
  --embeddings PATH        pretrained word vectors, needed when --rep embed
  --embed-dim N (300)      --n-max N (300)     --min-count N (1)    --train-embeddings
  --variant NAME           full | user-only | item-only | dot-product  (full)
  --window N (3)           --kernels N (100)   --tower-dim N (50)
  --fm-factors N           factorization size of the head; 0 = twice the tower (0)
  --ratios A,B,C           train,valid,test fractions (0.8,0.1,0.1)
  --split-seed N (0)       --stratify          --no-exclude-target
  --lr X (0.002)           --batch-size N (100)  --epochs N (50)  --patience N (5)
  --seed N (0)             --dropout X (0.5)   --weight-decay X (0)
  --rmsprop-conventional   swap the moving-average weights to 0.1/0.9
  --checkpoint PATH        where train saves and evaluate/predict load the model
  --model NAME             baseline fit: mean | mf  (mf)
  --factors N (50)         --reg X (0.01)      --sweeps N (20)
  --user ID --item ID      the pair to score (predict)
  --bucket-edges A,B,..    --mf-grid-factors A,B,..  --mf-grid-regs A,B,..

exit codes: 0 success, 1 pipeline failure, 2 usage error
environment: DEEPCONN_THREADS caps worker threads (default 1)
)";

// Usage-layer failure: wrong flags, unknown keys, unparsable values.
struct CliError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct HelpRequested {};

struct ParsedArgs {
    std::vector<std::string> config_files;
    std::vector<std::pair<std::string, std::string>> assignments;  // config key, raw value
    std::string user;  // predict only
    std::string item;
    bool tiny = false;  // gradcheck only
};

std::string flag_to_key(std::string name) {
    for (char& ch : name)
        if (ch == '-') ch = '_';
    if (name == "model") return "baseline_model";
    return name;
}

ParsedArgs parse_flags(const std::vector<std::string>& args) {
    ParsedArgs out;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& raw = args[i];
        if (raw == "--help" || raw == "-h") throw HelpRequested{};
        if (raw.rfind("--", 0) != 0 || raw.size() == 2)
            throw CliError("unexpected argument: " + raw);

        std::string name = raw.substr(2);
        std::string value;
        bool inline_value = false;
        if (const auto eq = name.find('='); eq != std::string::npos) {
            value = name.substr(eq + 1);
            name = name.substr(0, eq);
            inline_value = true;
        }

        const auto boolean = [&](const char* key, const char* v) {
            if (inline_value) throw CliError("flag --" + name + " takes no value");
            out.assignments.emplace_back(key, v);
        };
        if (name == "no-exclude-target") {
            boolean("exclude_target", "false");
        } else if (name == "train-embeddings") {
            boolean("train_embeddings", "true");
        } else if (name == "stratify") {
            boolean("stratify", "true");
        } else if (name == "rmsprop-conventional") {
            boolean("rmsprop_conventional", "true");
        } else if (name == "tiny") {
            if (inline_value) throw CliError("flag --tiny takes no value");
            out.tiny = true;
        } else {
            if (!inline_value) {
                if (i + 1 >= args.size()) throw CliError("flag --" + name + " needs a value");
                value = args[++i];
            }
            if (name == "config") {
                out.config_files.push_back(value);
            } else if (name == "user") {
                out.user = value;
            } else if (name == "item") {
                out.item = value;
            } else {
                out.assignments.emplace_back(flag_to_key(name), value);
            }
        }
    }
    return out;
}

/// defaults (or `base`) < config files < flags; any rejection is a usage error.
RunConfig assemble(const ParsedArgs& p, RunConfig base = RunConfig{}) {
    try {
        for (const auto& file : p.config_files) apply_config_file(base, file);
        for (const auto& [key, value] : p.assignments) set_key(base, key, value);
    } catch (const std::exception& e) {
        throw CliError(e.what());
    }
    return base;
}

RunConfig finalize(RunConfig config) {
    try {
        validate(config);
    } catch (const std::exception& e) {
        throw CliError(e.what());
    }
    return config;
}

// ---------------------------------------------------------------------------
// Output plumbing
// ---------------------------------------------------------------------------

std::string join_path(const std::string& dir, const char* name) {
    return (std::filesystem::path(dir) / name).string();
}

/// The config lands first so every run directory can be reproduced.
void open_out_dir(const RunConfig& config) {
    if (config.out.empty()) return;
    std::filesystem::create_directories(config.out);
    write_file(join_path(config.out, "config.json"), config_json(config).dump(2) + "\n");
}

void write_json(const RunConfig& config, const char* name, const nlohmann::ordered_json& j) {
    if (config.out.empty()) return;
    write_file(join_path(config.out, name), j.dump(2) + "\n");
}

void write_text(const RunConfig& config, const char* name, const std::string& text) {
    if (config.out.empty()) return;
    write_file(join_path(config.out, name), text);
}

std::string num(double v) { return detail::format_real(v); }

// ---------------------------------------------------------------------------
// Shared model loading (evaluate, predict)
// ---------------------------------------------------------------------------

struct LoadedModel {
    MatrixBuilder<double> builder;
    DeepConnModel<double> model;
    ParameterSet<double> params;
    nlohmann::ordered_json header;
};

/// Rebuilds the architecture the checkpoint describes and restores its
/// weights; the vocabulary fingerprint ties the file to the corpus.
std::unique_ptr<LoadedModel> load_model(const Pipeline& pipe, const RunConfig& config) {
    auto lm = std::make_unique<LoadedModel>();
    lm->builder = make_builder<double>(pipe, config);
    lm->model = make_variant<double>(variant_from_name(config.variant), make_model_config(config),
                                     pipe.stats);
    lm->model.add_parameters(lm->params);
    if (config.train_embeddings) lm->params.add("embeddings", lm->builder.table.vectors);
    const std::string fp = vocab_fingerprint(pipe.vocab);
    lm->header = load_checkpoint(config.checkpoint, lm->params, &fp);
    return lm;
}

/// Training-time configuration stored in the checkpoint, with stale
/// run-output fields cleared; flags still override it.
RunConfig checkpoint_base(const ParsedArgs& p) {
    const RunConfig cli = assemble(p);
    if (cli.checkpoint.empty()) throw CliError("this subcommand requires --checkpoint");
    const auto header = read_checkpoint_header(cli.checkpoint);
    RunConfig base;
    if (header.contains("config")) base = config_from_json(header.at("config"));
    base.out.clear();
    base.checkpoint.clear();
    return base;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_train(const ParsedArgs& p) {
    const RunConfig config = finalize(assemble(p));
    open_out_dir(config);
    Pipeline pipe(config);
    auto outcome = train_variant<double>(pipe, config);

    for (const auto& rec : outcome->fit.history)
        std::cout << "epoch " << rec.epoch << " train_loss=" << num(rec.train_loss)
                  << " valid_mse=" << num(rec.valid_mse) << "\n";
    if (outcome->fit.diverged) std::cout << "training diverged; best snapshot kept\n";

    std::vector<double> preds;
    const EvalReport valid = evaluate_outcome(pipe, *outcome, pipe.split.valid);
    const EvalReport test = evaluate_outcome(pipe, *outcome, pipe.split.test, &preds);
    std::cout << "variant=" << config.variant << " best_epoch=" << outcome->fit.best_epoch
              << " valid_mse=" << num(valid.mse) << " test_mse=" << num(test.mse) << "\n";

    const std::string fp = vocab_fingerprint(pipe.vocab);
    nlohmann::ordered_json metrics;
    metrics["variant"] = config.variant;
    metrics["best_epoch"] = outcome->fit.best_epoch;
    metrics["valid_mse"] = valid.mse;
    metrics["test_mse"] = test.mse;
    metrics["test_count"] = test.count;
    metrics["test_coldstart"] = test.coldstart_count;
    metrics["embedding_coverage"] = outcome->embedding_coverage >= 0.0
                                        ? nlohmann::ordered_json(outcome->embedding_coverage)
                                        : nlohmann::ordered_json(nullptr);
    metrics["vocab_fingerprint"] = fp;
    metrics["config_fingerprint"] = config_fingerprint(config);
    write_json(config, "history.json", history_json(outcome->fit));
    write_json(config, "metrics.json", metrics);

    std::string ckpt = config.checkpoint;
    if (ckpt.empty() && !config.out.empty()) ckpt = join_path(config.out, "model.ckpt");
    if (!ckpt.empty()) {
        nlohmann::ordered_json extra;
        extra["config"] = config_json(config);
        extra["vocab_fingerprint"] = fp;
        extra["best_epoch"] = outcome->fit.best_epoch;
        save_checkpoint(ckpt, outcome->params, extra);
        std::cout << "checkpoint written: " << ckpt << "\n";
    }
    return 0;
}

int cmd_evaluate(const ParsedArgs& p) {
    const RunConfig config = finalize(assemble(p, checkpoint_base(p)));
    open_out_dir(config);
    Pipeline pipe(config);
    auto lm = load_model(pipe, config);

    std::vector<double> preds;
    const EvalReport report = evaluate(lm->model, pipe.split.test, pipe.user_docs, pipe.item_docs,
                                       lm->builder, config.exclude_target, &preds);
    std::cout << "test_mse=" << num(report.mse) << " pairs=" << report.count
              << " coldstart=" << report.coldstart_count << "\n";

    nlohmann::ordered_json metrics = eval_report_json(report);
    metrics["checkpoint"] = config.checkpoint;
    metrics["vocab_fingerprint"] = vocab_fingerprint(pipe.vocab);
    write_json(config, "metrics.json", metrics);
    return 0;
}

int cmd_predict(const ParsedArgs& p) {
    if (p.user.empty() || p.item.empty()) throw CliError("predict requires --user and --item");
    const RunConfig config = finalize(assemble(p, checkpoint_base(p)));
    open_out_dir(config);
    Pipeline pipe(config);
    auto lm = load_model(pipe, config);

    std::vector<ReviewRecord> pair(1);
    pair[0].user_id = p.user;
    pair[0].item_id = p.item;
    std::vector<double> preds;
    const EvalReport report = evaluate(lm->model, pair, pipe.user_docs, pipe.item_docs,
                                       lm->builder, config.exclude_target, &preds);
    std::cout << "user=" << p.user << " item=" << p.item << " prediction=" << num(preds[0])
              << (report.coldstart_count > 0 ? " (cold start)" : "") << "\n";

    nlohmann::ordered_json j;
    j["user"] = p.user;
    j["item"] = p.item;
    j["prediction"] = preds[0];
    j["cold_start"] = report.coldstart_count > 0;
    write_json(config, "prediction.json", j);
    return 0;
}

int cmd_ablate(const ParsedArgs& p) {
    const RunConfig config = finalize(assemble(p));
    open_out_dir(config);
    Pipeline pipe(config);
    const AblationTable table = ablation_suite<double>(pipe, config);

    std::cout << ablation_text(table);
    write_text(config, "ablation.csv", ablation_csv(table));
    write_json(config, "ablation.json", ablation_json(table));
    write_text(config, "ablation.txt", ablation_text(table));

    for (const auto& row : table.rows)
        if (!row.failed) return 0;
    std::cerr << "error: every ablation row failed\n";
    return 1;
}

int cmd_report(const ParsedArgs& p) {
    const RunConfig config = finalize(assemble(p));
    open_out_dir(config);
    Pipeline pipe(config);
    const auto bundle = run_report<double>(pipe, config);

    std::cout << "model_test_mse=" << num(bundle.model_report.mse)
              << " baseline_test_mse=" << num(bundle.baseline_report.mse)
              << " mf_factors=" << bundle.mf_factors << " mf_reg=" << num(bundle.mf_reg) << "\n"
              << bucket_report_text(bundle.buckets);

    nlohmann::ordered_json metrics;
    metrics["model"] = eval_report_json(bundle.model_report);
    metrics["baseline"] = eval_report_json(bundle.baseline_report);
    metrics["mf_factors"] = bundle.mf_factors;
    metrics["mf_reg"] = bundle.mf_reg;
    write_json(config, "metrics.json", metrics);
    write_json(config, "history.json", history_json(bundle.outcome->fit));
    write_json(config, "mf_grid.json", mf_grid_json(bundle.grid));
    write_text(config, "sparsity.csv", bucket_report_csv(bundle.buckets));
    write_json(config, "sparsity.json", bucket_report_json(bundle.buckets));
    write_text(config, "sparsity.txt", bucket_report_text(bundle.buckets));
    return 0;
}

int cmd_gradcheck(const ParsedArgs& p) {
    RunConfig base;  // compact defaults: finite differences touch every parameter
    base.embed_dim = 6;
    base.window = 2;
    base.kernels = 5;
    base.tower_dim = 4;
    base.fm_factors = 3;
    base.n_max = 7;
    RunConfig config = finalize(assemble(p, base));
    if (p.tiny) {
        config.embed_dim = 4;
        config.window = 2;
        config.kernels = 3;
        config.tower_dim = 2;
        config.fm_factors = 2;
        config.n_max = 5;
    }

    CorpusStats stats;
    stats.mean_rating = 3.5;
    stats.user_ids = {"u0", "u1"};
    stats.item_ids = {"i0", "i1"};
    auto model = make_variant<double>(variant_from_name(config.variant),
                                      make_model_config(config), stats);
    ParameterSet<double> params;
    model.add_parameters(params);

    Rng doc_rng(mix_seed(config.seed, {0xd0c5ULL}));
    DocumentMatrix<double> du, di;
    du.values.resize(config.embed_dim, config.n_max);
    di.values.resize(config.embed_dim, config.n_max);
    for (auto* m : {&du, &di}) {
        for (Index j = 0; j < config.n_max; ++j)
            for (Index i = 0; i < config.embed_dim; ++i)
                m->values(i, j) = doc_rng.uniform(-1.0, 1.0);
        m->mask.assign(static_cast<std::size_t>(config.n_max), 1);
        m->row_ids.assign(static_cast<std::size_t>(config.n_max), 0);
    }

    const ModelInput<double> input{&du, &di, "u1", "i0"};
    const double rating = 4.0;
    Rng unused(0);
    ForwardCache<double> cache;
    predict(model, input, 0.0, true, unused, cache);
    loss_and_backward(model, input, cache, rating, 1.0, params);

    const auto report = grad_check(params, [&] {
        ForwardCache<double> c;
        Rng r(0);
        const double y = predict(model, input, 0.0, true, r, c);
        return (y - rating) * (y - rating);
    });

    const double threshold = 1e-4;
    std::cout << "max_rel_error=" << num(report.max_rel_error) << " worst=" << report.worst_param
              << "[" << report.worst_index << "]"
              << " analytic=" << num(report.analytic) << " numeric=" << num(report.numeric)
              << " parameters=" << params.total_size() << "\n"
              << (report.max_rel_error < threshold ? "pass" : "fail") << " (threshold 1e-4)\n";
    return report.max_rel_error < threshold ? 0 : 1;
}

int cmd_baseline(const ParsedArgs& p) {
    const RunConfig config = finalize(assemble(p));
    open_out_dir(config);
    Pipeline pipe(config);

    const auto split_mse = [&](auto&& predict_one, const std::vector<ReviewRecord>& part) {
        std::vector<double> preds, truths;
        preds.reserve(part.size());
        for (const auto& r : part) {
            preds.push_back(predict_one(r.user_id, r.item_id));
            truths.push_back(r.rating);
        }
        return mse(preds, truths);
    };

    nlohmann::ordered_json j;
    j["model"] = config.baseline_model;
    double train_mse, valid_mse_v, test_mse;
    if (config.baseline_model == "mean") {
        const GlobalMeanModel m = fit_global_mean(pipe.split.train);
        const auto one = [&](const std::string& u, const std::string& i) { return m.predict(u, i); };
        train_mse = split_mse(one, pipe.split.train);
        valid_mse_v = split_mse(one, pipe.split.valid);
        test_mse = split_mse(one, pipe.split.test);
        j["mean"] = m.mean;
    } else {
        const auto m = fit_mf_als<double>(pipe.split.train, config.factors, config.reg,
                                          config.sweeps, config.seed);
        const auto one = [&](const std::string& u, const std::string& i) {
            return predict_mf(m, u, i);
        };
        train_mse = split_mse(one, pipe.split.train);
        valid_mse_v = split_mse(one, pipe.split.valid);
        test_mse = split_mse(one, pipe.split.test);
        j["factors"] = config.factors;
        j["reg"] = config.reg;
        j["sweeps"] = config.sweeps;
        j["objective_trace"] = m.objective_trace;
    }
    j["train_mse"] = train_mse;
    j["valid_mse"] = valid_mse_v;
    j["test_mse"] = test_mse;

    std::cout << "model=" << config.baseline_model << " train_mse=" << num(train_mse)
              << " valid_mse=" << num(valid_mse_v) << " test_mse=" << num(test_mse) << "\n";
    write_json(config, "baseline.json", j);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        if (args.empty()) throw CliError("missing subcommand");
        const std::string cmd = args.front();
        args.erase(args.begin());
        if (cmd == "help" || cmd == "--help" || cmd == "-h") throw HelpRequested{};

        if (cmd == "baseline") {
            if (args.empty() || args.front() != "fit")
                throw CliError("baseline requires the form: baseline fit [flags]");
            args.erase(args.begin());
            return cmd_baseline(parse_flags(args));
        }

        const ParsedArgs p = parse_flags(args);
        if (cmd == "train") return cmd_train(p);
        if (cmd == "evaluate") return cmd_evaluate(p);
        if (cmd == "predict") return cmd_predict(p);
        if (cmd == "ablate") return cmd_ablate(p);
        if (cmd == "report") return cmd_report(p);
        if (cmd == "gradcheck") return cmd_gradcheck(p);
        throw CliError("unknown subcommand: " + cmd);
    } catch (const HelpRequested&) {
        std::cout << kUsage;
        return 0;
    } catch (const CliError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << kUsage;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
