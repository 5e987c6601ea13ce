#include "cli.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <unordered_set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cozinb/config.hpp"
#include "cozinb/data.hpp"
#include "cozinb/error.hpp"
#include "cozinb/eval.hpp"
#include "cozinb/generative.hpp"
#include "cozinb/inference.hpp"
#include "cozinb/parallel.hpp"
#include "cozinb/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cozinb::cli {

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    return out;
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream out = open_out(path);
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

std::string num(double v) {
    if (std::isnan(v)) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

/// Maps the error families onto exit codes.
int guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DomainError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kExitData;
    }
}

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides,
                         const std::optional<std::string>& output) {
    RunConfig c = load_config(path);
    for (const std::string& o : overrides) apply_override(c, o);
    if (output) c.output = *output;
    c.validate();
    return c;
}

/// Loads the counts and applies labels and the blacklist; the top-feature
/// filter is left to the caller.
Corpus load_corpus(const RunConfig& c, const std::string& data) {
    if (data.empty()) throw ConfigError("no data path given");
    Corpus corpus = load_counts(data, parse_count_format(c.format));
    if (!c.labels.empty()) attach_labels(corpus.counts, c.labels);
    if (!c.feature_blacklist.empty()) {
        corpus = remove_features(
            corpus, std::unordered_set<std::string>(c.feature_blacklist.begin(), c.feature_blacklist.end()));
    }
    return corpus;
}

HeldoutSplit validation_split(const RunConfig& c, const CountMatrix& counts) {
    return split_heldout(counts, c.heldout_token_fraction, c.seed, c.validation_fraction);
}

void write_vocab(const Vocab& v, const fs::path& path) {
    std::ofstream out = open_out(path);
    for (const std::string& id : v.entries()) out << id << '\n';
}

Vocab read_vocab(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open vocabulary '" + path.string() + "'");
    std::vector<std::string> entries;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        entries.push_back(line);
    }
    return Vocab(std::move(entries));
}

struct Model {
    RunConfig config;
    Checkpoint checkpoint;
    Vocab vocab;
    json extra;
};

Model load_model(const fs::path& dir) {
    Model m;
    m.checkpoint = load_checkpoint(dir / "checkpoint");
    m.config = config_from_json(read_json(dir / "config.json"));
    m.vocab = read_vocab(dir / "vocab.txt");
    m.extra = json::parse(m.checkpoint.extra_json);
    if (static_cast<int>(m.vocab.size()) != m.checkpoint.global.M) {
        throw DataError("vocabulary of '" + dir.string() + "' does not match the checkpoint");
    }
    return m;
}

/// Corpus for an existing model: the run's preprocessing, then the model's columns.
Corpus model_corpus(const Model& m, const std::string& data) {
    std::uint64_t dropped = 0;
    Corpus c = align_to_vocab(load_corpus(m.config, data), m.vocab, &dropped);
    if (dropped > 0) std::cerr << "warning: dropped " << dropped << " tokens of features unknown to the model\n";
    return c;
}

std::vector<double> factor_usage(const std::vector<LocalState>& locals, int K, std::vector<double>& mass) {
    std::vector<double> usage(K, 0.0);
    mass.assign(K, 0.0);
    for (std::size_t j = 0; j < locals.size(); ++j) {
        const Eigen::ArrayXd lam = locals[j].rate_mean();
        for (int k = 0; k < K; ++k) {
            usage[k] += locals[j].nu[k];
            mass[k] += lam[k];
        }
    }
    return usage;
}

void write_trace_header(std::ostream& out) { out << "epoch\telbo\tval_perplexity\twall_time\n"; }

void write_trace_row(std::ostream& out, const TraceRow& r, bool wall) {
    out << r.epoch << '\t' << num(r.elbo) << '\t' << num(r.val_perplexity) << '\t'
        << (wall ? num(r.wall_time) : std::string("NA")) << '\n';
}

}  // namespace

int cmd_fit(const FitArgs& a) {
    return guarded([&] {
        RunConfig c = resolve_config(a.config, a.overrides, a.output);
        Corpus corpus = load_corpus(c, c.data);
        if (c.top_features > 0) corpus = filter_top_features(corpus, c.top_features);
        const HeldoutSplit split = validation_split(c, corpus.counts);

        const fs::path out_dir = c.output;
        fs::create_directories(out_dir);
        write_json(to_json(c), out_dir / "config.json");
        write_vocab(corpus.vocab, out_dir / "vocab.txt");

        FitSettings st;
        st.hp = c.hp;
        st.schedule = c.schedule;
        st.opts = c.opts;
        st.opts.threads = a.threads;
        st.seed = c.seed;
        st.cavi = c.cavi;
        if (split.test_target.total_tokens() > 0) st.validation = Validation{&split.test_observed, &split.test_target};

        std::ofstream trace = open_out(out_dir / "trace.tsv");
        write_trace_header(trace);
        std::vector<TraceRow> rows;
        st.on_epoch = [&](const TraceRow& r) {
            rows.push_back(r);
            write_trace_row(trace, r, c.record_wall_time);
            trace.flush();
        };

        FitResult res;
        try {
            res = fit(split.train, st);
        } catch (const NumericalError& e) {
            json diag = {{"error", e.what()}, {"epochs_completed", rows.size()}, {"config", to_json(c)}};
            json tr = json::array();
            for (const TraceRow& r : rows) tr.push_back({{"epoch", r.epoch}, {"elbo", num_or_null(r.elbo)}});
            diag["trace"] = tr;
            write_json(diag, out_dir / "diagnostic.json");
            std::cerr << "diagnostics written to '" << (out_dir / "diagnostic.json").string() << "'\n";
            throw;
        }

        std::vector<double> mass;
        const std::vector<double> usage = factor_usage(res.locals, res.global.K, mass);
        Checkpoint ck;
        ck.hp = c.hp;
        ck.schedule = c.schedule;
        ck.global = res.global;
        ck.epoch = res.trace.empty() ? 0 : res.trace.back().epoch;
        ck.extra_json = json{{"factor_usage", usage},
                             {"factor_mass", mass},
                             {"converged", res.converged},
                             {"train_samples", split.train.rows()},
                             {"validation_samples", split.test_observed.rows()}}
                            .dump();
        save_checkpoint(ck, out_dir / "checkpoint");
        return kExitOk;
    });
}

int cmd_sample(const SampleArgs& a) {
    return guarded([&] {
        RunConfig c = resolve_config(a.config, a.overrides, a.output);
        const SyntheticCorpus syn = sample_corpus(c.synth_config());
        const fs::path out_dir = c.output;
        fs::create_directories(out_dir);
        const CountFormat fmt = parse_count_format(c.format);
        save_counts(syn.corpus, out_dir / (fmt == CountFormat::TripletTsv ? "corpus.tsv" : "corpus.mtx"), fmt);
        save_ground_truth(syn.truth, out_dir / "truth");
        write_json(to_json(c), out_dir / "config.json");

        const CountMatrix& counts = syn.corpus.counts;
        const double mean_tml =
            counts.rows() ? static_cast<double>(counts.total_tokens()) / static_cast<double>(counts.rows()) : 0.0;
        if (a.expect_mean_tml) {
            const double want = *a.expect_mean_tml;
            if (std::abs(mean_tml - want) > 0.2 * want) {
                std::cerr << "warning: sampled mean TML " << num(mean_tml) << " is not within 20% of " << num(want)
                          << '\n';
            }
        }
        write_json({{"samples", counts.rows()}, {"features", counts.cols()}, {"mean_tml", mean_tml}},
                   out_dir / "summary.json");
        return kExitOk;
    });
}

int cmd_eval(const EvalArgs& a) {
    return guarded([&] {
        const Model m = load_model(a.model_dir);
        const RunConfig& c = m.config;
        InferenceOptions opts = c.opts;
        opts.threads = resolve_threads(a.threads);
        const LocalSettings settings{c.schedule.local_iters, c.schedule.local_tol};
        const GlobalState& g = m.checkpoint.global;
        const HyperParams& hp = m.checkpoint.hp;
        if (a.top > static_cast<std::size_t>(g.M)) {
            throw ConfigError("--top " + std::to_string(a.top) + " exceeds the " + std::to_string(g.M) + " features");
        }

        const Corpus corpus = model_corpus(m, a.data.value_or(c.data));
        const HeldoutSplit split = validation_split(c, corpus.counts);
        const fs::path out_dir = a.output ? fs::path(*a.output) : fs::path(a.model_dir) / "eval";
        fs::create_directories(out_dir);

        json result;
        std::vector<double> per_sample;
        if (split.test_target.total_tokens() > 0) {
            result["perplexity"] = num_or_null(heldout_perplexity(split.test_observed, split.test_target, g, hp, opts,
                                                                  settings, &per_sample));
        } else {
            result["perplexity"] = nullptr;
        }
        json ll = json::array();
        for (std::size_t i = 0; i < per_sample.size(); ++i) {
            ll.push_back({{"sample", split.test_target.sample_id(i)}, {"log_likelihood", per_sample[i]}});
        }
        result["per_sample_log_likelihood"] = ll;

        const CountMatrix validation = corpus.counts.select_rows(split.test_index);
        Rng rng = Rng(c.seed).split(20);
        const PrecisionTargets targets = designate_targets(validation, rng);
        if (!targets.sample.empty()) {
            const std::vector<LocalState> locals = infer_locals(targets.observed, g, hp, opts, settings);
            const PrecisionResult pr =
                precision_at_1(targets, model_count_predictor(locals, GlobalExpectations::compute(g)));
            result["precision_at_1"] = pr.precision_at_1;
            write_precision_curve_tsv(pr, out_dir / "precision_curve.tsv");
        } else {
            result["precision_at_1"] = nullptr;
        }
        result["validation_samples"] = split.test_index.size();
        write_json(result, out_dir / "eval.json");

        const std::vector<LocalState> locals = infer_locals(corpus.counts, g, hp, opts, settings);
        const FactorReport report = factor_report(g, locals, corpus.counts, a.top);
        write_factor_tsv(report, corpus.vocab, out_dir / "factors.tsv");
        write_factor_json(report, corpus.vocab, out_dir / "factors.json");
        if (report.has_labels) write_label_tsv(report, out_dir / "labels.tsv");
        write_tml_tsv(report, corpus.counts, out_dir / "tml.tsv");
        return kExitOk;
    });
}

int cmd_transform(const TransformArgs& a) {
    return guarded([&] {
        const Model m = load_model(a.model_dir);
        InferenceOptions opts = m.config.opts;
        opts.threads = resolve_threads(a.threads);
        const LocalSettings settings{m.config.schedule.local_iters, m.config.schedule.local_tol};
        const Corpus corpus = model_corpus(m, a.data);
        const std::vector<LocalState> locals =
            infer_locals(corpus.counts, m.checkpoint.global, m.checkpoint.hp, opts, settings);
        const fs::path out_dir = a.output ? fs::path(*a.output) : fs::path(a.model_dir) / "transform";
        fs::create_directories(out_dir);
        write_sample_features_tsv(locals, corpus.counts, out_dir / "sample_features.tsv");
        return kExitOk;
    });
}

int cmd_export_factors(const ExportArgs& a) {
    return guarded([&] {
        const Model m = load_model(a.model_dir);
        const GlobalState& g = m.checkpoint.global;
        std::string format = a.format.value_or(fs::path(a.out).extension() == ".json" ? "json" : "tsv");
        if (format != "tsv" && format != "json") throw ConfigError("unknown export format '" + format + "'");

        FactorReport report = factor_report(g, {}, CountMatrix(static_cast<std::size_t>(g.M), {}, {}), a.top);
        const auto usage = m.extra.value("factor_usage", std::vector<double>{});
        const auto mass = m.extra.value("factor_mass", std::vector<double>{});
        for (FactorSummary& f : report.factors) {
            const auto k = static_cast<std::size_t>(f.id);
            if (k < usage.size()) f.usage = usage[k];
            if (k < mass.size()) f.mass = mass[k];
        }
        const fs::path out = a.out;
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        if (format == "json") {
            write_factor_json(report, m.vocab, out);
        } else {
            write_factor_tsv(report, m.vocab, out);
        }
        return kExitOk;
    });
}

int run(int argc, char** argv) {
    CLI::App app{"Correlated zero-inflated negative binomial factor model"};
    app.require_subcommand(1);

    FitArgs fit_args;
    auto* fit_cmd = app.add_subcommand("fit", "fit a model from a JSON config");
    fit_cmd->add_option("config", fit_args.config, "config file")->required();
    fit_cmd->add_option("--set", fit_args.overrides, "override a config key (key=value), repeatable");
    fit_cmd->add_option("--output", fit_args.output, "output directory");
    fit_cmd->add_option("--threads", fit_args.threads, "worker threads (default: COZINB_THREADS or 1)");

    SampleArgs sample_args;
    auto* sample_cmd = app.add_subcommand("sample", "draw a synthetic corpus with its ground truth");
    sample_cmd->add_option("config", sample_args.config, "config file")->required();
    sample_cmd->add_option("--set", sample_args.overrides, "override a config key (key=value), repeatable");
    sample_cmd->add_option("--output", sample_args.output, "output directory");
    sample_cmd->add_option("--expect-mean-tml", sample_args.expect_mean_tml,
                           "warn unless the mean sample total is within 20% of this value");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "held-out metrics and factor tables for a fitted model");
    eval_cmd->add_option("model", eval_args.model_dir, "output directory of a fit")->required();
    eval_cmd->add_option("data", eval_args.data, "count file (default: the data of the fit)");
    eval_cmd->add_option("--output", eval_args.output, "output directory (default: <model>/eval)");
    eval_cmd->add_option("--top", eval_args.top, "features per factor in the tables")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--threads", eval_args.threads, "worker threads");

    TransformArgs transform_args;
    auto* transform_cmd = app.add_subcommand("transform", "infer factor features of new samples");
    transform_cmd->add_option("model", transform_args.model_dir, "output directory of a fit")->required();
    transform_cmd->add_option("data", transform_args.data, "count file")->required();
    transform_cmd->add_option("--output", transform_args.output, "output directory (default: <model>/transform)");
    transform_cmd->add_option("--threads", transform_args.threads, "worker threads");

    ExportArgs export_args;
    auto* export_cmd = app.add_subcommand("export-factors", "write the factor table of a fitted model");
    export_cmd->add_option("model", export_args.model_dir, "output directory of a fit")->required();
    export_cmd->add_option("out", export_args.out, "output file")->required();
    export_cmd->add_option("--format", export_args.format, "tsv or json")->check(CLI::IsMember({"tsv", "json"}));
    export_cmd->add_option("--top", export_args.top, "features per factor")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }

    if (*fit_cmd) return cmd_fit(fit_args);
    if (*sample_cmd) return cmd_sample(sample_args);
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*transform_cmd) return cmd_transform(transform_args);
    return cmd_export_factors(export_args);
}

}  // namespace cozinb::cli
