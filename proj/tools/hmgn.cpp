// hmgn: command-line driver for the multi-behavior recommendation pipeline.
//
// Exit codes: 0 ok, 1 usage or config error, 2 runtime or data error,
// 3 divergence or failed check.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hmgn/hmgn.hpp"

namespace fs = std::filesystem;
using namespace hmgn;

namespace {

enum Exit : int { ok = 0, usage = 1, runtime = 2, check_failed = 3 };

/// Thrown by a command to exit with a given code after printing `what()`.
struct CheckFailed : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Overrides = std::vector<std::function<void(RunConfig&)>>;

template <typename T>
void override_flag(CLI::App* app, Overrides& ov, const std::string& name, const std::string& help,
                   std::function<void(RunConfig&, const T&)> set) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(name, *value, help);
    ov.push_back([opt, value, set](RunConfig& c) {
        if (opt->count()) set(c, *value);
    });
}

std::uint64_t fnv1a(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize k = 0; k < in.gcount(); ++k) {
            h ^= static_cast<unsigned char>(buf[k]);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::string hex(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

void write_json(const fs::path& p, const nlohmann::json& j) {
    std::ofstream out(p);
    if (!out) throw DataError("cannot write '" + p.string() + "'");
    out << j.dump(2) << '\n';
}

/// effective_config.json now; manifest.json once the command's artifacts exist.
struct Run {
    std::string command;
    RunConfig config;
    fs::path out;

    void begin() {
        fs::create_directories(out);
        write_json(out / "effective_config.json", to_json(config));
    }

    void finish(nlohmann::json extra = nlohmann::json::object()) {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(out))
            if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        nlohmann::json artifacts = nlohmann::json::object();
        for (const auto& f : files) artifacts[fs::relative(f, out).generic_string()] = "fnv1a64:" + hex(fnv1a(f));
        nlohmann::json m{{"command", command},
                         {"version", version},
                         {"seed", config.seed},
                         {"config", to_json(config)},
                         {"artifacts", artifacts}};
        if (!extra.empty()) m["result"] = extra;
        write_json(out / "manifest.json", m);
    }
};

StoredGraph require_graph(const std::string& dir, const char* what) {
    if (dir.empty()) throw ConfigError(std::string("missing --") + what + " directory");
    return load_graph(dir);
}

void check_vocabulary(const RunConfig& c, const MultiBehaviorGraph& g, const std::string& where) {
    if (g.behaviors() != c.behaviors) {
        throw DataError(where + ": graph behaviors do not match the configured vocabulary");
    }
}

// ---- commands --------------------------------------------------------------

void cmd_synth(Run& run) {
    const auto& s = run.config.synth;
    const auto xs = generate_synthetic(s);
    {
        std::ofstream out(run.out / "interactions.csv");
        write_interactions_csv(out, xs, synth_behaviors());
    }
    // Item metadata for the optional KG objective: each item's latent cluster.
    {
        std::ofstream kg(run.out / "kg.csv");
        kg << "head_id,relation,tail_id\n";
        for (NodeId i = 0; i < s.items; ++i) kg << i << ",category,cluster" << i % s.clusters << '\n';
        std::ofstream(run.out / "kg_relations.txt") << "category\n";
    }
    std::vector<std::size_t> counts(3, 0);
    for (const auto& x : xs) ++counts[x.behavior];
    std::cout << "synth: " << xs.size() << " interactions (view " << counts[0] << ", cart " << counts[1] << ", buy "
              << counts[2] << ")\n";
    run.finish({{"interactions", xs.size()}, {"view", counts[0]}, {"cart", counts[1]}, {"buy", counts[2]}});
}

void cmd_ingest(Run& run, const std::string& input) {
    if (input.empty()) throw ConfigError("ingest: missing --input");
    const auto r = load_interactions(fs::path(input), run.config.schema, run.config.behaviors);
    const auto g = build_graph(r.interactions, r.users.size(), r.items.size(), run.config.behaviors);
    save_graph(run.out / "graph", g, r.users, r.items);
    std::cout << "ingest: " << g.num_users() << " users, " << g.num_items() << " items, " << g.num_edges()
              << " edges, " << r.duplicates_removed << " duplicates removed\n";
    run.finish({{"users", g.num_users()},
                {"items", g.num_items()},
                {"edges", g.num_edges()},
                {"duplicates_removed", r.duplicates_removed},
                {"per_behavior", r.counts_per_behavior}});
}

void cmd_split(Run& run, const std::string& graph_dir) {
    const auto stored = require_graph(graph_dir, "graph");
    check_vocabulary(run.config, stored.graph, "split");
    const auto xs = stored.graph.interactions();
    const auto s = temporal_split(xs, run.config.split);
    for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
    const auto& g = stored.graph;
    auto save = [&](const char* name, const std::vector<Interaction>& part) {
        save_graph(run.out / name, build_graph(part, g.num_users(), g.num_items(), g.behaviors()), stored.users,
                   stored.items);
    };
    save("train", s.train);
    save("val", s.val);
    save("test", s.test);
    std::cout << "split: train " << s.train.size() << ", val " << s.val.size() << ", test " << s.test.size() << '\n';
    run.finish({{"train", s.train.size()}, {"val", s.val.size()}, {"test", s.test.size()}, {"warnings", s.warnings}});
}

void cmd_sample_subgraph(Run& run, const std::string& graph_dir) {
    const auto stored = require_graph(graph_dir, "graph");
    check_vocabulary(run.config, stored.graph, "sample-subgraph");
    const SubgraphOptions so = run.config.train.subgraph.value_or(SubgraphOptions{});
    const std::uint64_t seed = run.config.seed;
    const auto kernel = sample_kernel_users(stored.graph, so.kernel_users, derive_seed(seed, 1000));
    if (kernel.empty()) throw DataError("sample-subgraph: graph has no active users");
    const auto sub = sample_subgraph(stored.graph, kernel, so.hops, so.fanouts, derive_seed(seed, 2000));
    save_subgraph(run.out / "subgraph", sub, stored.users, stored.items);
    const auto dist = behavior_distribution_report(sub.graph, &stored.graph);
    write_json(run.out / "distribution.json", to_json(dist));
    const auto triples = subgraph_hbpr_training_set(sub, run.config.rank(), run.config.train.negatives_per_positive,
                                                    derive_seed(seed, 3000));
    {
        std::ofstream out(run.out / "triples.csv");
        write_triples_csv(out, triples.triples, stored.graph.behaviors());
    }
    std::cout << "sample-subgraph: " << sub.users.size() << " users, " << sub.items.size() << " items, "
              << sub.graph.num_edges() << " edges, " << triples.triples.size() << " triples\n";
    run.finish({{"users", sub.users.size()},
                {"items", sub.items.size()},
                {"edges", sub.graph.num_edges()},
                {"triples", triples.triples.size()}});
}

void cmd_train(Run& run, const std::string& train_dir, const std::string& val_dir) {
    const RunConfig& c = run.config;
    const auto stored = require_graph(train_dir, "train");
    check_vocabulary(c, stored.graph, "train");

    std::optional<KgData> kg;
    if (c.train.kg_enabled) {
        if (c.kg_triples.empty() || c.kg_relations.empty()) {
            throw ConfigError("train.kg_enabled needs train.kg_triples and train.kg_relations");
        }
        kg = load_kg(c.kg_triples, c.kg_relations, stored.items);
    }

    std::optional<ValidationSet> validation;
    if (!val_dir.empty()) {
        const auto val = load_graph(val_dir);
        check_vocabulary(c, val.graph, "train --val");
        if (val.graph.num_users() != stored.graph.num_users() || val.graph.num_items() != stored.graph.num_items()) {
            throw DataError("train: validation graph does not share the training index space");
        }
        validation = ValidationSet{val.graph.interactions(), c.eval};
        validation->spec.behaviors = {c.target()};
    }

    fs::create_directories(run.out / "checkpoints");
    std::ofstream report(run.out / "report.jsonl");
    double best = -1;
    std::size_t best_epoch = 0;
    const std::size_t best_k = c.eval.ks.front();

    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& rec, const ModelParams& params, const KgParams* kgp) {
        report << to_json(rec).dump() << '\n';
        std::cout << "epoch " << rec.epoch << ": loss " << rec.total << " (hbpr " << rec.hbpr << ", reg " << rec.reg
                  << ", kg " << rec.kg << ")";
        if (c.checkpoint_every && rec.epoch % c.checkpoint_every == 0) {
            std::ostringstream name;
            name << "epoch_" << std::setw(4) << std::setfill('0') << rec.epoch << ".bin";
            save_checkpoint(run.out / "checkpoints" / name.str(), c.model, c.seed, params, kgp);
        }
        if (rec.validation) {
            const double ndcg = rec.validation->at(c.target_behavior, best_k).ndcg;
            std::cout << ", val NDCG@" << best_k << " " << ndcg;
            if (ndcg > best) {
                best = ndcg;
                best_epoch = rec.epoch;
                save_checkpoint(run.out / "best.bin", c.model, c.seed, params, kgp);
            }
        }
        std::cout << '\n';
    };

    const auto result = train(stored.graph, c.model, c.train, kg ? &*kg : nullptr,
                              validation ? &*validation : nullptr, hooks);
    report.close();
    save_checkpoint(run.out / "model.bin", c.model, c.seed, result.params, result.kg ? &*result.kg : nullptr);
    nlohmann::json extra{{"epochs", result.report.epochs.size()}};
    if (!result.report.epochs.empty()) extra["final_loss"] = result.report.epochs.back().total;
    if (best_epoch) {
        extra["best_epoch"] = best_epoch;
        extra["best_validation_ndcg"] = best;
    }
    run.finish(extra);
}

void cmd_eval(Run& run, const std::string& checkpoint, const std::string& train_dir, const std::string& test_dir) {
    const RunConfig& c = run.config;
    if (checkpoint.empty()) throw ConfigError("eval: missing --checkpoint");
    const auto ck = load_checkpoint(checkpoint);
    const auto train_g = require_graph(train_dir, "train");
    const auto test_g = require_graph(test_dir, "test");
    if (ck.config.behaviors != train_g.graph.behaviors()) {
        throw DataError("eval: checkpoint behaviors do not match the training graph");
    }
    if (ck.params.user_emb.rows() != train_g.graph.num_users() || ck.params.item_emb.rows() != train_g.graph.num_items()) {
        throw DataError("eval: checkpoint was trained on a different index space");
    }
    if (test_g.graph.num_users() != train_g.graph.num_users() || test_g.graph.num_items() != train_g.graph.num_items()) {
        throw DataError("eval: test graph does not share the training index space");
    }
    std::optional<TimeIndex> times;
    if (ck.config.use_temporal) times.emplace(train_g.graph);
    const auto plan = make_plan(train_g.graph, ck.config, times ? &*times : nullptr);
    const auto table = evaluate_model(plan, ck.config, ck.params, train_g.graph, test_g.graph.interactions(), c.eval);
    write_json(run.out / "metrics.json", to_json(table));
    {
        std::ofstream out(run.out / "metrics.csv");
        write_metrics_csv(out, table);
    }
    for (const auto& r : table.rows) {
        if (!std::isfinite(r.recall) || !std::isfinite(r.ndcg)) throw NumericError("eval: non-finite metric");
        std::cout << r.behavior << " K=" << r.k << " recall " << r.recall << " ndcg " << r.ndcg << " (" << r.users
                  << " users)\n";
    }
    run.finish();
}

struct GradCheckOptions {
    std::size_t users = 5;
    std::size_t items = 5;
    bool kg = true;
    double epsilon = 1e-4;
    double tolerance = 1e-4;
};

void cmd_grad_check(Run& run, const GradCheckOptions& o) {
    const RunConfig& c = run.config;
    SynthConfig sc = c.synth;
    sc.users = o.users;
    sc.items = o.items;
    sc.clusters = std::min<std::size_t>(2, o.items);
    sc.preferred_per_user = 3;
    sc.noise_views = 1;
    sc.p_view = 1.0;
    sc.p_cart = 0.6;
    sc.p_buy = 0.6;
    const auto g = build_graph(generate_synthetic(sc), o.users, o.items, synth_behaviors());
    if (c.behaviors != synth_behaviors()) throw ConfigError("grad-check: needs the view/cart/buy vocabulary");

    const auto params = init_params(c.model, o.users, o.items, c.seed);
    std::optional<TimeIndex> times;
    if (c.model.use_temporal) times.emplace(g);
    const auto plan = make_plan(g, c.model, times ? &*times : nullptr);
    const auto triples = sample_hbpr_triples(g, c.rank(), c.train.negatives_per_positive, c.seed).triples;
    if (triples.empty()) throw DataError("grad-check: tiny instance produced no triples");

    KgData kg;
    KgParams kgp;
    KgBatch batch;
    std::vector<Tensor> tensors = params.tensors();
    if (o.kg) {
        kg.num_items = o.items;
        kg.relations = {"category"};
        for (std::size_t k = 0; k < sc.clusters; ++k) kg.attributes.intern("cluster" + std::to_string(k));
        for (NodeId i = 0; i < o.items; ++i) kg.triples.push_back({i, 0, o.items + i % sc.clusters});
        kg.index_domains();
        kgp = init_kg_params(kg, c.model.dim, c.model.dim, c.seed);
        std::mt19937_64 rng(derive_seed(c.seed, 7));
        batch = corrupt_tails(kg, kg.triples, rng);
        for (const Tensor& t : kgp.tensors()) tensors.push_back(t);
    }
    const bool use_kg = o.kg && !batch.triples.empty();
    auto f = [&](Tape& tape) {
        return compute_step_loss(tape, plan, c.model, params, triples, c.train.lambda_reg, use_kg ? &kgp : nullptr,
                                 use_kg ? &batch : nullptr, c.train.kg_weight)
            .total;
    };
    const auto report = grad_check(f, tensors, o.epsilon, o.tolerance);
    nlohmann::json j{{"passed", report.passed},
                     {"max_relative_error", report.max_relative_error},
                     {"checked", report.checked},
                     {"epsilon", o.epsilon},
                     {"tolerance", o.tolerance},
                     {"triples", triples.size()},
                     {"kg_triples", use_kg ? batch.triples.size() : 0},
                     {"worst", {{"tensor", report.worst_param},
                                {"index", report.worst_index},
                                {"analytic", report.worst_analytic},
                                {"numeric", report.worst_numeric}}}};
    write_json(run.out / "grad_check.json", j);
    std::cout << "grad-check: " << (report.passed ? "PASS" : "FAIL") << ", max relative error "
              << report.max_relative_error << " over " << report.checked << " entries\n";
    run.finish(j);
    if (!report.passed) throw CheckFailed("gradient check failed");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hmgn: multi-behavior graph attention recommender"};
    app.set_version_flag("--version", std::string(version));
    app.require_subcommand(1);

    std::string config_path;
    Overrides overrides;
    std::string out_dir;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--out", out_dir, "output directory (overrides output_dir)");
        override_flag<std::uint64_t>(sub, overrides, "--seed", "random seed",
                                     [](RunConfig& c, const std::uint64_t& v) { c.seed = v; });
    };

    auto* synth = app.add_subcommand("synth", "generate a synthetic funnel dataset");
    common(synth);
    override_flag<std::size_t>(synth, overrides, "--users", "number of users",
                               [](RunConfig& c, const std::size_t& v) { c.synth.users = v; });
    override_flag<std::size_t>(synth, overrides, "--items", "number of items",
                               [](RunConfig& c, const std::size_t& v) { c.synth.items = v; });
    override_flag<double>(synth, overrides, "--p-view", "view probability of a preferred item",
                          [](RunConfig& c, const double& v) { c.synth.p_view = v; });
    override_flag<double>(synth, overrides, "--p-cart", "cart probability given view",
                          [](RunConfig& c, const double& v) { c.synth.p_cart = v; });
    override_flag<double>(synth, overrides, "--p-buy", "buy probability given cart",
                          [](RunConfig& c, const double& v) { c.synth.p_buy = v; });

    std::string input;
    auto* ingest = app.add_subcommand("ingest", "load an interaction CSV into a graph directory");
    common(ingest);
    ingest->add_option("--input", input, "interaction CSV")->required();

    std::string graph_dir;
    auto* split = app.add_subcommand("split", "temporal train/val/test split of a graph directory");
    common(split);
    split->add_option("--graph", graph_dir, "graph directory")->required();
    override_flag<Timestamp>(split, overrides, "--train-end", "first timestamp outside train",
                             [](RunConfig& c, const Timestamp& v) { c.split.train_end = v; });
    override_flag<Timestamp>(split, overrides, "--val-end", "first timestamp of test",
                             [](RunConfig& c, const Timestamp& v) { c.split.val_end = v; });

    auto* sample = app.add_subcommand("sample-subgraph", "draw a multi-behavior sub-graph and its triples");
    common(sample);
    sample->add_option("--graph", graph_dir, "graph directory")->required();
    auto subgraph_opts = [](RunConfig& c) -> SubgraphOptions& {
        if (!c.train.subgraph) c.train.subgraph = SubgraphOptions{};
        return *c.train.subgraph;
    };
    override_flag<std::size_t>(sample, overrides, "--kernel-users", "kernel user count",
                               [=](RunConfig& c, const std::size_t& v) { subgraph_opts(c).kernel_users = v; });
    override_flag<std::size_t>(sample, overrides, "--hops", "expansion hops",
                               [=](RunConfig& c, const std::size_t& v) { subgraph_opts(c).hops = v; });
    override_flag<std::size_t>(sample, overrides, "--fanout", "neighbors kept per node per hop",
                               [=](RunConfig& c, const std::size_t& v) { subgraph_opts(c).fanouts = {v}; });

    std::string train_dir, val_dir;
    auto* train_cmd = app.add_subcommand("train", "train a model on a graph directory");
    common(train_cmd);
    train_cmd->add_option("--train", train_dir, "training graph directory")->required();
    train_cmd->add_option("--val", val_dir, "validation graph directory");
    override_flag<std::size_t>(train_cmd, overrides, "--epochs", "training epochs",
                               [](RunConfig& c, const std::size_t& v) { c.train.epochs = v; });
    override_flag<double>(train_cmd, overrides, "--lr", "learning rate",
                          [](RunConfig& c, const double& v) { c.train.learning_rate = v; });
    override_flag<double>(train_cmd, overrides, "--lambda", "regularization weight",
                          [](RunConfig& c, const double& v) { c.train.lambda_reg = v; });
    override_flag<std::size_t>(train_cmd, overrides, "--batch-size", "triples per step",
                               [](RunConfig& c, const std::size_t& v) { c.train.batch_size = v; });
    override_flag<std::size_t>(train_cmd, overrides, "--checkpoint-every", "save every N epochs (0: never)",
                               [](RunConfig& c, const std::size_t& v) { c.checkpoint_every = v; });
    override_flag<std::string>(train_cmd, overrides, "--single-task", "train on this behavior's triples only",
                               [](RunConfig& c, const std::string& v) {
                                   c.train.single_task_behavior = behavior_index(c.behaviors, v);
                               });

    std::string checkpoint, test_dir;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a test graph");
    common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    eval_cmd->add_option("--train", train_dir, "training graph directory (propagation and exclusions)")->required();
    eval_cmd->add_option("--test", test_dir, "test graph directory")->required();

    GradCheckOptions gc;
    auto* grad = app.add_subcommand("grad-check", "finite-difference check of the full loss on a tiny instance");
    common(grad);
    grad->add_option("--users", gc.users, "users in the tiny instance");
    grad->add_option("--items", gc.items, "items in the tiny instance");
    grad->add_option("--epsilon", gc.epsilon, "central-difference step");
    grad->add_option("--tolerance", gc.tolerance, "relative error bound");
    grad->add_flag("!--no-kg", gc.kg, "leave the KG objective out");

    for (CLI::App* sub : {train_cmd, grad}) {
        override_flag<std::size_t>(sub, overrides, "--dim", "embedding size",
                                   [](RunConfig& c, const std::size_t& v) { c.model.dim = v; });
        override_flag<std::size_t>(sub, overrides, "--layers", "propagation layers",
                                   [](RunConfig& c, const std::size_t& v) { c.model.num_layers = v; });
        override_flag<std::string>(sub, overrides, "--paradigm", "intra or inter",
                                   [](RunConfig& c, const std::string& v) { c.model.paradigm = parse_paradigm(v); });
        override_flag<double>(sub, overrides, "--alpha", "score trade-off in [0, 1]",
                              [](RunConfig& c, const double& v) { c.model.alpha = v; });
        override_flag<bool>(sub, overrides, "--temporal", "add timestamp encodings (true/false)",
                            [](RunConfig& c, const bool& v) { c.model.use_temporal = v; });
    }
    override_flag<bool>(train_cmd, overrides, "--kg", "enable the KG objective (true/false)",
                        [](RunConfig& c, const bool& v) { c.train.kg_enabled = v; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? Exit::ok : Exit::usage;
    }

    Run run;
    try {
        if (!config_path.empty()) run.config = load_run_config(config_path);
        if (grad->parsed() && config_path.empty()) {
            // tiny defaults for the gradient check
            run.config.model.dim = 4;
            run.config.model.num_layers = 1;
            run.config.train.lambda_reg = 1e-2;
        }
        for (auto& apply : overrides) apply(run.config);
        if (!out_dir.empty()) run.config.output_dir = out_dir;
        run.config.finalize();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return Exit::usage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return Exit::usage;
    } catch (const DataError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return Exit::usage;
    }
    run.out = run.config.output_dir;

    try {
        CLI::App* sub = app.get_subcommands().front();
        run.command = sub->get_name();
        run.begin();
        if (sub == synth) cmd_synth(run);
        else if (sub == ingest) cmd_ingest(run, input);
        else if (sub == split) cmd_split(run, graph_dir);
        else if (sub == sample) cmd_sample_subgraph(run, graph_dir);
        else if (sub == train_cmd) cmd_train(run, train_dir, val_dir);
        else if (sub == eval_cmd) cmd_eval(run, checkpoint, train_dir, test_dir);
        else if (sub == grad) cmd_grad_check(run, gc);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return Exit::usage;
    } catch (const CheckFailed& e) {
        std::cerr << "check failed: " << e.what() << '\n';
        return Exit::check_failed;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << '\n';
        return Exit::check_failed;
    } catch (const NumericError& e) {
        std::cerr << "diverged: " << e.what() << '\n';
        return Exit::check_failed;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return Exit::runtime;
    }
    return Exit::ok;
}
