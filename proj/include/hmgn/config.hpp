#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmgn/checkpoint.hpp"
#include "hmgn/eval.hpp"
#include "hmgn/graph_store.hpp"
#include "hmgn/model.hpp"
#include "hmgn/sampler.hpp"
#include "hmgn/synth.hpp"
#include "hmgn/training.hpp"
#include "json.hpp"

namespace hmgn {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Everything one CLI invocation needs, loaded from a single JSON file with
/// one section per concern. Unknown keys are rejected by name.
struct RunConfig {
    std::uint64_t seed = 1;
    std::vector<std::string> behaviors{"view", "cart", "buy"};
    std::vector<std::string> priority{"buy", "cart", "view"};
    std::string target_behavior = "buy";
    CsvSchema schema;
    TemporalSplit split{700, 850};
    ModelConfig model;
    TrainConfig train;
    std::string kg_triples;
    std::string kg_relations;
    std::size_t checkpoint_every = 0;
    EvalSpec eval;
    std::vector<std::string> eval_behaviors;
    SynthConfig synth;
    std::string output_dir = "run";

    PriorityRank rank() const { return PriorityRank::from_names(priority, behaviors); }
    BehaviorId target() const { return behavior_index(behaviors, target_behavior); }

    /// Resolves names against the vocabulary and checks cross-section invariants.
    void finalize() {
        if (behaviors.empty()) throw ConfigError("behaviors: vocabulary is empty");
        try {
            train.rank = rank();
            (void)target();
            eval.behaviors.clear();
            for (const auto& n : eval_behaviors) eval.behaviors.push_back(behavior_index(behaviors, n));
        } catch (const DataError& e) {
            throw ConfigError(e.what());
        }
        model.behaviors = behaviors;
        train.seed = seed;
        synth.seed = seed;
        try {
            model.validate();
            train.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        if (!(split.train_end < split.val_end)) throw ConfigError("split: train_end must precede val_end");
        for (std::size_t k : eval.ks)
            if (k == 0) throw ConfigError("eval: every K must be >= 1");
    }
};

namespace detail {

template <typename Fn>
void for_keys(const nlohmann::json& j, const std::string& section, Fn&& fn) {
    if (!j.is_object()) throw ConfigError(section + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        if (!fn(key, value)) throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
    }
}

}  // namespace detail

inline void apply_config(RunConfig& c, const nlohmann::json& j) {
    try {
        detail::for_keys(j, "", [&](const std::string& key, const nlohmann::json& v) {
            if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "behaviors") c.behaviors = v.get<std::vector<std::string>>();
            else if (key == "priority") c.priority = v.get<std::vector<std::string>>();
            else if (key == "target_behavior") c.target_behavior = v.get<std::string>();
            else if (key == "output_dir") c.output_dir = v.get<std::string>();
            else if (key == "schema") {
                detail::for_keys(v, "schema", [&](const std::string& k, const nlohmann::json& x) {
                    if (k == "user_column") c.schema.user_column = x.get<std::string>();
                    else if (k == "item_column") c.schema.item_column = x.get<std::string>();
                    else if (k == "behavior_column") c.schema.behavior_column = x.get<std::string>();
                    else if (k == "timestamp_column") c.schema.timestamp_column = x.get<std::string>();
                    else if (k == "behavior_aliases") c.schema.behavior_aliases = x.get<std::map<std::string, std::string>>();
                    else return false;
                    return true;
                });
            } else if (key == "split") {
                detail::for_keys(v, "split", [&](const std::string& k, const nlohmann::json& x) {
                    if (k == "train_end") c.split.train_end = x.get<Timestamp>();
                    else if (k == "val_end") c.split.val_end = x.get<Timestamp>();
                    else return false;
                    return true;
                });
            } else if (key == "model") {
                nlohmann::json m = v;
                if (m.contains("behaviors")) throw ConfigError("model.behaviors: set the top-level 'behaviors' instead");
                m["behaviors"] = c.behaviors;
                try {
                    c.model = model_config_from_json(m);
                } catch (const std::invalid_argument& e) {
                    throw ConfigError(e.what());
                }
            } else if (key == "train") {
                detail::for_keys(v, "train", [&](const std::string& k, const nlohmann::json& x) {
                    if (k == "learning_rate") c.train.learning_rate = x.get<double>();
                    else if (k == "lambda_reg") c.train.lambda_reg = x.get<double>();
                    else if (k == "epochs") c.train.epochs = x.get<std::size_t>();
                    else if (k == "batch_size") c.train.batch_size = x.get<std::size_t>();
                    else if (k == "negatives_per_positive") {
                        c.train.negatives_per_positive =
                            x.is_array() ? x.get<std::vector<std::size_t>>() : std::vector<std::size_t>{x.get<std::size_t>()};
                    } else if (k == "kg_enabled") c.train.kg_enabled = x.get<bool>();
                    else if (k == "kg_weight") c.train.kg_weight = x.get<double>();
                    else if (k == "kg_triples") c.kg_triples = x.get<std::string>();
                    else if (k == "kg_relations") c.kg_relations = x.get<std::string>();
                    else if (k == "checkpoint_every") c.checkpoint_every = x.get<std::size_t>();
                    else if (k == "subgraph") {
                        if (x.is_null()) {
                            c.train.subgraph.reset();
                            return true;
                        }
                        SubgraphOptions so;
                        detail::for_keys(x, "train.subgraph", [&](const std::string& s, const nlohmann::json& y) {
                            if (s == "kernel_users") so.kernel_users = y.get<std::size_t>();
                            else if (s == "hops") so.hops = y.get<std::size_t>();
                            else if (s == "fanouts") {
                                so.fanouts = y.is_array() ? y.get<std::vector<std::size_t>>()
                                                          : std::vector<std::size_t>{y.get<std::size_t>()};
                            } else if (s == "resample_every_epoch") so.resample_every_epoch = y.get<bool>();
                            else return false;
                            return true;
                        });
                        c.train.subgraph = so;
                    } else return false;
                    return true;
                });
            } else if (key == "eval") {
                detail::for_keys(v, "eval", [&](const std::string& k, const nlohmann::json& x) {
                    if (k == "ks") c.eval.ks = x.get<std::vector<std::size_t>>();
                    else if (k == "behaviors") c.eval_behaviors = x.get<std::vector<std::string>>();
                    else if (k == "exclude_train_positives") c.eval.exclude_train_positives = x.get<bool>();
                    else return false;
                    return true;
                });
            } else if (key == "synth") {
                detail::for_keys(v, "synth", [&](const std::string& k, const nlohmann::json& x) {
                    auto& s = c.synth;
                    if (k == "users") s.users = x.get<std::size_t>();
                    else if (k == "items") s.items = x.get<std::size_t>();
                    else if (k == "clusters") s.clusters = x.get<std::size_t>();
                    else if (k == "preferred_per_user") s.preferred_per_user = x.get<std::size_t>();
                    else if (k == "in_cluster") s.in_cluster = x.get<double>();
                    else if (k == "p_view") s.p_view = x.get<double>();
                    else if (k == "p_cart") s.p_cart = x.get<double>();
                    else if (k == "p_buy") s.p_buy = x.get<double>();
                    else if (k == "noise_views") s.noise_views = x.get<std::size_t>();
                    else if (k == "horizon") s.horizon = x.get<Timestamp>();
                    else if (k == "funnel_gap") s.funnel_gap = x.get<Timestamp>();
                    else return false;
                    return true;
                });
            } else {
                return false;
            }
            return true;
        });
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config value has the wrong type: ") + e.what());
    }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    RunConfig c;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
    }
    apply_config(c, j);
    return c;
}

/// The effective configuration, in the same schema load_run_config reads.
inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json model = to_json(c.model);
    model.erase("behaviors");
    nlohmann::json train{{"learning_rate", c.train.learning_rate},
                         {"lambda_reg", c.train.lambda_reg},
                         {"epochs", c.train.epochs},
                         {"batch_size", c.train.batch_size},
                         {"negatives_per_positive", c.train.negatives_per_positive},
                         {"kg_enabled", c.train.kg_enabled},
                         {"kg_weight", c.train.kg_weight},
                         {"kg_triples", c.kg_triples},
                         {"kg_relations", c.kg_relations},
                         {"checkpoint_every", c.checkpoint_every}};
    if (c.train.subgraph) {
        const auto& s = *c.train.subgraph;
        train["subgraph"] = {{"kernel_users", s.kernel_users},
                             {"hops", s.hops},
                             {"fanouts", s.fanouts},
                             {"resample_every_epoch", s.resample_every_epoch}};
    } else {
        train["subgraph"] = nullptr;
    }
    return {{"seed", c.seed},
            {"behaviors", c.behaviors},
            {"priority", c.priority},
            {"target_behavior", c.target_behavior},
            {"output_dir", c.output_dir},
            {"schema",
             {{"user_column", c.schema.user_column},
              {"item_column", c.schema.item_column},
              {"behavior_column", c.schema.behavior_column},
              {"timestamp_column", c.schema.timestamp_column},
              {"behavior_aliases", c.schema.behavior_aliases}}},
            {"split", {{"train_end", c.split.train_end}, {"val_end", c.split.val_end}}},
            {"model", model},
            {"train", train},
            {"eval",
             {{"ks", c.eval.ks},
              {"behaviors", c.eval_behaviors},
              {"exclude_train_positives", c.eval.exclude_train_positives}}},
            {"synth",
             {{"users", c.synth.users},
              {"items", c.synth.items},
              {"clusters", c.synth.clusters},
              {"preferred_per_user", c.synth.preferred_per_user},
              {"in_cluster", c.synth.in_cluster},
              {"p_view", c.synth.p_view},
              {"p_cart", c.synth.p_cart},
              {"p_buy", c.synth.p_buy},
              {"noise_views", c.synth.noise_views},
              {"horizon", c.synth.horizon},
              {"funnel_gap", c.synth.funnel_gap}}}};
}

}  // namespace hmgn
