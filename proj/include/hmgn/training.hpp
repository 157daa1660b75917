#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmgn/eval.hpp"
#include "hmgn/graph_store.hpp"
#include "hmgn/kg.hpp"
#include "hmgn/layers.hpp"
#include "hmgn/model.hpp"
#include "hmgn/sampler.hpp"
#include "hmgn/tensor.hpp"
#include "json.hpp"

namespace hmgn {

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SubgraphOptions {
    std::size_t kernel_users = 64;
    std::size_t hops = 2;
    std::vector<std::size_t> fanouts{8};
    bool resample_every_epoch = true;
};

struct TrainConfig {
    double learning_rate = 0.05;
    double lambda_reg = 1e-4;
    std::size_t epochs = 20;
    std::size_t batch_size = 1024;
    std::vector<std::size_t> negatives_per_positive{1};
    PriorityRank rank;
    bool kg_enabled = false;
    double kg_weight = 1.0;
    std::optional<SubgraphOptions> subgraph;
    /// Restrict triples to this behavior only (single-task ablation).
    std::optional<BehaviorId> single_task_behavior;
    std::uint64_t seed = 1;

    void validate() const {
        if (!(learning_rate > 0)) throw std::invalid_argument("train: learning_rate must be > 0");
        if (!(lambda_reg >= 0)) throw std::invalid_argument("train: lambda_reg must be >= 0");
        if (batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
        for (std::size_t n : negatives_per_positive)
            if (n == 0) throw std::invalid_argument("train: n_b must be >= 1");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    /// Sums over the epoch's steps of the per-step (batch-mean) terms.
    double hbpr = 0;
    double reg = 0;  // unscaled ||Θ_touched||²
    double kg = 0;
    double total = 0;  // hbpr + λ·reg + kg_weight·kg
    std::size_t triples = 0;
    std::size_t steps = 0;
    std::size_t skipped_pairs = 0;
    std::size_t subgraph_users = 0;
    std::size_t subgraph_items = 0;
    std::optional<MetricsTable> validation;
    double seconds = 0;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;
};

struct TrainResult {
    ModelParams params;
    std::optional<KgParams> kg;
    TrainReport report;
};

struct ValidationSet {
    std::vector<Interaction> interactions;
    EvalSpec spec;
};

struct TrainHooks {
    std::function<void(const EpochRecord&, const ModelParams&, const KgParams*)> on_epoch;
};

/// Σ −log σ(f(u,b,i) − f(u,b,j)) over the triples (a sum, not a mean).
inline Tensor hbpr_loss(Tape& tape, std::span<const HbprTriple> triples, const LayerOutput& final,
                        const ModelParams& params, double alpha) {
    if (triples.empty()) throw std::invalid_argument("hbpr_loss: empty triple batch");
    std::vector<std::size_t> users, behaviors, pos, neg;
    for (const HbprTriple& t : triples) {
        users.push_back(t.user);
        behaviors.push_back(t.behavior);
        pos.push_back(t.positive);
        neg.push_back(t.negative);
    }
    const Tensor fp = score_batch(tape, final, params, alpha, users, behaviors, pos);
    const Tensor fn = score_batch(tape, final, params, alpha, users, behaviors, neg);
    return tape.scale(tape.sum(tape.log_sigmoid(tape.sub(fp, fn))), -1.0);
}

struct StepLoss {
    Tensor total;
    double hbpr = 0;
    double reg = 0;
    double kg = 0;
};

namespace detail {

inline std::vector<std::size_t> unique_sorted(std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

}  // namespace detail

/// L′ for one mini-batch: mean HBPR + λ·||Θ_touched||² + kg_weight · mean KG.
///
/// Touched parameters are the embedding rows of the batch's users and items,
/// the diagonals of its behaviors, every propagation matrix, and the KG rows
/// and relation parameters used by the KG batch.
inline StepLoss compute_step_loss(Tape& tape, const PropagationPlan& plan, const ModelConfig& config,
                                  const ModelParams& params, std::span<const HbprTriple> triples, double lambda_reg,
                                  const KgParams* kg = nullptr, const KgBatch* kg_batch = nullptr,
                                  double kg_weight = 1.0) {
    const LayerOutput final = forward(tape, plan, config, params);
    const Tensor hbpr = tape.scale(hbpr_loss(tape, triples, final, params, config.alpha),
                                   1.0 / static_cast<double>(triples.size()));

    std::vector<std::size_t> users, items, behaviors;
    for (const HbprTriple& t : triples) {
        users.push_back(t.user);
        items.push_back(t.positive);
        items.push_back(t.negative);
        behaviors.push_back(t.behavior);
    }
    std::vector<Tensor> reg_terms{
        tape.l2_norm_sq(tape.gather_rows(params.user_emb, detail::unique_sorted(std::move(users)))),
        tape.l2_norm_sq(tape.gather_rows(params.item_emb, detail::unique_sorted(std::move(items)))),
        tape.l2_norm_sq(tape.gather_rows(params.behavior_diag, detail::unique_sorted(std::move(behaviors)))),
    };
    for (const LayerParams& lp : params.layers) {
        for (std::size_t b = 0; b < lp.query.size(); ++b) {
            reg_terms.push_back(tape.l2_norm_sq(lp.query[b]));
            reg_terms.push_back(tape.l2_norm_sq(lp.key[b]));
            reg_terms.push_back(tape.l2_norm_sq(lp.value[b]));
        }
        if (lp.shared_query.defined()) {
            reg_terms.push_back(tape.l2_norm_sq(lp.shared_query));
            reg_terms.push_back(tape.l2_norm_sq(lp.shared_key));
            reg_terms.push_back(tape.l2_norm_sq(lp.shared_value));
        }
    }

    Tensor kg_term = Tensor::scalar(0.0);
    if (kg && kg_batch && !kg_batch->triples.empty()) {
        kg_term = tape.scale(kg_loss(tape, params.item_emb, *kg, *kg_batch),
                             1.0 / static_cast<double>(kg_batch->triples.size()));
        const std::size_t num_items = params.item_emb.rows();
        std::vector<std::size_t> attrs, kg_items, rels;
        for (std::size_t k = 0; k < kg_batch->triples.size(); ++k) {
            const KgTriple& t = kg_batch->triples[k];
            for (std::size_t e : {t.head, t.tail, kg_batch->corrupted_tails[k]}) {
                if (e >= num_items) attrs.push_back(e - num_items);
                else kg_items.push_back(e);
            }
            rels.push_back(t.relation);
        }
        rels = detail::unique_sorted(std::move(rels));
        if (!kg_items.empty()) {
            reg_terms.push_back(tape.l2_norm_sq(tape.gather_rows(params.item_emb, detail::unique_sorted(std::move(kg_items)))));
        }
        if (!attrs.empty()) {
            reg_terms.push_back(tape.l2_norm_sq(tape.gather_rows(kg->attribute_emb, detail::unique_sorted(std::move(attrs)))));
        }
        reg_terms.push_back(tape.l2_norm_sq(tape.gather_rows(kg->relation_emb, rels)));
        for (std::size_t r : rels) reg_terms.push_back(tape.l2_norm_sq(kg->relation_proj[r]));
    }

    Tensor reg = reg_terms.front();
    for (std::size_t k = 1; k < reg_terms.size(); ++k) reg = tape.add(reg, reg_terms[k]);

    StepLoss out;
    out.hbpr = hbpr.item();
    out.reg = reg.item();
    out.kg = kg_term.item();
    out.total = tape.add(tape.add(hbpr, tape.scale(reg, lambda_reg)), tape.scale(kg_term, kg_weight));
    return out;
}

/// θ ← θ − lr·∇θ for every tensor.
inline void sgd_step(std::span<Tensor> tensors, double learning_rate) {
    for (Tensor& t : tensors) {
        auto d = t.data();
        auto g = t.grad();
        for (std::size_t k = 0; k < d.size(); ++k) d[k] -= learning_rate * g[k];
    }
}

/// Trains on `graph` (the training split) with mini-batch SGD. Every random
/// choice derives from `train_config.seed`, so identical inputs produce
/// bit-identical parameters.
inline TrainResult train(const MultiBehaviorGraph& graph, const ModelConfig& model_config,
                         const TrainConfig& train_config, const KgData* kg_data = nullptr,
                         const ValidationSet* validation = nullptr, const TrainHooks& hooks = {}) {
    model_config.validate();
    train_config.validate();
    if (graph.num_edges() == 0) throw std::invalid_argument("train: graph has no edges");
    const bool use_kg = train_config.kg_enabled && kg_data && !kg_data->triples.empty();
    if (train_config.kg_enabled && !kg_data) throw std::invalid_argument("train: KG enabled but no KG data given");

    std::vector<BehaviorId> only;
    if (train_config.single_task_behavior) {
        only.push_back(*train_config.single_task_behavior);
        if (graph.num_edges(only.front()) == 0) {
            throw std::invalid_argument("train: single-task behavior '" + graph.behaviors().at(only.front()) +
                                        "' has no edges, triple set would be empty");
        }
    }

    const std::uint64_t seed = train_config.seed;
    TrainResult result;
    result.params = init_params(model_config, graph.num_users(), graph.num_items(), seed);
    if (use_kg) result.kg = init_kg_params(*kg_data, model_config.dim, model_config.dim, seed);

    std::vector<Tensor> tensors = result.params.tensors();
    if (result.kg) {
        for (const Tensor& t : result.kg->tensors()) tensors.push_back(t);
    }

    std::optional<TimeIndex> times;
    if (model_config.use_temporal) times.emplace(graph);
    const PropagationPlan full_plan = make_plan(graph, model_config, times ? &*times : nullptr);

    std::optional<SubGraph> sub;
    std::optional<PropagationPlan> sub_plan;

    for (std::size_t epoch = 0; epoch < train_config.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        EpochRecord rec;
        rec.epoch = epoch + 1;

        HbprSample sample;
        const PropagationPlan* plan = &full_plan;
        if (train_config.subgraph) {
            const SubgraphOptions& so = *train_config.subgraph;
            if (!sub || so.resample_every_epoch) {
                const auto kernel = sample_kernel_users(graph, so.kernel_users, derive_seed(seed, 1000 + epoch));
                sub = sample_subgraph(graph, kernel, so.hops, so.fanouts, derive_seed(seed, 2000 + epoch));
                sub_plan = make_plan(sub->graph, model_config, times ? &*times : nullptr);
            }
            plan = &*sub_plan;
            rec.subgraph_users = sub->users.size();
            rec.subgraph_items = sub->items.size();
            sample = subgraph_hbpr_training_set(*sub, train_config.rank, train_config.negatives_per_positive,
                                                derive_seed(seed, 3000 + epoch), only);
        } else {
            sample = sample_hbpr_triples(graph, train_config.rank, train_config.negatives_per_positive,
                                         derive_seed(seed, 3000 + epoch), nullptr, only);
        }
        if (sample.triples.empty()) throw std::invalid_argument("train: empty triple set in epoch " + std::to_string(epoch + 1));
        rec.triples = sample.triples.size();
        rec.skipped_pairs = sample.skipped_pairs;
#ifndef NDEBUG
        for (const HbprTriple& t : sample.triples) {
            bool ok = graph.has_edge(t.user, t.behavior, t.positive) && !graph.has_edge(t.user, t.behavior, t.negative);
            for (BehaviorId h : train_config.rank.higher(t.behavior)) ok = ok && !graph.has_edge(t.user, h, t.negative);
            if (!ok) throw std::logic_error("train: sampled triple violates the priority hierarchy");
        }
#endif

        std::mt19937_64 rng(derive_seed(seed, 4000 + epoch));
        std::shuffle(sample.triples.begin(), sample.triples.end(), rng);
        const std::size_t steps = (sample.triples.size() + train_config.batch_size - 1) / train_config.batch_size;

        KgBatch kg_epoch;
        std::size_t kg_per_step = 0;
        if (use_kg) {
            std::vector<KgTriple> kg_triples = kg_data->triples;
            std::shuffle(kg_triples.begin(), kg_triples.end(), rng);
            kg_epoch = corrupt_tails(*kg_data, kg_triples, rng);
            kg_per_step = (kg_epoch.triples.size() + steps - 1) / steps;
        }

        for (std::size_t s = 0; s < steps; ++s) {
            const std::size_t lo = s * train_config.batch_size;
            const std::size_t hi = std::min(lo + train_config.batch_size, sample.triples.size());
            std::span<const HbprTriple> batch(sample.triples.data() + lo, hi - lo);

            KgBatch kg_batch;
            if (use_kg) {
                const std::size_t klo = std::min(s * kg_per_step, kg_epoch.triples.size());
                const std::size_t khi = std::min(klo + kg_per_step, kg_epoch.triples.size());
                kg_batch.triples.assign(kg_epoch.triples.begin() + klo, kg_epoch.triples.begin() + khi);
                kg_batch.corrupted_tails.assign(kg_epoch.corrupted_tails.begin() + klo,
                                                kg_epoch.corrupted_tails.begin() + khi);
            }

            for (Tensor& t : tensors) t.zero_grad();
            Tape tape;
            const StepLoss loss = compute_step_loss(tape, *plan, model_config, result.params, batch,
                                                    train_config.lambda_reg, result.kg ? &*result.kg : nullptr,
                                                    use_kg ? &kg_batch : nullptr, train_config.kg_weight);
            const double total = loss.total.item();
            if (!std::isfinite(total)) {
                throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                      ", step " + std::to_string(s + 1));
            }
            tape.backward(loss.total);
            sgd_step(tensors, train_config.learning_rate);

            rec.hbpr += loss.hbpr;
            rec.reg += loss.reg;
            rec.kg += loss.kg;
            rec.total += total;
        }
        rec.steps = steps;

        if (validation) {
            rec.validation = evaluate_model(full_plan, model_config, result.params, graph, validation->interactions,
                                            validation->spec);
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        if (hooks.on_epoch) hooks.on_epoch(rec, result.params, result.kg ? &*result.kg : nullptr);
        result.report.epochs.push_back(std::move(rec));
    }
    return result;
}

struct AblationResult {
    TrainResult multi_task;
    TrainResult single_task;
};

/// Trains twice with identical settings except that the single-task run only
/// sees triples of `target`.
inline AblationResult ablate(const MultiBehaviorGraph& graph, const ModelConfig& model_config, TrainConfig train_config,
                             BehaviorId target, const KgData* kg = nullptr, const ValidationSet* validation = nullptr) {
    if (target >= graph.num_behaviors()) throw std::out_of_range("ablate: target behavior out of range");
    if (graph.num_edges(target) == 0) {
        throw std::invalid_argument("ablate: target behavior '" + graph.behaviors()[target] +
                                    "' has no edges, single-task triple set would be empty");
    }
    AblationResult r;
    train_config.single_task_behavior.reset();
    r.multi_task = train(graph, model_config, train_config, kg, validation);
    train_config.single_task_behavior = target;
    r.single_task = train(graph, model_config, train_config, kg, validation);
    return r;
}

inline nlohmann::json to_json(const EpochRecord& r) {
    nlohmann::json j{{"epoch", r.epoch},        {"hbpr", r.hbpr},   {"reg", r.reg},
                     {"kg", r.kg},              {"total", r.total}, {"triples", r.triples},
                     {"steps", r.steps},        {"skipped_pairs", r.skipped_pairs},
                     {"seconds", r.seconds}};
    if (r.subgraph_users) {
        j["subgraph_users"] = r.subgraph_users;
        j["subgraph_items"] = r.subgraph_items;
    }
    if (r.validation) j["validation"] = to_json(*r.validation);
    return j;
}

}  // namespace hmgn
