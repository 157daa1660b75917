#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmgn/graph_store.hpp"
#include "hmgn/model.hpp"
#include "hmgn/tensor.hpp"

namespace hmgn {

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Maps raw timestamps to their rank among a reference set of distinct
/// timestamps (normally those of the training split). Unseen values map to the
/// number of reference timestamps strictly below them.
class TimeIndex {
public:
    TimeIndex() = default;
    explicit TimeIndex(const MultiBehaviorGraph& graph) {
        for (const Interaction& x : graph.interactions())
            if (x.timestamp) distinct_.push_back(*x.timestamp);
        std::sort(distinct_.begin(), distinct_.end());
        distinct_.erase(std::unique(distinct_.begin(), distinct_.end()), distinct_.end());
    }
    std::size_t rank(Timestamp t) const {
        return static_cast<std::size_t>(std::lower_bound(distinct_.begin(), distinct_.end(), t) - distinct_.begin());
    }
    std::size_t size() const { return distinct_.size(); }

private:
    std::vector<Timestamp> distinct_;
};

/// Edge lists of one behavior, aligned: edge k joins users[k] and items[k].
struct BehaviorEdges {
    std::vector<std::size_t> users;
    std::vector<std::size_t> items;
    /// Index into PropagationPlan::pair_users / pair_items of the (u, i) pair.
    std::vector<std::size_t> pair;
    /// Per-edge temporal encoding (|E_b| x d); undefined without temporal input.
    Tensor encoding;
};

/// Index arrays derived once from a graph and reused by every forward pass.
struct PropagationPlan {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::size_t dim = 0;
    bool temporal = false;
    std::vector<BehaviorEdges> behaviors;
    /// Distinct connected (u, i) pairs of the union graph.
    std::vector<std::size_t> pair_users;
    std::vector<std::size_t> pair_items;
};

/// Builds the plan. With `config.use_temporal` every edge must carry a
/// timestamp; ranks come from `times` or, when absent, from the graph itself.
inline PropagationPlan make_plan(const MultiBehaviorGraph& graph, const ModelConfig& config,
                                 const TimeIndex* times = nullptr) {
    if (graph.num_behaviors() != config.behaviors.size()) {
        throw std::invalid_argument("make_plan: graph has " + std::to_string(graph.num_behaviors()) +
                                    " behaviors, model expects " + std::to_string(config.behaviors.size()));
    }
    PropagationPlan plan;
    plan.num_users = graph.num_users();
    plan.num_items = graph.num_items();
    plan.dim = config.dim;
    plan.temporal = config.use_temporal;

    const Adjacency& uni = graph.adjacency(Side::user, std::nullopt);
    for (NodeId u = 0; u < graph.num_users(); ++u)
        for (NodeId i : uni.neighbors(u)) {
            plan.pair_users.push_back(u);
            plan.pair_items.push_back(i);
        }

    std::optional<TimeIndex> own;
    if (config.use_temporal && !times) {
        if (!graph.has_timestamps()) throw DataError("temporal encoding requested but some edges lack timestamps");
        own.emplace(graph);
        times = &*own;
    }

    for (BehaviorId b = 0; b < graph.num_behaviors(); ++b) {
        BehaviorEdges e;
        const Adjacency& adj = graph.adjacency(Side::user, b);
        std::vector<double> enc;
        for (NodeId u = 0; u < graph.num_users(); ++u) {
            auto nb = adj.neighbors(u);
            auto ts = adj.times(u);
            auto un = uni.neighbors(u);
            for (std::size_t k = 0; k < nb.size(); ++k) {
                e.users.push_back(u);
                e.items.push_back(nb[k]);
                const auto pos = std::lower_bound(un.begin(), un.end(), nb[k]) - un.begin();
                e.pair.push_back(uni.offsets[u] + static_cast<std::size_t>(pos));
                if (config.use_temporal) {
                    if (!ts[k]) throw DataError("temporal encoding requested but some edges lack timestamps");
                    const auto pe = temporal_encoding(static_cast<double>(times->rank(*ts[k])), config.dim);
                    enc.insert(enc.end(), pe.begin(), pe.end());
                }
            }
        }
        if (config.use_temporal) e.encoding = Tensor::from({e.users.size(), config.dim}, std::move(enc));
        plan.behaviors.push_back(std::move(e));
    }
    return plan;
}

namespace detail {

inline double attention_scale(std::size_t d) { return std::sqrt(1.0 / static_cast<double>(d)); }

/// Source rows for every edge of a behavior, with the temporal encoding added
/// when the plan carries one.
inline Tensor edge_sources(Tape& tape, const Tensor& nodes, std::span<const std::size_t> index,
                           const BehaviorEdges& edges, bool temporal) {
    Tensor src = tape.gather_rows(nodes, index);
    return temporal ? tape.add(src, edges.encoding) : src;
}

/// W·x for the source of every edge. Without temporal input the transform is
/// applied per node and then gathered, which gives identical values.
inline Tensor transformed_sources(Tape& tape, const Tensor& nodes, const Tensor& weight,
                                  std::span<const std::size_t> index, const BehaviorEdges& edges, bool temporal) {
    if (temporal) return tape.linear_rows(edge_sources(tape, nodes, index, edges, true), weight);
    return tape.gather_rows(tape.linear_rows(nodes, weight), index);
}

}  // namespace detail

/// Per-behavior representations e^(l,b) together with the attention weights
/// (aligned with the behavior's edge list) that produced them.
struct IntraBehaviorOutput {
    LayerOutput out;
    Tensor user_attention;  // α_{u←i} per edge
    Tensor item_attention;  // α_{i←u} per edge
};

/// Attention message passing inside the single-behavior graph of `behavior`,
/// in both directions with the same Q/K/V. Targets without neighbors under
/// the behavior get an exact zero vector.
inline IntraBehaviorOutput intra_layer(Tape& tape, const PropagationPlan& plan, const LayerOutput& in,
                                       const LayerParams& layer, BehaviorId behavior) {
    const BehaviorEdges& edges = plan.behaviors.at(behavior);
    const std::size_t d = plan.dim;
    IntraBehaviorOutput r;
    if (edges.users.empty()) {
        r.out.user = Tensor::zeros({plan.num_users, d});
        r.out.item = Tensor::zeros({plan.num_items, d});
        r.user_attention = Tensor::zeros({0});
        r.item_attention = Tensor::zeros({0});
        return r;
    }
    const Tensor& Q = layer.query.at(behavior);
    const Tensor& K = layer.key.at(behavior);
    const Tensor& V = layer.value.at(behavior);
    const double scale = detail::attention_scale(d);

    auto propagate = [&](const Tensor& targets, const Tensor& sources, const std::vector<std::size_t>& tgt,
                         const std::vector<std::size_t>& src, std::size_t num_targets, Tensor& attention) {
        const Tensor q = tape.gather_rows(tape.linear_rows(targets, Q), tgt);
        const Tensor k = detail::transformed_sources(tape, sources, K, src, edges, plan.temporal);
        const Tensor v = detail::transformed_sources(tape, sources, V, src, edges, plan.temporal);
        const Tensor logits = tape.scale(tape.rowwise_dot(q, k), scale);
        attention = tape.segment_softmax(logits, tgt, num_targets);
        return tape.segment_weighted_sum(attention, v, tgt, num_targets);
    };
    r.out.user = propagate(in.user, in.item, edges.users, edges.items, plan.num_users, r.user_attention);
    r.out.item = propagate(in.item, in.user, edges.items, edges.users, plan.num_items, r.item_attention);
    return r;
}

/// e^(l+1) = Σ_b w_{n,b} e^(l,b) where w_{n,b} is 1/(number of behaviors with a
/// nonzero representation at n) for nonzero e^(l,b)_n and 0 otherwise.
inline LayerOutput intra_aggregate(Tape& tape, std::span<const LayerOutput> per_behavior) {
    if (per_behavior.empty()) throw std::invalid_argument("intra_aggregate: no behavior outputs");
    auto side = [&](auto pick) {
        const Tensor& first = pick(per_behavior.front());
        const std::size_t n = first.rows();
        const std::size_t d = first.cols();
        std::vector<std::vector<double>> nonzero(per_behavior.size(), std::vector<double>(n, 0.0));
        std::vector<double> count(n, 0.0);
        for (std::size_t b = 0; b < per_behavior.size(); ++b) {
            const Tensor& x = pick(per_behavior[b]);
            if (x.rows() != n || x.cols() != d) throw ShapeError("intra_aggregate: behavior outputs differ in shape");
            for (std::size_t r = 0; r < n; ++r) {
                auto row = x.row(r);
                if (std::any_of(row.begin(), row.end(), [](double v) { return v != 0.0; })) {
                    nonzero[b][r] = 1.0;
                    count[r] += 1.0;
                }
            }
        }
        Tensor acc;
        for (std::size_t b = 0; b < per_behavior.size(); ++b) {
            std::vector<double> w(n);
            for (std::size_t r = 0; r < n; ++r) w[r] = count[r] > 0 ? nonzero[b][r] / count[r] : 0.0;
            Tensor term = tape.scale_rows(pick(per_behavior[b]), Tensor::vector(std::move(w)));
            acc = acc.defined() ? tape.add(acc, term) : term;
        }
        return acc;
    };
    LayerOutput out;
    out.user = side([](const LayerOutput& o) -> const Tensor& { return o.user; });
    out.item = side([](const LayerOutput& o) -> const Tensor& { return o.item; });
    return out;
}

/// Cross-behavior layer output plus both attention phases for inspection.
struct InterLayerOutput {
    LayerOutput out;
    /// Phase-1 weights over the behaviors of each (u, i) pair; entries follow
    /// the concatenation of behavior edge lists in behavior order.
    Tensor user_pair_attention;
    Tensor item_pair_attention;
    /// Phase-2 weights, aligned with plan.pair_users / pair_items.
    Tensor user_neighbor_attention;
    Tensor item_neighbor_attention;
};

/// Phase 1 fuses, for each connected pair, the behaviors present on that pair
/// into one message e_{u←i}; phase 2 attends over neighbors with the layer's
/// shared Q/K/V. Isolated nodes get an exact zero vector.
inline InterLayerOutput inter_layer(Tape& tape, const PropagationPlan& plan, const LayerOutput& in,
                                    const LayerParams& layer) {
    const std::size_t d = plan.dim;
    const std::size_t num_pairs = plan.pair_users.size();
    InterLayerOutput r;
    if (num_pairs == 0) {
        r.out.user = Tensor::zeros({plan.num_users, d});
        r.out.item = Tensor::zeros({plan.num_items, d});
        for (Tensor* t : {&r.user_pair_attention, &r.item_pair_attention, &r.user_neighbor_attention,
                          &r.item_neighbor_attention})
            *t = Tensor::zeros({0});
        return r;
    }
    if (!layer.shared_query.defined()) throw std::invalid_argument("inter_layer: layer lacks shared Q/K/V");
    const double scale = detail::attention_scale(d);

    std::vector<std::size_t> pair_of_entry;
    for (const BehaviorEdges& e : plan.behaviors) pair_of_entry.insert(pair_of_entry.end(), e.pair.begin(), e.pair.end());

    auto direction = [&](bool user_target, Tensor& pair_attention, Tensor& neighbor_attention) {
        const Tensor& targets = user_target ? in.user : in.item;
        const Tensor& sources = user_target ? in.item : in.user;
        std::vector<Tensor> logits;
        std::vector<Tensor> values;
        for (BehaviorId b = 0; b < plan.behaviors.size(); ++b) {
            const BehaviorEdges& e = plan.behaviors[b];
            if (e.users.empty()) continue;
            const auto& tgt = user_target ? e.users : e.items;
            const auto& src = user_target ? e.items : e.users;
            const Tensor q = tape.gather_rows(tape.linear_rows(targets, layer.query[b]), tgt);
            const Tensor k = detail::transformed_sources(tape, sources, layer.key[b], src, e, plan.temporal);
            logits.push_back(tape.scale(tape.rowwise_dot(q, k), scale));
            values.push_back(detail::transformed_sources(tape, sources, layer.value[b], src, e, plan.temporal));
        }
        pair_attention = tape.segment_softmax(tape.concat_rows(logits), pair_of_entry, num_pairs);
        const Tensor message = tape.segment_weighted_sum(pair_attention, tape.concat_rows(values), pair_of_entry, num_pairs);

        const auto& pair_target = user_target ? plan.pair_users : plan.pair_items;
        const std::size_t num_targets = user_target ? plan.num_users : plan.num_items;
        const Tensor q = tape.gather_rows(tape.linear_rows(targets, layer.shared_query), pair_target);
        const Tensor k = tape.linear_rows(message, layer.shared_key);
        const Tensor v = tape.linear_rows(message, layer.shared_value);
        neighbor_attention = tape.segment_softmax(tape.scale(tape.rowwise_dot(q, k), scale), pair_target, num_targets);
        return tape.segment_weighted_sum(neighbor_attention, v, pair_target, num_targets);
    };
    r.out.user = direction(true, r.user_pair_attention, r.user_neighbor_attention);
    r.out.item = direction(false, r.item_pair_attention, r.item_neighbor_attention);
    return r;
}

inline bool all_finite(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

/// One propagation layer of the configured paradigm.
inline LayerOutput propagate_layer(Tape& tape, const PropagationPlan& plan, const ModelConfig& config,
                                   const LayerOutput& in, const LayerParams& layer) {
    if (config.paradigm == Paradigm::inter) return inter_layer(tape, plan, in, layer).out;
    std::vector<LayerOutput> per_behavior;
    for (BehaviorId b = 0; b < plan.behaviors.size(); ++b) per_behavior.push_back(intra_layer(tape, plan, in, layer, b).out);
    return intra_aggregate(tape, per_behavior);
}

/// Chains all layers from e^(0) and returns e^(L) only.
inline LayerOutput forward(Tape& tape, const PropagationPlan& plan, const ModelConfig& config,
                           const ModelParams& params) {
    if (params.layers.size() != config.num_layers) throw std::invalid_argument("forward: layer count mismatch");
    LayerOutput x{params.user_emb, params.item_emb};
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        x = propagate_layer(tape, plan, config, x, params.layers[l]);
        if (!all_finite(x.user) || !all_finite(x.item)) {
            throw NumericError("non-finite representation after layer " + std::to_string(l + 1));
        }
    }
    return x;
}

/// Forward pass without gradient recording.
inline LayerOutput infer(const PropagationPlan& plan, const ModelConfig& config, const ModelParams& params) {
    Tape tape(Tape::Mode::no_grad);
    return forward(tape, plan, config, params);
}

}  // namespace hmgn
