#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "hmgn/graph_store.hpp"
#include "hmgn/layers.hpp"
#include "hmgn/model.hpp"
#include "json.hpp"

namespace hmgn {

struct EvalSpec {
    std::vector<std::size_t> ks{10, 50, 100};
    /// Empty means every behavior of the vocabulary.
    std::vector<BehaviorId> behaviors;
    /// Drop the user's train positives of the evaluated behavior from its ranking.
    bool exclude_train_positives = true;
};

/// Items by descending score, ties by ascending index; items flagged in
/// `excluded` (per-item mask, may be empty) are removed first.
inline std::vector<NodeId> rank_items(std::span<const double> scores, std::span<const char> excluded = {}) {
    std::vector<NodeId> order;
    order.reserve(scores.size());
    for (NodeId i = 0; i < scores.size(); ++i)
        if (excluded.empty() || !excluded[i]) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](NodeId a, NodeId b) {
        return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
    });
    return order;
}

namespace detail {

/// 1-based rank R(i) of each test item, or nullopt when absent from the list.
inline std::vector<std::optional<std::size_t>> test_ranks(std::span<const NodeId> ranked, std::span<const NodeId> test) {
    std::vector<std::optional<std::size_t>> out;
    out.reserve(test.size());
    for (NodeId t : test) {
        auto it = std::find(ranked.begin(), ranked.end(), t);
        out.push_back(it == ranked.end() ? std::nullopt : std::optional<std::size_t>(it - ranked.begin() + 1));
    }
    return out;
}

inline double recall_from_ranks(std::span<const std::optional<std::size_t>> ranks, std::size_t k) {
    std::size_t hits = 0;
    for (const auto& r : ranks)
        if (r && *r <= k) ++hits;
    return static_cast<double>(hits) / static_cast<double>(std::min(k, ranks.size()));
}

inline double ndcg_from_ranks(std::span<const std::optional<std::size_t>> ranks, std::size_t k) {
    double dcg = 0;
    for (const auto& r : ranks)
        if (r && *r <= k) dcg += 1.0 / std::log2(static_cast<double>(*r) + 1.0);
    double ideal = 0;
    for (std::size_t r = 1; r <= std::min(k, ranks.size()); ++r) ideal += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    return dcg / ideal;
}

}  // namespace detail

/// Σ_{i ∈ test} δ(R(i) ≤ K) / min(K, |test|); nullopt for an empty test set.
inline std::optional<double> recall_at_k(std::span<const NodeId> ranked, std::span<const NodeId> test, std::size_t k) {
    if (k == 0) throw std::invalid_argument("recall_at_k: K must be >= 1");
    if (test.empty()) return std::nullopt;
    return detail::recall_from_ranks(detail::test_ranks(ranked, test), k);
}

/// DCG with log2 discount, normalized by the DCG of min(K, |test|) hits at
/// ranks 1.. ; nullopt for an empty test set.
inline std::optional<double> ndcg_at_k(std::span<const NodeId> ranked, std::span<const NodeId> test, std::size_t k) {
    if (k == 0) throw std::invalid_argument("ndcg_at_k: K must be >= 1");
    if (test.empty()) return std::nullopt;
    return detail::ndcg_from_ranks(detail::test_ranks(ranked, test), k);
}

struct MetricRow {
    std::string behavior;
    std::size_t k = 0;
    double recall = 0;
    double ndcg = 0;
    std::size_t users = 0;
};

struct MetricsTable {
    std::vector<MetricRow> rows;

    const MetricRow& at(const std::string& behavior, std::size_t k) const {
        for (const MetricRow& r : rows)
            if (r.behavior == behavior && r.k == k) return r;
        throw std::out_of_range("no metrics for behavior '" + behavior + "' at K=" + std::to_string(k));
    }
};

/// Test positives grouped per (behavior, user), sorted and deduplicated.
inline std::vector<std::map<NodeId, std::vector<NodeId>>> group_test_positives(std::span<const Interaction> test,
                                                                               std::size_t num_behaviors) {
    std::vector<std::map<NodeId, std::vector<NodeId>>> out(num_behaviors);
    for (const Interaction& x : test) out.at(x.behavior)[x.user].push_back(x.item);
    for (auto& per : out)
        for (auto& [u, items] : per) {
            std::sort(items.begin(), items.end());
            items.erase(std::unique(items.begin(), items.end()), items.end());
        }
    return out;
}

/// Full-ranking Recall@K / NDCG@K per behavior, averaged over users with a
/// non-empty test set for that behavior. `train` supplies exclusions.
inline MetricsTable evaluate(const LayerOutput& final, const ModelParams& params, double alpha,
                             const MultiBehaviorGraph& train, std::span<const Interaction> test, const EvalSpec& spec) {
    for (std::size_t k : spec.ks)
        if (k == 0) throw std::invalid_argument("evaluate: K must be >= 1");
    std::vector<BehaviorId> behaviors = spec.behaviors;
    if (behaviors.empty()) {
        behaviors.resize(train.num_behaviors());
        std::iota(behaviors.begin(), behaviors.end(), BehaviorId{0});
    }
    const auto positives = group_test_positives(test, train.num_behaviors());
    const std::size_t num_items = final.item.rows();

    MetricsTable table;
    std::vector<double> scores(num_items);
    std::vector<char> excluded(num_items);
    for (BehaviorId b : behaviors) {
        std::vector<double> recall_sum(spec.ks.size(), 0.0), ndcg_sum(spec.ks.size(), 0.0);
        std::size_t users = 0;
        for (const auto& [u, items] : positives.at(b)) {
            for (NodeId i = 0; i < num_items; ++i) scores[i] = score(u, b, i, final, params, alpha);
            std::fill(excluded.begin(), excluded.end(), 0);
            if (spec.exclude_train_positives && u < train.num_users())
                for (NodeId i : train.neighbors(u, Side::user, b)) excluded[i] = 1;
            const auto ranked = rank_items(scores, excluded);
            const auto ranks = detail::test_ranks(ranked, items);
            for (std::size_t k = 0; k < spec.ks.size(); ++k) {
                recall_sum[k] += detail::recall_from_ranks(ranks, spec.ks[k]);
                ndcg_sum[k] += detail::ndcg_from_ranks(ranks, spec.ks[k]);
            }
            ++users;
        }
        for (std::size_t k = 0; k < spec.ks.size(); ++k) {
            const double n = users ? static_cast<double>(users) : 1.0;
            table.rows.push_back({train.behaviors().at(b), spec.ks[k], recall_sum[k] / n, ndcg_sum[k] / n, users});
        }
    }
    return table;
}

/// Runs inference on `train` and evaluates against `test`.
inline MetricsTable evaluate_model(const PropagationPlan& plan, const ModelConfig& config, const ModelParams& params,
                                   const MultiBehaviorGraph& train, std::span<const Interaction> test,
                                   const EvalSpec& spec) {
    return evaluate(infer(plan, config, params), params, config.alpha, train, test, spec);
}

inline nlohmann::json to_json(const MetricsTable& table) {
    nlohmann::json j = nlohmann::json::array();
    for (const MetricRow& r : table.rows) {
        j.push_back({{"behavior", r.behavior}, {"k", r.k}, {"recall", r.recall}, {"ndcg", r.ndcg}, {"n_users", r.users}});
    }
    return j;
}

/// behavior,K,metric,value,n_users
inline void write_metrics_csv(std::ostream& out, const MetricsTable& table) {
    out << "behavior,K,metric,value,n_users\n";
    out.precision(17);
    for (const MetricRow& r : table.rows) {
        out << r.behavior << ',' << r.k << ",recall," << r.recall << ',' << r.users << '\n';
        out << r.behavior << ',' << r.k << ",ndcg," << r.ndcg << ',' << r.users << '\n';
    }
}

}  // namespace hmgn
