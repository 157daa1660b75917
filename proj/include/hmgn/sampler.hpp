#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hmgn/graph_store.hpp"
#include "json.hpp"

namespace hmgn {

/// splitmix64 finalizer; derives independent RNG streams from one seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Heuristic total order over behaviors, highest priority first
/// (e.g. buy > cart > view). Behaviors not listed rank below every listed
/// one and are mutually unordered.
struct PriorityRank {
    std::vector<BehaviorId> order;

    static PriorityRank from_names(const std::vector<std::string>& names, const std::vector<std::string>& vocabulary) {
        PriorityRank r;
        for (const auto& n : names) {
            const BehaviorId b = behavior_index(vocabulary, n);
            if (std::find(r.order.begin(), r.order.end(), b) != r.order.end()) {
                throw DataError("priority rank lists '" + n + "' twice");
            }
            r.order.push_back(b);
        }
        return r;
    }

    /// b⁺: every behavior strictly outranking `b`.
    std::vector<BehaviorId> higher(BehaviorId b) const {
        auto it = std::find(order.begin(), order.end(), b);
        return std::vector<BehaviorId>(order.begin(), it);
    }
};

struct HbprTriple {
    NodeId user = 0;
    BehaviorId behavior = 0;
    NodeId positive = 0;
    NodeId negative = 0;
    friend bool operator==(const HbprTriple&, const HbprTriple&) = default;
};

/// I^{c,−}_{u,b}: items in the pool that the user interacted with neither
/// under `b` nor under any higher-priority behavior. Sorted ascending.
/// `item_pool`, when non-empty, is a per-item membership mask.
inline std::vector<NodeId> compatible_negatives(const MultiBehaviorGraph& graph, NodeId user, BehaviorId behavior,
                                                const PriorityRank& rank, std::span<const char> item_pool = {}) {
    std::vector<char> excluded(graph.num_items(), 0);
    for (NodeId i : graph.neighbors(user, Side::user, behavior)) excluded[i] = 1;
    for (BehaviorId h : rank.higher(behavior))
        for (NodeId i : graph.neighbors(user, Side::user, h)) excluded[i] = 1;
    std::vector<NodeId> out;
    for (NodeId i = 0; i < graph.num_items(); ++i) {
        if (excluded[i]) continue;
        if (!item_pool.empty() && !item_pool[i]) continue;
        out.push_back(i);
    }
    return out;
}

/// Restricts triple generation: positives only for `users`, negatives only
/// from items flagged in `negative_items`.
struct HbprPools {
    std::vector<NodeId> users;
    std::vector<char> negative_items;
};

struct HbprSample {
    std::vector<HbprTriple> triples;
    /// (user, behavior) pairs with positives but no compatible negative.
    std::size_t skipped_pairs = 0;
    std::vector<std::size_t> triples_per_behavior;
};

/// For every (u, b) with positives and a non-empty compatible set, emits
/// n_b triples per positive with negatives drawn uniformly with replacement.
/// Each behavior uses its own RNG stream, so restricting `behaviors` to a
/// subset yields exactly the matching subset of the full sample.
inline HbprSample sample_hbpr_triples(const MultiBehaviorGraph& graph, const PriorityRank& rank,
                                      std::span<const std::size_t> negatives_per_positive, std::uint64_t seed,
                                      const HbprPools* pools = nullptr, std::span<const BehaviorId> behaviors = {}) {
    const std::size_t nb = graph.num_behaviors();
    if (negatives_per_positive.size() != 1 && negatives_per_positive.size() != nb) {
        throw std::invalid_argument("sample_hbpr_triples: need one n_b or one per behavior");
    }
    for (std::size_t n : negatives_per_positive)
        if (n == 0) throw std::invalid_argument("sample_hbpr_triples: n_b must be >= 1");

    std::vector<NodeId> users;
    if (pools) {
        users = pools->users;
    } else {
        users.resize(graph.num_users());
        for (NodeId u = 0; u < users.size(); ++u) users[u] = u;
    }
    std::span<const char> item_pool = pools ? std::span<const char>(pools->negative_items) : std::span<const char>{};

    HbprSample sample;
    sample.triples_per_behavior.assign(nb, 0);
    for (BehaviorId b = 0; b < nb; ++b) {
        if (!behaviors.empty() && std::find(behaviors.begin(), behaviors.end(), b) == behaviors.end()) continue;
        const std::size_t n_b = negatives_per_positive.size() == 1 ? negatives_per_positive[0] : negatives_per_positive[b];
        std::mt19937_64 rng(derive_seed(seed, b));
        for (NodeId u : users) {
            auto positives = graph.neighbors(u, Side::user, b);
            if (positives.empty()) continue;
            const auto negatives = compatible_negatives(graph, u, b, rank, item_pool);
            if (negatives.empty()) {
                ++sample.skipped_pairs;
                continue;
            }
            std::uniform_int_distribution<std::size_t> pick(0, negatives.size() - 1);
            for (NodeId i : positives) {
                if (!item_pool.empty() && !item_pool[i]) continue;
                for (std::size_t c = 0; c < n_b; ++c) sample.triples.push_back({u, b, i, negatives[pick(rng)]});
                sample.triples_per_behavior[b] += n_b;
            }
        }
    }
    return sample;
}

/// Multi-behavior sub-graph in the parent's index space.
struct SubGraph {
    /// Every parent edge between retained users and retained items.
    MultiBehaviorGraph graph;
    std::vector<NodeId> users;  // retained, sorted
    std::vector<NodeId> items;  // retained, sorted
    std::vector<NodeId> kernel_users;
    std::vector<std::vector<NodeId>> kernel_items_per_behavior;  // I^k_b
    std::vector<NodeId> kernel_items;                            // ⋃_b I^k_b
    std::vector<Interaction> kernel_edges;                       // G^k
};

/// Keeps every edge of `graph` whose endpoints are both flagged.
inline MultiBehaviorGraph induced_subgraph(const MultiBehaviorGraph& graph, std::span<const char> user_mask,
                                           std::span<const char> item_mask) {
    std::vector<Interaction> kept;
    for (const Interaction& x : graph.interactions())
        if (user_mask[x.user] && item_mask[x.item]) kept.push_back(x);
    return build_graph(kept, graph.num_users(), graph.num_items(), graph.behaviors());
}

/// Per behavior: kernel items are all 1-hop neighbors of the kernel users in
/// that behavior's graph; expansion then proceeds layer by layer up to `hops`
/// hops, each frontier node keeping at most fanout[b] uniformly chosen
/// neighbors. The union of per-behavior node sets is closed under all parent
/// edges between retained nodes.
inline SubGraph sample_subgraph(const MultiBehaviorGraph& graph, std::span<const NodeId> kernel_users,
                                std::size_t hops, std::span<const std::size_t> fanouts, std::uint64_t seed) {
    const std::size_t nb = graph.num_behaviors();
    if (kernel_users.empty()) throw std::invalid_argument("sample_subgraph: kernel user set is empty");
    if (hops == 0) throw std::invalid_argument("sample_subgraph: hops must be >= 1");
    if (fanouts.size() != 1 && fanouts.size() != nb) throw std::invalid_argument("sample_subgraph: fanout count mismatch");
    for (std::size_t f : fanouts)
        if (f == 0) throw std::invalid_argument("sample_subgraph: fanout must be >= 1");
    for (NodeId u : kernel_users)
        if (u >= graph.num_users()) throw std::out_of_range("sample_subgraph: kernel user " + std::to_string(u) + " out of range");

    SubGraph sub;
    sub.kernel_users.assign(kernel_users.begin(), kernel_users.end());
    std::sort(sub.kernel_users.begin(), sub.kernel_users.end());
    sub.kernel_users.erase(std::unique(sub.kernel_users.begin(), sub.kernel_users.end()), sub.kernel_users.end());

    std::vector<char> user_mask(graph.num_users(), 0), item_mask(graph.num_items(), 0);
    std::vector<char> kernel_item_mask(graph.num_items(), 0);
    for (NodeId u : sub.kernel_users) user_mask[u] = 1;

    for (BehaviorId b = 0; b < nb; ++b) {
        const std::size_t fanout = fanouts.size() == 1 ? fanouts[0] : fanouts[b];
        std::mt19937_64 rng(derive_seed(seed, b));
        std::vector<char> seen_users(graph.num_users(), 0), seen_items(graph.num_items(), 0);
        for (NodeId u : sub.kernel_users) seen_users[u] = 1;

        std::vector<NodeId> kernel_items;
        for (NodeId u : sub.kernel_users)
            for (NodeId i : graph.neighbors(u, Side::user, b))
                if (!seen_items[i]) {
                    seen_items[i] = 1;
                    kernel_items.push_back(i);
                }
        std::sort(kernel_items.begin(), kernel_items.end());
        for (NodeId i : kernel_items) kernel_item_mask[i] = 1;

        // Frontier alternates sides: after the kernel hop it holds items.
        std::vector<NodeId> frontier = kernel_items;
        Side frontier_side = Side::item;
        std::vector<NodeId> scratch;
        for (std::size_t h = 2; h <= hops && !frontier.empty(); ++h) {
            std::vector<NodeId> next;
            auto& seen = frontier_side == Side::item ? seen_users : seen_items;
            for (NodeId n : frontier) {
                auto nb_list = graph.neighbors(n, frontier_side, b);
                scratch.assign(nb_list.begin(), nb_list.end());
                if (scratch.size() > fanout) {
                    // partial Fisher-Yates: first `fanout` entries are a uniform sample
                    for (std::size_t k = 0; k < fanout; ++k) {
                        std::uniform_int_distribution<std::size_t> pick(k, scratch.size() - 1);
                        std::swap(scratch[k], scratch[pick(rng)]);
                    }
                    scratch.resize(fanout);
                }
                for (NodeId m : scratch)
                    if (!seen[m]) {
                        seen[m] = 1;
                        next.push_back(m);
                    }
            }
            frontier = std::move(next);
            frontier_side = frontier_side == Side::item ? Side::user : Side::item;
        }
        for (NodeId u = 0; u < graph.num_users(); ++u) user_mask[u] |= seen_users[u];
        for (NodeId i = 0; i < graph.num_items(); ++i) item_mask[i] |= seen_items[i];
        sub.kernel_items_per_behavior.push_back(std::move(kernel_items));
    }

    for (NodeId u = 0; u < graph.num_users(); ++u)
        if (user_mask[u]) sub.users.push_back(u);
    for (NodeId i = 0; i < graph.num_items(); ++i) {
        if (item_mask[i]) sub.items.push_back(i);
        if (kernel_item_mask[i]) sub.kernel_items.push_back(i);
    }
    sub.graph = induced_subgraph(graph, user_mask, item_mask);

    std::vector<char> kernel_user_mask(graph.num_users(), 0);
    for (NodeId u : sub.kernel_users) kernel_user_mask[u] = 1;
    for (const Interaction& x : sub.graph.interactions())
        if (kernel_user_mask[x.user] && kernel_item_mask[x.item]) sub.kernel_edges.push_back(x);
    return sub;
}

/// Positives from the kernel edges, negatives from the sub-graph's items,
/// hierarchy exclusion judged on the sub-graph's own edge sets.
inline HbprSample subgraph_hbpr_training_set(const SubGraph& sub, const PriorityRank& rank,
                                             std::span<const std::size_t> negatives_per_positive, std::uint64_t seed,
                                             std::span<const BehaviorId> behaviors = {}) {
    HbprPools pools;
    pools.users = sub.kernel_users;
    pools.negative_items.assign(sub.graph.num_items(), 0);
    for (NodeId i : sub.items) pools.negative_items[i] = 1;
    return sample_hbpr_triples(sub.graph, rank, negatives_per_positive, seed, &pools, behaviors);
}

/// Uniform draw without replacement from users with at least one edge.
inline std::vector<NodeId> sample_kernel_users(const MultiBehaviorGraph& graph, std::size_t count, std::uint64_t seed) {
    std::vector<NodeId> active;
    for (NodeId u = 0; u < graph.num_users(); ++u)
        if (!graph.neighbors(u, Side::user).empty()) active.push_back(u);
    std::mt19937_64 rng(derive_seed(seed, 0x6b65726eULL));
    count = std::min(count, active.size());
    for (std::size_t k = 0; k < count; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, active.size() - 1);
        std::swap(active[k], active[pick(rng)]);
    }
    active.resize(count);
    std::sort(active.begin(), active.end());
    return active;
}

struct BehaviorDistribution {
    std::vector<std::string> behaviors;
    std::vector<std::size_t> counts;
    std::vector<double> ratios;
    /// ratio minus the parent's ratio; empty unless compared to a parent.
    std::vector<double> deltas;
};

inline BehaviorDistribution behavior_distribution_report(const MultiBehaviorGraph& graph,
                                                         const MultiBehaviorGraph* parent = nullptr) {
    BehaviorDistribution r;
    r.behaviors = graph.behaviors();
    const double total = static_cast<double>(graph.num_edges());
    for (BehaviorId b = 0; b < graph.num_behaviors(); ++b) {
        r.counts.push_back(graph.num_edges(b));
        r.ratios.push_back(total > 0 ? static_cast<double>(graph.num_edges(b)) / total : 0.0);
    }
    if (parent) {
        const auto base = behavior_distribution_report(*parent);
        for (std::size_t b = 0; b < r.ratios.size(); ++b) r.deltas.push_back(r.ratios[b] - base.ratios.at(b));
    }
    return r;
}

inline nlohmann::json to_json(const BehaviorDistribution& d) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t b = 0; b < d.behaviors.size(); ++b) {
        nlohmann::json row{{"count", d.counts[b]}, {"ratio", d.ratios[b]}};
        if (!d.deltas.empty()) row["delta_vs_parent"] = d.deltas[b];
        j[d.behaviors[b]] = row;
    }
    return j;
}

/// Audit dump: user,behavior,pos_item,neg_item (internal indices).
inline void write_triples_csv(std::ostream& out, std::span<const HbprTriple> triples,
                              const std::vector<std::string>& vocabulary) {
    out << "user,behavior,pos_item,neg_item\n";
    for (const HbprTriple& t : triples)
        out << t.user << ',' << vocabulary.at(t.behavior) << ',' << t.positive << ',' << t.negative << '\n';
}

/// Graph directory plus kernel.json manifest.
inline void save_subgraph(const std::filesystem::path& dir, const SubGraph& sub, const IdMap& users,
                          const IdMap& items) {
    save_graph(dir, sub.graph, users, items);
    nlohmann::json k;
    k["kernel_users"] = sub.kernel_users;
    k["kernel_items"] = sub.kernel_items;
    k["kernel_edge_count"] = sub.kernel_edges.size();
    k["retained_users"] = sub.users;
    k["retained_items"] = sub.items;
    std::ofstream(dir / "kernel.json") << k.dump(2) << '\n';
}

}  // namespace hmgn
