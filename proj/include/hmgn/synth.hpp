#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmgn/graph_store.hpp"

namespace hmgn {

/// Planted-structure generator for desk-scale experiments. Users and items
/// fall into latent clusters; each user prefers a handful of items (mostly
/// from its own cluster) and walks the funnel view -> cart -> buy on them
/// with the given conditional probabilities. Event times are non-decreasing
/// along the funnel.
struct SynthConfig {
    std::size_t users = 1000;
    std::size_t items = 500;
    std::size_t clusters = 10;
    std::size_t preferred_per_user = 20;
    double in_cluster = 0.8;
    double p_view = 0.9;
    double p_cart = 0.4;  // given view
    double p_buy = 0.5;   // given cart
    std::size_t noise_views = 5;
    Timestamp horizon = 1000;
    Timestamp funnel_gap = 50;
    std::uint64_t seed = 1;

    void validate() const {
        if (users == 0 || items == 0 || clusters == 0) throw std::invalid_argument("synth: counts must be positive");
        for (double p : {in_cluster, p_view, p_cart, p_buy})
            if (!(p >= 0 && p <= 1)) throw std::invalid_argument("synth: probabilities must lie in [0, 1]");
        if (horizon <= 0) throw std::invalid_argument("synth: horizon must be positive");
    }
};

inline const std::vector<std::string>& synth_behaviors() {
    static const std::vector<std::string> names{"view", "cart", "buy"};
    return names;
}

/// Interactions over users [0, users) and items [0, items); behavior indices
/// follow synth_behaviors(). Already deduplicated.
inline std::vector<Interaction> generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<Timestamp> when(0, cfg.horizon - 1);
    std::uniform_int_distribution<Timestamp> gap(0, std::max<Timestamp>(cfg.funnel_gap, 0));
    std::uniform_int_distribution<std::size_t> any_item(0, cfg.items - 1);
    std::uniform_int_distribution<std::size_t> any_cluster(0, cfg.clusters - 1);

    std::vector<std::vector<NodeId>> cluster_items(cfg.clusters);
    for (NodeId i = 0; i < cfg.items; ++i) cluster_items[i % cfg.clusters].push_back(i);

    std::vector<Interaction> out;
    for (NodeId u = 0; u < cfg.users; ++u) {
        const std::size_t c = any_cluster(rng);
        const auto& own = cluster_items[c];
        std::vector<NodeId> preferred;
        for (std::size_t k = 0; k < cfg.preferred_per_user; ++k) {
            NodeId i;
            if (unit(rng) < cfg.in_cluster && !own.empty()) {
                i = own[std::uniform_int_distribution<std::size_t>(0, own.size() - 1)(rng)];
            } else {
                i = any_item(rng);
            }
            if (std::find(preferred.begin(), preferred.end(), i) == preferred.end()) preferred.push_back(i);
        }
        for (NodeId i : preferred) {
            if (unit(rng) >= cfg.p_view) continue;
            Timestamp t = when(rng);
            out.push_back({u, i, 0, t});
            if (unit(rng) >= cfg.p_cart) continue;
            t = std::min(cfg.horizon - 1, t + gap(rng));
            out.push_back({u, i, 1, t});
            if (unit(rng) >= cfg.p_buy) continue;
            t = std::min(cfg.horizon - 1, t + gap(rng));
            out.push_back({u, i, 2, t});
        }
        for (std::size_t k = 0; k < cfg.noise_views; ++k) out.push_back({u, any_item(rng), 0, when(rng)});
    }
    return deduplicate(out);
}

/// CSV with header user_id,item_id,behavior,timestamp.
inline void write_interactions_csv(std::ostream& out, const std::vector<Interaction>& interactions,
                                   const std::vector<std::string>& vocabulary) {
    out << "user_id,item_id,behavior,timestamp\n";
    for (const Interaction& x : interactions) {
        out << x.user << ',' << x.item << ',' << vocabulary.at(x.behavior) << ',';
        if (x.timestamp) out << *x.timestamp;
        out << '\n';
    }
}

}  // namespace hmgn
