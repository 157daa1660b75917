#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "hmgn/hmgn.hpp"
#include "oracles.hpp"

namespace fixture {

/// A tiny model instance with everything needed to evaluate L′.
struct Instance {
    hmgn::MultiBehaviorGraph graph;
    hmgn::ModelConfig config;
    hmgn::ModelParams params;
    hmgn::PropagationPlan plan;
    std::vector<hmgn::HbprTriple> triples;
    hmgn::KgData kg;
    hmgn::KgParams kg_params;
    hmgn::KgBatch kg_batch;
    bool with_kg = false;

    std::vector<hmgn::Tensor> tensors() const {
        auto out = params.tensors();
        if (with_kg)
            for (const auto& t : kg_params.tensors()) out.push_back(t);
        return out;
    }

    hmgn::StepLoss loss(hmgn::Tape& tape, double lambda = 1e-2, double kg_weight = 1.0) const {
        return hmgn::compute_step_loss(tape, plan, config, params, triples, lambda, with_kg ? &kg_params : nullptr,
                                       with_kg ? &kg_batch : nullptr, kg_weight);
    }
};

/// Item-metadata KG over `num_items` items: two relations, three attribute
/// entities, and some item-to-item links.
inline hmgn::KgData random_kg(std::size_t num_items, std::mt19937_64& rng) {
    hmgn::KgData kg;
    kg.num_items = num_items;
    kg.relations = {"category", "related"};
    for (const char* a : {"cat:a", "cat:b", "cat:c"}) kg.attributes.intern(a);
    std::uniform_int_distribution<std::size_t> item(0, num_items - 1), attr(0, 2);
    for (std::size_t i = 0; i < num_items; ++i) kg.triples.push_back({i, 0, num_items + attr(rng)});
    for (std::size_t k = 0; k < num_items; ++k) {
        const std::size_t h = item(rng), t = item(rng);
        if (h != t) kg.triples.push_back({h, 1, t});
    }
    kg.index_domains();
    return kg;
}

inline Instance make_instance(std::uint64_t seed, hmgn::Paradigm paradigm, std::size_t layers, std::size_t dim,
                              bool with_kg, bool temporal, std::size_t nu = 5, std::size_t ni = 5) {
    Instance in;
    std::mt19937_64 rng(seed);
    for (std::uint64_t attempt = 0;; ++attempt) {
        in.graph = oracle::random_graph(nu, ni, 3, 0.3, seed * 131 + attempt, true, 40);
        in.config = oracle::tiny_config(3, dim, layers, paradigm, temporal, 0.3);
        hmgn::PriorityRank rank{{2, 1, 0}};
        in.triples = hmgn::sample_hbpr_triples(in.graph, rank, std::vector<std::size_t>{1}, seed).triples;
        if (in.triples.size() >= 3) break;
    }
    in.params = hmgn::init_params(in.config, nu, ni, seed);
    // Move the diagonals off all-ones so the behavior-specific path has nonzero gradients everywhere.
    std::uniform_real_distribution<double> jitter(0.5, 1.5);
    for (double& v : in.params.behavior_diag.data()) v = jitter(rng);
    in.plan = hmgn::make_plan(in.graph, in.config);
    in.with_kg = with_kg;
    if (with_kg) {
        in.kg = random_kg(ni, rng);
        in.kg_params = hmgn::init_kg_params(in.kg, dim, dim, seed);
        do {
            in.kg_batch = hmgn::corrupt_tails(in.kg, in.kg.triples, rng);
        } while (in.kg_batch.triples.empty());
    }
    return in;
}

}  // namespace fixture
