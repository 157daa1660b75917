#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hmgn/graph_store.hpp"
#include "hmgn/tensor.hpp"

namespace hmgn {

enum class Paradigm { intra, inter };

inline std::string to_string(Paradigm p) { return p == Paradigm::intra ? "intra" : "inter"; }

inline Paradigm parse_paradigm(std::string_view s) {
    if (s == "intra") return Paradigm::intra;
    if (s == "inter") return Paradigm::inter;
    throw std::invalid_argument("unknown paradigm '" + std::string(s) + "' (expected intra or inter)");
}

struct ModelConfig {
    std::size_t dim = 32;
    std::size_t num_layers = 2;
    Paradigm paradigm = Paradigm::intra;
    /// Trade-off between the behavior-specific diagonal form (0) and the
    /// plain inner product (1).
    double alpha = 0.5;
    bool use_temporal = false;
    std::vector<std::string> behaviors{"view", "cart", "buy"};

    void validate() const {
        if (dim == 0) throw std::invalid_argument("model: dim must be >= 1");
        if (num_layers == 0) throw std::invalid_argument("model: num_layers must be >= 1");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("model: alpha must lie in [0, 1]");
        if (use_temporal && dim % 2 != 0) throw std::invalid_argument("model: temporal encoding needs an even dim");
        if (behaviors.empty()) throw std::invalid_argument("model: behavior vocabulary is empty");
    }
};

/// Attention transforms of one propagation layer. `query/key/value` are
/// indexed by behavior; the shared triple is only used by the inter paradigm's
/// neighbor-aggregation phase.
struct LayerParams {
    std::vector<Tensor> query;
    std::vector<Tensor> key;
    std::vector<Tensor> value;
    Tensor shared_query;
    Tensor shared_key;
    Tensor shared_value;
};

struct ModelParams {
    Tensor user_emb;       // |U| x d, e_u^(0)
    Tensor item_emb;       // |I| x d, e_i^(0)
    std::vector<LayerParams> layers;
    Tensor behavior_diag;  // |B| x d, row b holds the diagonal of B_b

    /// Every learned tensor with a stable name, in a fixed order.
    std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("user_emb", user_emb);
        out.emplace_back("item_emb", item_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            const LayerParams& lp = layers[l];
            for (std::size_t b = 0; b < lp.query.size(); ++b) {
                out.emplace_back(p + "query." + std::to_string(b), lp.query[b]);
                out.emplace_back(p + "key." + std::to_string(b), lp.key[b]);
                out.emplace_back(p + "value." + std::to_string(b), lp.value[b]);
            }
            if (lp.shared_query.defined()) {
                out.emplace_back(p + "shared_query", lp.shared_query);
                out.emplace_back(p + "shared_key", lp.shared_key);
                out.emplace_back(p + "shared_value", lp.shared_value);
            }
        }
        out.emplace_back("behavior_diag", behavior_diag);
        return out;
    }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named()) out.push_back(t);
        return out;
    }

    ModelParams clone() const {
        ModelParams c;
        c.user_emb = user_emb.clone();
        c.item_emb = item_emb.clone();
        c.behavior_diag = behavior_diag.clone();
        for (const LayerParams& lp : layers) {
            LayerParams n;
            for (const Tensor& t : lp.query) n.query.push_back(t.clone());
            for (const Tensor& t : lp.key) n.key.push_back(t.clone());
            for (const Tensor& t : lp.value) n.value.push_back(t.clone());
            if (lp.shared_query.defined()) {
                n.shared_query = lp.shared_query.clone();
                n.shared_key = lp.shared_key.clone();
                n.shared_value = lp.shared_value.clone();
            }
            c.layers.push_back(std::move(n));
        }
        return c;
    }
};

/// Final (or intermediate) node representations e^(l).
struct LayerOutput {
    Tensor user;  // |U| x d
    Tensor item;  // |I| x d
};

namespace detail {

inline Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

}  // namespace detail

/// Embeddings ~ N(0, 1/d); d x d transforms ~ N(0, 2/(fan_in + fan_out));
/// behavior diagonals start at ones. Fully determined by `seed`.
inline ModelParams init_params(const ModelConfig& config, std::size_t num_users, std::size_t num_items,
                               std::uint64_t seed) {
    config.validate();
    if (num_users == 0 || num_items == 0) throw std::invalid_argument("init_params: empty user or item set");
    const std::size_t d = config.dim;
    const std::size_t nb = config.behaviors.size();
    std::mt19937_64 rng(seed);
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double mat_std = std::sqrt(2.0 / static_cast<double>(d + d));

    ModelParams p;
    p.user_emb = detail::normal_tensor({num_users, d}, emb_std, rng);
    p.item_emb = detail::normal_tensor({num_items, d}, emb_std, rng);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerParams lp;
        for (std::size_t b = 0; b < nb; ++b) {
            lp.query.push_back(detail::normal_tensor({d, d}, mat_std, rng));
            lp.key.push_back(detail::normal_tensor({d, d}, mat_std, rng));
            lp.value.push_back(detail::normal_tensor({d, d}, mat_std, rng));
        }
        if (config.paradigm == Paradigm::inter) {
            lp.shared_query = detail::normal_tensor({d, d}, mat_std, rng);
            lp.shared_key = detail::normal_tensor({d, d}, mat_std, rng);
            lp.shared_value = detail::normal_tensor({d, d}, mat_std, rng);
        }
        p.layers.push_back(std::move(lp));
    }
    p.behavior_diag = Tensor::from({nb, d}, std::vector<double>(nb * d, 1.0), true);
    return p;
}

/// Sinusoidal encoding of a numerated timestamp:
///   PE[2e]   = sin(t / 10000^(2e/d))
///   PE[2e+1] = cos(t / 10000^((2e+1)/d))
/// Note the odd exponent uses 2e+1, not the 2e of the usual transformer table.
inline std::vector<double> temporal_encoding(double t, std::size_t d) {
    if (d % 2 != 0) throw std::invalid_argument("temporal_encoding: dimension must be even, got " + std::to_string(d));
    std::vector<double> pe(d);
    const double dd = static_cast<double>(d);
    for (std::size_t e = 0; e < d / 2; ++e) {
        pe[2 * e] = std::sin(t / std::pow(10000.0, static_cast<double>(2 * e) / dd));
        pe[2 * e + 1] = std::cos(t / std::pow(10000.0, static_cast<double>(2 * e + 1) / dd));
    }
    return pe;
}

/// f(u,b,i) = e_uᵀ((1−α)B_b + αI)e_i
inline double score(NodeId user, BehaviorId behavior, NodeId item, const LayerOutput& final, const ModelParams& params,
                    double alpha) {
    auto eu = final.user.row(user);
    auto ei = final.item.row(item);
    auto diag = params.behavior_diag.row(behavior);
    double s = 0;
    for (std::size_t k = 0; k < eu.size(); ++k) s += eu[k] * ((1.0 - alpha) * diag[k] + alpha) * ei[k];
    return s;
}

/// Batched, differentiable f(u,b,i) for aligned index lists.
inline Tensor score_batch(Tape& tape, const LayerOutput& final, const ModelParams& params, double alpha,
                          std::span<const std::size_t> users, std::span<const std::size_t> behaviors,
                          std::span<const std::size_t> items) {
    const Tensor eu = tape.gather_rows(final.user, users);
    const Tensor ei = tape.gather_rows(final.item, items);
    const Tensor diag = tape.gather_rows(params.behavior_diag, behaviors);
    const Tensor mix = tape.add_scalar(tape.scale(diag, 1.0 - alpha), alpha);
    return tape.rowwise_dot(tape.mul(eu, mix), ei);
}

}  // namespace hmgn
