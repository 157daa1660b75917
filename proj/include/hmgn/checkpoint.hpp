#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hmgn/graph_store.hpp"
#include "hmgn/kg.hpp"
#include "hmgn/model.hpp"
#include "json.hpp"

namespace hmgn {

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"dim", c.dim},
            {"layers", c.num_layers},
            {"paradigm", to_string(c.paradigm)},
            {"alpha", c.alpha},
            {"temporal", c.use_temporal},
            {"behaviors", c.behaviors}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "dim") c.dim = value.get<std::size_t>();
        else if (key == "layers") c.num_layers = value.get<std::size_t>();
        else if (key == "paradigm") c.paradigm = parse_paradigm(value.get<std::string>());
        else if (key == "alpha") c.alpha = value.get<double>();
        else if (key == "temporal") c.use_temporal = value.get<bool>();
        else if (key == "behaviors") c.behaviors = value.get<std::vector<std::string>>();
        else throw std::invalid_argument("model: unknown key '" + key + "'");
    }
    return c;
}

struct Checkpoint {
    ModelConfig config;
    std::uint64_t seed = 0;
    ModelParams params;
    std::optional<KgParams> kg;
};

namespace detail {

inline constexpr char checkpoint_magic[8] = {'H', 'M', 'G', 'N', 'C', 'K', 'P', 'T'};

}  // namespace detail

/// Layout: 8-byte magic, u64 header length, JSON header (config echo, seed,
/// tensor names and shapes), then each tensor's doubles in header order.
inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, std::uint64_t seed,
                            const ModelParams& params, const KgParams* kg = nullptr) {
    auto tensors = params.named();
    if (kg) {
        for (auto& nt : kg->named()) tensors.push_back(nt);
    }
    nlohmann::json header;
    header["version"] = 1;
    header["config"] = to_json(config);
    header["seed"] = seed;
    header["kg_relations"] = kg ? kg->relation_proj.size() : 0;
    header["has_kg"] = kg != nullptr;
    for (const auto& [name, t] : tensors) header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
    out.write(detail::checkpoint_magic, sizeof detail::checkpoint_magic);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : tensors) {
        out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, detail::checkpoint_magic, sizeof magic) != 0) {
        throw DataError("'" + path.string() + "' is not a checkpoint");
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    const nlohmann::json header = nlohmann::json::parse(text);

    std::map<std::string, Tensor> by_name;
    for (const auto& entry : header.at("tensors")) {
        const auto shape = entry.at("shape").get<Shape>();
        Tensor t = Tensor::zeros(shape, true);
        in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        by_name.emplace(entry.at("name").get<std::string>(), t);
    }
    if (!in) throw DataError("checkpoint '" + path.string() + "' is truncated");

    auto take = [&](const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
        return it->second;
    };

    Checkpoint ck;
    ck.config = model_config_from_json(header.at("config"));
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.params.user_emb = take("user_emb");
    ck.params.item_emb = take("item_emb");
    for (std::size_t l = 0; l < ck.config.num_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerParams lp;
        for (std::size_t b = 0; b < ck.config.behaviors.size(); ++b) {
            lp.query.push_back(take(p + "query." + std::to_string(b)));
            lp.key.push_back(take(p + "key." + std::to_string(b)));
            lp.value.push_back(take(p + "value." + std::to_string(b)));
        }
        if (ck.config.paradigm == Paradigm::inter) {
            lp.shared_query = take(p + "shared_query");
            lp.shared_key = take(p + "shared_key");
            lp.shared_value = take(p + "shared_value");
        }
        ck.params.layers.push_back(std::move(lp));
    }
    ck.params.behavior_diag = take("behavior_diag");
    if (header.value("has_kg", false)) {
        KgParams kg;
        kg.attribute_emb = take("kg.attribute_emb");
        kg.relation_emb = take("kg.relation_emb");
        for (std::size_t r = 0; r < header.at("kg_relations").get<std::size_t>(); ++r)
            kg.relation_proj.push_back(take("kg.relation_proj." + std::to_string(r)));
        ck.kg = std::move(kg);
    }
    return ck;
}

}  // namespace hmgn
