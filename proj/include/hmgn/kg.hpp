#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hmgn/graph_store.hpp"
#include "hmgn/model.hpp"
#include "hmgn/tensor.hpp"

namespace hmgn {

struct KgTriple {
    std::size_t head = 0;
    std::size_t relation = 0;
    std::size_t tail = 0;
    friend bool operator==(const KgTriple&, const KgTriple&) = default;
};

/// Item-metadata triples. Entity ids [0, num_items) are the graph's items;
/// metadata values (categories, brands, ...) follow as attribute entities.
struct KgData {
    std::size_t num_items = 0;
    std::vector<std::string> relations;
    IdMap attributes;
    std::vector<KgTriple> triples;
    /// Sorted distinct tails observed per relation; corruption draws from here.
    std::vector<std::vector<std::size_t>> tail_domain;

    std::size_t num_entities() const { return num_items + attributes.size(); }

    void index_domains() {
        tail_domain.assign(relations.size(), {});
        for (const KgTriple& t : triples) tail_domain.at(t.relation).push_back(t.tail);
        for (auto& dom : tail_domain) {
            std::sort(dom.begin(), dom.end());
            dom.erase(std::unique(dom.begin(), dom.end()), dom.end());
        }
    }
};

/// Reads `head_id,relation,tail_id` triples. Ids matching an external item id
/// resolve to that item; anything else becomes an attribute entity. Relations
/// must appear in the vocabulary file (one name per line).
inline KgData load_kg(const std::filesystem::path& triples_csv, const std::filesystem::path& relations_file,
                      const IdMap& items) {
    KgData kg;
    kg.num_items = items.size();
    {
        std::ifstream in(relations_file);
        if (!in) throw DataError("cannot open relation vocabulary '" + relations_file.string() + "'");
        std::string line;
        while (std::getline(in, line)) {
            while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
            if (!line.empty()) kg.relations.push_back(line);
        }
    }
    std::ifstream in(triples_csv);
    if (!in) throw DataError("cannot open KG triples '" + triples_csv.string() + "'");
    std::string line;
    std::getline(in, line);
    std::size_t line_no = 1;
    auto entity = [&](std::string_view id) -> std::size_t {
        if (auto item = items.find(std::string(id))) return *item;
        return kg.num_items + kg.attributes.intern(std::string(id));
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 3 || f[0].empty() || f[2].empty()) {
            throw DataError("KG line " + std::to_string(line_no) + ": expected head_id,relation,tail_id");
        }
        auto r = std::find(kg.relations.begin(), kg.relations.end(), f[1]);
        if (r == kg.relations.end()) {
            throw DataError("KG line " + std::to_string(line_no) + ": unknown relation '" + std::string(f[1]) + "'");
        }
        kg.triples.push_back({entity(f[0]), static_cast<std::size_t>(r - kg.relations.begin()), entity(f[2])});
    }
    kg.index_domains();
    return kg;
}

struct KgParams {
    Tensor attribute_emb;               // |E| x d (item entities share item_emb)
    Tensor relation_emb;                // |R| x d_r, row r is e_r
    std::vector<Tensor> relation_proj;  // per relation, d_r x d (W_r)

    std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("kg.attribute_emb", attribute_emb);
        out.emplace_back("kg.relation_emb", relation_emb);
        for (std::size_t r = 0; r < relation_proj.size(); ++r)
            out.emplace_back("kg.relation_proj." + std::to_string(r), relation_proj[r]);
        return out;
    }
    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        for (auto& [n, t] : named()) out.push_back(t);
        return out;
    }
    KgParams clone() const {
        KgParams c{attribute_emb.clone(), relation_emb.clone(), {}};
        for (const Tensor& t : relation_proj) c.relation_proj.push_back(t.clone());
        return c;
    }
};

inline KgParams init_kg_params(const KgData& kg, std::size_t dim, std::size_t relation_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x6b67'7061'7261'6d73ULL);
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(dim));
    const double proj_std = std::sqrt(2.0 / static_cast<double>(dim + relation_dim));
    KgParams p;
    p.attribute_emb = detail::normal_tensor({kg.attributes.size(), dim}, emb_std, rng);
    p.relation_emb = detail::normal_tensor({kg.relations.size(), relation_dim}, emb_std, rng);
    for (std::size_t r = 0; r < kg.relations.size(); ++r)
        p.relation_proj.push_back(detail::normal_tensor({relation_dim, dim}, proj_std, rng));
    return p;
}

namespace detail {

inline std::span<const double> entity_row(std::size_t entity, const Tensor& item_emb, const KgParams& kg) {
    if (entity < item_emb.rows()) return item_emb.row(entity);
    const std::size_t a = entity - item_emb.rows();
    if (a >= kg.attribute_emb.rows()) throw std::out_of_range("unknown KG entity " + std::to_string(entity));
    return kg.attribute_emb.row(a);
}

}  // namespace detail

/// g(h,r,t) = ||W_r e_h + e_r − W_r e_t||
inline double kg_score(std::size_t head, std::size_t relation, std::size_t tail, const Tensor& item_emb,
                       const KgParams& kg) {
    if (relation >= kg.relation_proj.size()) throw std::out_of_range("unknown KG relation " + std::to_string(relation));
    auto eh = detail::entity_row(head, item_emb, kg);
    auto et = detail::entity_row(tail, item_emb, kg);
    const Tensor& W = kg.relation_proj[relation];
    auto er = kg.relation_emb.row(relation);
    double s = 0;
    for (std::size_t j = 0; j < W.rows(); ++j) {
        double v = er[j];
        for (std::size_t k = 0; k < W.cols(); ++k) v += W.at(j, k) * (eh[k] - et[k]);
        s += v * v;
    }
    return std::sqrt(s);
}

/// Positive triples paired with corrupted tails of the same relation.
struct KgBatch {
    std::vector<KgTriple> triples;
    std::vector<std::size_t> corrupted_tails;
    std::size_t skipped = 0;
};

/// Draws one corrupted tail per triple uniformly from the relation's tail
/// domain; draws that hit the true tail are skipped and counted.
template <typename Rng>
KgBatch corrupt_tails(const KgData& kg, std::span<const KgTriple> triples, Rng& rng) {
    KgBatch batch;
    for (const KgTriple& t : triples) {
        const auto& dom = kg.tail_domain.at(t.relation);
        std::uniform_int_distribution<std::size_t> pick(0, dom.size() - 1);
        const std::size_t c = dom[pick(rng)];
        if (c == t.tail) {
            ++batch.skipped;
            continue;
        }
        batch.triples.push_back(t);
        batch.corrupted_tails.push_back(c);
    }
    return batch;
}

/// Σ −log σ(g(h,r,t′) − g(h,r,t)) over the batch (a sum, not a mean).
inline Tensor kg_loss(Tape& tape, const Tensor& item_emb, const KgParams& kg, const KgBatch& batch) {
    if (batch.triples.size() != batch.corrupted_tails.size()) throw std::invalid_argument("kg_loss: misaligned batch");
    const Tensor entities =
        kg.attribute_emb.rows() > 0 ? tape.concat_rows({item_emb, kg.attribute_emb}) : item_emb;

    std::map<std::size_t, std::vector<std::size_t>> by_relation;
    for (std::size_t k = 0; k < batch.triples.size(); ++k) by_relation[batch.triples[k].relation].push_back(k);

    Tensor total = Tensor::scalar(0.0);
    for (const auto& [r, members] : by_relation) {
        std::vector<std::size_t> heads, tails, corrupt, rel(members.size(), r);
        for (std::size_t k : members) {
            heads.push_back(batch.triples[k].head);
            tails.push_back(batch.triples[k].tail);
            corrupt.push_back(batch.corrupted_tails[k]);
        }
        const Tensor& W = kg.relation_proj.at(r);
        const Tensor er = tape.gather_rows(kg.relation_emb, rel);
        const Tensor h = tape.gather_rows(entities, heads);
        auto distance = [&](const std::vector<std::size_t>& t) {
            const Tensor diff = tape.add(tape.linear_rows(tape.sub(h, tape.gather_rows(entities, t)), W), er);
            return tape.sqrt(tape.rowwise_dot(diff, diff));
        };
        const Tensor pos = distance(tails);
        const Tensor neg = distance(corrupt);
        const Tensor term = tape.scale(tape.sum(tape.log_sigmoid(tape.sub(neg, pos))), -1.0);
        total = tape.add(total, term);
    }
    return total;
}

}  // namespace hmgn
