#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace hmgn {

using NodeId = std::size_t;
using BehaviorId = std::size_t;
using Timestamp = std::int64_t;

enum class Side { user, item };

/// Raised for malformed or inconsistent input data.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Interaction {
    NodeId user = 0;
    NodeId item = 0;
    BehaviorId behavior = 0;
    std::optional<Timestamp> timestamp;

    friend bool operator==(const Interaction&, const Interaction&) = default;
};

/// Dense 0-based remapping of external string ids, in order of first appearance.
class IdMap {
public:
    NodeId intern(const std::string& external) {
        auto [it, inserted] = index_.try_emplace(external, external_.size());
        if (inserted) external_.push_back(external);
        return it->second;
    }
    std::optional<NodeId> find(const std::string& external) const {
        auto it = index_.find(external);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    const std::string& external(NodeId id) const { return external_.at(id); }
    std::size_t size() const { return external_.size(); }
    const std::vector<std::string>& externals() const { return external_; }

    /// Identity map "0".."n-1".
    static IdMap identity(std::size_t n) {
        IdMap m;
        for (std::size_t k = 0; k < n; ++k) m.intern(std::to_string(k));
        return m;
    }

private:
    std::vector<std::string> external_;
    std::unordered_map<std::string, NodeId> index_;
};

inline BehaviorId behavior_index(const std::vector<std::string>& vocabulary, std::string_view name) {
    auto it = std::find(vocabulary.begin(), vocabulary.end(), name);
    if (it == vocabulary.end()) throw DataError("unknown behavior '" + std::string(name) + "'");
    return static_cast<BehaviorId>(it - vocabulary.begin());
}

/// Collapses repeated (user, item, behavior) events to one edge, keeping the
/// earliest timestamp. First-occurrence order is preserved.
inline std::vector<Interaction> deduplicate(std::span<const Interaction> interactions, std::size_t* removed = nullptr) {
    struct Key {
        NodeId u, i;
        BehaviorId b;
        bool operator==(const Key&) const = default;
    };
    struct KeyHash {
        std::size_t operator()(const Key& k) const {
            std::size_t h = std::hash<std::size_t>{}(k.u);
            h = h * 1000003u ^ std::hash<std::size_t>{}(k.i);
            return h * 1000003u ^ std::hash<std::size_t>{}(k.b);
        }
    };
    std::unordered_map<Key, std::size_t, KeyHash> seen;
    std::vector<Interaction> out;
    out.reserve(interactions.size());
    for (const Interaction& x : interactions) {
        auto [it, inserted] = seen.try_emplace(Key{x.user, x.item, x.behavior}, out.size());
        if (inserted) {
            out.push_back(x);
            continue;
        }
        auto& kept = out[it->second].timestamp;
        if (x.timestamp && (!kept || *x.timestamp < *kept)) kept = x.timestamp;
    }
    if (removed) *removed = interactions.size() - out.size();
    return out;
}

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvSchema {
    std::string user_column = "user_id";
    std::string item_column = "item_id";
    std::string behavior_column = "behavior";
    /// Optional: when absent from the header, interactions carry no timestamp.
    std::string timestamp_column = "timestamp";
    /// Raw behavior token -> vocabulary name (e.g. "pv" -> "view").
    std::map<std::string, std::string> behavior_aliases;
};

struct IngestResult {
    std::vector<Interaction> interactions;
    IdMap users;
    IdMap items;
    std::vector<std::size_t> counts_per_behavior;
    std::size_t duplicates_removed = 0;
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    for (auto& f : fields) {
        while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
        while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
    }
    return fields;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

}  // namespace detail

/// Reads a header-led CSV interaction log, remaps ids to dense indices and
/// deduplicates repeated events.
inline IngestResult load_interactions(std::istream& in, const CsvSchema& schema,
                                      const std::vector<std::string>& vocabulary) {
    IngestResult result;
    result.counts_per_behavior.assign(vocabulary.size(), 0);

    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) return result;  // empty file
    ++line_no;
    const auto header = detail::split_csv_line(line);
    auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            if (required) throw DataError("line 1: missing column '" + name + "'");
            return std::nullopt;
        }
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t user_col = *column(schema.user_column, true);
    const std::size_t item_col = *column(schema.item_column, true);
    const std::size_t behavior_col = *column(schema.behavior_column, true);
    const auto ts_col = column(schema.timestamp_column, false);

    std::vector<Interaction> raw;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto fields = detail::split_csv_line(line);
        auto fail = [&](const std::string& what) {
            throw DataError("line " + std::to_string(line_no) + ": " + what);
        };
        if (fields.size() != header.size()) {
            fail("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()));
        }
        const std::string user(fields[user_col]);
        const std::string item(fields[item_col]);
        if (user.empty() || item.empty()) fail("empty user or item id");

        std::string token(fields[behavior_col]);
        if (auto alias = schema.behavior_aliases.find(token); alias != schema.behavior_aliases.end()) {
            token = alias->second;
        }
        auto b = std::find(vocabulary.begin(), vocabulary.end(), token);
        if (b == vocabulary.end()) fail("unknown behavior '" + std::string(fields[behavior_col]) + "'");

        Interaction x;
        x.user = result.users.intern(user);
        x.item = result.items.intern(item);
        x.behavior = static_cast<BehaviorId>(b - vocabulary.begin());
        if (ts_col && !fields[*ts_col].empty()) {
            auto t = detail::parse_int(fields[*ts_col]);
            if (!t) fail("malformed timestamp '" + std::string(fields[*ts_col]) + "'");
            x.timestamp = *t;
        }
        raw.push_back(x);
    }

    result.interactions = deduplicate(raw, &result.duplicates_removed);
    for (const Interaction& x : result.interactions) ++result.counts_per_behavior[x.behavior];
    return result;
}

inline IngestResult load_interactions(const std::filesystem::path& path, const CsvSchema& schema,
                                      const std::vector<std::string>& vocabulary) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open interaction file '" + path.string() + "'");
    return load_interactions(in, schema, vocabulary);
}

// ---------------------------------------------------------------------------
// Graph

/// Compressed adjacency for one side of one behavior (or the union).
struct Adjacency {
    std::vector<std::size_t> offsets{0};
    std::vector<NodeId> targets;
    std::vector<std::optional<Timestamp>> timestamps;

    std::span<const NodeId> neighbors(NodeId n) const {
        return std::span<const NodeId>(targets).subspan(offsets[n], offsets[n + 1] - offsets[n]);
    }
    std::span<const std::optional<Timestamp>> times(NodeId n) const {
        return std::span<const std::optional<Timestamp>>(timestamps).subspan(offsets[n], offsets[n + 1] - offsets[n]);
    }
    std::size_t num_nodes() const { return offsets.size() - 1; }
    std::size_t num_edges() const { return targets.size(); }
};

/// Immutable user-item multi-behavior bipartite graph.
///
/// Per behavior, user->item and item->user adjacencies are exact transposes
/// with sorted, duplicate-free neighbor lists. The union adjacency holds
/// N_u = ⋃_b N_u^(b) (and the item-side equivalent) without timestamps.
class MultiBehaviorGraph {
public:
    MultiBehaviorGraph() = default;

    std::size_t num_users() const { return num_users_; }
    std::size_t num_items() const { return num_items_; }
    std::size_t num_behaviors() const { return behaviors_.size(); }
    const std::vector<std::string>& behaviors() const { return behaviors_; }

    std::size_t num_edges(BehaviorId b) const { return user_side_.at(b).num_edges(); }
    std::size_t num_edges() const {
        std::size_t n = 0;
        for (const auto& a : user_side_) n += a.num_edges();
        return n;
    }

    /// N^(b) of a node when `behavior` is given, else the union N.
    std::span<const NodeId> neighbors(NodeId node, Side side, std::optional<BehaviorId> behavior = std::nullopt) const {
        return adjacency(side, behavior).neighbors(check(node, side));
    }

    /// Timestamps aligned with neighbors(node, side, behavior).
    std::span<const std::optional<Timestamp>> timestamps(NodeId node, Side side, BehaviorId behavior) const {
        return adjacency(side, behavior).times(check(node, side));
    }

    const Adjacency& adjacency(Side side, std::optional<BehaviorId> behavior) const {
        const auto& per = side == Side::user ? user_side_ : item_side_;
        if (!behavior) return side == Side::user ? user_union_ : item_union_;
        return per.at(*behavior);
    }

    bool has_edge(NodeId user, BehaviorId behavior, NodeId item) const {
        auto n = neighbors(user, Side::user, behavior);
        return std::binary_search(n.begin(), n.end(), item);
    }

    bool has_timestamps() const {
        for (const auto& a : user_side_)
            for (const auto& t : a.timestamps)
                if (!t) return false;
        return true;
    }

    /// All edges in (behavior, user, item) order.
    std::vector<Interaction> interactions() const {
        std::vector<Interaction> out;
        out.reserve(num_edges());
        for (BehaviorId b = 0; b < num_behaviors(); ++b) {
            const auto& a = user_side_[b];
            for (NodeId u = 0; u < num_users_; ++u)
                for (std::size_t k = a.offsets[u]; k < a.offsets[u + 1]; ++k)
                    out.push_back(Interaction{u, a.targets[k], b, a.timestamps[k]});
        }
        return out;
    }

    friend MultiBehaviorGraph build_graph(std::span<const Interaction>, std::size_t, std::size_t,
                                          std::vector<std::string>);

private:
    NodeId check(NodeId node, Side side) const {
        const std::size_t n = side == Side::user ? num_users_ : num_items_;
        if (node >= n) {
            throw std::out_of_range(std::string(side == Side::user ? "user " : "item ") + std::to_string(node) +
                                    " out of range (" + std::to_string(n) + ")");
        }
        return node;
    }

    std::size_t num_users_ = 0;
    std::size_t num_items_ = 0;
    std::vector<std::string> behaviors_;
    std::vector<Adjacency> user_side_;
    std::vector<Adjacency> item_side_;
    Adjacency user_union_;
    Adjacency item_union_;
};

namespace detail {

struct HalfEdge {
    NodeId source;
    NodeId target;
    std::optional<Timestamp> time;
};

inline Adjacency build_adjacency(std::vector<HalfEdge> edges, std::size_t num_nodes) {
    std::sort(edges.begin(), edges.end(), [](const HalfEdge& a, const HalfEdge& b) {
        return a.source != b.source ? a.source < b.source : a.target < b.target;
    });
    Adjacency adj;
    adj.offsets.assign(num_nodes + 1, 0);
    for (const HalfEdge& e : edges) ++adj.offsets[e.source + 1];
    for (std::size_t n = 0; n < num_nodes; ++n) adj.offsets[n + 1] += adj.offsets[n];
    adj.targets.reserve(edges.size());
    adj.timestamps.reserve(edges.size());
    for (const HalfEdge& e : edges) {
        adj.targets.push_back(e.target);
        adj.timestamps.push_back(e.time);
    }
    return adj;
}

inline Adjacency union_adjacency(const std::vector<Adjacency>& parts, std::size_t num_nodes) {
    Adjacency adj;
    adj.offsets.assign(num_nodes + 1, 0);
    std::vector<NodeId> merged;
    for (NodeId n = 0; n < num_nodes; ++n) {
        merged.clear();
        for (const Adjacency& a : parts) {
            auto nb = a.neighbors(n);
            merged.insert(merged.end(), nb.begin(), nb.end());
        }
        std::sort(merged.begin(), merged.end());
        merged.erase(std::unique(merged.begin(), merged.end()), merged.end());
        adj.targets.insert(adj.targets.end(), merged.begin(), merged.end());
        adj.offsets[n + 1] = adj.targets.size();
    }
    adj.timestamps.assign(adj.targets.size(), std::nullopt);
    return adj;
}

}  // namespace detail

/// Builds the indexed graph. Repeated (u, i, b) edges are collapsed keeping the
/// earliest timestamp. Throws std::out_of_range for indices beyond the
/// declared counts.
inline MultiBehaviorGraph build_graph(std::span<const Interaction> interactions, std::size_t num_users,
                                      std::size_t num_items, std::vector<std::string> behaviors) {
    if (behaviors.empty()) throw std::invalid_argument("build_graph: behavior vocabulary is empty");
    const std::vector<Interaction> edges = deduplicate(interactions);
    std::vector<std::vector<detail::HalfEdge>> by_user(behaviors.size()), by_item(behaviors.size());
    for (const Interaction& x : edges) {
        if (x.user >= num_users) {
            throw std::out_of_range("build_graph: user " + std::to_string(x.user) + " >= " + std::to_string(num_users));
        }
        if (x.item >= num_items) {
            throw std::out_of_range("build_graph: item " + std::to_string(x.item) + " >= " + std::to_string(num_items));
        }
        if (x.behavior >= behaviors.size()) {
            throw std::out_of_range("build_graph: behavior " + std::to_string(x.behavior) + " >= " +
                                    std::to_string(behaviors.size()));
        }
        by_user[x.behavior].push_back({x.user, x.item, x.timestamp});
        by_item[x.behavior].push_back({x.item, x.user, x.timestamp});
    }

    MultiBehaviorGraph g;
    g.num_users_ = num_users;
    g.num_items_ = num_items;
    g.behaviors_ = std::move(behaviors);
    for (std::size_t b = 0; b < g.behaviors_.size(); ++b) {
        g.user_side_.push_back(detail::build_adjacency(std::move(by_user[b]), num_users));
        g.item_side_.push_back(detail::build_adjacency(std::move(by_item[b]), num_items));
    }
    g.user_union_ = detail::union_adjacency(g.user_side_, num_users);
    g.item_union_ = detail::union_adjacency(g.item_side_, num_items);
    return g;
}

// ---------------------------------------------------------------------------
// Temporal split

/// Half-open boundaries: train t < train_end, val train_end <= t < val_end,
/// test t >= val_end.
struct TemporalSplit {
    Timestamp train_end = 0;
    Timestamp val_end = 0;
};

struct SplitResult {
    std::vector<Interaction> train;
    std::vector<Interaction> val;
    std::vector<Interaction> test;
    std::vector<std::string> warnings;
};

inline SplitResult temporal_split(std::span<const Interaction> interactions, const TemporalSplit& split) {
    if (!(split.train_end < split.val_end)) {
        throw std::invalid_argument("temporal_split: train_end must precede val_end");
    }
    SplitResult out;
    for (std::size_t k = 0; k < interactions.size(); ++k) {
        const Interaction& x = interactions[k];
        if (!x.timestamp) throw DataError("temporal_split: interaction " + std::to_string(k) + " has no timestamp");
        if (*x.timestamp < split.train_end) {
            out.train.push_back(x);
        } else if (*x.timestamp < split.val_end) {
            out.val.push_back(x);
        } else {
            out.test.push_back(x);
        }
    }
    if (out.val.empty()) out.warnings.push_back("validation split is empty");
    if (out.test.empty()) out.warnings.push_back("test split is empty");
    return out;
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/meta.json, edges.csv, users.csv, items.csv

struct StoredGraph {
    MultiBehaviorGraph graph;
    IdMap users;
    IdMap items;
};

inline void save_graph(const std::filesystem::path& dir, const MultiBehaviorGraph& graph, const IdMap& users,
                       const IdMap& items) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["format"] = "hmgn-graph-v1";
    meta["num_users"] = graph.num_users();
    meta["num_items"] = graph.num_items();
    meta["behaviors"] = graph.behaviors();
    std::vector<std::size_t> counts;
    for (BehaviorId b = 0; b < graph.num_behaviors(); ++b) counts.push_back(graph.num_edges(b));
    meta["edges_per_behavior"] = counts;
    std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';

    std::ofstream edges(dir / "edges.csv");
    edges << "user,item,behavior,timestamp\n";
    for (const Interaction& x : graph.interactions()) {
        edges << x.user << ',' << x.item << ',' << x.behavior << ',';
        if (x.timestamp) edges << *x.timestamp;
        edges << '\n';
    }
    auto write_ids = [&](const std::filesystem::path& p, const IdMap& ids) {
        std::ofstream out(p);
        out << "index,external_id\n";
        for (NodeId n = 0; n < ids.size(); ++n) out << n << ',' << ids.external(n) << '\n';
    };
    write_ids(dir / "users.csv", users);
    write_ids(dir / "items.csv", items);
    if (!edges) throw DataError("failed writing graph to '" + dir.string() + "'");
}

inline StoredGraph load_graph(const std::filesystem::path& dir) {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) throw DataError("missing graph meta file in '" + dir.string() + "'");
    const nlohmann::json meta = nlohmann::json::parse(meta_in);
    if (meta.value("format", "") != "hmgn-graph-v1") throw DataError("unsupported graph format in '" + dir.string() + "'");
    const auto num_users = meta.at("num_users").get<std::size_t>();
    const auto num_items = meta.at("num_items").get<std::size_t>();
    auto behaviors = meta.at("behaviors").get<std::vector<std::string>>();

    std::ifstream edges(dir / "edges.csv");
    if (!edges) throw DataError("missing edges.csv in '" + dir.string() + "'");
    std::string line;
    std::getline(edges, line);
    std::vector<Interaction> xs;
    std::size_t line_no = 1;
    while (std::getline(edges, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        auto u = f.size() == 4 ? detail::parse_int(f[0]) : std::nullopt;
        auto i = f.size() == 4 ? detail::parse_int(f[1]) : std::nullopt;
        auto b = f.size() == 4 ? detail::parse_int(f[2]) : std::nullopt;
        if (!u || !i || !b || *u < 0 || *i < 0 || *b < 0) {
            throw DataError("edges.csv line " + std::to_string(line_no) + ": malformed row");
        }
        Interaction x{static_cast<NodeId>(*u), static_cast<NodeId>(*i), static_cast<BehaviorId>(*b), std::nullopt};
        if (!f[3].empty()) {
            auto t = detail::parse_int(f[3]);
            if (!t) throw DataError("edges.csv line " + std::to_string(line_no) + ": malformed timestamp");
            x.timestamp = *t;
        }
        xs.push_back(x);
    }

    auto read_ids = [&](const std::filesystem::path& p, std::size_t expected) {
        IdMap ids;
        std::ifstream in(p);
        if (!in) return IdMap::identity(expected);
        std::string l;
        std::getline(in, l);
        while (std::getline(in, l)) {
            if (l.empty()) continue;
            const auto comma = l.find(',');
            ids.intern(l.substr(comma + 1));
        }
        if (ids.size() != expected) throw DataError("id map '" + p.string() + "' does not match node count");
        return ids;
    };

    StoredGraph out;
    out.graph = build_graph(xs, num_users, num_items, std::move(behaviors));
    out.users = read_ids(dir / "users.csv", num_users);
    out.items = read_ids(dir / "items.csv", num_items);
    return out;
}

}  // namespace hmgn
