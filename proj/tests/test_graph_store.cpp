#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <unistd.h>

#include "hmgn/graph_store.hpp"
#include "oracles.hpp"

using namespace hmgn;

namespace {

const std::vector<std::string> vocab{"view", "cart", "buy"};

std::vector<NodeId> as_vector(std::span<const NodeId> s) { return {s.begin(), s.end()}; }

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("hmgn_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST(Ingest, DuplicateKeepsEarliestTimestamp) {
    std::istringstream in("user_id,item_id,behavior,timestamp\n0,1,view,10\n0,1,view,5\n0,2,buy,7\n");
    const auto r = load_interactions(in, CsvSchema{}, vocab);
    ASSERT_EQ(r.interactions.size(), 2u);
    EXPECT_EQ(r.duplicates_removed, 1u);
    EXPECT_EQ(r.interactions[0].timestamp, 5);
    EXPECT_EQ(r.items.external(r.interactions[0].item), "1");
    EXPECT_EQ(r.counts_per_behavior, (std::vector<std::size_t>{1, 0, 1}));
}

TEST(Ingest, EmptyFileGivesNothing) {
    std::istringstream in("");
    const auto r = load_interactions(in, CsvSchema{}, vocab);
    EXPECT_TRUE(r.interactions.empty());
    EXPECT_EQ(r.counts_per_behavior, (std::vector<std::size_t>{0, 0, 0}));
}

TEST(Ingest, UnknownBehaviorNamesLineAndToken) {
    std::istringstream in("user_id,item_id,behavior,timestamp\n0,1,view,10\n0,2,wishlist,11\n");
    try {
        load_interactions(in, CsvSchema{}, vocab);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
        EXPECT_NE(msg.find("wishlist"), std::string::npos) << msg;
    }
}

TEST(Ingest, MalformedRowsReportLine) {
    std::istringstream short_row("user_id,item_id,behavior,timestamp\n0,1\n");
    EXPECT_THROW(load_interactions(short_row, CsvSchema{}, vocab), DataError);
    std::istringstream bad_time("user_id,item_id,behavior,timestamp\n0,1,view,abc\n");
    try {
        load_interactions(bad_time, CsvSchema{}, vocab);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(Ingest, MissingFileThrows) {
    EXPECT_THROW(load_interactions(std::filesystem::path("/nonexistent/x.csv"), CsvSchema{}, vocab), DataError);
}

TEST(Ingest, SchemaColumnsAndAliases) {
    std::istringstream in("ts,uid,type,iid\n3,alice,pv,book\n4,bob,buy,pen\n");
    CsvSchema s;
    s.user_column = "uid";
    s.item_column = "iid";
    s.behavior_column = "type";
    s.timestamp_column = "ts";
    s.behavior_aliases = {{"pv", "view"}};
    const auto r = load_interactions(in, s, vocab);
    ASSERT_EQ(r.interactions.size(), 2u);
    EXPECT_EQ(r.interactions[0].behavior, 0u);
    EXPECT_EQ(r.users.external(r.interactions[1].user), "bob");
    EXPECT_EQ(r.interactions[1].timestamp, 4);
}

TEST(Ingest, TimestampColumnIsOptional) {
    std::istringstream in("user_id,item_id,behavior\na,x,view\n");
    const auto r = load_interactions(in, CsvSchema{}, vocab);
    ASSERT_EQ(r.interactions.size(), 1u);
    EXPECT_FALSE(r.interactions[0].timestamp);
}

TEST(BuildGraph, PerBehaviorAndUnionNeighbors) {
    std::vector<Interaction> xs{{0, 0, 0, std::nullopt}, {0, 1, 2, std::nullopt}};
    const auto g = build_graph(xs, 1, 2, vocab);
    EXPECT_EQ(as_vector(g.neighbors(0, Side::user, 0)), (std::vector<NodeId>{0}));
    EXPECT_EQ(as_vector(g.neighbors(0, Side::user, 2)), (std::vector<NodeId>{1}));
    EXPECT_EQ(as_vector(g.neighbors(0, Side::user)), (std::vector<NodeId>{0, 1}));
    EXPECT_EQ(as_vector(g.neighbors(0, Side::item, 0)), (std::vector<NodeId>{0}));
}

TEST(BuildGraph, U3Scenario) {
    const auto g = oracle::u3_scenario();
    using oracle::i2;
    using oracle::i3;
    using oracle::u3;
    EXPECT_EQ(as_vector(g.neighbors(u3, Side::user, 1)), (std::vector<NodeId>{i3}));
    EXPECT_EQ(as_vector(g.neighbors(u3, Side::user, 2)), (std::vector<NodeId>{i2}));
    EXPECT_EQ(as_vector(g.neighbors(u3, Side::user)), (std::vector<NodeId>{i2, i3}));
}

TEST(BuildGraph, IsolatedNodeHasNoNeighbors) {
    std::vector<Interaction> xs{{0, 0, 0, std::nullopt}};
    const auto g = build_graph(xs, 3, 3, vocab);
    EXPECT_TRUE(g.neighbors(2, Side::user).empty());
    EXPECT_TRUE(g.neighbors(2, Side::item, 1).empty());
}

TEST(BuildGraph, OutOfRangeIndexThrows) {
    std::vector<Interaction> xs{{0, 5, 0, std::nullopt}};
    EXPECT_THROW(build_graph(xs, 1, 2, vocab), std::out_of_range);
    std::vector<Interaction> bad_b{{0, 0, 3, std::nullopt}};
    EXPECT_THROW(build_graph(bad_b, 1, 1, vocab), std::out_of_range);
    const auto g = build_graph({}, 1, 1, vocab);
    EXPECT_THROW(g.neighbors(1, Side::user), std::out_of_range);
}

TEST(BuildGraph, DuplicatesCollapse) {
    std::vector<Interaction> xs{{0, 0, 0, 9}, {0, 0, 0, 3}, {0, 0, 1, 4}};
    const auto g = build_graph(xs, 1, 1, vocab);
    EXPECT_EQ(g.num_edges(), 2u);
    EXPECT_EQ(g.timestamps(0, Side::user, 0)[0], 3);
}

class GraphProperties : public ::testing::TestWithParam<int> {};

TEST_P(GraphProperties, TransposeUnionSortedness) {
    const auto g = oracle::random_graph(12, 15, 3, 0.15, 500 + GetParam());
    for (BehaviorId b = 0; b < g.num_behaviors(); ++b) {
        for (NodeId u = 0; u < g.num_users(); ++u) {
            auto n = g.neighbors(u, Side::user, b);
            EXPECT_TRUE(std::is_sorted(n.begin(), n.end()));
            EXPECT_EQ(std::adjacent_find(n.begin(), n.end()), n.end());
            for (NodeId i : n) {
                auto back = g.neighbors(i, Side::item, b);
                EXPECT_TRUE(std::binary_search(back.begin(), back.end(), u));
            }
        }
        for (NodeId i = 0; i < g.num_items(); ++i)
            for (NodeId u : g.neighbors(i, Side::item, b)) EXPECT_TRUE(g.has_edge(u, b, i));
    }
    for (NodeId u = 0; u < g.num_users(); ++u) {
        std::set<NodeId> uni;
        for (BehaviorId b = 0; b < g.num_behaviors(); ++b)
            for (NodeId i : g.neighbors(u, Side::user, b)) uni.insert(i);
        EXPECT_EQ(as_vector(g.neighbors(u, Side::user)), std::vector<NodeId>(uni.begin(), uni.end()));
    }
    for (NodeId i = 0; i < g.num_items(); ++i) {
        std::set<NodeId> uni;
        for (BehaviorId b = 0; b < g.num_behaviors(); ++b)
            for (NodeId u : g.neighbors(i, Side::item, b)) uni.insert(u);
        EXPECT_EQ(as_vector(g.neighbors(i, Side::item)), std::vector<NodeId>(uni.begin(), uni.end()));
    }
}

TEST_P(GraphProperties, DedupIsIdempotent) {
    std::mt19937_64 rng(GetParam());
    std::uniform_int_distribution<std::size_t> pick(0, 4);
    std::uniform_int_distribution<Timestamp> when(0, 100);
    std::vector<Interaction> raw;
    for (int k = 0; k < 60; ++k) raw.push_back({pick(rng), pick(rng), pick(rng) % 3, when(rng)});
    const auto once = deduplicate(raw);
    EXPECT_EQ(deduplicate(once), once);
    const auto g1 = build_graph(raw, 5, 5, vocab);
    const auto g2 = build_graph(g1.interactions(), 5, 5, vocab);
    EXPECT_EQ(g1.interactions(), g2.interactions());
}

TEST_P(GraphProperties, SplitIsPartition) {
    const auto g = oracle::random_graph(10, 10, 3, 0.2, 900 + GetParam(), true, 100);
    const auto xs = g.interactions();
    const auto s = temporal_split(xs, {30, 60});
    EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), xs.size());
    for (const auto& x : s.train) EXPECT_LT(*x.timestamp, 30);
    for (const auto& x : s.val) EXPECT_TRUE(*x.timestamp >= 30 && *x.timestamp < 60);
    for (const auto& x : s.test) EXPECT_GE(*x.timestamp, 60);
}

INSTANTIATE_TEST_SUITE_P(Random, GraphProperties, ::testing::Range(0, 10));

TEST(TemporalSplit, HalfOpenBoundaries) {
    std::vector<Interaction> xs{{0, 0, 0, 1}, {0, 1, 0, 5}, {0, 2, 0, 9}};
    auto s = temporal_split(xs, {4, 8});
    ASSERT_EQ(s.train.size(), 1u);
    ASSERT_EQ(s.val.size(), 1u);
    ASSERT_EQ(s.test.size(), 1u);
    EXPECT_EQ(s.train[0].timestamp, 1);
    EXPECT_EQ(s.val[0].timestamp, 5);
    EXPECT_EQ(s.test[0].timestamp, 9);

    std::vector<Interaction> boundary{{0, 0, 0, 4}};
    EXPECT_EQ(temporal_split(boundary, {4, 8}).val.size(), 1u);
}

TEST(TemporalSplit, AllTrainWarns) {
    std::vector<Interaction> xs{{0, 0, 0, 1}, {0, 1, 0, 2}};
    auto s = temporal_split(xs, {4, 8});
    EXPECT_EQ(s.train.size(), 2u);
    EXPECT_TRUE(s.val.empty());
    EXPECT_TRUE(s.test.empty());
    EXPECT_EQ(s.warnings.size(), 2u);
}

TEST(TemporalSplit, Errors) {
    std::vector<Interaction> xs{{0, 0, 0, 1}, {0, 1, 0, std::nullopt}};
    EXPECT_THROW(temporal_split(xs, {4, 8}), DataError);
    EXPECT_THROW(temporal_split({}, {8, 8}), std::invalid_argument);
}

TEST(Persistence, RoundTripIsExact) {
    auto g = oracle::random_graph(7, 9, 3, 0.3, 42, true, 1'000'000'000'000LL);
    IdMap users, items;
    for (NodeId u = 0; u < 7; ++u) users.intern("user-" + std::to_string(u));
    for (NodeId i = 0; i < 9; ++i) items.intern("item-" + std::to_string(i));
    const auto dir = temp_dir("roundtrip");
    save_graph(dir, g, users, items);
    const auto back = load_graph(dir);
    EXPECT_EQ(back.graph.interactions(), g.interactions());
    EXPECT_EQ(back.graph.num_users(), 7u);
    EXPECT_EQ(back.graph.num_items(), 9u);
    EXPECT_EQ(back.graph.behaviors(), g.behaviors());
    EXPECT_EQ(back.users.externals(), users.externals());
    EXPECT_EQ(back.items.external(8), "item-8");
    std::filesystem::remove_all(dir);
}

TEST(Persistence, MissingDirectoryThrows) {
    EXPECT_THROW(load_graph("/nonexistent/graph"), DataError);
}
