#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include <unistd.h>

#include "fixtures.hpp"
#include "hmgn/hmgn.hpp"
#include "oracles.hpp"

using namespace hmgn;

namespace {

Tape& no_grad() {
    static Tape tape(Tape::Mode::no_grad);
    return tape;
}

double params_norm_sq(const ModelParams& p) {
    double s = 0;
    for (const Tensor& t : p.tensors())
        for (double v : t.data()) s += v * v;
    return s;
}

MultiBehaviorGraph funnel_graph(std::uint64_t seed, std::size_t nu = 12, std::size_t ni = 10) {
    SynthConfig sc;
    sc.users = nu;
    sc.items = ni;
    sc.clusters = 2;
    sc.preferred_per_user = 4;
    sc.seed = seed;
    return build_graph(generate_synthetic(sc), nu, ni, synth_behaviors());
}

ModelConfig small_model(Paradigm p = Paradigm::intra) {
    ModelConfig c;
    c.dim = 8;
    c.num_layers = 1;
    c.paradigm = p;
    c.behaviors = {"view", "cart", "buy"};
    return c;
}

TrainConfig small_train(std::size_t epochs = 3) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 16;
    t.rank = PriorityRank{{2, 1, 0}};
    t.seed = 5;
    return t;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

// ---- HBPR ------------------------------------------------------------------

TEST(HbprLoss, EqualScoresGiveLnTwo) {
    const auto in = fixture::make_instance(1, Paradigm::intra, 1, 4, false, false);
    const auto final = infer(in.plan, in.config, in.params);
    std::vector<HbprTriple> ts;
    for (auto t : in.triples) {
        t.negative = t.positive;
        ts.push_back(t);
    }
    const double l = hbpr_loss(no_grad(), ts, final, in.params, in.config.alpha).item();
    EXPECT_NEAR(l / static_cast<double>(ts.size()), std::log(2.0), 1e-15);
}

TEST(HbprLoss, LargeMarginVanishes) {
    LayerOutput f{Tensor::from({1, 1}, {1.0}), Tensor::from({2, 1}, {60.0, -60.0})};
    ModelParams p;
    p.behavior_diag = Tensor::from({1, 1}, {1.0});
    const std::vector<HbprTriple> ts{{0, 0, 0, 1}};
    const double l = hbpr_loss(no_grad(), ts, f, p, 0.5).item();
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, 1e-50);
}

TEST(HbprLoss, MatchesLoopOracle) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto in = fixture::make_instance(seed, seed % 2 ? Paradigm::intra : Paradigm::inter, 2, 4, false, seed % 3 == 0);
        const auto final = infer(in.plan, in.config, in.params);
        std::vector<HbprTriple> four(in.triples.begin(), in.triples.begin() + std::min<std::size_t>(4, in.triples.size()));
        const double got = hbpr_loss(no_grad(), four, final, in.params, in.config.alpha).item();
        const double want = oracle::hbpr_loss(oracle::Reps{oracle::to_mat(final.user), oracle::to_mat(final.item)},
                                              oracle::to_mat(in.params.behavior_diag), in.config.alpha, four);
        EXPECT_NEAR(got, want, 1e-12);
    }
}

TEST(HbprLoss, PermutationInvariant) {
    const auto in = fixture::make_instance(7, Paradigm::inter, 1, 4, false, false);
    const auto final = infer(in.plan, in.config, in.params);
    auto ts = in.triples;
    const double a = hbpr_loss(no_grad(), ts, final, in.params, in.config.alpha).item();
    std::mt19937_64 rng(3);
    for (int k = 0; k < 5; ++k) {
        std::shuffle(ts.begin(), ts.end(), rng);
        EXPECT_NEAR(hbpr_loss(no_grad(), ts, final, in.params, in.config.alpha).item(), a, 1e-12);
    }
}

TEST(HbprLoss, EmptyBatchThrows) {
    const auto in = fixture::make_instance(1, Paradigm::intra, 1, 4, false, false);
    const auto final = infer(in.plan, in.config, in.params);
    EXPECT_THROW(hbpr_loss(no_grad(), {}, final, in.params, in.config.alpha), std::invalid_argument);
}

// ---- KG loss ---------------------------------------------------------------

TEST(KgLoss, EqualDistancesGiveLnTwo) {
    const auto in = fixture::make_instance(2, Paradigm::intra, 1, 4, true, false);
    KgBatch b = in.kg_batch;
    for (std::size_t k = 0; k < b.triples.size(); ++k) b.corrupted_tails[k] = b.triples[k].tail;
    const double l = kg_loss(no_grad(), in.params.item_emb, in.kg_params, b).item();
    EXPECT_NEAR(l / static_cast<double>(b.triples.size()), std::log(2.0), 1e-15);
}

TEST(KgLoss, TranslatedTrueTripleAndDistantCorruptionVanish) {
    KgData kg;
    kg.num_items = 2;
    kg.relations = {"r"};
    kg.triples = {{0, 0, 1}};
    kg.index_domains();
    auto kp = init_kg_params(kg, 2, 2, 1);
    kp.relation_proj[0] = Tensor::from({2, 2}, {1, 0, 0, 1});
    kp.relation_emb = Tensor::from({1, 2}, {1, 0});
    Tensor items = Tensor::from({2, 2}, {0, 0, 1, 0});  // e_1 = e_0 + e_r
    KgBatch b;
    b.triples = {{0, 0, 1}};
    b.corrupted_tails = {0};
    // corrupted tail 0 sits at distance |e_r|; scale the geometry up so the gap is large
    for (double& v : items.data()) v *= 100;
    for (double& v : kp.relation_emb.data()) v *= 100;
    EXPECT_NEAR(kg_score(0, 0, 1, items, kp), 0.0, 1e-12);
    const double l = kg_loss(no_grad(), items, kp, b).item();
    EXPECT_LT(l, 1e-40);
}

TEST(KgLoss, MatchesLoopOracle) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto in = fixture::make_instance(seed, Paradigm::intra, 1, 3, true, false);
        const double got = kg_loss(no_grad(), in.params.item_emb, in.kg_params, in.kg_batch).item();
        const auto items = oracle::to_mat(in.params.item_emb), attrs = oracle::to_mat(in.kg_params.attribute_emb);
        double want = 0;
        for (std::size_t k = 0; k < in.kg_batch.triples.size(); ++k) {
            const auto& t = in.kg_batch.triples[k];
            const auto W = oracle::to_mat(in.kg_params.relation_proj[t.relation]);
            const auto er = oracle::to_mat(in.kg_params.relation_emb)[t.relation];
            const double g_true = oracle::kg_score(items, attrs, W, er, t.head, t.tail);
            const double g_bad = oracle::kg_score(items, attrs, W, er, t.head, in.kg_batch.corrupted_tails[k]);
            want += oracle::neg_log_sigmoid(g_bad - g_true);
        }
        EXPECT_NEAR(got, want, 1e-12);
    }
}

// ---- L′ --------------------------------------------------------------------

TEST(StepLoss, ComponentsSumToTotal) {
    for (bool kg : {false, true}) {
        const auto in = fixture::make_instance(3, Paradigm::inter, 2, 4, kg, true);
        const double lambda = 0.37, w = 0.6;
        const auto l = in.loss(no_grad(), lambda, w);
        EXPECT_NEAR(l.total.item(), l.hbpr + lambda * l.reg + w * l.kg, 1e-12);
        EXPECT_EQ(l.kg == 0.0, !kg);
    }
}

TEST(StepLoss, RegularizerCoversTouchedRowsAndAllMatrices) {
    const auto in = fixture::make_instance(4, Paradigm::inter, 2, 4, false, false);
    const auto l = in.loss(no_grad());
    std::set<std::size_t> users, items, behaviors;
    for (const auto& t : in.triples) {
        users.insert(t.user);
        items.insert(t.positive);
        items.insert(t.negative);
        behaviors.insert(t.behavior);
    }
    auto rows = [](const Tensor& t, const std::set<std::size_t>& idx) {
        double s = 0;
        for (std::size_t r : idx)
            for (double v : t.row(r)) s += v * v;
        return s;
    };
    double want = rows(in.params.user_emb, users) + rows(in.params.item_emb, items) +
                  rows(in.params.behavior_diag, behaviors);
    for (const auto& [name, t] : in.params.named())
        if (name.rfind("layer", 0) == 0)
            for (double v : t.data()) want += v * v;
    EXPECT_NEAR(l.reg, want, 1e-12);
}

TEST(StepLoss, HbprTermIsBatchMean) {
    const auto in = fixture::make_instance(5, Paradigm::intra, 1, 4, false, false);
    const auto final = infer(in.plan, in.config, in.params);
    const double sum = hbpr_loss(no_grad(), in.triples, final, in.params, in.config.alpha).item();
    EXPECT_NEAR(in.loss(no_grad()).hbpr, sum / static_cast<double>(in.triples.size()), 1e-14);
}

struct LossGradCase {
    Paradigm paradigm;
    std::size_t layers;
    std::size_t dim;
    bool kg;
    bool temporal;
};

class LossGrad : public ::testing::TestWithParam<LossGradCase> {};

TEST_P(LossGrad, TotalLossPassesGradCheck) {
    const auto c = GetParam();
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        const auto in = fixture::make_instance(seed, c.paradigm, c.layers, c.dim, c.kg, c.temporal);
        auto f = [&](Tape& tape) { return in.loss(tape, 0.05, 0.7).total; };
        const auto report = grad_check(f, in.tensors(), 1e-4, 1e-4);
        EXPECT_TRUE(report.passed) << "seed " << seed << " max relative error " << report.max_relative_error
                                   << " param " << report.worst_param << "[" << report.worst_index << "]";
    }
}

INSTANTIATE_TEST_SUITE_P(Configs, LossGrad,
                         ::testing::Values(LossGradCase{Paradigm::intra, 1, 4, false, false},
                                           LossGradCase{Paradigm::intra, 1, 4, true, true},
                                           LossGradCase{Paradigm::intra, 2, 8, true, false},
                                           LossGradCase{Paradigm::inter, 1, 4, true, false},
                                           LossGradCase{Paradigm::inter, 1, 8, false, true},
                                           LossGradCase{Paradigm::inter, 2, 4, true, true}));

// ---- optimizer and loop ----------------------------------------------------

TEST(Sgd, ZeroRateIsIdentity) {
    const auto in = fixture::make_instance(6, Paradigm::inter, 2, 4, true, false);
    auto ts = in.tensors();
    std::vector<std::vector<double>> before;
    for (const auto& t : ts) before.emplace_back(t.data().begin(), t.data().end());
    Tape tape;
    tape.backward(in.loss(tape).total);
    sgd_step(ts, 0.0);
    for (std::size_t k = 0; k < ts.size(); ++k)
        EXPECT_TRUE(std::equal(before[k].begin(), before[k].end(), ts[k].data().begin()));
}

TEST(Train, ConfigValidation) {
    TrainConfig t = small_train();
    t.learning_rate = 0;
    EXPECT_THROW(t.validate(), std::invalid_argument);
    t = small_train();
    t.lambda_reg = -1;
    EXPECT_THROW(t.validate(), std::invalid_argument);
    t = small_train();
    t.negatives_per_positive = {0};
    EXPECT_THROW(t.validate(), std::invalid_argument);
    const auto empty = build_graph({}, 2, 2, {"view", "cart", "buy"});
    EXPECT_THROW(train(empty, small_model(), small_train()), std::invalid_argument);
}

TEST(Train, HeavyRegularizationShrinksNormsEveryEpoch) {
    const auto g = funnel_graph(1);
    TrainConfig t = small_train(5);
    t.lambda_reg = 1e3;
    t.learning_rate = 1e-4;
    std::vector<double> norms{params_norm_sq(init_params(small_model(), g.num_users(), g.num_items(), t.seed))};
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochRecord&, const ModelParams& p, const KgParams*) { norms.push_back(params_norm_sq(p)); };
    train(g, small_model(), t, nullptr, nullptr, hooks);
    ASSERT_EQ(norms.size(), 6u);
    for (std::size_t e = 1; e < norms.size(); ++e) EXPECT_LT(norms[e], norms[e - 1]) << "epoch " << e;
}

TEST(Train, SinglePairLearnsTheMargin) {
    std::vector<Interaction> xs{{0, 0, 0, 1}};
    const auto g = build_graph(xs, 1, 2, {"buy"});
    ModelConfig mc = small_model();
    mc.behaviors = {"buy"};
    TrainConfig t = small_train(50);
    t.rank = PriorityRank{{0}};
    t.learning_rate = 0.1;
    const auto r = train(g, mc, t);
    const auto final = infer(make_plan(g, mc), mc, r.params);
    EXPECT_GT(score(0, 0, 0, final, r.params, mc.alpha), score(0, 0, 1, final, r.params, mc.alpha));
    EXPECT_LT(r.report.epochs.back().hbpr, r.report.epochs.front().hbpr);
}

TEST(Train, SameSeedSameCheckpointBytes) {
    const auto g = funnel_graph(2);
    const auto dir = std::filesystem::temp_directory_path() / ("hmgn_train_" + std::to_string(::getpid()));
    for (Paradigm p : {Paradigm::intra, Paradigm::inter}) {
        const auto a = train(g, small_model(p), small_train());
        const auto b = train(g, small_model(p), small_train());
        save_checkpoint(dir / "a.bin", small_model(p), 5, a.params);
        save_checkpoint(dir / "b.bin", small_model(p), 5, b.params);
        EXPECT_EQ(file_bytes(dir / "a.bin"), file_bytes(dir / "b.bin"));
        TrainConfig other = small_train();
        other.seed = 6;
        const auto c = train(g, small_model(p), other);
        save_checkpoint(dir / "c.bin", small_model(p), 6, c.params);
        EXPECT_NE(file_bytes(dir / "a.bin"), file_bytes(dir / "c.bin"));
    }
    std::filesystem::remove_all(dir);
}

TEST(Train, ReportTotalsDecompose) {
    const auto g = funnel_graph(3);
    std::mt19937_64 rng(1);
    const auto kg = fixture::random_kg(g.num_items(), rng);
    TrainConfig t = small_train(2);
    t.kg_enabled = true;
    t.kg_weight = 0.5;
    t.lambda_reg = 1e-2;
    const auto r = train(g, small_model(), t, &kg);
    ASSERT_TRUE(r.kg);
    for (const auto& e : r.report.epochs) {
        EXPECT_NEAR(e.total, e.hbpr + t.lambda_reg * e.reg + t.kg_weight * e.kg, 1e-12 * std::max(1.0, e.total));
        EXPECT_GT(e.kg, 0.0);
        EXPECT_EQ(e.steps, (e.triples + t.batch_size - 1) / t.batch_size);
        const auto j = to_json(e);
        EXPECT_EQ(j["epoch"], e.epoch);
        EXPECT_DOUBLE_EQ(j["total"].get<double>(), e.total);
    }
}

TEST(Train, DivergenceIsReported) {
    const auto g = funnel_graph(4);
    TrainConfig t = small_train(20);
    t.learning_rate = 1e12;
    try {
        train(g, small_model(), t);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
    } catch (const NumericError& e) {
        // the forward pass can hit non-finite activations before the loss does
        EXPECT_NE(std::string(e.what()).find("layer"), std::string::npos);
    }
}

TEST(Train, KgEnabledWithoutDataThrows) {
    TrainConfig t = small_train();
    t.kg_enabled = true;
    EXPECT_THROW(train(funnel_graph(1), small_model(), t), std::invalid_argument);
}

TEST(Train, SubgraphModeRecordsSizes) {
    const auto g = funnel_graph(5, 30, 20);
    TrainConfig t = small_train(2);
    t.subgraph = SubgraphOptions{5, 2, {3}, true};
    const auto r = train(g, small_model(), t);
    for (const auto& e : r.report.epochs) {
        EXPECT_GT(e.subgraph_users, 0u);
        EXPECT_LE(e.subgraph_users, g.num_users());
        EXPECT_GT(e.triples, 0u);
    }
}

TEST(Train, ValidationMetricsPerEpoch) {
    const auto g = funnel_graph(6);
    ValidationSet v;
    v.interactions = {{0, 1, 2, 1}, {1, 2, 2, 1}};
    v.spec.ks = {5};
    const auto r = train(g, small_model(), small_train(2), nullptr, &v);
    for (const auto& e : r.report.epochs) {
        ASSERT_TRUE(e.validation);
        EXPECT_EQ(e.validation->at("buy", 5).users, 2u);
    }
}

// ---- ablation --------------------------------------------------------------

TEST(Ablate, SingleTaskSeesOnlyTarget) {
    const auto g = funnel_graph(7);
    const auto r = ablate(g, small_model(), small_train(2), 2);
    ASSERT_EQ(r.single_task.report.epochs.size(), 2u);
    EXPECT_EQ(r.single_task.report.epochs[0].triples, g.num_edges(2));
    EXPECT_GT(r.multi_task.report.epochs[0].triples, r.single_task.report.epochs[0].triples);
}

TEST(Ablate, TargetWithoutEdgesThrows) {
    std::vector<Interaction> xs{{0, 0, 0, 1}, {0, 1, 1, 1}};
    const auto g = build_graph(xs, 1, 3, {"view", "cart", "buy"});
    EXPECT_THROW(ablate(g, small_model(), small_train(1), 2), std::invalid_argument);
    TrainConfig t = small_train(1);
    t.single_task_behavior = 2;
    EXPECT_THROW(train(g, small_model(), t), std::invalid_argument);
}
