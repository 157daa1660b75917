#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "hmgn/grad_check.hpp"
#include "hmgn/tensor.hpp"

using hmgn::Tape;
using hmgn::Tensor;

namespace {

Tensor random_tensor(hmgn::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

// Reduces any tensor to a scalar with fixed random weights so that every
// output element contributes a distinct gradient.
Tensor weighted_sum(Tape& tape, const Tensor& x, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.5, 1.5);
    std::vector<double> w(x.size());
    for (double& v : w) v = dist(rng);
    Tensor wt = Tensor::from(x.shape(), w);
    return tape.sum(tape.mul(x, wt));
}

void expect_grad_ok(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> params, double tol = 1e-5) {
    const auto report = hmgn::grad_check(f, std::move(params), 1e-5, tol);
    EXPECT_TRUE(report.passed) << "max relative error " << report.max_relative_error << " at param "
                               << report.worst_param << "[" << report.worst_index << "] analytic "
                               << report.worst_analytic << " numeric " << report.worst_numeric;
}

}  // namespace

TEST(Tensor, DataLengthMustMatchShape) {
    EXPECT_THROW(Tensor::from({2, 3}, {1, 2, 3}), hmgn::ShapeError);
    Tensor t = Tensor::zeros({2, 3}, true);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.grad().size(), 6u);
    EXPECT_EQ(Tensor::zeros({2, 3}).grad().size(), 0u);
}

TEST(Tensor, CopiesAliasAndCloneDetaches) {
    Tensor a = Tensor::vector({1, 2});
    Tensor b = a;
    b.data()[0] = 5;
    EXPECT_EQ(a.data()[0], 5);
    Tensor c = a.clone();
    c.data()[0] = 7;
    EXPECT_EQ(a.data()[0], 5);
    EXPECT_FALSE(c.same_storage(a));
}

TEST(Tensor, ShapeMismatchNamesBothShapes) {
    Tape tape;
    try {
        tape.add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
        FAIL() << "expected ShapeError";
    } catch (const hmgn::ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
    }
    EXPECT_THROW(tape.matvec(Tensor::zeros({2, 3}), Tensor::zeros({2})), hmgn::ShapeError);
    EXPECT_THROW(tape.matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), hmgn::ShapeError);
    EXPECT_THROW(tape.dot(Tensor::zeros({2}), Tensor::zeros({3})), hmgn::ShapeError);
}

TEST(Tensor, SoftmaxOfZerosIsUniform) {
    Tape tape;
    Tensor s = tape.softmax(Tensor::vector({0, 0}));
    EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
    EXPECT_DOUBLE_EQ(s.data()[1], 0.5);
}

TEST(Tensor, SoftmaxSurvivesLargeLogits) {
    Tape tape;
    Tensor s = tape.softmax(Tensor::vector({1000, 1000, -1000}));
    EXPECT_NEAR(s.data()[0], 0.5, 1e-15);
    EXPECT_NEAR(s.data()[2], 0.0, 1e-300);
}

TEST(Tensor, SigmoidValueAndSlopeAtZero) {
    Tensor x = Tensor::scalar(0.0, true);
    Tape tape;
    Tensor y = tape.sigmoid(x);
    EXPECT_DOUBLE_EQ(y.item(), 0.5);
    tape.backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Tensor, DotGradientIsOtherOperand) {
    Tensor x = Tensor::vector({1, -2, 3}, true);
    Tensor y = Tensor::vector({0.5, 4, -1});
    Tape tape;
    tape.backward(tape.dot(x, y));
    for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(x.grad()[k], y.data()[k]);
}

TEST(Tensor, LogSigmoidIsStable) {
    Tape tape;
    Tensor y = tape.log_sigmoid(Tensor::vector({-800, 0, 800}));
    EXPECT_DOUBLE_EQ(y.data()[0], -800);
    EXPECT_DOUBLE_EQ(y.data()[1], std::log(0.5));
    EXPECT_DOUBLE_EQ(y.data()[2], 0);
}

TEST(Tensor, NoGradTapeRecordsNothing) {
    Tensor x = Tensor::vector({1, 2}, true);
    Tape tape(Tape::Mode::no_grad);
    Tensor y = tape.sum(tape.mul(x, x));
    EXPECT_EQ(tape.size(), 0u);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_DOUBLE_EQ(y.item(), 5);
}

TEST(Tensor, BackwardNeedsScalar) {
    Tape tape;
    EXPECT_THROW(tape.backward(Tensor::vector({1, 2})), hmgn::ShapeError);
}

TEST(GradCheck, SumOfSquares) {
    Tensor x = Tensor::vector({1, 2}, true);
    auto f = [&](Tape& t) { return t.l2_norm_sq(x); };
    const auto report = hmgn::grad_check(f, {x}, 1e-5, 1e-6);
    EXPECT_TRUE(report.passed) << report.max_relative_error;
    EXPECT_NEAR(x.grad()[0], 2.0, 1e-12);
    EXPECT_NEAR(x.grad()[1], 4.0, 1e-12);
    EXPECT_EQ(x.data()[0], 1.0);  // restored
}

TEST(GradCheck, ConstantFunctionHasZeroGradients) {
    Tensor x = Tensor::vector({1, 2}, true);
    auto f = [&](Tape& t) { return t.add_scalar(t.scale(t.sum(x), 0.0), 3.0); };
    const auto report = hmgn::grad_check(f, {x});
    EXPECT_TRUE(report.passed);
    EXPECT_EQ(x.grad()[0], 0.0);
    EXPECT_NEAR(report.worst_numeric, 0.0, 1e-9);
}

TEST(GradCheck, NonFiniteLossThrows) {
    Tensor x = Tensor::vector({-1.0}, true);
    auto f = [&](Tape& t) { return t.sum(t.log(x)); };
    EXPECT_THROW(hmgn::grad_check(f, {x}), std::domain_error);
}

TEST(GradCheck, RejectsNonPositiveEpsilon) {
    Tensor x = Tensor::vector({1.0}, true);
    EXPECT_THROW(hmgn::grad_check([&](Tape& t) { return t.sum(x); }, {x}, 0.0), std::invalid_argument);
}

TEST(GradCheck, RelativeErrorFloor) {
    EXPECT_DOUBLE_EQ(hmgn::relative_error(1.0, 1.0), 0.0);
    EXPECT_DOUBLE_EQ(hmgn::relative_error(0.0, 1e-12), 1e-12 / 1e-8);
    EXPECT_DOUBLE_EQ(hmgn::relative_error(1.0, 3.0), 0.5);
}

// Every primitive against central differences on random inputs.
class PrimitiveGrad : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGrad, MatchesFiniteDifferences) {
    std::mt19937_64 rng(1234 + GetParam());
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    Tensor v = random_tensor({4}, rng);
    Tensor w = random_tensor({4}, rng);
    Tensor m = random_tensor({4, 2}, rng);
    Tensor sq = random_tensor({4, 4}, rng);
    Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    Tensor r3 = random_tensor({3}, rng);

    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.add(a, b)); }, {a, b});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.sub(a, b)); }, {a, b});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.mul(a, b)); }, {a, b});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.scale(a, -1.7)); }, {a});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.add_scalar(a, 0.3)); }, {a});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.sigmoid(a)); }, {a});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.log(pos)); }, {pos});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.log_sigmoid(a)); }, {a});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.sqrt(pos)); }, {pos});
    expect_grad_ok([&](Tape& t) { return t.sum(a); }, {a});
    expect_grad_ok([&](Tape& t) { return t.dot(v, w); }, {v, w});
    expect_grad_ok([&](Tape& t) { return t.l2_norm_sq(a); }, {a});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.softmax(v)); }, {v});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.matvec(sq, v)); }, {sq, v});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.matmul(a, m)); }, {a, m});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.linear_rows(a, sq)); }, {a, sq});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.transpose(a)); }, {a});
    const std::vector<std::size_t> idx{2, 0, 2, 1};
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.gather_rows(a, idx)); }, {a});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.concat_rows({a, b})); }, {a, b});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.concat_rows({v, w})); }, {v, w});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.rowwise_dot(a, b)); }, {a, b});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.scale_rows(a, r3)); }, {a, r3});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.add_row(a, v)); }, {a, v});

    Tensor scores = random_tensor({6}, rng);
    Tensor values = random_tensor({6, 3}, rng);
    Tensor weights = random_tensor({6}, rng);
    const std::vector<std::size_t> seg{1, 0, 1, 3, 1, 0};
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.segment_softmax(scores, seg, 4)); }, {scores});
    expect_grad_ok([&](Tape& t) { return weighted_sum(t, t.segment_weighted_sum(weights, values, seg, 4)); },
                   {weights, values});
}

INSTANTIATE_TEST_SUITE_P(RandomInputs, PrimitiveGrad, ::testing::Range(0, 5));

TEST(Tensor, BackwardIsLinearOverSummedLosses) {
    std::mt19937_64 rng(7);
    Tensor x = random_tensor({5}, rng);
    auto loss1 = [&](Tape& t) { return t.sum(t.sigmoid(x)); };
    auto loss2 = [&](Tape& t) { return t.l2_norm_sq(t.scale(x, 3.0)); };

    std::vector<double> g1, g2;
    {
        Tape t;
        t.backward(loss1(t));
        g1.assign(x.grad().begin(), x.grad().end());
        x.zero_grad();
    }
    {
        Tape t;
        t.backward(loss2(t));
        g2.assign(x.grad().begin(), x.grad().end());
        x.zero_grad();
    }
    Tape t;
    t.backward(t.add(loss1(t), loss2(t)));
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(x.grad()[k], g1[k] + g2[k], 1e-14);
}

TEST(Tensor, SoftmaxIsADistribution) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = random_tensor({7}, rng, -30, 30);
        Tape tape(Tape::Mode::no_grad);
        Tensor s = tape.softmax(x);
        double total = 0;
        for (double p : s.data()) {
            EXPECT_GE(p, 0.0);
            total += p;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Tensor, SegmentSoftmaxNormalizesEachSegment) {
    Tape tape(Tape::Mode::no_grad);
    const std::vector<std::size_t> seg{0, 2, 0, 2, 2};
    Tensor s = tape.segment_softmax(Tensor::vector({1, 2, 3, 4, 5}), seg, 4);
    EXPECT_NEAR(s.data()[0] + s.data()[2], 1.0, 1e-15);
    EXPECT_NEAR(s.data()[1] + s.data()[3] + s.data()[4], 1.0, 1e-15);
    EXPECT_NEAR(s.data()[0], 1.0 / (1.0 + std::exp(2.0)), 1e-15);

    Tensor out = tape.segment_weighted_sum(s, Tensor::from({5, 1}, {1, 1, 1, 1, 1}), seg, 4);
    EXPECT_NEAR(out.at(0, 0), 1.0, 1e-15);
    EXPECT_EQ(out.at(1, 0), 0.0);  // empty segment stays zero
    EXPECT_NEAR(out.at(2, 0), 1.0, 1e-15);
}
