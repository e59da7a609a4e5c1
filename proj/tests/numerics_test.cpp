#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "sarnet/numerics/adam.hpp"
#include "sarnet/numerics/batch_norm.hpp"
#include "sarnet/numerics/checkpoint.hpp"
#include "sarnet/numerics/ops.hpp"
#include "sarnet/numerics/random.hpp"
#include "support/finite_difference.hpp"

namespace sarnet {
namespace {

using testing::bit_identical;
using testing::finite_difference_check;

Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.values()) v = rng.normal(0.0, scale);
  return t;
}

TEST(Tensor, ShapeMustMatchValues) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ContractViolation);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t(1, 2), 1.5);
}

TEST(Gradient, SquareAtThreeIsSix) {
  ParameterStore store;
  Parameter& x = store.add("x", Tensor::scalar(3.0));
  Tape tape;
  Var xv = tape.param(x);
  Var loss = mul(xv, xv);
  Gradients g = evaluate_with_gradients(tape, loss, store);
  EXPECT_DOUBLE_EQ(g.of("x").item(), 6.0);
}

TEST(Gradient, ConstantLossGivesZeroGradient) {
  ParameterStore store;
  store.add("x", Tensor::scalar(3.0));
  store.add("w", Tensor::row({1.0, 2.0}));
  Tape tape;
  Var loss = tape.constant(Tensor::scalar(7.0));
  Gradients g = evaluate_with_gradients(tape, loss, store);
  EXPECT_EQ(g.of("x").item(), 0.0);
  EXPECT_EQ(g.of("w")[0], 0.0);
  EXPECT_EQ(g.of("w")[1], 0.0);
}

TEST(Gradient, NonScalarLossIsRejected) {
  ParameterStore store;
  Parameter& w = store.add("w", Tensor::row({1.0, 2.0}));
  Tape tape;
  Var out = scale(tape.param(w), 2.0);
  EXPECT_THROW(evaluate_with_gradients(tape, out, store), ContractViolation);
}

TEST(Gradient, TwoLayerNetworkMatchesFiniteDifferences) {
  // 2 -> 2 -> 1 network plus an output scale: W1 (4) + b1 (2) + W2 (2) + b2 (1) + s (1) = 10 parameters.
  Rng rng(11);
  ParameterStore store;
  Parameter& w1 = store.add("w1", random_tensor(rng, 2, 2));
  Parameter& b1 = store.add("b1", random_tensor(rng, 1, 2));
  Parameter& w2 = store.add("w2", random_tensor(rng, 2, 1));
  Parameter& b2 = store.add("b2", random_tensor(rng, 1, 1));
  Parameter& s = store.add("s", Tensor::scalar(0.7));
  ASSERT_EQ(store.trainable_count(), 10u);
  Tape tape;
  Var x = tape.constant(random_tensor(rng, 5, 2));
  Var h = sigmoid(add_row(matmul(x, tape.param(w1)), tape.param(b1)));
  Var y = add_row(matmul(h, tape.param(w2)), tape.param(b2));
  Var loss = mean_all(mul(mul_row(y, tape.param(s)), y));
  auto report = finite_difference_check(tape, loss, store);
  EXPECT_EQ(report.checked, 10u);
  EXPECT_LT(report.max_relative_error, 1e-4) << report.worst;
}

// Randomized finite-difference check of every primitive. Each case builds a
// scalar loss through one op (plus a random linear read-out) over random inputs.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  const int op = GetParam();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 101 + static_cast<std::uint64_t>(op));
    ParameterStore store;
    Parameter& a = store.add("a", random_tensor(rng, 4, 3));
    Parameter& b = store.add("b", random_tensor(rng, 4, 3));
    Parameter& r = store.add("r", random_tensor(rng, 1, 3));
    Parameter& w = store.add("w", random_tensor(rng, 3, 2));
    Tape tape;
    Var av = tape.param(a), bv = tape.param(b), rv = tape.param(r), wv = tape.param(w);
    Var out;
    switch (op) {
      case 0: out = matmul(av, wv); break;
      case 1: out = add(av, bv); break;
      case 2: out = sub(av, bv); break;
      case 3: out = mul(av, bv); break;
      case 4: out = add_row(av, rv); break;
      case 5: out = mul_row(av, rv); break;
      case 6: out = relu(av); break;
      case 7: out = sigmoid(av); break;
      case 8: out = concat_cols({av, bv, take_rows(rv, {0, 0, 0, 0})}); break;
      case 9: out = concat_rows({av, bv, rv}); break;
      case 10: out = slice_rows(av, 1, 3); break;
      case 11: out = take_rows(av, {3, 0, 3, 2, 0}); break;
      case 12: out = embed_columns(wv, {1, 0, 1}); break;
      case 13: {
        Var scores = matmul(concat_rows({av, take_rows(bv, {0})}), tape.constant(Tensor::column({1.0, -1.0, 0.5})));
        out = segment_softmax(scores, {0, 2, 2, 5}, {1, 1, 1, 0, 1});
        break;
      }
      case 14: {
        Var weights = matmul(av, tape.constant(Tensor::column({1.0, -0.5, 0.25})));
        out = segment_weighted_sum(weights, bv, {0, 1, 1, 4});
        break;
      }
      case 15: out = softmax_rows(av); break;
      case 16: out = row_dot(av, bv); break;
      case 17: out = batch_norm_train(av, rv, take_rows(rv, {0}), 1e-5); break;
      case 18: {
        Tensor rm = random_tensor(rng, 1, 3);
        Tensor rvar({1, 3});
        for (double& v : rvar.values()) v = rng.uniform(0.5, 2.0);
        out = batch_norm_infer(av, rv, take_rows(rv, {0}), rm, rvar, 1e-5);
        break;
      }
      case 19: {
        Var p = sigmoid(matmul(av, tape.constant(Tensor::column({1.0, 1.0, 1.0}))));
        out = weighted_bce(p, {1.0, 0.0, 1.0, 0.0}, {1.0, 3.0, 0.5, 2.0});
        break;
      }
      default: FAIL();
    }
    Tensor readout_values(out.value().shape());
    for (double& v : readout_values.values()) v = rng.normal();
    Var loss = sum_all(mul(out, tape.constant(readout_values)));
    auto report = finite_difference_check(tape, loss, store);
    EXPECT_LT(report.max_relative_error, 1e-4) << "op " << op << " seed " << seed << ": " << report.worst;
    EXPECT_TRUE(loss.value().all_finite());
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradient, ::testing::Range(0, 20));

TEST(Tape, ReplayReproducesForwardExactly) {
  Rng rng(3);
  ParameterStore store;
  Parameter& w = store.add("w", random_tensor(rng, 3, 3));
  Tape tape;
  Var x = tape.constant(random_tensor(rng, 4, 3));
  Var y = softmax_rows(relu(matmul(x, tape.param(w))));
  Var loss = sum_all(mul(y, y));
  const Tensor before = loss.value();
  const Tensor y_before = y.value();
  tape.replay();
  EXPECT_TRUE(bit_identical(before, loss.value()));
  EXPECT_TRUE(bit_identical(y_before, y.value()));
}

TEST(Tape, BackwardVisitsEachNodeOnceInReverseOrder) {
  ParameterStore store;
  Parameter& w = store.add("w", Tensor::row({1.0, -2.0}));
  Tape tape;
  Var a = tape.param(w);
  Var b = mul(a, a);
  Var c = add(b, a);
  Var loss = sum_all(add(c, b));
  Gradients g = evaluate_with_gradients(tape, loss, store);
  ASSERT_FALSE(g.visit_order.empty());
  for (std::size_t i = 1; i < g.visit_order.size(); ++i) EXPECT_GT(g.visit_order[i - 1], g.visit_order[i]);
  // d/dw (2 w^2 + w) = 4w + 1
  EXPECT_DOUBLE_EQ(g.of("w")[0], 5.0);
  EXPECT_DOUBLE_EQ(g.of("w")[1], -7.0);
}

TEST(Tape, IdenticalSeedsGiveBitIdenticalForwardAndGradients) {
  auto run = [] {
    Rng rng(42);
    ParameterStore store;
    Parameter& w = store.add("w", random_tensor(rng, 3, 2));
    Tape tape;
    Var x = tape.constant(random_tensor(rng, 6, 3));
    Var loss = mean_all(sigmoid(matmul(x, tape.param(w))));
    Gradients g = evaluate_with_gradients(tape, loss, store);
    return std::make_pair(loss.value(), g.of("w"));
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  EXPECT_TRUE(bit_identical(l1, l2));
  EXPECT_TRUE(bit_identical(g1, g2));
}

TEST(Adam, FirstStepFromZeroWithUnitGradient) {
  ParameterStore store;
  store.add("theta", Tensor::scalar(0.0));
  AdamState adam(AdamConfig{});
  Gradients g(store);
  g[0] = Tensor::scalar(1.0);
  adam_step(adam, store, g);
  // m_hat = 1, v_hat = 1 after bias correction: update = lr / (1 + eps).
  const double expected = -0.001 / (1.0 + 1e-8);
  EXPECT_DOUBLE_EQ(store.at("theta").value.item(), expected);
  EXPECT_NEAR(store.at("theta").value.item(), -0.000999999, 1e-9);
  EXPECT_LT(std::abs(store.at("theta").value.item()), 0.001);
  EXPECT_EQ(adam.step(), 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterStore store;
  store.add("theta", Tensor::row({0.3, -1.2}));
  AdamState adam;
  for (int i = 0; i < 10; ++i) {
    Gradients g(store);
    adam_step(adam, store, g);
  }
  EXPECT_EQ(store.at("theta").value[0], 0.3);
  EXPECT_EQ(store.at("theta").value[1], -1.2);
  EXPECT_EQ(adam.step(), 10u);
}

TEST(Adam, IdenticalGradientsGiveIdenticalUpdates) {
  ParameterStore store;
  store.add("a", Tensor::row({0.5, 0.5}));
  store.add("b", Tensor::row({0.5, 0.5}));
  AdamState adam;
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    Gradients g(store);
    const double x = rng.normal(), y = rng.normal();
    g[0] = Tensor::row({x, y});
    g[1] = Tensor::row({x, y});
    adam_step(adam, store, g);
  }
  EXPECT_TRUE(bit_identical(store.at("a").value, store.at("b").value));
}

TEST(Adam, ShapeMismatchIsRejected) {
  ParameterStore store;
  store.add("a", Tensor::row({0.5, 0.5}));
  AdamState adam;
  Gradients g(store);
  g[0] = Tensor::row({1.0});
  EXPECT_THROW(adam_step(adam, store, g), ContractViolation);
}

TEST(Adam, RegistrationOrderDoesNotChangeUpdates) {
  Rng rng(9);
  const Tensor a0 = random_tensor(rng, 2, 3), b0 = random_tensor(rng, 3, 1);
  std::vector<std::pair<Tensor, Tensor>> grad_seq;
  for (int i = 0; i < 15; ++i) grad_seq.emplace_back(random_tensor(rng, 2, 3), random_tensor(rng, 3, 1));

  ParameterStore forward_order, reverse_order;
  forward_order.add("a", a0);
  forward_order.add("b", b0);
  reverse_order.add("b", b0);
  reverse_order.add("a", a0);
  AdamState s1, s2;
  for (const auto& [ga, gb] : grad_seq) {
    Gradients g1(forward_order), g2(reverse_order);
    g1[0] = ga;
    g1[1] = gb;
    g2[0] = gb;
    g2[1] = ga;
    adam_step(s1, forward_order, g1);
    adam_step(s2, reverse_order, g2);
  }
  EXPECT_TRUE(bit_identical(forward_order.at("a").value, reverse_order.at("a").value));
  EXPECT_TRUE(bit_identical(forward_order.at("b").value, reverse_order.at("b").value));
}

TEST(BatchNorm, TrainingNormalizesTwoValueColumn) {
  ParameterStore store;
  BatchNorm bn(store, "bn", 1);
  Tensor out = batch_norm(Tensor::column({-1.0, 1.0}), bn, Mode::kTrain);
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_DOUBLE_EQ(out[0], -expected);
  EXPECT_DOUBLE_EQ(out[1], expected);
}

TEST(BatchNorm, InferenceWithIdentityStatisticsIsIdentityUpToEpsilon) {
  ParameterStore store;
  BatchNorm bn(store, "bn", 2);
  Tensor x = Tensor::matrix(3, 2, {0.5, -2.0, 3.0, 0.0, -1.0, 7.0});
  Tensor out = batch_norm(x, bn, Mode::kServe);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out[i], x[i], 1e-4 * std::abs(x[i]) + 1e-12);
}

TEST(BatchNorm, TrainingOutputColumnHasZeroMean) {
  Rng rng(17);
  ParameterStore store;
  BatchNorm bn(store, "bn", 3);
  Tensor x = random_tensor(rng, 9, 3, 4.0);
  for (double& v : x.values()) v += 10.0;
  Tensor out = batch_norm(x, bn, Mode::kTrain);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < 9; ++r) mean += out(r, c);
    EXPECT_NEAR(mean / 9.0, 0.0, 1e-10);
  }
}

TEST(BatchNorm, SizeOneTrainingBatchIsRejected) {
  ParameterStore store;
  BatchNorm bn(store, "bn", 2);
  EXPECT_THROW(batch_norm(Tensor::row({1.0, 2.0}), bn, Mode::kTrain), ContractViolation);
}

TEST(BatchNorm, RunningStatisticsFollowMomentumAndStayPositive) {
  ParameterStore store;
  BatchNorm bn(store, "bn", 1);
  batch_norm(Tensor::column({2.0, 2.0, 2.0}), bn, Mode::kTrain);  // zero-variance batch
  EXPECT_DOUBLE_EQ(bn.running_mean()[0], 0.1 * 2.0);
  EXPECT_DOUBLE_EQ(bn.running_var()[0], 0.9);
  EXPECT_GT(bn.running_var()[0], 0.0);
}

TEST(BatchNorm, InferenceIsPerElementAffineIndependentOfBatch) {
  Rng rng(23);
  ParameterStore store;
  BatchNorm bn(store, "bn", 4);
  for (int i = 0; i < 5; ++i) batch_norm(random_tensor(rng, 8, 4, 2.0), bn, Mode::kTrain);
  bn.scale().value = random_tensor(rng, 1, 4);
  bn.shift().value = random_tensor(rng, 1, 4);
  Tensor x = random_tensor(rng, 6, 4);
  Tensor full = batch_norm(x, bn, Mode::kServe);
  for (std::size_t r = 0; r < 6; ++r) {
    Tensor single = batch_norm(Tensor::row(std::vector<double>(x.row_span(r).begin(), x.row_span(r).end())), bn,
                               Mode::kServe);
    for (std::size_t c = 0; c < 4; ++c) {
      const double affine = (x(r, c) - bn.running_mean()[c]) / std::sqrt(bn.running_var()[c] + 1e-5) *
                                bn.scale().value[c] +
                            bn.shift().value[c];
      EXPECT_NEAR(full(r, c), affine, 1e-12);
      EXPECT_TRUE(bit_identical(full(r, c), single[c]));
    }
  }
}

TEST(Checkpoint, ByteExactRoundTrip) {
  Rng rng(31);
  ParameterStore store;
  store.add("embedding.item", random_tensor(rng, 8, 5));
  store.add("scalar", Tensor::scalar(-0.0));
  store.add("bn.running_var", Tensor({1, 3}, std::vector<double>{1e-300, 5e300, 0.1}), false);
  store.add("rank3", Tensor({2, 1, 3}, std::vector<double>{1, 2, 3, 4, 5, 6}));
  const auto bytes = encode_checkpoint(snapshot(store));
  const auto decoded = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(decoded), bytes);
  ASSERT_EQ(decoded.size(), 4u);
  EXPECT_EQ(decoded[0].name, "embedding.item");
  EXPECT_TRUE(bit_identical(decoded[1].tensor, store.at("scalar").value));

  // Header layout: magic, version u32 = 1, count u64 = 4, then first name length.
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SRNT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 4);
  EXPECT_EQ(bytes[16], 14);  // strlen("embedding.item")
}

TEST(Checkpoint, FileRoundTripAndShapeMismatch) {
  Rng rng(37);
  ParameterStore store;
  store.add("w", random_tensor(rng, 3, 2));
  const auto path = (std::filesystem::temp_directory_path() / "sarnet_ckpt_test.bin").string();
  save_checkpoint(path, store);
  ParameterStore other;
  other.add("w", Tensor::zeros(3, 2));
  load_checkpoint(path, other);
  EXPECT_TRUE(bit_identical(other.at("w").value, store.at("w").value));
  ParameterStore wrong;
  wrong.add("w", Tensor::zeros(2, 3));
  EXPECT_THROW(load_checkpoint(path, wrong), DataError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace sarnet
