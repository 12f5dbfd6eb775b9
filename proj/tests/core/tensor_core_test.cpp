#include <mucodec/core/adam.hpp>
#include <mucodec/core/checkpoint.hpp>

#include <gtest/gtest.h>

#include <filesystem>

#include "support/gradcheck.hpp"

namespace mucodec {
namespace {

using testing::check_input;
using testing::check_params;
using D = double;

Tensor<D> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return normal_tensor<D>(Shape{r, c}, scale, rng);
}

TEST(Backward, SumGivesOnes) {
  Graph<D> g;
  auto x = g.input(Tensor<D>(Shape{3}, std::vector<D>{0.5, -1, 2}));
  g.backward(ops::sum(x));
  EXPECT_EQ(g.grad(x).vec(), (std::vector<D>{1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  Graph<D> g;
  auto x = g.input(Tensor<D>(Shape{2}, std::vector<D>{1, 2}));
  g.backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(g.grad(x).vec(), (std::vector<D>{2, 4}));
}

TEST(Backward, RejectsNonScalarRoot) {
  Graph<D> g;
  auto x = g.input(Tensor<D>(Shape{2}, std::vector<D>{1, 2}));
  EXPECT_THROW(g.backward(ops::square(x)), std::invalid_argument);
}

TEST(Backward, UnreachableLeafGetsZero) {
  Graph<D> g;
  auto x = g.input(Tensor<D>(Shape{2}, std::vector<D>{1, 2}));
  auto y = g.input(Tensor<D>(Shape{2}, std::vector<D>{3, 4}));
  g.backward(ops::sum(x));
  EXPECT_EQ(g.grad(y).vec(), (std::vector<D>{0, 0}));
}

TEST(Backward, MlpMatchesFiniteDifferences) {
  Rng rng(11);
  nn::Linear<D> l1(5, 8, rng), l2(8, 1, rng);
  for (auto& v : l1.bias.value.vec()) v = 0.1;
  NamedParams<D> params;
  l1.collect(params, "l1");
  l2.collect(params, "l2");
  const Tensor<D> x = random_matrix(4, 5, 3);
  auto loss = [&](Graph<D>& g) { return ops::sum(l2(ops::tanh(l1(g.constant(x))))); };
  auto res = check_params(loss, params, 40, 5);
  EXPECT_GE(res.checked, 30u);
  EXPECT_LT(res.max_rel_error, 1e-6);
}

// Every differentiable primitive against the finite-difference oracle, over
// ten random inputs each.
struct PrimitiveCase {
  const char* name;
  std::size_t rows, cols;
  std::function<Var<D>(Graph<D>&, Var<D>)> fn;
};

std::vector<PrimitiveCase> primitive_cases() {
  const Tensor<D> w = random_matrix(4, 3, 101);
  const Tensor<D> row = random_matrix(1, 4, 102);
  const Tensor<D> other = random_matrix(5, 4, 103);
  const Tensor<D> conv_w = random_matrix(3 * 4, 2, 104);
  const Tensor<D> dw = random_matrix(3, 4, 105);
  const Tensor<D> gamma = random_matrix(1, 4, 106);
  auto weighted = [](Graph<D>& g, Var<D> y) {
    // Non-uniform readout so that shift-invariant ops still get a gradient.
    Tensor<D> r(y.value().shape());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::sin(0.7 * double(i) + 0.3);
    return ops::sum(ops::mul(y, g.constant(r)));
  };
  return {
      {"add_row", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::add(x, g.constant(row))); }},
      {"add_row_grad_to_row", 1, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::add(g.constant(other), x)); }},
      {"sub", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::sub(g.constant(other), x)); }},
      {"mul", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::mul(x, g.constant(other))); }},
      {"mul_row", 1, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::mul(g.constant(other), x)); }},
      {"square", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::square(x)); }},
      {"abs", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::abs(x)); }},
      {"exp", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::exp(x)); }},
      {"log", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::log(ops::add_scalar(ops::square(x), 0.5))); }},
      {"tanh", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::tanh(x)); }},
      {"sigmoid", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::sigmoid(x)); }},
      {"silu", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::silu(x)); }},
      {"gelu", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::gelu(x)); }},
      {"relu", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::relu(x)); }},
      {"mean", 5, 4, [=](Graph<D>&, Var<D> x) { return ops::mean(ops::square(x)); }},
      {"sum_rows", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::sum_rows(x)); }},
      {"matmul_lhs", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::matmul(x, g.constant(w))); }},
      {"matmul_rhs", 4, 3, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::matmul(g.constant(other), x)); }},
      {"matmul_nt", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::matmul_nt(x, x)); }},
      {"transpose", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::transpose(x)); }},
      {"slice_cols", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::slice_cols(x, 1, 3)); }},
      {"slice_rows", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::slice_rows(x, 1, 4)); }},
      {"concat_cols", 5, 4,
       [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::concat_cols<D>({x, ops::square(x)})); }},
      {"concat_rows", 5, 4,
       [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::concat_rows<D>({ops::tanh(x), x})); }},
      {"repeat_rows", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::repeat_rows(x, 3)); }},
      {"gather_rows", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::gather_rows(x, {4, 0, 4, 2})); }},
      {"select_rows", 1, 4,
       [=](Graph<D>& g, Var<D> x) {
         return weighted(g, ops::select_rows(g.constant(other), x, {true, false, true, false, false}));
       }},
      {"softmax_rows", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::softmax_rows(x)); }},
      {"log_softmax_rows", 5, 4, [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::log_softmax_rows(x)); }},
      {"cross_entropy", 5, 4, [=](Graph<D>&, Var<D> x) { return ops::cross_entropy(x, {0, 3, 1, 1, 2}, {0, 2, 4}); }},
      {"layer_norm", 5, 4,
       [=](Graph<D>& g, Var<D> x) {
         return weighted(g, ops::layer_norm<D>(x, g.constant(gamma), g.constant(row), 1e-5));
       }},
      {"group_norm", 5, 4,
       [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::group_norm<D>(x, 2, g.constant(gamma), std::nullopt, 1e-6)); }},
      {"conv1d_stride2", 7, 4,
       [=](Graph<D>& g, Var<D> x) {
         return weighted(g, ops::conv1d<D>(x, g.constant(conv_w), g.constant(Tensor<D>(Shape{2}, 0.1)), 3, 2, 1, 1));
       }},
      {"conv1d_weight", 12, 2,
       [=](Graph<D>& g, Var<D> w) {
         return weighted(g, ops::conv1d<D>(g.constant(other), w, std::nullopt, 3, 1, 1, 1));
       }},
      {"depthwise_conv1d", 6, 4,
       [=](Graph<D>& g, Var<D> x) { return weighted(g, ops::depthwise_conv1d<D>(x, g.constant(dw), std::nullopt)); }},
      {"depthwise_conv1d_weight", 3, 4,
       [=](Graph<D>& g, Var<D> w) {
         return weighted(g, ops::depthwise_conv1d<D>(g.constant(other), w, std::nullopt));
       }},
  };
}

TEST(Primitives, FiniteDifferenceOverTenRandomInputs) {
  for (const auto& c : primitive_cases()) {
    double worst = 0;
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
      auto res = check_input(c.fn, random_matrix(c.rows, c.cols, 1000 + trial));
      ASSERT_GT(res.checked, 0u) << c.name;
      worst = std::max(worst, res.max_rel_error);
    }
    EXPECT_LT(worst, 1e-5) << c.name;
  }
}

TEST(Backward, SharedSubexpressionAccumulatesLikeDuplicatedGraph) {
  const Tensor<D> x0 = random_matrix(3, 4, 7);
  const Tensor<D> w = random_matrix(4, 4, 8);
  Tensor<D> shared_grad, dup_grad;
  {
    Graph<D> g;
    auto x = g.input(x0);
    auto h = ops::tanh(ops::matmul(x, g.constant(w)));  // used twice
    g.backward(ops::sum(ops::mul(h, ops::sigmoid(h))));
    shared_grad = g.grad(x);
  }
  {
    Graph<D> g;
    auto x = g.input(x0);
    auto h1 = ops::tanh(ops::matmul(x, g.constant(w)));
    auto h2 = ops::tanh(ops::matmul(x, g.constant(w)));
    g.backward(ops::sum(ops::mul(h1, ops::sigmoid(h2))));
    dup_grad = g.grad(x);
  }
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(shared_grad[i], dup_grad[i], 1e-14);
}

TEST(Backward, ReusedParameterSumsPaths) {
  Parameter<D> p(Tensor<D>(Shape{1}, std::vector<D>{3.0}));
  Graph<D> g;
  auto a = g.param(p);
  auto b = g.param(p);
  g.backward(ops::sum(ops::mul(a, b)));  // p^2
  EXPECT_DOUBLE_EQ(p.grad[0], 6.0);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Parameter<D> p(Tensor<D>(Shape{3}, std::vector<D>{1, -2, 3}));
  Adam<D> opt({{"p", &p}}, AdamOptions{.lr = 0.1});
  for (int i = 0; i < 5; ++i) ASSERT_FALSE(opt.step().has_value());
  EXPECT_EQ(p.value.vec(), (std::vector<D>{1, -2, 3}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // t=1: m = 0.1, v = 0.001, mhat = vhat = 1 -> update = lr / (1 + eps).
  Parameter<D> p(Tensor<D>(Shape{1}, std::vector<D>{0.5}));
  Adam<D> opt({{"p", &p}}, AdamOptions{.lr = 0.1});
  p.grad[0] = 1.0;
  opt.step();
  EXPECT_NEAR(p.value[0], 0.5 - 0.1 / (1 + 1e-8), 1e-15);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(99);
    nn::Linear<float> lin(4, 3, rng);
    NamedParams<float> params;
    lin.collect(params, "lin");
    Adam<float> opt(params, AdamOptions{.lr = 1e-2});
    const Tensor<float> x = normal_tensor<float>(Shape{6, 4}, 1.0f, rng);
    for (int i = 0; i < 2; ++i) {
      Graph<float> g;
      g.backward(ops::mean(ops::square(lin(g.constant(x)))));
      opt.step();
    }
    return lin.weight.value.vec();
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, RejectsNonFiniteGradient) {
  Parameter<D> p(Tensor<D>(Shape{2}, std::vector<D>{1, 2}));
  Adam<D> opt({{"weights", &p}}, AdamOptions{.lr = 0.1});
  p.grad[1] = std::numeric_limits<D>::quiet_NaN();
  auto bad = opt.step();
  ASSERT_TRUE(bad.has_value());
  EXPECT_EQ(*bad, "weights");
  EXPECT_EQ(p.value.vec(), (std::vector<D>{1, 2}));
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(Attention, SingleKeyReturnsProjectedValue) {
  Rng rng(5);
  nn::MultiHeadAttention<D> mha(4, 1, rng);
  const Tensor<D> x = random_matrix(1, 4, 6);
  Graph<D> g;
  auto in = g.constant(x);
  auto out = mha(in, in, in);
  // softmax over one key is 1, so out = o(v(x)).
  auto expected = mha.o(mha.v(in));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.value()[i], expected.value()[i], 1e-12);
}

TEST(Attention, WeightsRowsSumToOne) {
  Rng rng(7);
  nn::MultiHeadAttention<float> mha(8, 2, rng);
  Graph<float> g;
  auto q = g.constant(normal_tensor<float>(Shape{5, 8}, 1.0f, rng));
  auto kv = g.constant(normal_tensor<float>(Shape{7, 8}, 1.0f, rng));
  std::vector<Tensor<float>> w;
  mha(q, kv, kv, std::nullopt, &w);
  ASSERT_EQ(w.size(), 2u);
  for (const auto& head : w)
    for (std::size_t r = 0; r < head.rows(); ++r) {
      double s = 0;
      for (float v : head.row(r)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  nn::MultiHeadAttention<D> mha(6, 3, rng);
  NamedParams<D> params;
  mha.collect(params, "attn");
  const Tensor<D> xq = random_matrix(4, 6, 9), xkv = random_matrix(5, 6, 10);
  Tensor<D> mask(Shape{4, 5});
  mask(0, 4) = -std::numeric_limits<D>::infinity();
  auto loss = [&](Graph<D>& g) {
    auto out = mha(g.constant(xq), g.constant(xkv), g.constant(xkv), mask);
    return ops::sum(ops::mul(out, ops::tanh(out)));
  };
  auto res = check_params(loss, params, 30, 12);
  EXPECT_GE(res.checked, 20u);
  EXPECT_LT(res.max_rel_error, 1e-5);
  auto in_res = check_input(
      [&](Graph<D>&, Var<D> x) { return ops::sum(ops::square(mha(x, x, x))); }, xkv);
  EXPECT_LT(in_res.max_rel_error, 1e-5);
}

TEST(Attention, RejectsIndivisibleHeads) {
  Rng rng(1);
  EXPECT_THROW(nn::MultiHeadAttention<float>(10, 3, rng), std::invalid_argument);
}

TEST(Forward, DeterministicUnderSeed) {
  auto run = [] {
    Rng rng(2024);
    nn::MultiHeadAttention<float> mha(8, 2, rng);
    nn::FeedForward<float> ff(8, 16, rng);
    Graph<float> g;
    auto x = g.constant(normal_tensor<float>(Shape{6, 8}, 1.0f, rng));
    return ff(mha(x, x, x)).value().vec();
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripsNamedTensorsAndMetadata) {
  Rng rng(3);
  nn::Linear<float> a(3, 2, rng);
  NamedParams<float> params;
  a.collect(params, "a");
  const auto path = (std::filesystem::temp_directory_path() / "mucodec_ck_test.bin").string();
  save_checkpoint(path, params, {{"kind", "test"}});
  auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.require_meta("kind"), "test");
  nn::Linear<double> b(3, 2, rng);
  NamedParams<double> bp;
  b.collect(bp, "a");
  restore(ck, bp);
  for (std::size_t i = 0; i < a.weight.value.size(); ++i) EXPECT_EQ(float(b.weight.value[i]), a.weight.value[i]);

  nn::Linear<double> wrong(4, 2, rng);
  NamedParams<double> wp;
  wrong.collect(wp, "a");
  EXPECT_THROW(restore(ck, wp), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  Rng rng(3);
  nn::Linear<float> a(3, 2, rng);
  NamedParams<float> params;
  a.collect(params, "a");
  auto bytes = encode_checkpoint(params, {});
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), std::runtime_error);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), io::TruncatedError);
}

}  // namespace
}  // namespace mucodec
