#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <unordered_set>

#include "slt/gradcheck.hpp"
#include "slt/ops.hpp"
#include "test_util.hpp"

using namespace slt;
using slt::test::random_tensor;
using slt::test::to_vector;

namespace {

// Direct six-fold loop; independent of the im2col/GEMM path under test.
std::vector<double> naive_conv3d(const Tensor& x, const Tensor& w, Extent3 s, Extent3 p) {
  const long ci = long(x.dim(0)), d = long(x.dim(1)), h = long(x.dim(2)), wd = long(x.dim(3));
  const long co = long(w.dim(0)), kd = long(w.dim(2)), kh = long(w.dim(3)), kw = long(w.dim(4));
  const long od = (d + 2 * long(p[0]) - kd) / long(s[0]) + 1;
  const long oh = (h + 2 * long(p[1]) - kh) / long(s[1]) + 1;
  const long ow = (wd + 2 * long(p[2]) - kw) / long(s[2]) + 1;
  std::vector<double> out;
  for (long o = 0; o < co; ++o)
    for (long z = 0; z < od; ++z)
      for (long y = 0; y < oh; ++y)
        for (long xx = 0; xx < ow; ++xx) {
          double acc = 0.0;
          for (long c = 0; c < ci; ++c)
            for (long a = 0; a < kd; ++a)
              for (long b = 0; b < kh; ++b)
                for (long e = 0; e < kw; ++e) {
                  const long id = z * long(s[0]) + a - long(p[0]);
                  const long ih = y * long(s[1]) + b - long(p[1]);
                  const long iw = xx * long(s[2]) + e - long(p[2]);
                  if (id < 0 || id >= d || ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
                  acc += double(x[std::size_t(((c * d + id) * h + ih) * wd + iw)]) *
                         w[std::size_t((((o * ci + c) * kd + a) * kh + b) * kw + e)];
                }
          out.push_back(acc);
        }
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(to_vector(matmul(eye, m)), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Matmul, ZeroColumn) {
  Tensor m({2, 2}, {1, 2, 3, 4});
  Tensor z({2, 1}, {0, 0});
  auto c = matmul(m, z);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(to_vector(c), (std::vector<float>{0, 0}));
}

TEST(Matmul, HandComputedProduct) {
  Tensor m({2, 2}, {1, 2, 3, 4});
  Tensor v({2, 1}, {5, 6});
  EXPECT_EQ(to_vector(matmul(m, v)), (std::vector<float>{17, 39}));
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  Tensor a({2, 3}, std::vector<float>(6, 1.f));
  Tensor b({2, 2}, std::vector<float>(4, 1.f));
  EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Matmul, BatchedMatchesPerSlice) {
  SplitMix64 rng(3);
  auto a = random_tensor({3, 2, 4}, rng);
  auto b = random_tensor({3, 4, 5}, rng);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < 4; ++k) acc += double(a[s * 8 + i * 4 + k]) * b[s * 20 + k * 5 + j];
        EXPECT_NEAR(c[s * 10 + i * 5 + j], acc, 1e-5);
      }
}

TEST(Conv3d, UnitKernelIsIdentity) {
  SplitMix64 rng(1);
  auto x = random_tensor({1, 3, 4, 5}, rng);
  Tensor k({1, 1, 1, 1, 1}, {1.f});
  auto y = conv3d(x, k, {1, 1, 1}, {0, 0, 0});
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(to_vector(y), to_vector(x));
}

TEST(Conv3d, ZeroKernelGivesZeros) {
  SplitMix64 rng(2);
  auto x = random_tensor({2, 3, 3, 3}, rng);
  auto k = Tensor::zeros({3, 2, 2, 2, 2});
  auto y = conv3d(x, k, {1, 1, 1}, {1, 1, 1});
  for (float v : y.data()) EXPECT_EQ(v, 0.f);
}

TEST(Conv3d, AllOnesWindowSumsToEight) {
  auto x = Tensor::full({1, 2, 2, 2}, 1.f);
  auto k = Tensor::full({1, 1, 2, 2, 2}, 1.f);
  auto y = conv3d(x, k, {1, 1, 1}, {0, 0, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 8.f);
}

TEST(Conv3d, KernelLargerThanPaddedInputThrows) {
  auto x = Tensor::full({1, 2, 2, 2}, 1.f);
  auto k = Tensor::full({1, 1, 3, 3, 3}, 1.f);
  EXPECT_THROW(conv3d(x, k, {1, 1, 1}, {0, 0, 0}), DimensionError);
  EXPECT_NO_THROW(conv3d(x, k, {1, 1, 1}, {1, 1, 1}));
}

TEST(Conv3d, MatchesNaiveLoopAcrossStridesAndPadding) {
  SplitMix64 rng(11);
  struct Case {
    Shape x, k;
    Extent3 s, p;
  };
  const std::vector<Case> cases = {
      {{2, 5, 6, 7}, {3, 2, 3, 3, 3}, {1, 1, 1}, {1, 1, 1}},
      {{3, 7, 9, 8}, {4, 3, 3, 3, 3}, {2, 2, 2}, {1, 1, 1}},
      {{2, 4, 5, 5}, {2, 2, 1, 1, 1}, {2, 2, 2}, {0, 0, 0}},
      {{3, 6, 8, 8}, {2, 3, 7, 7, 7}, {1, 2, 2}, {3, 3, 3}},
      // Large enough that the lowering is split across several depth chunks.
      {{8, 20, 64, 64}, {2, 8, 3, 3, 3}, {1, 1, 1}, {1, 1, 1}},
  };
  for (const auto& c : cases) {
    auto x = random_tensor(c.x, rng);
    auto k = random_tensor(c.k, rng);
    auto y = conv3d(x, k, c.s, c.p);
    auto ref = naive_conv3d(x, k, c.s, c.p);
    ASSERT_EQ(y.size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-4) << i;
  }
}

TEST(Softmax, SymmetricPairIsHalf) {
  auto y = softmax(Tensor({2}, {0.f, 0.f}));
  EXPECT_FLOAT_EQ(y[0], 0.5f);
  EXPECT_FLOAT_EQ(y[1], 0.5f);
}

TEST(Softmax, ClosedFormValues) {
  auto y = softmax(Tensor({3}, {1.f, 2.f, 3.f}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y[0], std::exp(1.0) / z, 1e-6);
  EXPECT_NEAR(y[1], std::exp(2.0) / z, 1e-6);
  EXPECT_NEAR(y[2], std::exp(3.0) / z, 1e-6);
  EXPECT_NEAR(y[0], 0.09003, 1e-5);
  EXPECT_NEAR(y[1], 0.24473, 1e-5);
  EXPECT_NEAR(y[2], 0.66524, 1e-5);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape shape{1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4)};
    const int axis = int(rng.below(3));
    auto x = random_tensor(shape, rng, -5, 5);
    const float shift = float(rng.uniform(-10, 10));
    auto shifted = x.detach();
    for (auto& v : shifted.mutable_data()) v += shift;
    auto y = softmax(x, axis);
    auto ys = softmax(shifted, axis);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ys[i], 1e-6);

    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[std::size_t(i)];
    for (std::size_t i = std::size_t(axis) + 1; i < 3; ++i) inner *= shape[i];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double total = 0;
        for (std::size_t j = 0; j < shape[std::size_t(axis)]; ++j)
          total += y[(o * shape[std::size_t(axis)] + j) * inner + in];
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
  }
}

TEST(LayerNorm, ConstantRowBecomesZero) {
  auto y = layer_norm(Tensor::full({4}, 3.f), Tensor::full({4}, 1.f), Tensor::zeros({4}));
  for (float v : y.data()) EXPECT_EQ(v, 0.f);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  SplitMix64 rng(9);
  auto x = random_tensor({3, 4}, rng);
  Tensor bias({4}, {0.5f, -1.f, 2.f, 0.f});
  auto y = layer_norm(x, Tensor::zeros({4}), bias);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], bias[i % 4]);
}

TEST(LayerNorm, TwoValueRowWithoutEps) {
  auto y = layer_norm(Tensor({2}, {1.f, 3.f}), Tensor::full({2}, 1.f), Tensor::zeros({2}), 0.0);
  EXPECT_FLOAT_EQ(y[0], -1.f);
  EXPECT_FLOAT_EQ(y[1], 1.f);
}

TEST(LayerNorm, GainExtentMismatchThrows) {
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({2}), Tensor::zeros({3})),
               DimensionError);
}

TEST(Backward, SumGivesOnes) {
  SplitMix64 rng(4);
  auto x = random_tensor({2, 3}, rng, -1, 1, true);
  backward(sum(x));
  for (float g : x.grad()) EXPECT_EQ(g, 1.f);
}

TEST(Backward, HalfSquaredNormGivesInput) {
  SplitMix64 rng(4);
  auto x = random_tensor({5}, rng, -1, 1, true);
  backward(scale(sum(mul(x, x)), 0.5));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_FLOAT_EQ(x.grad()[i], x[i]);
}

TEST(Backward, ConvReluSumMatchesFiniteDifferences) {
  SplitMix64 rng(21);
  auto x = random_tensor({1, 3, 3, 3}, rng, -1, 1, true);
  auto k = random_tensor({1, 1, 2, 2, 2}, rng, -1, 1, true);
  auto f = [&] { return sum(relu(conv3d(x, k, {1, 1, 1}, {0, 0, 0}))); };
  auto report = gradcheck<float>(f, {x, k});
  EXPECT_TRUE(report.pass) << report.max_rel_err;
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::full({3}, 1.f, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  auto x = Tensor::full({3}, 2.f, true);
  auto loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  for (float g : x.grad()) EXPECT_EQ(g, 8.f);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, DeterministicBitwise) {
  SplitMix64 rng(8);
  auto x = random_tensor({1, 4, 4, 4}, rng, -1, 1, true);
  auto k = random_tensor({2, 1, 3, 3, 3}, rng, -1, 1, true);
  auto loss = sum(softmax(relu(conv3d(x, k, {1, 1, 1}, {1, 1, 1})), 1));
  backward(loss);
  auto first = to_vector(x);
  std::vector<float> gx(x.grad().begin(), x.grad().end());
  std::vector<float> gk(k.grad().begin(), k.grad().end());
  x.zero_grad();
  k.zero_grad();
  backward(loss);
  EXPECT_EQ(std::vector<float>(x.grad().begin(), x.grad().end()), gx);
  EXPECT_EQ(std::vector<float>(k.grad().begin(), k.grad().end()), gk);
}

TEST(Tape, TopologicalAndVisitsEachNodeOnce) {
  SplitMix64 rng(12);
  auto a = random_tensor({2, 2}, rng, -1, 1, true);
  auto b = random_tensor({2, 2}, rng, -1, 1, true);
  auto shared = matmul(a, b);
  auto loss = sum(add(relu(shared), mul(shared, a)));
  auto tape = Tape<float>::record(loss);
  std::unordered_set<const Node<float>*> seen;
  for (const auto* node : tape.nodes()) {
    EXPECT_TRUE(seen.insert(node).second);
    for (const auto& in : node->inputs) {
      if (in->requires_grad) EXPECT_TRUE(seen.count(in.get())) << node->op;
    }
  }
  EXPECT_EQ(tape.nodes().back(), loss.node());
  EXPECT_EQ(tape.size(), 7u);  // a, b, matmul, relu, mul, add, sum
}

TEST(NoGrad, ResultsCarryNoHistory) {
  auto x = Tensor::full({2}, 1.f, true);
  NoGradGuard guard;
  auto y = sum(scale(x, 3.0));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->inputs.empty());
}

TEST(Numeric, NonFiniteForwardThrows) {
  auto x = Tensor::full({2}, 1.f);
  EXPECT_THROW(scale(x, std::numeric_limits<double>::infinity()), NumericError);
}

TEST(Gradcheck, LinearFunctionIsExact) {
  SplitMix64 rng(13);
  auto w = random_tensor<double>({6}, rng);
  auto report = gradcheck<double>(
      std::function<TensorD(const TensorD&)>([&](const TensorD& x) { return sum(mul(x, w)); }),
      random_tensor<double>({6}, rng));
  EXPECT_TRUE(report.pass);
  EXPECT_LT(report.max_rel_err, 1e-9);
}

TEST(Gradcheck, SoftmaxSumPasses) {
  SplitMix64 rng(14);
  auto report = gradcheck<float>(
      std::function<Tensor(const Tensor&)>([](const Tensor& x) { return sum(softmax(x)); }),
      random_tensor({2, 4}, rng));
  EXPECT_TRUE(report.pass) << report.max_rel_err;
}

TEST(Gradcheck, CorruptedBackwardRuleFails) {
  // y = 3x whose recorded rule claims dy/dx = 2.
  auto broken = [](const Tensor& x) {
    auto node = std::make_shared<Node<float>>();
    node->shape = x.shape();
    for (float v : x.data()) node->value.push_back(3.f * v);
    if (grad_enabled() && x.requires_grad()) {
      node->requires_grad = true;
      node->inputs.push_back(x.node_ptr());
      node->backward_fn = [](Node<float>& self) {
        float* d = self.inputs[0]->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += 2.f * self.grad[i];
      };
    }
    return sum(Tensor::from_node(node));
  };
  SplitMix64 rng(15);
  auto report = gradcheck<float>(std::function<Tensor(const Tensor&)>(broken),
                                 random_tensor({4}, rng));
  EXPECT_FALSE(report.pass);
  EXPECT_NEAR(report.max_rel_err, 1.0 / 3.0, 1e-3);
}

TEST(Gradcheck, NonScalarFunctionIsContractError) {
  EXPECT_THROW(gradcheck<float>(std::function<Tensor(const Tensor&)>(
                                    [](const Tensor& x) { return scale(x, 1.0); }),
                                Tensor::full({2}, 1.f)),
               ContractError);
}

// Every differentiable op against central differences, on random f32 tensors
// with extents <= 4, through a random linear read-out.
TEST(Gradcheck, EveryOpPassesInFloat) {
  SplitMix64 rng(2024);
  auto extent = [&] { return std::size_t(1 + rng.below(4)); };
  using Op = std::function<Tensor(std::vector<Tensor>&)>;
  struct Case {
    const char* name;
    std::vector<Shape> inputs;
    Op op;
    bool kinked = false;  // needs inputs spaced away from non-differentiable points
  };
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t m = extent(), k = extent(), n = extent(), c = extent();
    const std::size_t d = 2 + rng.below(3), h = 2 + rng.below(3), w = 2 + rng.below(3);
    const std::size_t groups = (c % 2 == 0) ? 2 : 1;
    std::vector<int> ids = {int(rng.below(m)), int(rng.below(m)), int(rng.below(m))};
    const std::vector<Case> cases = {
        {"matmul", {{m, k}, {k, n}}, [](auto& in) { return matmul(in[0], in[1]); }},
        {"bmm", {{2, m, k}, {2, k, n}}, [](auto& in) { return matmul(in[0], in[1]); }},
        {"transpose", {{m, k, n}}, [](auto& in) { return transpose(in[0], 0, 2); }},
        {"reshape", {{m, k}}, [m, k](auto& in) { return reshape(in[0], {k * m}); }},
        {"add", {{m, k}, {m, k}}, [](auto& in) { return add(in[0], in[1]); }},
        {"sub", {{m, k}, {m, k}}, [](auto& in) { return sub(in[0], in[1]); }},
        {"mul", {{m, k}, {m, k}}, [](auto& in) { return mul(in[0], in[1]); }},
        {"add_bias", {{m, k}, {k}}, [](auto& in) { return add_bias(in[0], in[1]); }},
        {"scale", {{m, k}}, [](auto& in) { return scale(in[0], -1.7); }},
        {"relu", {{m, k}}, [](auto& in) { return relu(in[0]); }, true},
        {"softmax0", {{m, k, n}}, [](auto& in) { return softmax(in[0], 0); }},
        {"softmax", {{m, k}}, [](auto& in) { return softmax(in[0]); }},
        {"log_softmax", {{m, k}}, [](auto& in) { return log_softmax(in[0]); }},
        {"layer_norm", {{m, k + 1}, {k + 1}, {k + 1}},
         [](auto& in) { return layer_norm(in[0], in[1], in[2]); }},
        {"group_norm", {{c, d, h}, {c}, {c}},
         [groups](auto& in) { return group_norm(in[0], in[1], in[2], groups); }},
        {"conv3d", {{c, d, h, w}, {2, c, 2, 2, 2}},
         [](auto& in) { return conv3d(in[0], in[1], {1, 1, 1}, {1, 0, 1}); }},
        {"conv3d_strided", {{c, d + 1, h + 1, w + 1}, {2, c, 3, 3, 3}},
         [](auto& in) { return conv3d(in[0], in[1], {2, 2, 2}, {1, 1, 1}); }},
        {"conv3d_pointwise", {{c, d, h, w}, {3, c, 1, 1, 1}},
         [](auto& in) { return conv3d(in[0], in[1], {1, 1, 1}, {0, 0, 0}); }},
        {"max_pool3d", {{c, d, h, w}},
         [](auto& in) { return max_pool3d(in[0], {2, 2, 2}, {2, 2, 2}, {1, 1, 1}); }, true},
        {"global_avg_pool", {{c, d, h}}, [](auto& in) { return global_avg_pool(in[0]); }},
        {"embedding", {{m, k}}, [ids](auto& in) { return embedding(in[0], ids); }},
        {"sum", {{m, k}}, [](auto& in) { return sum(in[0]); }},
        {"mean", {{m, k}}, [](auto& in) { return mean(in[0]); }},
    };
    for (const auto& cs : cases) {
      std::vector<Tensor> inputs;
      for (const auto& s : cs.inputs) inputs.push_back(random_tensor(s, rng, -1, 1, true));
      if (cs.kinked) {
        // Distinct values in [-1,1] spaced wider than the finite-difference
        // step, none near zero: no kink or tie lies within reach.
        auto v = inputs[0].mutable_data();
        std::vector<float> grid(v.size());
        for (std::size_t i = 0; i < grid.size(); ++i) {
          grid[i] = float(i + 1) / float(grid.size() + 1) * (i % 2 ? 1.f : -1.f);
        }
        rng.shuffle(grid.begin(), grid.end());
        std::copy(grid.begin(), grid.end(), v.begin());
      }
      Tensor readout;
      {
        NoGradGuard g;
        readout = random_tensor(cs.op(inputs).shape(), rng);
      }
      auto f = [&] { return sum(mul(cs.op(inputs), readout)); };
      auto report = gradcheck<float>(f, inputs);
      EXPECT_TRUE(report.pass) << cs.name << " trial " << trial << " err " << report.max_rel_err
                               << " analytic " << report.worst_analytic << " numeric "
                               << report.worst_numeric;
    }
  }
}
