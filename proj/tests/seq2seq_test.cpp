#include <gtest/gtest.h>

#include <cmath>

#include "slt/ops.hpp"
#include "slt/seq2seq.hpp"
#include "test_util.hpp"

using namespace slt;
using slt::test::random_tensor;
using slt::test::to_vector;

namespace {

TransformerConfig desk_config() {
  TransformerConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ffn = 32;
  c.dropout = 0.1;
  return c;
}

void zero(BasicTensor<float>& t) {
  for (auto& v : t.mutable_data()) v = 0.f;
}

// Generator that ignores the hidden state and always emits `bias`.
void fix_output(Transformer<float>& model, const std::vector<std::pair<int, float>>& bias) {
  zero(model.output_projection().weight);
  zero(model.output_projection().bias);
  for (auto [id, v] : bias) model.output_projection().bias.mutable_data()[id] = v;
}

}  // namespace

TEST(PositionalEncoding, FirstRowAlternatesZeroOne) {
  auto pe = positional_encoding<double>(3, 8);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(pe[i], i % 2 == 0 ? 0.0 : 1.0);
}

TEST(PositionalEncoding, SecondRowMatchesClosedForm) {
  auto pe = positional_encoding<double>(2, 4);
  EXPECT_NEAR(pe[4], 0.84147, 1e-5);
  EXPECT_NEAR(pe[5], std::cos(1.0), 1e-12);
  EXPECT_NEAR(pe[6], std::sin(0.01), 1e-12);
  EXPECT_NEAR(pe[7], std::cos(0.01), 1e-12);
}

TEST(PositionalEncoding, ValuesStayInUnitRange) {
  auto pe = positional_encoding<float>(60, 512);
  for (float v : pe.data()) {
    EXPECT_GE(v, -1.f);
    EXPECT_LE(v, 1.f);
  }
}

TEST(PositionalEncoding, OddWidthIsConfigError) {
  EXPECT_THROW(positional_encoding<float>(4, 7), ConfigError);
  EXPECT_THROW(positional_encoding<float>(0, 8), ConfigError);
}

TEST(TransformerConfig, Validation) {
  TransformerConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Transformer, FullWidthEncoderKeepsShape) {
  SplitMix64 rng(1);
  Transformer<float> model(TransformerConfig{}, 32, 20, rng);
  NoGradGuard no_grad;
  auto memory = model.encode(random_tensor({32, 512}, rng));
  EXPECT_EQ(memory.shape(), (Shape{32, 512}));
}

TEST(Transformer, EncoderRejectsWrongSourceShape) {
  SplitMix64 rng(1);
  Transformer<float> model(desk_config(), 4, 11, rng);
  EXPECT_THROW(model.encode(random_tensor({5, 16}, rng)), DimensionError);
  EXPECT_THROW(model.encode(random_tensor({4, 8}, rng)), DimensionError);
}

TEST(Transformer, ZeroResidualBranchesReduceToStackedLayerNorms) {
  SplitMix64 rng(2);
  auto cfg = desk_config();
  cfg.n_layers = 1;
  Transformer<float> model(cfg, 4, 11, rng);
  auto& layer = model.encoder_layers()[0];
  zero(layer.self_attention.output.weight);
  zero(layer.self_attention.output.bias);
  zero(layer.ffn_out.weight);
  zero(layer.ffn_out.bias);
  auto x = random_tensor({4, 16}, rng, -2.0, 2.0);
  auto got = model.encode(x);
  auto ones = Tensor::full({16}, 1.f), zeros = Tensor::zeros({16});
  auto want = layer_norm(layer_norm(x, ones, zeros), ones, zeros);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6) << i;
}

TEST(Transformer, AttentionRowsSumToOne) {
  SplitMix64 rng(3);
  Transformer<float> model(desk_config(), 4, 11, rng);
  std::vector<Tensor> trace;
  ForwardContext<float> ctx;
  ctx.attention_trace = &trace;
  auto memory = model.encode(random_tensor({4, 16}, rng), ctx);
  const std::vector<int> inputs = {kBosId, 5, 6, 7, 8};
  model.decode(inputs, memory, ctx);
  ASSERT_EQ(trace.size(), 2u + 2u * 2u);
  for (const auto& probs : trace) {
    const std::size_t keys = probs.dim(2);
    for (std::size_t row = 0; row < probs.size() / keys; ++row) {
      double s = 0;
      for (std::size_t k = 0; k < keys; ++k) s += probs[row * keys + k];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Transformer, DecoderIsCausal) {
  SplitMix64 rng(4);
  Transformer<float> model(desk_config(), 4, 11, rng);
  auto memory = model.encode(random_tensor({4, 16}, rng));
  const std::vector<int> a = {kBosId, 5, 6, 7, 8};
  for (std::size_t t = 1; t < a.size(); ++t) {
    auto b = a;
    for (std::size_t j = t; j < b.size(); ++j) b[j] = 4 + (b[j] - 4 + 3) % 7;
    auto la = model.decode(a, memory), lb = model.decode(b, memory);
    for (std::size_t i = 0; i < t * 11; ++i) EXPECT_EQ(la[i], lb[i]) << t << " " << i;
    bool later_differs = false;
    for (std::size_t i = t * 11; i < la.size(); ++i) later_differs |= la[i] != lb[i];
    EXPECT_TRUE(later_differs) << t;
  }
}

TEST(Transformer, DeskLogitsShape) {
  SplitMix64 rng(5);
  Transformer<float> model(desk_config(), 4, 11, rng);
  auto memory = model.encode(random_tensor({4, 16}, rng));
  const std::vector<int> inputs = {kBosId, 4, 5, 6, 7};
  EXPECT_EQ(model.decode(inputs, memory).shape(), (Shape{5, 11}));
}

TEST(Transformer, OverlongDecoderInputIsContractError) {
  SplitMix64 rng(6);
  Transformer<float> model(desk_config(), 4, 11, rng);
  auto memory = model.encode(random_tensor({4, 16}, rng));
  std::vector<int> inputs(52, 5);
  inputs[0] = kBosId;
  EXPECT_THROW(model.decode(inputs, memory), ContractError);
  inputs.pop_back();
  EXPECT_NO_THROW(model.decode(inputs, memory));
  EXPECT_THROW(model.decode(std::vector<int>{}, memory), ContractError);
}

TEST(Transformer, DropoutOnlyWhenTraining) {
  SplitMix64 rng(7);
  Transformer<float> model(desk_config(), 4, 11, rng);
  auto source = random_tensor({4, 16}, rng);
  auto a = model.encode(source), b = model.encode(source);
  EXPECT_EQ(to_vector(a), to_vector(b));
  SplitMix64 drop_rng(1);
  ForwardContext<float> ctx{true, &drop_rng, nullptr};
  EXPECT_NE(to_vector(model.encode(source, ctx)), to_vector(a));
}

TEST(GreedyDecode, ImmediateEosGivesEmptyOutput) {
  SplitMix64 rng(8);
  Transformer<float> model(desk_config(), 4, 11, rng);
  fix_output(model, {{kEosId, 1.f}});
  auto memory = model.encode(random_tensor({4, 16}, rng));
  EXPECT_TRUE(model.greedy_decode(memory).empty());
}

TEST(GreedyDecode, NeverEosStopsAtMaxLength) {
  SplitMix64 rng(9);
  Transformer<float> model(desk_config(), 4, 11, rng);
  fix_output(model, {{5, 1.f}});
  auto memory = model.encode(random_tensor({4, 16}, rng));
  EXPECT_EQ(model.greedy_decode(memory), std::vector<int>(50, 5));
}

TEST(GreedyDecode, TiesPickLowestId) {
  SplitMix64 rng(10);
  Transformer<float> model(desk_config(), 4, 11, rng);
  fix_output(model, {{7, 2.f}, {3, 2.f}});
  auto memory = model.encode(random_tensor({4, 16}, rng));
  EXPECT_EQ(model.greedy_decode(memory), std::vector<int>(50, 3));
}

TEST(GreedyDecode, DeterministicForFixedParameters) {
  SplitMix64 rng(11);
  Transformer<float> model(desk_config(), 4, 11, rng);
  auto memory = model.encode(random_tensor({4, 16}, rng));
  EXPECT_EQ(model.greedy_decode(memory), model.greedy_decode(memory));
}

TEST(Postprocess, DropsSpecialsAndJoinsWithSpaces) {
  auto vocab = Vocabulary::build({{"Die", "."}, {"Und"}});
  auto ids = [&](std::vector<std::string> toks) {
    std::vector<int> out;
    for (auto& t : toks) out.push_back(vocab.id(t));
    return out;
  };
  EXPECT_EQ(postprocess_output(std::vector<int>{vocab.id("Die"), kUnkId, kUnkId, vocab.id(".")},
                               vocab),
            "Die .");
  EXPECT_EQ(postprocess_output(std::vector<int>{kUnkId, kUnkId}, vocab), "");
  EXPECT_EQ(postprocess_output(ids({"Und", "."}), vocab), "Und .");
  EXPECT_EQ(postprocess_output(std::vector<int>{}, vocab), "");
}
