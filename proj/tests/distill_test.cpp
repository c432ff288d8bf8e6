#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "grad_fixtures.hpp"
#include "kdwb/distill.hpp"

namespace kdwb {
namespace {

using testing::composite;
using testing::make_toy;
using testing::ToyPair;

constexpr double kE = 2.718281828459045235;

Tensor random_logits(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double spread) {
  std::uniform_real_distribution<double> u(-spread, spread);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = u(rng);
  return Tensor({rows, cols}, std::move(v));
}

TEST(SoftmaxTemp, Examples) {
  const Tensor z = Tensor::matrix({{0.3, -1.2, 2.5}});
  const auto a = softmax_temp(z, 1.0);
  const auto b = softmax_rows(z);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.data()[i], b.data()[i]);

  for (double t : {0.1, 1.0, 7.0}) {
    const auto p = softmax_temp(Tensor::matrix({{0.0, 0.0}}), t);
    EXPECT_EQ(p.data()[0], 0.5);
    EXPECT_EQ(p.data()[1], 0.5);
  }
  const auto p = softmax_temp(Tensor::matrix({{2.0, 0.0}}), 2.0);
  EXPECT_NEAR(p.data()[0], 0.731058578630004879, 1e-15);
  EXPECT_NEAR(p.data()[1], 0.268941421369995121, 1e-15);
  EXPECT_NEAR(p.data()[0], kE / (kE + 1.0), 1e-15);

  EXPECT_THROW(softmax_temp(z, 0.0), ConfigError);
  EXPECT_THROW(softmax_temp(z, -1.0), ConfigError);
}

TEST(SoftmaxTemp, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double t = 0.25 + 0.05 * trial;
    const Tensor z = random_logits(rng, 3, 5, 8.0);
    std::vector<double> shifted(z.data().begin(), z.data().end());
    for (std::size_t r = 0; r < 3; ++r) {
      const double c = shift(rng);
      for (std::size_t j = 0; j < 5; ++j) shifted[r * 5 + j] += c;
    }
    const auto p = softmax_temp(z, t);
    const auto q = softmax_temp(Tensor({3, 5}, shifted), t);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 5; ++j) s += p.at(r, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
    for (std::size_t i = 0; i < 15; ++i) EXPECT_NEAR(p.data()[i], q.data()[i], 1e-12);
  }
}

TEST(KdLoss, Oracle) {
  // KL([e²,1]/(e²+1) || [1/2,1/2]), evaluated at 50 digits.
  const auto loss = kd_response_loss(Tensor::matrix({{2.0, 0.0}}), Tensor::matrix({{0.0, 0.0}}), 1.0);
  EXPECT_NEAR(loss.item(), 0.327813325472737701, 1e-14);
}

TEST(KdLoss, T2ScalingAndBatchMean) {
  const Tensor zt = Tensor::matrix({{2.0, 0.0}, {2.0, 0.0}});
  const Tensor zs = Tensor::matrix({{0.0, 0.0}, {0.0, 0.0}});
  const double plain = kd_response_loss(zt, zs, 2.0).item();
  EXPECT_NEAR(kd_response_loss(zt, zs, 2.0, true).item(), 4.0 * plain, 1e-15);
  const double single = kd_response_loss(Tensor::matrix({{2.0, 0.0}}), Tensor::matrix({{0.0, 0.0}}), 2.0).item();
  EXPECT_NEAR(plain, single, 1e-15);
}

TEST(KdLoss, ZeroIffSameDistributionAndNonnegative) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> shift(-20.0, 20.0);
  for (int trial = 0; trial < 500; ++trial) {
    const double t = 0.5 + 0.01 * trial;
    const Tensor zt = random_logits(rng, 4, 3, 6.0);
    const Tensor zs = random_logits(rng, 4, 3, 6.0);
    EXPECT_EQ(kd_response_loss(zt, zt, t).item(), 0.0);
    EXPECT_GT(kd_response_loss(zt, zs, t).item(), 0.0);
    // A per-row shift induces the same distribution.
    std::vector<double> shifted(zt.data().begin(), zt.data().end());
    for (std::size_t r = 0; r < 4; ++r) {
      const double c = shift(rng);
      for (std::size_t j = 0; j < 3; ++j) shifted[r * 3 + j] += c;
    }
    const double same = kd_response_loss(zt, Tensor({4, 3}, shifted), t).item();
    EXPECT_LT(std::abs(same), 1e-13);
  }
}

TEST(KdLoss, NoGradientIntoTeacher) {
  Tensor zt({2, 3}, {0.2, -0.4, 1.0, 0.5, 0.5, -2.0}, true);
  Tensor zs({2, 3}, {0.0, 0.1, 0.2, -0.3, 0.9, 0.4}, true);
  backward(kd_response_loss(zt, zs, 2.0));
  EXPECT_TRUE(zs.has_grad());
  if (zt.has_grad()) {
    for (double g : zt.grad()) EXPECT_EQ(g, 0.0);
  }
  EXPECT_THROW(kd_response_loss(zt, Tensor::zeros({2, 2}), 2.0), DimensionError);
  EXPECT_THROW(kd_response_loss(zt, zs, 0.0), ConfigError);
}

ForwardTrace trace_of(std::vector<Tensor> blocks) {
  ForwardTrace t;
  t.block_outputs = std::move(blocks);
  return t;
}

TEST(FeatureLoss, Examples) {
  const Tensor h = Tensor::matrix({{0.5, -1.0}, {2.0, 3.0}});
  const LayerMap one{{{1, 1}}};
  ProjectionSet none = ProjectionSet::create(ModelConfig{.num_layers = 1, .num_heads = 1, .hidden_dim = 2},
                                             ModelConfig{.num_layers = 1, .num_heads = 1, .hidden_dim = 2}, one);
  EXPECT_EQ(feature_loss(trace_of({h}), trace_of({h}), one, none).item(), 0.0);

  const Tensor plus_one = add(h, Tensor::filled({2, 2}, 1.0));
  EXPECT_EQ(feature_loss(trace_of({h}), trace_of({plus_one}), one, none).item(), 1.0);

  // Per-pair MSEs 0.5 and 1.5 average to 1.0.
  const Tensor z = Tensor::zeros({1, 2});
  const Tensor a = Tensor::matrix({{1.0, 0.0}});              // MSE 0.5
  const Tensor b = Tensor::matrix({{std::sqrt(3.0), 0.0}});  // MSE 1.5
  const LayerMap two{{{1, 1}, {2, 2}}};
  const ModelConfig c2{.num_layers = 2, .num_heads = 1, .hidden_dim = 2};
  EXPECT_NEAR(feature_loss(trace_of({z, z}), trace_of({a, b}), two, ProjectionSet::create(c2, c2, two)).item(), 1.0,
              1e-15);

  EXPECT_THROW(feature_loss(trace_of({z}), trace_of({a, b}), two, ProjectionSet::create(c2, c2, two)), ConfigError);
}

TEST(FeatureLoss, ProjectionShapesAndGradientStopsAtTeacher) {
  const ModelConfig s{.num_layers = 2, .num_heads = 1, .hidden_dim = 3};
  const ModelConfig t{.num_layers = 4, .num_heads = 1, .hidden_dim = 5};
  const LayerMap map = resolve_layer_map("uniform", 2, 4);
  auto proj = ProjectionSet::create(s, t, map);
  ASSERT_EQ(proj.size(), 2u);
  EXPECT_EQ(proj.tensors().size(), 2u);
  EXPECT_EQ(proj.at(0)->shape(), (Shape{3, 5}));
  EXPECT_NO_THROW(proj.check(map, 3, 5));
  EXPECT_THROW(proj.check(map, 3, 3), DimensionError);
  EXPECT_TRUE(ProjectionSet::create(s, s, map).tensors().empty());

  Tensor hs = Tensor::filled({2, 3}, 0.5, true);
  std::vector<Tensor> teacher_blocks;
  for (int i = 0; i < 4; ++i) teacher_blocks.push_back(Tensor::filled({2, 5}, 0.1 * i, true));
  backward(feature_loss(trace_of(teacher_blocks), trace_of({hs, hs}), map, proj));
  EXPECT_TRUE(hs.has_grad());
  EXPECT_TRUE(proj.at(1)->has_grad());
  for (const auto& tb : teacher_blocks) {
    if (tb.has_grad()) {
      for (double g : tb.grad()) EXPECT_EQ(g, 0.0);
    }
  }
}

TEST(TaskLoss, Examples) {
  EXPECT_NEAR(task_loss(Tensor::matrix({{0.0, 0.0}}), {1.0}, TaskKind::classification).item(), 0.693147180559945309,
              1e-15);
  EXPECT_LT(task_loss(Tensor::matrix({{40.0, -40.0}, {-40.0, 40.0}}), {0.0, 1.0}, TaskKind::classification).item(),
            1e-30);
  EXPECT_EQ(task_loss(Tensor::matrix({{3.8}, {-1.0}}), {3.8, -1.0}, TaskKind::regression).item(), 0.0);
  EXPECT_NEAR(task_loss(Tensor::matrix({{1.0}, {0.0}}), {0.0, 0.0}, TaskKind::regression).item(), 0.5, 1e-15);

  EXPECT_THROW(task_loss(Tensor::matrix({{0.0, 0.0}}), {2.0}, TaskKind::classification), DimensionError);
  EXPECT_THROW(task_loss(Tensor::matrix({{0.0, 0.0}}), {0.0, 1.0}, TaskKind::classification), DimensionError);
  EXPECT_THROW(task_loss(Tensor::matrix({{0.0, 0.0}}), {0.0}, TaskKind::regression), DimensionError);
}

TEST(TotalLoss, Examples) {
  const Tensor t3 = Tensor::scalar(3.0);
  const Tensor t2 = Tensor::scalar(2.0);
  const Tensor t1 = Tensor::scalar(1.0);
  EXPECT_EQ(total_loss(t3, t2, t1, DistillConfig{.w_hard = 1, .w_int = 0, .w_kd = 0}).item(), 3.0);
  EXPECT_NEAR(total_loss(t3, t2, t1, DistillConfig{}).item(), 1.98, 1e-15);
  const Tensor z = Tensor::scalar(0.0);
  EXPECT_EQ(total_loss(z, z, z, DistillConfig{}).item(), 0.0);
}

TEST(TotalLoss, LinearInWeights) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor a = Tensor::scalar(u(rng));
    const Tensor b = Tensor::scalar(u(rng));
    const Tensor c = Tensor::scalar(u(rng));
    DistillConfig w1{.w_hard = u(rng), .w_int = u(rng), .w_kd = u(rng)};
    DistillConfig w2{.w_hard = u(rng), .w_int = u(rng), .w_kd = u(rng)};
    const double lam = u(rng);
    DistillConfig mix{.w_hard = w1.w_hard + lam * w2.w_hard,
                      .w_int = w1.w_int + lam * w2.w_int,
                      .w_kd = w1.w_kd + lam * w2.w_kd};
    const double lhs = total_loss(a, b, c, mix).item();
    const double rhs = total_loss(a, b, c, w1).item() + lam * total_loss(a, b, c, w2).item();
    EXPECT_NEAR(lhs, rhs, 1e-12 * (1.0 + std::abs(rhs)));
  }
}

TEST(DistillConfig, ValidationAndJson) {
  EXPECT_NO_THROW(DistillConfig{}.validate());
  EXPECT_THROW((DistillConfig{.temperature = 0.0}.validate()), ConfigError);
  EXPECT_THROW((DistillConfig{.w_hard = 0, .w_int = 0, .w_kd = 0}.validate()), ConfigError);
  EXPECT_THROW((DistillConfig{.w_hard = -0.1}.validate()), ConfigError);
  DistillConfig c{.temperature = 3.5, .w_hard = 0.1, .w_int = 0.0, .w_kd = 0.9, .scale_kd_by_T2 = true};
  EXPECT_EQ(nlohmann::json(c).get<DistillConfig>(), c);
}

TEST(LayerMap, NamedPresets) {
  EXPECT_EQ(resolve_layer_map("paper-3L", 3, 12).to_string(), "1:1,2:5,3:12");
  EXPECT_EQ(resolve_layer_map("paper-6L", 6, 12).to_string(), "1:1,2:5,3:7,4:9,5:11,6:12");
  EXPECT_EQ(resolve_layer_map("paper-9L", 9, 12).to_string(), "1:1,2:2,3:4,4:6,5:8,6:9,7:10,8:11,9:12");
  EXPECT_EQ(resolve_layer_map("auto", 3, 12), resolve_layer_map("paper-3L", 3, 12));
  EXPECT_THROW(resolve_layer_map("paper-3L", 2, 4), ConfigError);
  EXPECT_THROW(resolve_layer_map("paper-7L", 7, 12), ConfigError);
}

TEST(LayerMap, IdentityUniformAndExplicit) {
  EXPECT_EQ(resolve_layer_map("identity", 4, 4).to_string(), "1:1,2:2,3:3,4:4");
  EXPECT_EQ(resolve_layer_map("auto", 4, 4).to_string(), "1:1,2:2,3:3,4:4");
  EXPECT_THROW(resolve_layer_map("identity", 3, 4), ConfigError);
  EXPECT_EQ(resolve_layer_map("uniform", 2, 4).to_string(), "1:1,2:4");
  // 1 + (i-1)*11/3 = 1, 4.67, 8.33, 12
  EXPECT_EQ(resolve_layer_map("uniform", 4, 12).to_string(), "1:1,2:5,3:8,4:12");
  // 1 + (i-1)*3/2 = 1, 2.5, 4: the half rounds up.
  EXPECT_EQ(resolve_layer_map("uniform", 3, 4).to_string(), "1:1,2:3,3:4");
  EXPECT_EQ(resolve_layer_map("uniform", 1, 6).to_string(), "1:6");
  EXPECT_EQ(resolve_layer_map("1:1,3:4", 3, 4).to_string(), "1:1,3:4");

  EXPECT_THROW(resolve_layer_map("1:1,2:2", 3, 4), ConfigError);     // last anchor missing
  EXPECT_THROW(resolve_layer_map("2:2,3:4", 3, 4), ConfigError);     // first anchor missing
  EXPECT_THROW(resolve_layer_map("1:1,2:3,2:4", 2, 4), ConfigError); // not strictly increasing
  EXPECT_THROW(resolve_layer_map("1:1,2:3,3:3", 3, 3), ConfigError);
  EXPECT_THROW(resolve_layer_map("1:1,2:9", 2, 4), ConfigError);     // out of range
  EXPECT_THROW(resolve_layer_map("1-1", 1, 1), ConfigError);
  EXPECT_THROW(resolve_layer_map("uniform", 5, 4), ConfigError);
}

TEST(LayerMap, ExhaustiveInvariants) {
  for (std::size_t lt = 1; lt <= 24; ++lt) {
    for (std::size_t ls = 1; ls <= lt; ++ls) {
      for (const char* spec : {"auto", "uniform"}) {
        const LayerMap m = resolve_layer_map(spec, ls, lt);
        ASSERT_NO_THROW(m.validate(ls, lt)) << spec << " " << ls << "->" << lt;
        EXPECT_EQ(m.pairs.back(), (LayerPair{ls, lt}));
        if (ls > 1) {
          EXPECT_EQ(m.pairs.front(), (LayerPair{1, 1}));
          EXPECT_EQ(m.pairs.size(), ls);
          for (std::size_t i = 1; i < m.pairs.size(); ++i) {
            EXPECT_GT(m.pairs[i].student, m.pairs[i - 1].student);
            EXPECT_GT(m.pairs[i].teacher, m.pairs[i - 1].teacher);
          }
        }
      }
    }
  }
}

TEST(InitFromTeacher, CopiesMappedBlocks) {
  const ModelConfig tc{.num_layers = 4, .num_heads = 2, .hidden_dim = 8, .vocab_size = 20, .max_positions = 16};
  ModelConfig sc = tc;
  sc.num_layers = 2;
  const Model teacher = build_model(tc, 1);
  const LayerMap map = resolve_layer_map("uniform", 2, 4);
  const Model student = init_from_teacher(teacher, sc, map, 2);
  for (const auto& p : student.params()) {
    std::string src = p.name;
    if (p.name.rfind("blocks.1.", 0) == 0) src = "blocks.3." + p.name.substr(9);
    const auto a = p.value.data();
    const auto b = teacher.param(src).data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << p.name;
  }
  ModelConfig narrow = sc;
  narrow.hidden_dim = 4;
  EXPECT_THROW(init_from_teacher(teacher, narrow, map, 2), ConfigError);
}

TEST(Composite, FiniteDifferenceFullSweep) {
  ToyPair toy = make_toy(42, TaskKind::classification);
  auto params = toy.student.tensors();
  for (const auto& t : toy.proj.tensors()) params.push_back(t);
  const DistillConfig cfg{};
  EXPECT_LT(finite_diff_check_params([&] { return composite(toy, cfg); }, params, 1e-5), 1e-4);
}

TEST(Composite, FiniteDifferenceRandomTrials) { EXPECT_LT(testing::composite_random_trials(100, 1e-5), 1e-4); }

TEST(Composite, TeacherReceivesNoGradient) {
  ToyPair toy = make_toy(1, TaskKind::classification);
  // Recompute the teacher trace with gradients enabled to prove the losses cut the graph.
  toy.teacher_trace = forward(toy.teacher, toy.tokens);
  backward(composite(toy, DistillConfig{}));
  for (const auto& p : toy.teacher.params()) {
    if (p.value.has_grad()) {
      for (double g : p.value.grad()) ASSERT_EQ(g, 0.0) << p.name;
    }
  }
  EXPECT_TRUE(toy.student.param("blocks.0.attn.query.weight").has_grad());
}

}  // namespace
}  // namespace kdwb
