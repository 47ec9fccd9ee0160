#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "advflyp/attacks.hpp"
#include "advflyp/error.hpp"
#include "advflyp/objectives.hpp"
#include "fd.hpp"

using namespace advflyp;
using advflyp::testing::random_tensor;
using advflyp::testing::random_unit_rows;

namespace {

ModelState tiny_model(std::uint64_t seed) {
  EncoderConfig v;
  v.input_dim = 3 * 2 * 2;
  v.hidden_dims = {8};
  v.embed_dim = 4;
  v.nonlinearity = Nonlinearity::Tanh;
  EncoderConfig t = v;
  t.input_dim = 4;
  t.vocab_size = 5;
  return init_model(v, t, 0.1, seed);
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

AttackTarget random_target(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  AttackTarget target;
  target.images = random_tensor({n, 3, 2, 2}, rng, 0.0, 1.0);
  target.text_emb = random_unit_rows(k, 4, rng);
  std::uniform_int_distribution<std::size_t> lab(0, k - 1);
  for (std::size_t i = 0; i < n; ++i) target.labels.push_back(lab(rng));
  return target;
}

}  // namespace

TEST(ProjectAndClamp, Examples) {
  const double eps = 0.1;
  const Tensor x = Tensor::vector({0.5, 1.0, 0.5, 0.0});
  const Tensor out = project_and_clamp(x, Tensor::vector({0.2, 0.1, 0.05, -0.3}), eps);
  EXPECT_EQ(out[0], eps);
  EXPECT_EQ(out[1], 0.0);
  EXPECT_EQ(out[2], 0.05);
  EXPECT_EQ(out[3], 0.0);
  EXPECT_EQ(project_and_clamp(x, out, eps), out);
  EXPECT_THROW(project_and_clamp(x, Tensor::vector({0.0}), eps), Error);
}

TEST(ProjectAndClamp, RandomFeasibility) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> e(0.0, 0.2);
  for (int trial = 0; trial < 10000; ++trial) {
    const double eps = e(rng);
    const Tensor x = random_tensor({16}, rng, 0.0, 1.0);
    const Tensor d = project_and_clamp(x, random_tensor({16}, rng, -1.0, 1.0), eps);
    for (std::size_t i = 0; i < 16; ++i) {
      ASSERT_LE(std::abs(d[i]), eps);
      ASSERT_GE(x[i] + d[i], 0.0);
      ASSERT_LE(x[i] + d[i], 1.0);
    }
  }
}

TEST(AttackObjective, CwMarginHandCase) {
  Graph g;
  EXPECT_EQ(cw_margin_rows(g.constant(Tensor::matrix({{2, 5}})), {0}).value().item(), 3.0);
  EXPECT_EQ(cw_margin_rows(g.constant(Tensor::matrix({{2, 5, 4}})), {1}).value().item(), -1.0);
  EXPECT_THROW(cw_margin_rows(g.constant(Tensor::matrix({{2, 5}})), {2}), Error);
}

TEST(AttackObjective, ZeroDeltaCases) {
  const ModelState s = tiny_model(2);
  std::mt19937_64 rng(3);
  AttackTarget target = random_target(4, 4, rng);
  Graph g;
  Var zero = g.constant(Tensor(target.images.shape(), 0.0));
  EXPECT_EQ(attack_objective(AttackObjective::Fare, s, target, zero).value().item(), 0.0);
  Graph h;
  const double clean = contrastive_loss(h.constant(encode_images(s, target.images, false)),
                                        h.constant(target.text_emb), s.tau)
                           .value()
                           .item();
  EXPECT_NEAR(attack_objective(AttackObjective::Contrastive, s, target, zero).value().item(), clean, 1e-14);
  EXPECT_THROW(parse_attack_objective("autoattack"), Error);
}

TEST(Pgd, ZeroBudgetLeavesImagesUntouched) {
  const ModelState s = tiny_model(4);
  std::mt19937_64 rng(5);
  const AttackTarget target = random_target(3, 3, rng);
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  cfg.steps = 3;
  cfg.objective = AttackObjective::CrossEntropy;
  cfg.track_best = true;
  const PerturbationBatch p = pgd(cfg, s, target);
  EXPECT_EQ(max_abs(p.delta), 0.0);
  Graph g;
  const double clean = mean(zero_shot_ce_rows(g.constant(encode_images(s, target.images, false)),
                                              g.constant(target.text_emb), target.labels))
                           .value()
                           .item();
  EXPECT_NEAR(p.achieved_objective, clean, 1e-14);
}

TEST(Pgd, LinearSurrogateClosedForm) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor w = random_tensor({2, 3, 2, 2}, rng);
    const Tensor x = random_tensor({2, 3, 2, 2}, rng, 0.2, 0.8);
    ObjectiveFn linear = [&](const Tensor& d, bool need_grad) {
      ObjectiveSample s;
      for (std::size_t i = 0; i < d.size(); ++i) s.value += w[i] * d[i];
      if (need_grad) s.grad = w;
      return s;
    };
    AttackConfig cfg;
    cfg.epsilon = 0.05;
    cfg.step_size = 0.05;
    cfg.steps = 1;
    const PerturbationBatch p = pgd(cfg, x, linear);
    double l1 = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      ASSERT_EQ(p.delta[i], w[i] > 0 ? cfg.epsilon : -cfg.epsilon);
      l1 += std::abs(w[i]);
    }
    EXPECT_NEAR(p.achieved_objective, cfg.epsilon * l1, 1e-12);
  }
}

TEST(Pgd, NanObjectiveNamesIteration) {
  int calls = 0;
  ObjectiveFn fn = [&](const Tensor& d, bool) {
    ObjectiveSample s;
    s.value = calls++ == 2 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
    s.grad = Tensor(d.shape(), 1.0);
    return s;
  };
  AttackConfig cfg;
  cfg.steps = 5;
  try {
    pgd(cfg, Tensor({1, 4}, 0.5), fn);
    FAIL() << "expected a numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_NE(std::string(e.what()).find("iteration 2"), std::string::npos) << e.what();
  }
}

TEST(Pgd, FeasibleAcrossObjectivesAndBestIterateDominates) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> eps_dist(0.0, 0.1);
  const AttackObjective kinds[] = {AttackObjective::CrossEntropy, AttackObjective::Contrastive,
                                   AttackObjective::CwMargin, AttackObjective::Fare};
  for (int trial = 0; trial < 400; ++trial) {
    const ModelState s = tiny_model(100 + trial);
    const AttackTarget target = random_target(4, 4, rng);
    AttackConfig cfg;
    cfg.epsilon = eps_dist(rng);
    cfg.step_size = cfg.epsilon / 2.0;
    cfg.steps = 1 + trial % 3;
    cfg.objective = kinds[trial % 4];
    cfg.init = trial % 2 ? AttackInit::Uniform : AttackInit::Zero;
    cfg.seed = static_cast<std::uint64_t>(trial);
    cfg.track_best = true;
    const PerturbationBatch p = pgd(cfg, s, target);
    for (std::size_t i = 0; i < p.delta.size(); ++i) {
      ASSERT_LE(std::abs(p.delta[i]), cfg.epsilon + 1e-12);
      ASSERT_GE(target.images[i] + p.delta[i], 0.0);
      ASSERT_LE(target.images[i] + p.delta[i], 1.0);
    }
    const double clean = model_objective(cfg.objective, s, target)(Tensor(target.images.shape(), 0.0), false).value;
    if (cfg.init == AttackInit::Zero) EXPECT_GE(p.achieved_objective, clean) << to_string(cfg.objective);
  }
}

TEST(Pgd, BestIterateIsMonotoneInSteps) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const ModelState s = tiny_model(trial);
    const AttackTarget target = random_target(5, 5, rng);
    for (auto kind : {AttackObjective::CrossEntropy, AttackObjective::Contrastive}) {
      AttackConfig cfg;
      cfg.epsilon = 0.08;
      cfg.step_size = 0.03;
      cfg.objective = kind;
      cfg.track_best = true;
      double last = -std::numeric_limits<double>::infinity();
      for (int steps = 1; steps <= 6; ++steps) {
        cfg.steps = steps;
        const double v = pgd(cfg, s, target).achieved_objective;
        EXPECT_GE(v, last);
        last = v;
      }
    }
  }
}

TEST(Pgd, ContrastiveGradientIsJoint) {
  // Image 1's gradient under the batch loss depends on image 2 through the
  // shared softmax denominators; the per-image loss does not.
  const ModelState s = tiny_model(11);
  std::mt19937_64 rng(12);
  AttackTarget target = random_target(2, 2, rng);
  target.labels = {0, 1};
  const Tensor zero(target.images.shape(), 0.0);
  auto grad_of_first = [&](AttackObjective kind, const AttackTarget& t) {
    const Tensor g = model_objective(kind, s, t)(zero, true).grad;
    return g.slice_rows(0, 1);
  };
  const Tensor joint = grad_of_first(AttackObjective::Contrastive, target);
  const Tensor single = grad_of_first(AttackObjective::CrossEntropy, target);
  double diff = 0.0;
  for (std::size_t i = 0; i < joint.size(); ++i) diff = std::max(diff, std::abs(joint[i] - single[i]));
  EXPECT_GT(diff, 1e-6);

  AttackTarget moved = target;
  for (std::size_t i = 12; i < 24; ++i) moved.images[i] = 1.0 - moved.images[i];
  EXPECT_NE(grad_of_first(AttackObjective::Contrastive, moved), joint);
  EXPECT_EQ(grad_of_first(AttackObjective::CrossEntropy, moved), single);
}

TEST(Pgd, AttackLeavesModelUntouched) {
  ModelState s = tiny_model(13);
  snapshot_frozen(s);
  const ModelState before = s;
  std::mt19937_64 rng(14);
  const AttackTarget target = random_target(4, 4, rng);
  AttackConfig cfg;
  cfg.epsilon = 0.05;
  cfg.steps = 3;
  pgd(cfg, s, target);
  EXPECT_EQ(s.theta, before.theta);
  EXPECT_EQ(s.phi, before.phi);
  EXPECT_EQ(*s.theta0, *before.theta0);
}

TEST(Pgd, ConfigValidation) {
  AttackConfig cfg;
  cfg.steps = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.steps = 1;
  cfg.epsilon = -1.0;
  EXPECT_THROW(cfg.validate(), Error);
}
