#include "advflyp/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>

#include "advflyp/error.hpp"
#include "advflyp/objectives.hpp"

namespace advflyp {

AttackObjective parse_attack_objective(std::string_view tag) {
  if (tag == "ce" || tag == "pgd") return AttackObjective::CrossEntropy;
  if (tag == "contrastive") return AttackObjective::Contrastive;
  if (tag == "cw") return AttackObjective::CwMargin;
  if (tag == "fare") return AttackObjective::Fare;
  fail(ErrorKind::Config, "unknown attack objective '" + std::string(tag) + "'");
}

std::string to_string(AttackObjective objective) {
  switch (objective) {
    case AttackObjective::CrossEntropy: return "ce";
    case AttackObjective::Contrastive: return "contrastive";
    case AttackObjective::CwMargin: return "cw";
    case AttackObjective::Fare: return "fare";
  }
  return "?";
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) fail(ErrorKind::Config, "attack epsilon must be >= 0");
  if (!(step_size >= 0.0) || !std::isfinite(step_size)) fail(ErrorKind::Config, "attack step_size must be >= 0");
  if (steps < 1) fail(ErrorKind::Config, "attack steps must be >= 1");
}

Tensor project_and_clamp(const Tensor& x, const Tensor& delta, double epsilon) {
  if (x.shape() != delta.shape())
    fail(ErrorKind::Dimension, "project_and_clamp: image " + shape_string(x.shape()) + " vs delta " +
                                   shape_string(delta.shape()));
  Tensor out(delta.shape());
  auto xs = x.data();
  auto ds = delta.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) {
    const double d = std::clamp(ds[i], -epsilon, epsilon);
    // Only touch components that leave the pixel box, so feasible steps stay exact.
    const double v = xs[i] + d;
    os[i] = v > 1.0 ? 1.0 - xs[i] : (v < 0.0 ? -xs[i] : d);
  }
  return out;
}

Var cw_margin_rows(Var sims, const std::vector<std::size_t>& true_idx) {
  const Tensor& s = sims.value();
  if (s.ndim() != 2) fail(ErrorKind::Dimension, "cw margin expects [N×K] similarities");
  const std::size_t n = s.dim(0), k = s.dim(1);
  if (k < 2) fail(ErrorKind::Config, "cw objective needs at least two classes");
  if (true_idx.size() != n) fail(ErrorKind::Contract, "cw objective: one label per image required");
  std::vector<std::size_t> rival(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = true_idx[i];
    if (t >= k) fail(ErrorKind::Contract, "cw objective: label out of range");
    std::size_t best = t == 0 ? 1 : 0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != t && s.at(i, j) > s.at(i, best)) best = j;
    rival[i] = best;
  }
  return sub(take_per_row(sims, rival), take_per_row(sims, true_idx));
}

namespace {

// Per-image terms for the separable objectives, an [N] vector.
Var per_sample_objective(AttackObjective kind, const ModelState& state, const AttackTarget& target, Var delta) {
  Graph& g = delta.graph();
  ParamVars theta = bind_params(g, state.theta, false);
  Var adv = vision_forward(theta, state.vision, add(g.constant(target.images), delta));

  switch (kind) {
    case AttackObjective::CrossEntropy:
      return zero_shot_ce_rows(adv, g.constant(target.text_emb), target.labels);
    case AttackObjective::CwMargin:
      return cw_margin_rows(matmul(adv, transpose(g.constant(target.text_emb))), target.labels);
    case AttackObjective::Fare: {
      Tensor clean = target.clean_emb ? *target.clean_emb : encode_images(state, target.images, false);
      return row_norms(sub(adv, g.constant(std::move(clean))));
    }
    case AttackObjective::Contrastive:
      break;
  }
  fail(ErrorKind::Config, "objective '" + to_string(kind) + "' is not per-image");
}

}  // namespace

Var attack_objective(AttackObjective kind, const ModelState& state, const AttackTarget& target, Var delta) {
  if (kind == AttackObjective::Contrastive) {
    Graph& g = delta.graph();
    ParamVars theta = bind_params(g, state.theta, false);
    Var adv = vision_forward(theta, state.vision, add(g.constant(target.images), delta));
    return contrastive_loss(adv, g.constant(target.text_emb), state.tau);
  }
  return mean(per_sample_objective(kind, state, target, delta));
}

ObjectiveFn model_objective(AttackObjective kind, const ModelState& state, const AttackTarget& target) {
  // FARE's reference embeddings do not depend on delta; compute them once.
  auto shared = std::make_shared<AttackTarget>(target);
  if (kind == AttackObjective::Fare && !shared->clean_emb) shared->clean_emb = encode_images(state, shared->images, false);

  return [kind, &state, shared](const Tensor& delta, bool need_grad) {
    Graph g;
    Tensor d = delta;
    d.set_requires_grad(need_grad);
    Var dv = need_grad ? g.variable(std::move(d)) : g.constant(std::move(d));
    ObjectiveSample out;
    Var value;
    if (kind == AttackObjective::Contrastive) {
      value = attack_objective(kind, state, *shared, dv);
    } else {
      Var rows = per_sample_objective(kind, state, *shared, dv);
      out.per_sample = rows.value().values();
      value = mean(rows);
    }
    out.value = value.value().item();
    if (need_grad) {
      Gradients grads = g.backward(value);
      out.grad = grads.contains(dv) ? grads[dv] : Tensor(delta.shape(), 0.0);
    }
    return out;
  };
}

PerturbationBatch pgd(const AttackConfig& cfg, const Tensor& images, const ObjectiveFn& objective) {
  cfg.validate();
  if (images.ndim() < 2) fail(ErrorKind::Dimension, "pgd expects a batch of images, got " + shape_string(images.shape()));
  const std::size_t n = images.dim(0);
  const std::size_t per_image = images.size() / n;

  Tensor delta(images.shape(), 0.0);
  if (cfg.init == AttackInit::Uniform && cfg.epsilon > 0.0) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> dist(-cfg.epsilon, cfg.epsilon);
    for (double& v : delta.data()) v = dist(rng);
  }
  delta = project_and_clamp(images, delta, cfg.epsilon);

  Tensor best = delta;
  double best_value = -std::numeric_limits<double>::infinity();
  std::vector<double> best_rows;
  double last_value = 0.0;

  for (int it = 0;; ++it) {
    const bool stepping = it < cfg.steps;
    ObjectiveSample s = objective(delta, stepping);
    if (!std::isfinite(s.value)) fail(ErrorKind::Numeric, "attack objective is not finite at iteration " + std::to_string(it));
    last_value = s.value;

    if (cfg.track_best) {
      if (!s.per_sample.empty()) {
        if (s.per_sample.size() != n) fail(ErrorKind::Contract, "objective reported a wrong number of per-image values");
        if (best_rows.empty()) best_rows.assign(n, -std::numeric_limits<double>::infinity());
        for (std::size_t i = 0; i < n; ++i) {
          if (s.per_sample[i] > best_rows[i]) {
            best_rows[i] = s.per_sample[i];
            std::copy_n(delta.data().begin() + static_cast<std::ptrdiff_t>(i * per_image), per_image,
                        best.data().begin() + static_cast<std::ptrdiff_t>(i * per_image));
          }
        }
      } else if (s.value > best_value) {
        best_value = s.value;
        best = delta;
      }
    }
    if (!stepping) break;

    if (s.grad.shape() != delta.shape()) fail(ErrorKind::Contract, "objective gradient has the wrong shape");
    Tensor moved(delta.shape());
    auto dm = moved.data();
    auto dd = delta.data();
    auto gs = s.grad.data();
    for (std::size_t i = 0; i < dm.size(); ++i) {
      const double sign = gs[i] > 0.0 ? 1.0 : (gs[i] < 0.0 ? -1.0 : 0.0);
      dm[i] = dd[i] + cfg.step_size * sign;
    }
    delta = project_and_clamp(images, moved, cfg.epsilon);
  }

  PerturbationBatch out;
  out.epsilon = cfg.epsilon;
  if (!cfg.track_best) {
    out.delta = std::move(delta);
    out.achieved_objective = last_value;
  } else if (!best_rows.empty()) {
    out.delta = std::move(best);
    double total = 0.0;
    for (double v : best_rows) total += v;
    out.achieved_objective = total / static_cast<double>(n);
  } else {
    out.delta = std::move(best);
    out.achieved_objective = best_value;
  }
  return out;
}

PerturbationBatch pgd(const AttackConfig& cfg, const ModelState& state, const AttackTarget& target) {
  return pgd(cfg, target.images, model_objective(cfg.objective, state, target));
}

}  // namespace advflyp
