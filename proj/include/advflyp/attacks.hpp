#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "advflyp/encoders.hpp"
#include "advflyp/tensor.hpp"

namespace advflyp {

enum class AttackObjective { CrossEntropy, Contrastive, CwMargin, Fare };
enum class AttackInit { Zero, Uniform };

AttackObjective parse_attack_objective(std::string_view tag);
std::string to_string(AttackObjective objective);

struct AttackConfig {
  double epsilon = 1.0 / 255.0;  // L∞ budget in [0,1] pixel units
  double step_size = 1.0 / 255.0;
  int steps = 2;
  AttackInit init = AttackInit::Zero;
  AttackObjective objective = AttackObjective::Contrastive;
  bool track_best = false;
  std::uint64_t seed = 0;  // only used by AttackInit::Uniform

  void validate() const;
};

struct PerturbationBatch {
  Tensor delta;
  double epsilon = 0.0;
  double achieved_objective = 0.0;
};

/// clip δ to [−ε, ε], then shrink it so that x + δ stays inside [0, 1].
Tensor project_and_clamp(const Tensor& x, const Tensor& delta, double epsilon);

/// What an attack objective is evaluated against. Texts are already embedded:
/// caption rows [N×d] for contrastive, class rows [K×d] for ce / cw.
struct AttackTarget {
  Tensor images;
  Tensor text_emb;
  std::vector<std::size_t> labels;
  // fare: clean embeddings f_θ(x); computed from images when absent.
  std::optional<Tensor> clean_emb;
};

/// max_{k≠T} s_k − s_T per row of a similarity matrix; an [N] vector.
Var cw_margin_rows(Var similarities, const std::vector<std::size_t>& true_idx);

/// Scalar to maximize, recorded on delta's graph.
Var attack_objective(AttackObjective kind, const ModelState& state, const AttackTarget& target, Var delta);

/// One evaluation of an objective at a perturbation.
struct ObjectiveSample {
  double value = 0.0;
  // Present for objectives that are a mean of independent per-image terms.
  std::vector<double> per_sample;
  // d value / d delta; empty when not requested.
  Tensor grad;
};

using ObjectiveFn = std::function<ObjectiveSample(const Tensor& delta, bool need_grad)>;

/// Sign-gradient ascent with projection. Best-iterate tracking is per image
/// when the objective reports per-sample values, otherwise on the batch value.
PerturbationBatch pgd(const AttackConfig& cfg, const Tensor& images, const ObjectiveFn& objective);
PerturbationBatch pgd(const AttackConfig& cfg, const ModelState& state, const AttackTarget& target);

/// The ObjectiveFn pgd uses for a model-backed attack.
ObjectiveFn model_objective(AttackObjective kind, const ModelState& state, const AttackTarget& target);

}  // namespace advflyp
