#pragma once

// Scalar objectives over unit-row embedding matrices. Every function records
// onto the graph of its inputs, so the result can be differentiated with
// respect to pixels or encoder parameters alike.

#include <cstddef>
#include <optional>
#include <vector>

#include "advflyp/tensor.hpp"

namespace advflyp {

inline constexpr double kKlFloor = 1e-12;

/// Symmetric in-batch InfoNCE over s = X·Tᵀ / tau. Needs N >= 2.
Var contrastive_loss(Var img_emb, Var txt_emb, double tau);

/// Per-row zero-shot cross-entropy on raw cosine similarities (no temperature).
/// img_emb [N×d], class_txt_emb [K×d]; returns the N-vector of losses.
Var zero_shot_ce_rows(Var img_emb, Var class_txt_emb, const std::vector<std::size_t>& true_idx);
/// Single-image form: img_emb [1×d].
Var zero_shot_ce(Var img_emb, Var class_txt_emb, std::size_t true_idx);

/// How the feature penalty aggregates the N×d difference matrices.
enum class FeatureNorm {
  Frobenius,  // ‖ΔX‖_F / N
  RowMean,    // mean of per-row L2 norms
};

/// (‖X_adv − X_frozen‖ + ‖X_adv − X_clean‖) aggregated per FeatureNorm.
/// x_adv_frozen is expected to be a constant node.
Var feature_reg(Var x_adv, Var x_adv_frozen, Var x_clean, FeatureNorm norm = FeatureNorm::Frobenius);

struct LogitTriple {
  Var adv;
  Var adv_frozen;
  Var clean;
};

/// Row softmax of X·Tᵀ for each of the three image embeddings; no temperature.
LogitTriple logit_matrices(Var x_adv, Var x_adv_frozen, Var x_clean, Var txt_emb);

/// Row-wise KL summed then scaled by 1/N, with logs floored at kKlFloor.
Var kl_rows_sum(Var p, Var q);
Var logit_reg(const LogitTriple& lt);

struct ObjectiveFlags {
  bool reg_logit = true;
  bool reg_feat = true;
  FeatureNorm feature_norm = FeatureNorm::Frobenius;
};

struct ObjectiveTerms {
  Var total;
  Var clip;
  std::optional<Var> logit;
  std::optional<Var> feat;
};

/// L_clip(adv) + L_logit + L_feat with unit weights; flags drop either regularizer.
ObjectiveTerms full_objective(Var x_adv, Var x_adv_frozen, Var x_clean, Var txt_emb, double tau,
                              const ObjectiveFlags& flags);

}  // namespace advflyp
