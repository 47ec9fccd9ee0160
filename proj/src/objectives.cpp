#include "advflyp/objectives.hpp"

#include <cmath>
#include <numeric>

#include "advflyp/error.hpp"

namespace advflyp {

namespace {

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

void require_pair(const char* op, Var a, Var b) {
  if (a.shape().size() != 2 || a.shape() != b.shape())
    fail(ErrorKind::Dimension, std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                                   shape_string(b.shape()) + " must be equal matrices");
}

}  // namespace

Var contrastive_loss(Var img_emb, Var txt_emb, double tau) {
  require_pair("contrastive_loss", img_emb, txt_emb);
  const std::size_t n = img_emb.shape()[0];
  if (n < 2) fail(ErrorKind::Contract, "contrastive_loss needs at least 2 pairs for in-batch negatives");
  if (!(tau > 0.0)) fail(ErrorKind::Contract, "contrastive_loss needs tau > 0");

  Var logits = scale(matmul(img_emb, transpose(txt_emb)), 1.0 / tau);
  Var image_to_text = take_per_row(log_softmax_rows(logits), iota_indices(n));
  Var text_to_image = take_per_row(log_softmax_rows(transpose(logits)), iota_indices(n));
  return scale(add(sum(image_to_text), sum(text_to_image)), -1.0 / (2.0 * static_cast<double>(n)));
}

Var zero_shot_ce_rows(Var img_emb, Var class_txt_emb, const std::vector<std::size_t>& true_idx) {
  if (img_emb.shape().size() != 2 || class_txt_emb.shape().size() != 2 || img_emb.shape()[1] != class_txt_emb.shape()[1])
    fail(ErrorKind::Dimension, "zero_shot_ce: image " + shape_string(img_emb.shape()) + " vs classes " +
                                   shape_string(class_txt_emb.shape()));
  const std::size_t k = class_txt_emb.shape()[0];
  if (true_idx.size() != img_emb.shape()[0]) fail(ErrorKind::Contract, "zero_shot_ce: one label per image required");
  for (auto t : true_idx)
    if (t >= k) fail(ErrorKind::Contract, "zero_shot_ce: class index " + std::to_string(t) + " out of " + std::to_string(k));
  Var sims = matmul(img_emb, transpose(class_txt_emb));
  return scale(take_per_row(log_softmax_rows(sims), true_idx), -1.0);
}

Var zero_shot_ce(Var img_emb, Var class_txt_emb, std::size_t true_idx) {
  if (img_emb.shape().size() != 2 || img_emb.shape()[0] != 1)
    fail(ErrorKind::Dimension, "zero_shot_ce: expected one image row, got " + shape_string(img_emb.shape()));
  return sum(zero_shot_ce_rows(img_emb, class_txt_emb, {true_idx}));
}

Var feature_reg(Var x_adv, Var x_adv_frozen, Var x_clean, FeatureNorm norm) {
  require_pair("feature_reg", x_adv, x_adv_frozen);
  require_pair("feature_reg", x_adv, x_clean);
  const double n = static_cast<double>(x_adv.shape()[0]);
  Var to_frozen = sub(x_adv, x_adv_frozen);
  Var to_clean = sub(x_adv, x_clean);
  if (norm == FeatureNorm::RowMean) return mean(add(row_norms(to_frozen), row_norms(to_clean)));
  return scale(add(frobenius_norm(to_frozen), frobenius_norm(to_clean)), 1.0 / n);
}

LogitTriple logit_matrices(Var x_adv, Var x_adv_frozen, Var x_clean, Var txt_emb) {
  require_pair("logit_matrices", x_adv, x_adv_frozen);
  require_pair("logit_matrices", x_adv, x_clean);
  if (txt_emb.shape().size() != 2 || txt_emb.shape()[1] != x_adv.shape()[1])
    fail(ErrorKind::Dimension, "logit_matrices: texts " + shape_string(txt_emb.shape()) + " vs images " +
                                   shape_string(x_adv.shape()));
  Var t = transpose(txt_emb);
  return LogitTriple{softmax_rows(matmul(x_adv, t)), softmax_rows(matmul(x_adv_frozen, t)),
                     softmax_rows(matmul(x_clean, t))};
}

Var kl_rows_sum(Var p, Var q) {
  require_pair("kl", p, q);
  const double n = static_cast<double>(p.shape()[0]);
  Var terms = mul(p, sub(log_floor(p, kKlFloor), log_floor(q, kKlFloor)));
  return scale(sum(terms), 1.0 / n);
}

Var logit_reg(const LogitTriple& lt) { return add(kl_rows_sum(lt.adv, lt.adv_frozen), kl_rows_sum(lt.adv, lt.clean)); }

ObjectiveTerms full_objective(Var x_adv, Var x_adv_frozen, Var x_clean, Var txt_emb, double tau,
                              const ObjectiveFlags& flags) {
  ObjectiveTerms out;
  out.clip = contrastive_loss(x_adv, txt_emb, tau);
  out.total = out.clip;
  if (flags.reg_logit) {
    out.logit = logit_reg(logit_matrices(x_adv, x_adv_frozen, x_clean, txt_emb));
    out.total = add(out.total, *out.logit);
  }
  if (flags.reg_feat) {
    out.feat = feature_reg(x_adv, x_adv_frozen, x_clean, flags.feature_norm);
    out.total = add(out.total, *out.feat);
  }
  return out;
}

}  // namespace advflyp
