#include "advflyp/finetune.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

#include <json.hpp>

#include "advflyp/error.hpp"

namespace advflyp {

Method parse_method(std::string_view tag) {
  if (tag == "pretrain") return Method::Pretrain;
  if (tag == "advflyp") return Method::AdvFlyp;
  if (tag == "advflyp-full") return Method::AdvFlypFull;
  if (tag == "tecoa") return Method::Tecoa;
  if (tag == "fare") return Method::Fare;
  if (tag == "naive-flyp") return Method::NaiveFlyp;
  fail(ErrorKind::Config, "unknown method '" + std::string(tag) + "'");
}

std::string to_string(Method method) {
  switch (method) {
    case Method::Pretrain: return "pretrain";
    case Method::AdvFlyp: return "advflyp";
    case Method::AdvFlypFull: return "advflyp-full";
    case Method::Tecoa: return "tecoa";
    case Method::Fare: return "fare";
    case Method::NaiveFlyp: return "naive-flyp";
  }
  return "?";
}

namespace {

bool reads_captions(Method m) { return m == Method::Pretrain || m == Method::AdvFlyp || m == Method::AdvFlypFull; }
bool reads_labels(Method m) { return m == Method::Tecoa || m == Method::NaiveFlyp; }
bool contrastive_outer(Method m) { return reads_captions(m) || m == Method::NaiveFlyp; }

AttackObjective training_objective(Method m) {
  switch (m) {
    case Method::Tecoa: return AttackObjective::CrossEntropy;
    case Method::Fare: return AttackObjective::Fare;
    default: return AttackObjective::Contrastive;
  }
}

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

AdamState zero_moments(const ParamMap& params) {
  AdamState st;
  for (const auto& [name, p] : params) {
    st.m.emplace(name, Tensor(p.shape(), 0.0));
    st.v.emplace(name, Tensor(p.shape(), 0.0));
  }
  return st;
}

void adam_update(ParamMap& params, AdamState& st, const ParamMap& grads, double lr, std::size_t t) {
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
  for (auto& [name, p] : params) {
    auto g = grads.at(name).data();
    auto m = st.m.at(name).data();
    auto v = st.v.at(name).data();
    auto w = p.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
    }
  }
}

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  auto o = out.data();
  auto bs = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bs[i];
  return out;
}

void check_batch(Method method, const ImageTextBatch& batch, const std::vector<TokenSeq>& class_texts) {
  const std::size_t n = batch.size();
  if (n == 0) fail(ErrorKind::Config, "empty training batch");
  if (reads_captions(method) && batch.tokens.size() != n)
    fail(ErrorKind::Config, "method " + to_string(method) + " needs one caption per image");
  if (reads_labels(method)) {
    if (batch.labels.size() != n) fail(ErrorKind::Config, "method " + to_string(method) + " needs one label per image");
    if (class_texts.empty()) fail(ErrorKind::Config, "method " + to_string(method) + " needs class-template texts");
    for (auto l : batch.labels)
      if (l >= class_texts.size()) fail(ErrorKind::Config, "label " + std::to_string(l) + " has no class text");
  }
  if (contrastive_outer(method) && n < 2) fail(ErrorKind::Config, "contrastive methods need at least 2 images per batch");
}

}  // namespace

TrainConfig TrainConfig::for_method(Method method) {
  TrainConfig cfg;
  cfg.method = method;
  cfg.reg_logit = cfg.reg_feat = method == Method::AdvFlypFull;
  cfg.attack.objective = training_objective(method);
  return cfg;
}

void TrainConfig::validate() const {
  if (batch_size < 1) fail(ErrorKind::Config, "batch_size must be positive");
  if (contrastive_outer(method) && batch_size < 2) fail(ErrorKind::Config, "contrastive methods need batch_size >= 2");
  if (patience < 1) fail(ErrorKind::Config, "patience must be >= 1");
  if (!(lr0 >= 0.0) || !std::isfinite(lr0)) fail(ErrorKind::Config, "lr0 must be finite and >= 0");
  if (method == Method::Pretrain && (reg_logit || reg_feat))
    fail(ErrorKind::Config, "pretrain has no frozen reference for the regularizers");
  if (method == Method::Fare && reg_logit) fail(ErrorKind::Config, "fare has no texts for the logit regularizer");
  if (method != Method::Pretrain) attack.validate();
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (step > total_steps)
    fail(ErrorKind::Contract, "cosine_lr: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  if (total_steps == 0) return lr0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
}

TrainerState make_trainer(ModelState model, Method method) {
  if (method != Method::Pretrain && !model.has_frozen()) snapshot_frozen(model);
  TrainerState tr;
  tr.adam_theta = zero_moments(model.theta);
  if (method == Method::Pretrain) tr.adam_phi = zero_moments(model.phi);
  tr.model = std::move(model);
  return tr;
}

StepMetrics train_step(TrainerState& trainer, const TrainConfig& cfg, const ImageTextBatch& batch,
                       const std::vector<TokenSeq>& class_texts, double lr) {
  const Method method = cfg.method;
  check_batch(method, batch, class_texts);
  ModelState& model = trainer.model;
  const bool regularized = cfg.reg_logit || cfg.reg_feat;
  if ((regularized || method == Method::Fare) && !model.has_frozen())
    fail(ErrorKind::Contract, "method " + to_string(method) + " needs the frozen snapshot");
  if (method == Method::Pretrain && trainer.adam_phi.m.empty()) trainer.adam_phi = zero_moments(model.phi);

  // Text side: constant for every finetuning method.
  Tensor text_emb;
  if (method == Method::AdvFlyp || method == Method::AdvFlypFull) {
    text_emb = encode_texts(model, batch.tokens);
  } else if (reads_labels(method)) {
    Tensor cls = encode_texts(model, class_texts);
    if (method == Method::Tecoa) {
      text_emb = std::move(cls);
    } else {
      // Every image is paired with its class template, duplicates included.
      const std::size_t d = cls.dim(1);
      text_emb = Tensor({batch.size(), d});
      for (std::size_t i = 0; i < batch.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) text_emb.at(i, j) = cls.at(batch.labels[i], j);
    }
  }

  StepMetrics out;
  out.lr = lr;
  Tensor adv_images = batch.images;
  if (method != Method::Pretrain) {
    AttackConfig acfg = cfg.attack;
    acfg.objective = training_objective(method);
    acfg.track_best = false;
    acfg.seed = cfg.attack.seed + trainer.step;
    AttackTarget target{batch.images, text_emb, batch.labels, std::nullopt};
    PerturbationBatch pert = pgd(acfg, model, target);
    out.attack_objective = pert.achieved_objective;
    adv_images = add_tensors(batch.images, pert.delta);
  }

  Graph g;
  ParamVars theta = bind_params(g, model.theta, true);
  ParamVars phi;
  Var x_adv = vision_forward(theta, model.vision, g.constant(adv_images));

  Var base;
  Var txt;
  if (method == Method::Pretrain) {
    phi = bind_params(g, model.phi, true);
    base = contrastive_loss(x_adv, text_forward(phi, model.text, batch.tokens), model.tau);
  } else if (method == Method::Tecoa) {
    txt = g.constant(text_emb);
    base = mean(zero_shot_ce_rows(x_adv, txt, batch.labels));
  } else if (method == Method::Fare) {
    // Pull the adversarial embedding back to the frozen encoder's clean embedding.
    Tensor anchor = encode_images(model, batch.images, true);
    base = mean(row_norms(sub(x_adv, g.constant(std::move(anchor)))));
  } else {
    txt = g.constant(text_emb);
    base = contrastive_loss(x_adv, txt, model.tau);
  }

  Var total = base;
  if (regularized) {
    Var x_frozen = g.constant(encode_images(model, adv_images, true));
    Var x_clean = vision_forward(theta, model.vision, g.constant(batch.images));
    if (cfg.reg_logit) {
      Var lr_term = logit_reg(logit_matrices(x_adv, x_frozen, x_clean, txt));
      out.logit = lr_term.value().item();
      total = add(total, lr_term);
    }
    if (cfg.reg_feat) {
      Var f_term = feature_reg(x_adv, x_frozen, x_clean, cfg.feature_norm);
      out.feat = f_term.value().item();
      total = add(total, f_term);
    }
  }
  out.clip = base.value().item();
  out.loss = total.value().item();
  if (!std::isfinite(out.loss)) fail(ErrorKind::Numeric, "training loss is not finite at step " + std::to_string(trainer.step));

  Gradients grads = g.backward(total);
  ++trainer.step;
  adam_update(model.theta, trainer.adam_theta, collect_grads(grads, theta), lr, trainer.step);
  if (method == Method::Pretrain) adam_update(model.phi, trainer.adam_phi, collect_grads(grads, phi), lr, trainer.step);
  return out;
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["mean_loss"] = r.mean_loss;
  j["loss_clip"] = r.loss_clip;
  j["loss_logit"] = r.loss_logit ? nlohmann::json(*r.loss_logit) : nlohmann::json(nullptr);
  j["loss_feat"] = r.loss_feat ? nlohmann::json(*r.loss_feat) : nlohmann::json(nullptr);
  j["proxy_robust_acc"] = r.proxy_robust_acc;
  j["lr"] = r.lr;
  return j.dump();
}

TrainResult run_training(const TrainConfig& cfg, ModelState init, const TrainData& data, const ProxyScorer& scorer,
                         std::ostream* log_out) {
  cfg.validate();
  const std::size_t n = data.size();
  if (n == 0) fail(ErrorKind::Config, "no training data");
  if (reads_captions(cfg.method) && data.captions.size() != n)
    fail(ErrorKind::Config, "method " + to_string(cfg.method) + " needs one caption per image");
  if (reads_labels(cfg.method) && (data.labels.size() != n || data.class_texts.empty()))
    fail(ErrorKind::Config, "method " + to_string(cfg.method) + " needs labels and class texts");
  if (cfg.batch_size > n)
    fail(ErrorKind::Config, "batch_size " + std::to_string(cfg.batch_size) + " exceeds dataset size " + std::to_string(n));

  TrainerState tr = make_trainer(std::move(init), cfg.method);
  TrainResult res;
  res.best = tr.model;
  if (cfg.total_epochs == 0) return res;

  const std::size_t per_epoch = n / cfg.batch_size;
  const std::size_t total_steps = per_epoch * cfg.total_epochs;

  for (std::size_t epoch = 1; epoch <= cfg.total_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    double logit_sum = 0.0, feat_sum = 0.0;
    const auto batches = epoch_batches(n, cfg.batch_size, cfg.seed, epoch, true);
    for (const auto& idx : batches) {
      ImageTextBatch batch;
      batch.images = stack_images(data.images, idx);
      if (!data.captions.empty() && reads_captions(cfg.method))
        for (auto i : idx) batch.tokens.push_back(data.captions[i]);
      if (!data.labels.empty())
        for (auto i : idx) batch.labels.push_back(data.labels[i]);
      const double lr = cosine_lr(tr.step, total_steps, cfg.lr0);
      const StepMetrics m = train_step(tr, cfg, batch, data.class_texts, lr);
      rec.mean_loss += m.loss;
      rec.loss_clip += m.clip;
      if (m.logit) logit_sum += *m.logit;
      if (m.feat) feat_sum += *m.feat;
    }
    const auto count = static_cast<double>(batches.size());
    rec.mean_loss /= count;
    rec.loss_clip /= count;
    if (cfg.reg_logit) rec.loss_logit = logit_sum / count;
    if (cfg.reg_feat) rec.loss_feat = feat_sum / count;
    rec.lr = cosine_lr(tr.step, total_steps, cfg.lr0);

    const double score = scorer(tr.model);
    if (!std::isfinite(score)) fail(ErrorKind::Numeric, "proxy score is not finite after epoch " + std::to_string(epoch));
    rec.proxy_robust_acc = score;
    tr.epoch = epoch;
    if (score > tr.best_score) {
      tr.best_score = score;
      tr.since_improvement = 0;
      res.best = tr.model;
      res.best_epoch = epoch;
    } else {
      ++tr.since_improvement;
    }
    if (log_out) *log_out << to_json_line(rec) << std::endl;
    res.log.push_back(std::move(rec));
    if (tr.since_improvement >= cfg.patience) {
      res.stopped_early = true;
      break;
    }
  }
  res.epochs_run = tr.epoch;
  return res;
}

}  // namespace advflyp
