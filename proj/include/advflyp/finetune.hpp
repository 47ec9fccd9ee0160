#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "advflyp/attacks.hpp"
#include "advflyp/data.hpp"
#include "advflyp/encoders.hpp"
#include "advflyp/objectives.hpp"

namespace advflyp {

enum class Method { Pretrain, AdvFlyp, AdvFlypFull, Tecoa, Fare, NaiveFlyp };

Method parse_method(std::string_view tag);
std::string to_string(Method method);

struct TrainConfig {
  Method method = Method::AdvFlyp;
  std::size_t batch_size = 256;
  double lr0 = 1e-4;
  std::size_t total_epochs = 10;
  // Objective and track_best are set per method; budget, steps and init are used as given.
  AttackConfig attack{1.0 / 255.0, 1.0 / 255.0, 2, AttackInit::Zero, AttackObjective::Contrastive, false, 0};
  bool reg_logit = false;
  bool reg_feat = false;
  FeatureNorm feature_norm = FeatureNorm::Frobenius;
  std::size_t patience = 10;
  std::uint64_t seed = 0;

  /// Method defaults: advflyp-full turns both regularizers on.
  static TrainConfig for_method(Method method);
  void validate() const;
};

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

struct AdamState {
  ParamMap m;
  ParamMap v;
};

struct TrainerState {
  ModelState model;
  AdamState adam_theta;
  AdamState adam_phi;
  std::size_t step = 0;   // optimizer steps taken
  std::size_t epoch = 0;  // completed epochs
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
};

/// Zeroed optimizer buffers. Finetuning methods snapshot θ₀ if it is absent.
TrainerState make_trainer(ModelState model, Method method);

struct StepMetrics {
  double loss = 0.0;
  double clip = 0.0;  // the method's base loss (contrastive, ce or fare distance)
  std::optional<double> logit;
  std::optional<double> feat;
  double lr = 0.0;
  double attack_objective = 0.0;
};

/// One attack + Adam update. Caption methods read batch.tokens; tecoa and
/// naive-flyp read batch.labels together with the class-template texts.
StepMetrics train_step(TrainerState& trainer, const TrainConfig& cfg, const ImageTextBatch& batch,
                       const std::vector<TokenSeq>& class_texts, double lr);

/// Everything a training run reads.
struct TrainData {
  std::vector<Tensor> images;
  std::vector<TokenSeq> captions;      // one per image (caption methods)
  std::vector<std::size_t> labels;     // one per image (tecoa, naive-flyp)
  std::vector<TokenSeq> class_texts;   // K template texts (tecoa, naive-flyp)

  std::size_t size() const { return images.size(); }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double loss_clip = 0.0;
  std::optional<double> loss_logit;
  std::optional<double> loss_feat;
  double proxy_robust_acc = 0.0;
  double lr = 0.0;  // at the end of the epoch
};

std::string to_json_line(const EpochRecord& record);

using ProxyScorer = std::function<double(const ModelState&)>;

struct TrainResult {
  ModelState best;
  std::size_t best_epoch = 0;  // 0: the initial model
  std::size_t epochs_run = 0;
  bool stopped_early = false;
  std::vector<EpochRecord> log;
};

/// Epoch loop with per-step cosine LR, proxy scoring after every epoch,
/// strict-improvement early stopping. Returns the best-scoring checkpoint.
/// log_out, when given, receives one JSON line per epoch as it completes.
TrainResult run_training(const TrainConfig& cfg, ModelState init, const TrainData& data, const ProxyScorer& scorer,
                         std::ostream* log_out = nullptr);

}  // namespace advflyp
