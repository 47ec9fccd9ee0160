#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "advflyp/attacks.hpp"
#include "advflyp/data.hpp"
#include "advflyp/encoders.hpp"

namespace advflyp {

/// Index of the largest row of class_emb·e; ties go to the lowest index.
std::size_t zero_shot_predict(const Tensor& image_emb, const Tensor& class_txt_emb);
std::size_t zero_shot_predict(const ModelState& state, const Tensor& image, const Tensor& class_txt_emb);
/// One prediction per row of emb [N×d].
std::vector<std::size_t> zero_shot_predict_rows(const Tensor& emb, const Tensor& class_txt_emb);

struct CosineDeviation {
  std::vector<double> phi;  // radians, one per row
  double mean = 0.0;
  double max = 0.0;
};

CosineDeviation cosine_deviation(const Tensor& clean_emb, const Tensor& adv_emb);

struct EvalAttack {
  std::string name;
  AttackConfig config;
};

/// "pgd:eps=0.0157,steps=10;cw:eps=0.0157,steps=10". Keys: eps, steps, step,
/// init (zero|uniform), seed. Defaults: step = 2.5·eps/steps, best-iterate on.
std::vector<EvalAttack> parse_attack_list(std::string_view text);

struct AttackResult {
  std::string name;
  double epsilon = 0.0;
  int steps = 0;
  double robust_acc = 0.0;
};

struct EvalReport {
  std::string dataset;
  std::size_t n = 0;
  double clean_acc = 0.0;
  std::vector<AttackResult> attacks;
  // Between clean and first-attack adversarial embeddings; zero without attacks.
  double phi_mean = 0.0;
  double phi_max = 0.0;
};

struct EvalOptions {
  std::size_t batch_size = 100;
};

/// Clean and robust zero-shot accuracy. Attacks must be label-based.
EvalReport evaluate(const ModelState& state, const ClassDataset& ds, const std::vector<TokenSeq>& class_texts,
                    const std::vector<EvalAttack>& attacks, const EvalOptions& opts = {});

/// Adversarial images of ds under one attack, stacked [N×C×H×W].
Tensor adversarial_images(const ModelState& state, const ClassDataset& ds, const Tensor& class_emb,
                          const AttackConfig& attack, std::size_t batch_size = 100);

std::string report_to_json(const EvalReport& report);
/// Header "dataset,n,clean,<attack>@<eps>..." plus one data row.
std::string report_to_csv(const EvalReport& report);

}  // namespace advflyp
