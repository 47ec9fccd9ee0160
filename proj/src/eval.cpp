#include "advflyp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "advflyp/error.hpp"

namespace advflyp {

namespace {

void check_class_emb(const Tensor& class_txt_emb) {
  if (class_txt_emb.ndim() != 2 || class_txt_emb.dim(0) == 0)
    fail(ErrorKind::Config, "zero-shot prediction needs at least one class text");
}

std::size_t argmax_row(const Tensor& emb, std::size_t row, const Tensor& cls) {
  const std::size_t d = cls.dim(1);
  std::size_t best = 0;
  double best_s = 0.0;
  for (std::size_t k = 0; k < cls.dim(0); ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += emb[row * d + j] * cls.at(k, j);
    if (k == 0 || s > best_s) {
      best = k;
      best_s = s;
    }
  }
  return best;
}

double parse_number(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != value.size()) fail(ErrorKind::Config, "attack option " + key + ": bad number '" + value + "'");
  return v;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

}  // namespace

std::size_t zero_shot_predict(const Tensor& image_emb, const Tensor& class_txt_emb) {
  check_class_emb(class_txt_emb);
  if (image_emb.size() != class_txt_emb.dim(1))
    fail(ErrorKind::Dimension, "image embedding of size " + std::to_string(image_emb.size()) + " vs class width " +
                                   std::to_string(class_txt_emb.dim(1)));
  return argmax_row(image_emb, 0, class_txt_emb);
}

std::size_t zero_shot_predict(const ModelState& state, const Tensor& image, const Tensor& class_txt_emb) {
  Shape batched{1};
  batched.insert(batched.end(), image.shape().begin(), image.shape().end());
  return zero_shot_predict(encode_images(state, image.reshaped(batched), false), class_txt_emb);
}

std::vector<std::size_t> zero_shot_predict_rows(const Tensor& emb, const Tensor& class_txt_emb) {
  check_class_emb(class_txt_emb);
  if (emb.ndim() != 2 || emb.dim(1) != class_txt_emb.dim(1))
    fail(ErrorKind::Dimension, "embeddings " + shape_string(emb.shape()) + " vs class texts " +
                                   shape_string(class_txt_emb.shape()));
  std::vector<std::size_t> out(emb.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax_row(emb, i, class_txt_emb);
  return out;
}

CosineDeviation cosine_deviation(const Tensor& clean_emb, const Tensor& adv_emb) {
  if (clean_emb.shape() != adv_emb.shape() || clean_emb.ndim() != 2)
    fail(ErrorKind::Dimension, "cosine_deviation: " + shape_string(clean_emb.shape()) + " vs " +
                                   shape_string(adv_emb.shape()));
  const std::size_t n = clean_emb.dim(0), d = clean_emb.dim(1);
  CosineDeviation out;
  out.phi.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double c = 0.0;
    for (std::size_t j = 0; j < d; ++j) c += clean_emb.at(i, j) * adv_emb.at(i, j);
    out.phi[i] = std::acos(std::clamp(c, -1.0, 1.0));
    out.mean += out.phi[i];
    out.max = std::max(out.max, out.phi[i]);
  }
  if (n > 0) out.mean /= static_cast<double>(n);
  return out;
}

std::vector<EvalAttack> parse_attack_list(std::string_view text) {
  std::vector<EvalAttack> out;
  std::stringstream items{std::string(text)};
  for (std::string item; std::getline(items, item, ';');) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    EvalAttack a;
    a.name = trim(item.substr(0, colon));
    a.config.objective = parse_attack_objective(a.name);
    if (a.config.objective == AttackObjective::Contrastive)
      fail(ErrorKind::Config, "evaluation attacks are label-based; 'contrastive' is not allowed");
    a.config.track_best = true;
    a.config.steps = 10;
    a.config.epsilon = 1.0 / 255.0;
    bool step_given = false;
    if (colon != std::string::npos) {
      std::stringstream opts(item.substr(colon + 1));
      for (std::string kv; std::getline(opts, kv, ',');) {
        kv = trim(kv);
        if (kv.empty()) continue;
        const auto eq = kv.find('=');
        if (eq == std::string::npos) fail(ErrorKind::Config, "attack option '" + kv + "' lacks '='");
        const std::string key = trim(kv.substr(0, eq)), value = trim(kv.substr(eq + 1));
        if (key == "eps") {
          a.config.epsilon = parse_number(key, value);
        } else if (key == "steps") {
          const double s = parse_number(key, value);
          if (s != std::floor(s) || s < 1) fail(ErrorKind::Config, "attack steps must be a positive integer");
          a.config.steps = static_cast<int>(s);
        } else if (key == "step") {
          a.config.step_size = parse_number(key, value);
          step_given = true;
        } else if (key == "init") {
          if (value == "zero") a.config.init = AttackInit::Zero;
          else if (value == "uniform") a.config.init = AttackInit::Uniform;
          else fail(ErrorKind::Config, "attack init must be zero or uniform");
        } else if (key == "seed") {
          a.config.seed = static_cast<std::uint64_t>(parse_number(key, value));
        } else {
          fail(ErrorKind::Config, "unknown attack option '" + key + "'");
        }
      }
    }
    if (!step_given) a.config.step_size = 2.5 * a.config.epsilon / a.config.steps;
    a.config.validate();
    out.push_back(std::move(a));
  }
  return out;
}

Tensor adversarial_images(const ModelState& state, const ClassDataset& ds, const Tensor& class_emb,
                          const AttackConfig& attack, std::size_t batch_size) {
  if (attack.objective == AttackObjective::Contrastive)
    fail(ErrorKind::Config, "evaluation attacks are label-based; 'contrastive' is not allowed");
  if (batch_size == 0) fail(ErrorKind::Config, "batch_size must be positive");
  Tensor all = stack_images(ds.images);
  const std::size_t per = all.size() / ds.size();
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, ds.size());
    AttackTarget target;
    target.images = all.slice_rows(start, end);
    target.text_emb = class_emb;
    target.labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(start),
                         ds.labels.begin() + static_cast<std::ptrdiff_t>(end));
    const PerturbationBatch pert = pgd(attack, state, target);
    auto dst = all.data().subspan(start * per, (end - start) * per);
    auto ds_ = pert.delta.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += ds_[i];
  }
  return all;
}

EvalReport evaluate(const ModelState& state, const ClassDataset& ds, const std::vector<TokenSeq>& class_texts,
                    const std::vector<EvalAttack>& attacks, const EvalOptions& opts) {
  ds.validate();
  if (class_texts.size() != ds.class_names.size())
    fail(ErrorKind::Config, "expected one class text per class name");
  for (const auto& a : attacks)
    if (a.config.objective == AttackObjective::Contrastive)
      fail(ErrorKind::Config, "evaluation attacks are label-based; 'contrastive' is not allowed");

  EvalReport report;
  report.dataset = ds.id;
  report.n = ds.size();
  if (ds.size() == 0) return report;

  const Tensor class_emb = encode_texts(state, class_texts);
  const Tensor clean_emb = encode_images(state, stack_images(ds.images), false);
  auto accuracy = [&](const Tensor& emb) {
    const auto pred = zero_shot_predict_rows(emb, class_emb);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == ds.labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
  };
  report.clean_acc = accuracy(clean_emb);

  for (std::size_t a = 0; a < attacks.size(); ++a) {
    const Tensor adv = adversarial_images(state, ds, class_emb, attacks[a].config, opts.batch_size);
    const Tensor adv_emb = encode_images(state, adv, false);
    report.attacks.push_back(
        {attacks[a].name, attacks[a].config.epsilon, attacks[a].config.steps, accuracy(adv_emb)});
    if (a == 0) {
      const CosineDeviation dev = cosine_deviation(clean_emb, adv_emb);
      report.phi_mean = dev.mean;
      report.phi_max = dev.max;
    }
  }
  return report;
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["dataset"] = r.dataset;
  j["n"] = r.n;
  j["clean_acc"] = r.clean_acc;
  j["attacks"] = nlohmann::json::array();
  for (const auto& a : r.attacks)
    j["attacks"].push_back({{"name", a.name}, {"eps", a.epsilon}, {"steps", a.steps}, {"robust_acc", a.robust_acc}});
  j["phi"] = {{"mean", r.phi_mean}, {"max", r.phi_max}};
  return j.dump(2);
}

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream head, row;
  head << "dataset,n,clean";
  row << r.dataset << ',' << r.n << ',' << r.clean_acc;
  for (const auto& a : r.attacks) {
    head << ',' << a.name << a.steps << "@" << a.epsilon;
    row << ',' << a.robust_acc;
  }
  head << ",phi_mean,phi_max\n";
  row << ',' << r.phi_mean << ',' << r.phi_max << '\n';
  return head.str() + row.str();
}

}  // namespace advflyp
