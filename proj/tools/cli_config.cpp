#include "cli_config.hpp"

#include <fstream>
#include <set>

#include "advflyp/error.hpp"

namespace advflyp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
T get(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Config, std::string("config key '") + key + "' has the wrong type");
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known) {
  if (!j.is_object()) fail(ErrorKind::Config, "config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) fail(ErrorKind::Config, "unknown config key '" + key + "'");
}

FeatureNorm parse_feature_norm(const std::string& s) {
  if (s == "frobenius") return FeatureNorm::Frobenius;
  if (s == "row-mean") return FeatureNorm::RowMean;
  fail(ErrorKind::Config, "feature_norm must be frobenius or row-mean");
}

}  // namespace

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

RunConfig parse_run_config(const json& j, Method method) {
  reject_unknown(j, {"hidden_dims", "text_hidden_dims", "embed_dim", "text_width", "nonlinearity", "tau", "max_len",
                     "batch_size", "lr0", "epochs", "patience", "seed", "eps", "step_size", "steps", "init",
                     "feature_norm"});
  RunConfig rc;
  ModelConfig& m = rc.model;
  m.hidden_dims = get(j, "hidden_dims", m.hidden_dims);
  m.text_hidden_dims = get(j, "text_hidden_dims", m.text_hidden_dims);
  m.embed_dim = get(j, "embed_dim", m.embed_dim);
  m.text_width = get(j, "text_width", m.text_width);
  m.nonlinearity = parse_nonlinearity(get<std::string>(j, "nonlinearity", to_string(m.nonlinearity)));
  m.tau = get(j, "tau", m.tau);
  m.max_len = get(j, "max_len", m.max_len);

  TrainConfig& t = rc.train;
  t = TrainConfig::for_method(method);
  t.batch_size = get(j, "batch_size", t.batch_size);
  t.lr0 = get(j, "lr0", t.lr0);
  t.total_epochs = get(j, "epochs", t.total_epochs);
  t.patience = get(j, "patience", t.patience);
  t.seed = get(j, "seed", t.seed);
  t.attack.epsilon = get(j, "eps", t.attack.epsilon);
  t.attack.step_size = get(j, "step_size", t.attack.epsilon);
  t.attack.steps = get(j, "steps", t.attack.steps);
  t.attack.seed = t.seed;
  const auto init = get<std::string>(j, "init", "zero");
  if (init == "uniform") t.attack.init = AttackInit::Uniform;
  else if (init != "zero") fail(ErrorKind::Config, "init must be zero or uniform");
  t.feature_norm = parse_feature_norm(get<std::string>(j, "feature_norm", "frobenius"));
  return rc;
}

SynthSpec parse_synth_spec(const json& j) {
  reject_unknown(j, {"num_concepts", "pairs_per_concept", "image_size", "noise_sigma", "seed", "texture_amplitude",
                     "patch_amplitude", "patch_size", "eval_fraction"});
  SynthSpec s;
  s.num_concepts = get(j, "num_concepts", s.num_concepts);
  s.pairs_per_concept = get(j, "pairs_per_concept", s.pairs_per_concept);
  s.image_size = get(j, "image_size", s.image_size);
  s.noise_sigma = get(j, "noise_sigma", s.noise_sigma);
  s.seed = get(j, "seed", s.seed);
  s.texture_amplitude = get(j, "texture_amplitude", s.texture_amplitude);
  s.patch_amplitude = get(j, "patch_amplitude", s.patch_amplitude);
  s.patch_size = get(j, "patch_size", s.patch_size);
  s.eval_fraction = get(j, "eval_fraction", s.eval_fraction);
  s.validate();
  return s;
}

fs::path meta_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".meta.json"); }

void save_meta(const fs::path& ckpt, const CheckpointMeta& meta) {
  json j;
  j["vocab"] = meta.vocab;
  j["max_len"] = meta.max_len;
  j["vision_nonlinearity"] = to_string(meta.vision_nonlinearity);
  j["text_nonlinearity"] = to_string(meta.text_nonlinearity);
  std::ofstream out(meta_path(ckpt));
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "cannot write '" + meta_path(ckpt).string() + "'");
}

CheckpointMeta load_meta(const fs::path& ckpt) {
  const fs::path p = meta_path(ckpt);
  if (!fs::exists(p)) fail(ErrorKind::Io, "missing checkpoint sidecar '" + p.string() + "'");
  json j;
  {
    std::ifstream in(p);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      fail(ErrorKind::Format, "'" + p.string() + "' is not valid JSON: " + e.what());
    }
  }
  CheckpointMeta meta;
  try {
    meta.vocab = j.at("vocab").get<std::vector<std::string>>();
    meta.max_len = j.at("max_len").get<std::size_t>();
    meta.vision_nonlinearity = parse_nonlinearity(j.at("vision_nonlinearity").get<std::string>());
    meta.text_nonlinearity = parse_nonlinearity(j.at("text_nonlinearity").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "malformed checkpoint sidecar '" + p.string() + "': " + e.what());
  }
  return meta;
}

}  // namespace advflyp::cli
