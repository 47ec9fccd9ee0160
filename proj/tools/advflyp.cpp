// advflyp: synthetic data, pretraining, adversarial finetuning and zero-shot
// evaluation from the command line.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>

#include "advflyp/data.hpp"
#include "advflyp/encoders.hpp"
#include "advflyp/error.hpp"
#include "advflyp/eval.hpp"
#include "advflyp/finetune.hpp"
#include "cli_config.hpp"

namespace fs = std::filesystem;
using namespace advflyp;

namespace {

// A data directory is either a labeled dataset itself or a root holding train/ and eval/.
fs::path split_dir(const fs::path& root, const char* split) {
  if (fs::exists(root / "data.afly")) return root;
  const fs::path sub = root / split;
  if (!fs::exists(sub / "data.afly")) fail(ErrorKind::Io, "no dataset at '" + root.string() + "' or '" + sub.string() + "'");
  return sub;
}

struct LoadedModel {
  ModelState state;
  Vocabulary vocab;
  cli::CheckpointMeta meta;
};

LoadedModel load_model(const fs::path& ckpt) {
  LoadedModel m;
  m.state = load_checkpoint(ckpt);
  m.meta = cli::load_meta(ckpt);
  m.vocab = Vocabulary(m.meta.vocab);
  m.state.vision.nonlinearity = m.meta.vision_nonlinearity;
  m.state.text.nonlinearity = m.meta.text_nonlinearity;
  if (m.state.text.vocab_size != m.vocab.size())
    fail(ErrorKind::Format, "checkpoint token table has " + std::to_string(m.state.text.vocab_size) +
                                " rows but its sidecar lists " + std::to_string(m.vocab.size()) + " tokens");
  return m;
}

void save_model(const fs::path& out, const ModelState& state, const Vocabulary& vocab, std::size_t max_len) {
  save_checkpoint(state, out);
  cli::CheckpointMeta meta;
  meta.vocab.assign(vocab.tokens().begin() + 1, vocab.tokens().end());
  meta.max_len = max_len;
  meta.vision_nonlinearity = state.vision.nonlinearity;
  meta.text_nonlinearity = state.text.nonlinearity;
  cli::save_meta(out, meta);
}

TrainData training_data(const fs::path& dir, const Vocabulary& vocab, std::size_t max_len) {
  const ClassDataset ds = load_class_dataset(dir);
  const auto pairs = load_pairs(dir);
  TrainData data;
  data.images = ds.images;
  data.labels = ds.labels;
  for (const auto& p : pairs) data.captions.push_back(tokenize(p.caption, vocab, max_len));
  data.class_texts = build_class_texts(ds, vocab, max_len);
  return data;
}

ProxyScorer make_proxy(const ClassDataset& proxy, const std::vector<TokenSeq>& texts, const TrainConfig& cfg) {
  if (cfg.method == Method::Pretrain)
    return [&proxy, &texts](const ModelState& s) { return evaluate(s, proxy, texts, {}).clean_acc; };
  AttackConfig a = cfg.attack;
  a.objective = AttackObjective::CrossEntropy;
  a.track_best = false;
  return [&proxy, &texts, a](const ModelState& s) {
    return evaluate(s, proxy, texts, {{"pgd", a}}).attacks.front().robust_acc;
  };
}

std::unique_ptr<std::ofstream> open_log(const std::string& path) {
  if (path.empty()) return nullptr;
  auto out = std::make_unique<std::ofstream>(path);
  if (!*out) fail(ErrorKind::Io, "cannot write '" + path + "'");
  return out;
}

int run_synth(const std::string& spec_path, const fs::path& out) {
  const SynthSpec spec = spec_path.empty() ? SynthSpec{} : cli::parse_synth_spec(cli::read_json(spec_path));
  const SynthData data = synth_generate(spec);

  ClassDataset train;
  train.id = "synthetic-train";
  train.class_names = data.class_names;
  std::vector<std::string> captions;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    train.images.push_back(data.train[i].image);
    train.labels.push_back(data.train_labels[i]);
    captions.push_back(data.train[i].caption);
  }
  save_class_dataset(out / "train", train, captions);
  save_class_dataset(out / "eval", data.eval);
  std::cout << "wrote " << train.size() << " training pairs and " << data.eval.size() << " eval images to " << out
            << '\n';
  return 0;
}

int run_pretrain(const fs::path& data_root, const std::string& config_path, const fs::path& out,
                 const std::string& log_path) {
  const cli::RunConfig rc =
      cli::parse_run_config(config_path.empty() ? nlohmann::json::object() : cli::read_json(config_path), Method::Pretrain);
  const fs::path train_dir = split_dir(data_root, "train");
  const ClassDataset proxy = load_class_dataset(split_dir(data_root, "eval"));

  std::vector<std::string> texts;
  for (const auto& p : load_pairs(train_dir)) texts.push_back(p.caption);
  for (const auto& p : class_prompts(proxy)) texts.push_back(p);
  const Vocabulary vocab = Vocabulary::build(texts);
  const TrainData data = training_data(train_dir, vocab, rc.model.max_len);
  const auto proxy_texts = build_class_texts(proxy, vocab, rc.model.max_len);

  EncoderConfig vision;
  vision.input_dim = data.images.front().size();
  vision.hidden_dims = rc.model.hidden_dims;
  vision.embed_dim = rc.model.embed_dim;
  vision.nonlinearity = rc.model.nonlinearity;
  EncoderConfig text;
  text.input_dim = rc.model.text_width;
  text.hidden_dims = rc.model.text_hidden_dims;
  text.embed_dim = rc.model.embed_dim;
  text.nonlinearity = rc.model.nonlinearity;
  text.vocab_size = vocab.size();
  ModelState init = init_model(vision, text, rc.model.tau, rc.train.seed);

  auto log = open_log(log_path);
  const TrainResult res = run_training(rc.train, std::move(init), data, make_proxy(proxy, proxy_texts, rc.train),
                                       log ? log.get() : &std::cout);
  save_model(out, res.best, vocab, rc.model.max_len);
  std::cerr << "pretrain: " << res.epochs_run << " epochs, best epoch " << res.best_epoch << '\n';
  return 0;
}

int run_finetune(const std::string& method_tag, const fs::path& data_root, const fs::path& init_path,
                 const std::string& config_path, const fs::path& out, std::optional<bool> reg_logit,
                 std::optional<bool> reg_feat, const std::string& log_path) {
  const Method method = parse_method(method_tag);
  if (method == Method::Pretrain) fail(ErrorKind::Config, "use the pretrain subcommand for clean pretraining");
  cli::RunConfig rc =
      cli::parse_run_config(config_path.empty() ? nlohmann::json::object() : cli::read_json(config_path), method);
  if (reg_logit || reg_feat) {
    rc.train.reg_logit = reg_logit.value_or(false);
    rc.train.reg_feat = reg_feat.value_or(false);
  }

  LoadedModel m = load_model(init_path);
  const TrainData data = training_data(split_dir(data_root, "train"), m.vocab, m.meta.max_len);
  const ClassDataset proxy = load_class_dataset(split_dir(data_root, "eval"));
  const auto proxy_texts = build_class_texts(proxy, m.vocab, m.meta.max_len);

  auto log = open_log(log_path);
  const TrainResult res = run_training(rc.train, std::move(m.state), data, make_proxy(proxy, proxy_texts, rc.train),
                                       log ? log.get() : &std::cout);
  save_model(out, res.best, m.vocab, m.meta.max_len);
  std::cerr << to_string(method) << ": " << res.epochs_run << " epochs, best epoch " << res.best_epoch << '\n';
  return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& data_root, const std::string& attacks, const std::string& report_path,
             const std::string& csv_path, std::size_t batch_size) {
  const LoadedModel m = load_model(ckpt);
  const ClassDataset ds = load_class_dataset(split_dir(data_root, "eval"));
  const auto texts = build_class_texts(ds, m.vocab, m.meta.max_len);
  const EvalReport report = evaluate(m.state, ds, texts, parse_attack_list(attacks), {batch_size});

  const std::string json = report_to_json(report);
  if (report_path.empty()) {
    std::cout << json << '\n';
  } else {
    std::ofstream out(report_path);
    out << json << '\n';
    if (!out) fail(ErrorKind::Io, "cannot write '" + report_path + "'");
  }
  if (!csv_path.empty()) {
    std::ofstream out(csv_path);
    out << report_to_csv(report);
    if (!out) fail(ErrorKind::Io, "cannot write '" + csv_path + "'");
  }
  return 0;
}

int run_export(const fs::path& ckpt, const fs::path& data_root, const std::string& attack, const fs::path& out_path) {
  const LoadedModel m = load_model(ckpt);
  const ClassDataset ds = load_class_dataset(split_dir(data_root, "eval"));
  const auto attacks = parse_attack_list(attack);
  if (attacks.size() != 1) fail(ErrorKind::Config, "export-embeddings takes exactly one attack");

  const Tensor class_emb = encode_texts(m.state, build_class_texts(ds, m.vocab, m.meta.max_len));
  const Tensor clean = encode_images(m.state, stack_images(ds.images), false);
  const Tensor adv = encode_images(m.state, adversarial_images(m.state, ds, class_emb, attacks[0].config), false);

  std::ofstream out(out_path);
  if (!out) fail(ErrorKind::Io, "cannot write '" + out_path.string() + "'");
  out.precision(17);
  const std::size_t d = clean.dim(1);
  out << "index\tlabel\tkind";
  for (std::size_t j = 0; j < d; ++j) out << "\te" << j;
  out << '\n';
  for (const auto* emb : {&clean, &adv}) {
    const char* kind = emb == &clean ? "clean" : "adv";
    for (std::size_t i = 0; i < ds.size(); ++i) {
      out << i << '\t' << ds.labels[i] << '\t' << kind;
      for (std::size_t j = 0; j < d; ++j) out << '\t' << emb->at(i, j);
      out << '\n';
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AdvFLYP adversarial contrastive finetuning toolkit"};
  app.require_subcommand(1);

  std::string spec_path, out, data, config, init, method, ckpt, report, csv, log;
  std::string attacks = "pgd:eps=0.00392,steps=10;cw:eps=0.00392,steps=10";
  std::size_t batch_size = 100;
  bool reg_logit = false, reg_feat = false;

  auto* synth = app.add_subcommand("synth", "Write the synthetic benchmark (train/ and eval/)");
  synth->add_option("--spec", spec_path, "SynthSpec JSON");
  synth->add_option("--out", out, "Output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "Clean contrastive pretraining of both towers");
  pretrain->add_option("--data", data, "Data directory")->required();
  pretrain->add_option("--config", config, "Training config JSON");
  pretrain->add_option("--out", out, "Output checkpoint")->required();
  pretrain->add_option("--log", log, "JSON-lines training log (default: stdout)");

  auto* finetune = app.add_subcommand("finetune", "Adversarial finetuning of the vision tower");
  finetune->add_option("--method", method, "advflyp|advflyp-full|tecoa|fare|naive-flyp")->required();
  finetune->add_option("--data", data, "Data directory")->required();
  finetune->add_option("--init", init, "Initial checkpoint")->required();
  finetune->add_option("--config", config, "Training config JSON");
  finetune->add_option("--out", out, "Output checkpoint")->required();
  finetune->add_option("--log", log, "JSON-lines training log (default: stdout)");
  auto* logit_flag = finetune->add_flag("--reg-logit", reg_logit, "Add the logit-level regularizer");
  auto* feat_flag = finetune->add_flag("--reg-feat", reg_feat, "Add the feature-level regularizer");

  auto* eval = app.add_subcommand("eval", "Zero-shot clean and robust accuracy");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_option("--data", data, "Labeled dataset directory")->required();
  eval->add_option("--attacks", attacks, "Semicolon-separated attack list")->capture_default_str();
  eval->add_option("--report", report, "Report JSON (default: stdout)");
  eval->add_option("--csv", csv, "Also write a CSV row");
  eval->add_option("--batch-size", batch_size, "Images per attack batch");

  auto* exp = app.add_subcommand("export-embeddings", "Clean and adversarial image embeddings as TSV");
  exp->add_option("--ckpt", ckpt, "Checkpoint")->required();
  exp->add_option("--data", data, "Labeled dataset directory")->required();
  exp->add_option("--out", out, "Output TSV")->required();
  std::string export_attack = "pgd:eps=0.00392,steps=10";
  exp->add_option("--attack", export_attack, "Attack producing the adversarial embeddings");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) return run_synth(spec_path, out);
    if (*pretrain) return run_pretrain(data, config, out, log);
    if (*finetune) {
      std::optional<bool> rl, rf;
      if (logit_flag->count() || feat_flag->count()) {
        rl = reg_logit;
        rf = reg_feat;
      }
      return run_finetune(method, data, init, config, out, rl, rf, log);
    }
    if (*eval) return run_eval(ckpt, data, attacks, report, csv, batch_size);
    if (*exp) return run_export(ckpt, data, export_attack, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(ErrorKind::Io);
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    return exit_code(ErrorKind::Numeric);
  }
  return 0;
}
