#include "advflyp/encoders.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <iostream>
#include <random>
#include <set>

#include "advflyp/error.hpp"

namespace advflyp {

Nonlinearity parse_nonlinearity(std::string_view tag) {
  if (tag == "relu") return Nonlinearity::Relu;
  if (tag == "tanh") return Nonlinearity::Tanh;
  fail(ErrorKind::Config, "unknown nonlinearity '" + std::string(tag) + "'");
}

std::string to_string(Nonlinearity n) { return n == Nonlinearity::Relu ? "relu" : "tanh"; }

// ---- vocabulary / tokenization -----------------------------------------

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  tokens_.emplace_back(kOovToken);
  index_.emplace(std::string(kOovToken), kOov);
  for (const auto& t : tokens) {
    if (t == kOovToken) continue;
    if (!index_.emplace(t, tokens_.size()).second) fail(ErrorKind::Config, "duplicate vocabulary token '" + t + "'");
    tokens_.push_back(t);
  }
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& text : texts)
    for (auto& w : split_words(text)) words.insert(std::move(w));
  return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

std::size_t Vocabulary::index(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kOov : it->second;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && (std::isspace(c) || std::ispunct(c))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

TokenSeq tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  TokenSeq seq;
  for (const auto& w : split_words(text)) {
    if (seq.size() >= max_len) break;
    seq.push_back(vocab.index(w));
  }
  return seq;
}

// ---- init ---------------------------------------------------------------

namespace {

std::string layer_name(const std::string& tower, std::size_t i) { return tower + ".fc" + std::to_string(i); }

Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor w({fan_in, fan_out});
  for (double& v : w.data()) v = dist(rng);
  return w;
}

void add_mlp(ParamMap& params, const std::string& tower, std::size_t in, const EncoderConfig& cfg, std::mt19937_64& rng) {
  std::size_t width = in;
  for (std::size_t i = 0; i < cfg.hidden_dims.size(); ++i) {
    params[layer_name(tower, i) + ".weight"] = glorot(width, cfg.hidden_dims[i], rng);
    params[layer_name(tower, i) + ".bias"] = Tensor({cfg.hidden_dims[i]}, 0.0);
    width = cfg.hidden_dims[i];
  }
  params[tower + ".proj.weight"] = glorot(width, cfg.embed_dim, rng);
  params[tower + ".proj.bias"] = Tensor({cfg.embed_dim}, 0.0);
}

void validate(const EncoderConfig& cfg, const char* tower) {
  auto bad = [&](const std::string& what) { fail(ErrorKind::Config, std::string(tower) + " encoder: " + what); };
  if (cfg.input_dim == 0) bad("input_dim must be positive");
  if (cfg.embed_dim == 0) bad("embed_dim must be positive");
  for (auto h : cfg.hidden_dims)
    if (h == 0) bad("hidden dims must be positive");
}

Var mlp_forward(const ParamVars& p, const std::string& tower, const EncoderConfig& cfg, Var x) {
  for (std::size_t i = 0; i < cfg.hidden_dims.size(); ++i) {
    x = add_row_vector(matmul(x, p[layer_name(tower, i) + ".weight"]), p[layer_name(tower, i) + ".bias"]);
    x = cfg.nonlinearity == Nonlinearity::Relu ? relu(x) : tanh(x);
  }
  x = add_row_vector(matmul(x, p[tower + ".proj.weight"]), p[tower + ".proj.bias"]);
  return l2_normalize_rows(x);
}

void warn_pixel_range(const Tensor& images) {
  static std::atomic<bool> warned{false};
  constexpr double kSlack = 1e-6;
  for (double v : images.data()) {
    if (v < -kSlack || v > 1.0 + kSlack) {
      if (!warned.exchange(true)) std::cerr << "warning: image pixels outside [0,1] passed to the vision encoder\n";
      return;
    }
  }
}

}  // namespace

ModelState init_model(const EncoderConfig& vision_cfg, const EncoderConfig& text_cfg, double tau, std::uint64_t seed) {
  validate(vision_cfg, "vision");
  validate(text_cfg, "text");
  if (text_cfg.vocab_size == 0) fail(ErrorKind::Config, "text encoder: vocab_size must be positive");
  if (vision_cfg.embed_dim != text_cfg.embed_dim)
    fail(ErrorKind::Config, "embed_dim mismatch: vision " + std::to_string(vision_cfg.embed_dim) + " vs text " +
                                std::to_string(text_cfg.embed_dim));
  if (!(tau > 0.0) || !std::isfinite(tau)) fail(ErrorKind::Config, "tau must be positive");

  ModelState state;
  state.vision = vision_cfg;
  state.text = text_cfg;
  state.tau = tau;

  std::seed_seq vs{seed, vision_cfg.seed, std::uint64_t{1}};
  std::mt19937_64 vrng(vs);
  add_mlp(state.theta, "vision", vision_cfg.input_dim, vision_cfg, vrng);

  std::seed_seq ts{seed, text_cfg.seed, std::uint64_t{2}};
  std::mt19937_64 trng(ts);
  state.phi["text.token_embedding"] = glorot(text_cfg.vocab_size, text_cfg.input_dim, trng);
  add_mlp(state.phi, "text", text_cfg.input_dim, text_cfg, trng);
  return state;
}

void snapshot_frozen(ModelState& state) {
  if (state.has_frozen()) fail(ErrorKind::Contract, "frozen vision snapshot already taken");
  state.theta0 = std::make_shared<const ParamMap>(state.theta);
}

// ---- graph binding ------------------------------------------------------

const Var& ParamVars::operator[](const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) fail(ErrorKind::Config, "missing parameter '" + name + "'");
  return it->second;
}

ParamVars bind_params(Graph& graph, const ParamMap& params, bool trainable) {
  ParamVars out;
  for (const auto& [name, t] : params) {
    Tensor copy = t;
    copy.set_requires_grad(trainable);
    out.vars.emplace(name, trainable ? graph.variable(std::move(copy)) : graph.constant(std::move(copy)));
  }
  return out;
}

ParamMap collect_grads(const Gradients& grads, const ParamVars& params) {
  ParamMap out;
  for (const auto& [name, v] : params.vars) out.emplace(name, grads.contains(v) ? grads[v] : Tensor(v.shape(), 0.0));
  return out;
}

Var vision_forward(const ParamVars& theta, const EncoderConfig& cfg, Var images) {
  const Shape& s = images.shape();
  if (s.empty()) fail(ErrorKind::Dimension, "vision encoder: empty image shape");
  const std::size_t n = s[0];
  const std::size_t flat = images.value().size() / n;
  if (flat != cfg.input_dim)
    fail(ErrorKind::Dimension, "vision encoder expects " + std::to_string(cfg.input_dim) + " values per image, got " +
                                   shape_string(s));
  Var x = s.size() == 2 ? images : reshape(images, {n, flat});
  return mlp_forward(theta, "vision", cfg, x);
}

Var text_forward(const ParamVars& phi, const EncoderConfig& cfg, const std::vector<TokenSeq>& tokens) {
  if (tokens.empty()) fail(ErrorKind::Contract, "text encoder needs a nonempty batch");
  const Var& table = phi["text.token_embedding"];
  std::vector<Var> pooled;
  pooled.reserve(tokens.size());
  for (const auto& seq : tokens) {
    std::vector<std::size_t> ids = seq.empty() ? std::vector<std::size_t>{Vocabulary::kOov} : seq;
    Var rows = gather_rows(table, std::move(ids));
    pooled.push_back(rows.shape()[0] == 1 ? rows : col_mean(rows));
  }
  return mlp_forward(phi, "text", cfg, concat_rows(pooled));
}

Tensor encode_images(const ModelState& state, const Tensor& images, bool use_frozen) {
  if (use_frozen && !state.has_frozen()) fail(ErrorKind::Contract, "no frozen snapshot to encode with");
  warn_pixel_range(images);
  Graph g;
  ParamVars p = bind_params(g, use_frozen ? *state.theta0 : state.theta, false);
  return vision_forward(p, state.vision, g.constant(images)).value();
}

Tensor encode_texts(const ModelState& state, const std::vector<TokenSeq>& tokens) {
  Graph g;
  ParamVars p = bind_params(g, state.phi, false);
  return text_forward(p, state.text, tokens).value();
}

}  // namespace advflyp
