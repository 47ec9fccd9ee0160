#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "advflyp/tensor.hpp"

namespace advflyp {

enum class Nonlinearity { Relu, Tanh };

Nonlinearity parse_nonlinearity(std::string_view tag);
std::string to_string(Nonlinearity n);

struct EncoderConfig {
  // C·H·W for the vision tower, token-embedding width for the text tower.
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t embed_dim = 0;
  Nonlinearity nonlinearity = Nonlinearity::Relu;
  std::uint64_t seed = 0;
  // Text tower only: rows of the token-embedding table.
  std::size_t vocab_size = 0;
};

using ParamMap = std::map<std::string, Tensor>;

/// Dual-encoder parameters. theta0 is the frozen vision snapshot, shared and
/// never mutated once taken.
struct ModelState {
  EncoderConfig vision;
  EncoderConfig text;
  ParamMap theta;
  ParamMap phi;
  double tau = 0.07;
  std::shared_ptr<const ParamMap> theta0;

  bool has_frozen() const { return theta0 != nullptr; }
};

class Vocabulary {
 public:
  static constexpr std::size_t kOov = 0;
  static constexpr std::string_view kOovToken = "<unk>";

  Vocabulary();
  /// Index 0 is always the OOV token; `tokens` must not repeat.
  explicit Vocabulary(const std::vector<std::string>& tokens);
  /// Sorted unique words of the given texts after normalization.
  static Vocabulary build(const std::vector<std::string>& texts);

  std::size_t size() const { return tokens_.size(); }
  std::size_t index(std::string_view word) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

using TokenSeq = std::vector<std::size_t>;

/// Lowercased words split on whitespace and ASCII punctuation.
std::vector<std::string> split_words(std::string_view text);
TokenSeq tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

ModelState init_model(const EncoderConfig& vision_cfg, const EncoderConfig& text_cfg, double tau, std::uint64_t seed);

/// Deep copy theta into theta0. A second call is a contract error.
void snapshot_frozen(ModelState& state);

/// Parameters placed on a graph as leaves.
struct ParamVars {
  std::map<std::string, Var> vars;
  const Var& operator[](const std::string& name) const;
};

ParamVars bind_params(Graph& graph, const ParamMap& params, bool trainable);
/// Gradients of the bound leaves, zero-filled for leaves the loss did not reach.
ParamMap collect_grads(const Gradients& grads, const ParamVars& params);

/// Images [N×C×H×W] (or already flat [N×D]) -> unit rows [N×d].
Var vision_forward(const ParamVars& theta, const EncoderConfig& cfg, Var images);
/// Token sequences -> unit rows [N×d]. Empty sequences pool to the OOV row.
Var text_forward(const ParamVars& phi, const EncoderConfig& cfg, const std::vector<TokenSeq>& tokens);

/// Gradient-free conveniences.
Tensor encode_images(const ModelState& state, const Tensor& images, bool use_frozen);
Tensor encode_texts(const ModelState& state, const std::vector<TokenSeq>& tokens);

// Binary checkpoint: see README for the byte layout.
std::string serialize_checkpoint(const ModelState& state);
ModelState deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace advflyp
