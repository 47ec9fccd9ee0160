#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "advflyp/data.hpp"
#include "advflyp/encoders.hpp"
#include "advflyp/finetune.hpp"

namespace advflyp::cli {

/// Model shape as given in a config file; input sizes come from the data.
struct ModelConfig {
  std::vector<std::size_t> hidden_dims{128};
  std::vector<std::size_t> text_hidden_dims{128};
  std::size_t embed_dim = 32;
  std::size_t text_width = 32;
  Nonlinearity nonlinearity = Nonlinearity::Relu;
  double tau = 0.07;
  std::size_t max_len = 16;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

nlohmann::json read_json(const std::filesystem::path& path);

/// Flat JSON object; unknown keys are rejected.
RunConfig parse_run_config(const nlohmann::json& j, Method method);

SynthSpec parse_synth_spec(const nlohmann::json& j);

/// What a checkpoint needs beside its tensors: written next to it as <ckpt>.meta.json.
struct CheckpointMeta {
  std::vector<std::string> vocab;  // without the OOV token
  std::size_t max_len = 16;
  Nonlinearity vision_nonlinearity = Nonlinearity::Relu;
  Nonlinearity text_nonlinearity = Nonlinearity::Relu;
};

std::filesystem::path meta_path(const std::filesystem::path& ckpt);
void save_meta(const std::filesystem::path& ckpt, const CheckpointMeta& meta);
CheckpointMeta load_meta(const std::filesystem::path& ckpt);

}  // namespace advflyp::cli
