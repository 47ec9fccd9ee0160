#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "advflyp/encoders.hpp"
#include "advflyp/tensor.hpp"

namespace advflyp {

inline constexpr std::string_view kClassPlaceholder = "[CLS]";
inline constexpr std::string_view kDefaultTemplate = "This is a photo of a [CLS].";

struct ImageTextPair {
  Tensor image;  // [C×H×W], pixels in [0,1]
  std::string caption;
};

struct ClassDataset {
  std::string id;
  std::vector<Tensor> images;  // each [C×H×W]
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;
  std::string template_text{kDefaultTemplate};

  std::size_t size() const { return images.size(); }
  void validate() const;
};

// ---- shards -------------------------------------------------------------

std::string serialize_shard(const std::vector<ImageTextPair>& records);
std::vector<ImageTextPair> deserialize_shard(std::string_view bytes);
void write_shard(const std::filesystem::path& path, const std::vector<ImageTextPair>& records);
std::vector<ImageTextPair> read_shard(const std::filesystem::path& path);

/// A labeled directory: data.afly, labels.tsv ("record<TAB>class"), classes.txt
/// and an optional template.txt. Shard captions are kept as-is.
void save_class_dataset(const std::filesystem::path& dir, const ClassDataset& ds,
                        const std::vector<std::string>& captions = {});
ClassDataset load_class_dataset(const std::filesystem::path& dir);
/// Pairs of a labeled directory (images with their shard captions).
std::vector<ImageTextPair> load_pairs(const std::filesystem::path& dir);

/// TSV of "image-path<TAB>caption". Paths are relative to the manifest and name
/// either a shard record ("file.afly#3"), a single-record shard, or a binary PPM.
std::vector<ImageTextPair> load_manifest(const std::filesystem::path& path);

Tensor read_ppm(const std::filesystem::path& path);

// ---- synthetic benchmark ------------------------------------------------

struct SynthSpec {
  std::size_t num_concepts = 8;
  std::size_t pairs_per_concept = 250;
  std::size_t image_size = 16;  // square, 3 channels
  double noise_sigma = 0.05;
  std::uint64_t seed = 7;

  // Prototype structure: a faint dense texture plus a bright localized patch.
  double texture_amplitude = 0.01;
  double patch_amplitude = 0.1;
  std::size_t patch_size = 4;
  double eval_fraction = 0.2;

  void validate() const;
};

struct SynthData {
  std::vector<ImageTextPair> train;
  std::vector<std::size_t> train_labels;
  ClassDataset eval;
  std::vector<std::string> class_names;
  std::vector<Tensor> prototypes;  // noise-free image of each concept
};

SynthData synth_generate(const SynthSpec& spec);

/// Caption vocabulary of each synthetic concept; index 0 is the class name.
std::vector<std::string> concept_synonyms(std::size_t concept_index);

// ---- text prompts and batching -----------------------------------------

std::vector<std::string> class_prompts(const ClassDataset& ds);
std::vector<TokenSeq> build_class_texts(const ClassDataset& ds, const Vocabulary& vocab, std::size_t max_len);

/// Index batches of one epoch, shuffled by (seed, epoch).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t num_items, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch, bool drop_last = true);

struct ImageTextBatch {
  Tensor images;                   // [N×C×H×W]
  std::vector<TokenSeq> tokens;    // one per image; empty for purely labeled batches
  std::vector<std::size_t> labels; // one per image; empty for caption batches

  std::size_t size() const { return images.ndim() ? images.dim(0) : 0; }
};

Tensor stack_images(const std::vector<Tensor>& images, const std::vector<std::size_t>& indices);
Tensor stack_images(const std::vector<Tensor>& images);

}  // namespace advflyp
