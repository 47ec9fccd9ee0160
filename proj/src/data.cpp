#include "advflyp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "advflyp/error.hpp"
#include "binary_io.hpp"

namespace advflyp {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kShardMagic = "AFLY";
constexpr std::uint32_t kShardVersion = 1;

void check_pixels(const Tensor& image, const std::string& where) {
  for (double v : image.data())
    if (!(v >= 0.0 && v <= 1.0)) fail(ErrorKind::Validation, where + ": pixel value " + std::to_string(v) + " outside [0,1]");
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::size_t parse_index(const std::string& text, const std::string& where) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    fail(ErrorKind::Parse, where + ": expected a non-negative integer, got '" + text + "'");
  }
  if (pos != text.size() || text.empty() || text[0] == '-')
    fail(ErrorKind::Parse, where + ": expected a non-negative integer, got '" + text + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

void ClassDataset::validate() const {
  if (labels.size() != images.size()) fail(ErrorKind::Validation, "dataset '" + id + "': one label per image required");
  std::set<std::string> seen;
  for (const auto& c : class_names)
    if (!seen.insert(c).second) fail(ErrorKind::Validation, "dataset '" + id + "': duplicate class name '" + c + "'");
  for (auto l : labels)
    if (l >= class_names.size()) fail(ErrorKind::Validation, "dataset '" + id + "': label " + std::to_string(l) + " out of range");
}

// ---- shards -------------------------------------------------------------

std::string serialize_shard(const std::vector<ImageTextPair>& records) {
  detail::ByteWriter w;
  w.raw(kShardMagic);
  w.u32(kShardVersion);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.image.ndim() != 3) fail(ErrorKind::Dimension, "shard images must be [C×H×W], got " + shape_string(r.image.shape()));
    check_pixels(r.image, "shard record");
    for (auto d : r.image.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : r.image.data()) w.f32(static_cast<float>(v));
    w.u32(static_cast<std::uint32_t>(r.caption.size()));
    w.raw(r.caption);
  }
  return w.take();
}

std::vector<ImageTextPair> deserialize_shard(std::string_view bytes) {
  if (bytes.size() < kShardMagic.size() || bytes.substr(0, kShardMagic.size()) != kShardMagic)
    fail(ErrorKind::Format, "bad shard magic");
  detail::ByteReader r(bytes, "shard");
  r.raw(kShardMagic.size());
  if (const auto v = r.u32(); v != kShardVersion) fail(ErrorKind::Format, "unsupported shard version " + std::to_string(v));
  const std::uint32_t count = r.u32();
  std::vector<ImageTextPair> out;
  out.reserve(std::min<std::size_t>(count, r.remaining() / 16 + 1));
  for (std::uint32_t i = 0; i < count; ++i) {
    Shape shape{r.u32(), r.u32(), r.u32()};
    for (auto d : shape)
      if (d == 0) fail(ErrorKind::Format, "shard record " + std::to_string(i) + " has a zero dimension");
    const std::size_t n = shape_size(shape);
    if (r.remaining() < n * 4) fail(ErrorKind::Io, "shard truncated inside record " + std::to_string(i));
    std::vector<double> px(n);
    for (auto& v : px) v = static_cast<double>(r.f32());
    Tensor image(std::move(shape), std::move(px));
    check_pixels(image, "shard record " + std::to_string(i));
    std::string caption(r.raw(r.u32()));
    out.push_back(ImageTextPair{std::move(image), std::move(caption)});
  }
  if (!r.at_end()) fail(ErrorKind::Format, "trailing bytes after shard records");
  return out;
}

void write_shard(const fs::path& path, const std::vector<ImageTextPair>& records) {
  detail::write_file(path.string(), serialize_shard(records));
}

std::vector<ImageTextPair> read_shard(const fs::path& path) {
  return deserialize_shard(detail::read_file(path.string()));
}

void save_class_dataset(const fs::path& dir, const ClassDataset& ds, const std::vector<std::string>& captions) {
  ds.validate();
  if (!captions.empty() && captions.size() != ds.size())
    fail(ErrorKind::Contract, "save_class_dataset: one caption per image required");
  fs::create_directories(dir);
  std::vector<ImageTextPair> records;
  records.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) records.push_back({ds.images[i], captions.empty() ? std::string() : captions[i]});
  write_shard(dir / "data.afly", records);

  std::ofstream labels(dir / "labels.tsv");
  for (std::size_t i = 0; i < ds.size(); ++i) labels << i << '\t' << ds.labels[i] << '\n';
  std::ofstream classes(dir / "classes.txt");
  for (const auto& c : ds.class_names) classes << c << '\n';
  std::ofstream tmpl(dir / "template.txt");
  tmpl << ds.template_text << '\n';
  if (!labels || !classes || !tmpl) fail(ErrorKind::Io, "cannot write dataset files under '" + dir.string() + "'");
}

std::vector<ImageTextPair> load_pairs(const fs::path& dir) { return read_shard(dir / "data.afly"); }

ClassDataset load_class_dataset(const fs::path& dir) {
  ClassDataset ds;
  ds.id = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  auto records = read_shard(dir / "data.afly");

  for (auto& line : read_lines(dir / "classes.txt"))
    if (!line.empty()) ds.class_names.push_back(std::move(line));
  if (fs::exists(dir / "template.txt")) {
    auto lines = read_lines(dir / "template.txt");
    if (!lines.empty() && !lines[0].empty()) ds.template_text = lines[0];
  }

  std::vector<std::optional<std::size_t>> labels(records.size());
  const auto label_lines = read_lines(dir / "labels.tsv");
  for (std::size_t ln = 0; ln < label_lines.size(); ++ln) {
    const auto& line = label_lines[ln];
    if (line.empty()) continue;
    const std::string where = (dir / "labels.tsv").string() + ":" + std::to_string(ln + 1);
    const auto tab = line.find('\t');
    if (tab == std::string::npos) fail(ErrorKind::Parse, where + ": missing TAB");
    const std::size_t rec = parse_index(line.substr(0, tab), where);
    const std::size_t cls = parse_index(line.substr(tab + 1), where);
    if (rec >= records.size()) fail(ErrorKind::Validation, where + ": record " + std::to_string(rec) + " does not exist");
    labels[rec] = cls;
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!labels[i]) fail(ErrorKind::Validation, "record " + std::to_string(i) + " of '" + dir.string() + "' has no label");
    ds.images.push_back(std::move(records[i].image));
    ds.labels.push_back(*labels[i]);
  }
  ds.validate();
  return ds;
}

// ---- manifests ----------------------------------------------------------

Tensor read_ppm(const fs::path& path) {
  const std::string bytes = detail::read_file(path.string());
  std::istringstream in(bytes);
  auto token = [&]() {
    std::string t;
    while (in >> t) {
      if (t[0] != '#') return t;
      std::string rest;
      std::getline(in, rest);
    }
    fail(ErrorKind::Format, "truncated PPM header in '" + path.string() + "'");
  };
  if (token() != "P6") fail(ErrorKind::Format, "'" + path.string() + "' is not a binary PPM (P6)");
  const std::size_t w = parse_index(token(), path.string());
  const std::size_t h = parse_index(token(), path.string());
  const std::size_t maxval = parse_index(token(), path.string());
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) fail(ErrorKind::Format, "unsupported PPM header in '" + path.string() + "'");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() < offset + w * h * 3) fail(ErrorKind::Io, "PPM pixel data truncated in '" + path.string() + "'");
  Tensor image({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto byte = static_cast<unsigned char>(bytes[offset + (y * w + x) * 3 + c]);
        image[(c * h + y) * w + x] = static_cast<double>(byte) / static_cast<double>(maxval);
      }
  return image;
}

std::vector<ImageTextPair> load_manifest(const fs::path& path) {
  const fs::path base = path.parent_path();
  std::map<std::string, std::vector<ImageTextPair>> shard_cache;
  std::vector<ImageTextPair> out;
  const auto lines = read_lines(path);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const auto& line = lines[ln];
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(ln + 1);
    const auto tab = line.find('\t');
    if (tab == std::string::npos) fail(ErrorKind::Parse, where + ": missing TAB between image path and caption");
    std::string ref = line.substr(0, tab);
    std::string caption = line.substr(tab + 1);

    std::optional<std::size_t> record;
    if (const auto hash = ref.rfind('#'); hash != std::string::npos) {
      record = parse_index(ref.substr(hash + 1), where);
      ref = ref.substr(0, hash);
    }
    const fs::path file = base / ref;
    if (!fs::exists(file)) fail(ErrorKind::Io, where + ": missing image file '" + file.string() + "'");

    Tensor image;
    if (file.extension() == ".ppm") {
      if (record) fail(ErrorKind::Parse, where + ": record index on a PPM file");
      image = read_ppm(file);
    } else {
      auto it = shard_cache.find(file.string());
      if (it == shard_cache.end()) it = shard_cache.emplace(file.string(), read_shard(file)).first;
      const auto& recs = it->second;
      if (!record) {
        if (recs.size() != 1) fail(ErrorKind::Parse, where + ": shard '" + ref + "' needs a #record index");
        record = 0;
      }
      if (*record >= recs.size()) fail(ErrorKind::Validation, where + ": shard '" + ref + "' has no record " + std::to_string(*record));
      image = recs[*record].image;
    }
    check_pixels(image, where);
    out.push_back(ImageTextPair{std::move(image), std::move(caption)});
  }
  return out;
}

// ---- synthetic benchmark ------------------------------------------------

void SynthSpec::validate() const {
  if (num_concepts == 0 || pairs_per_concept == 0 || image_size == 0) fail(ErrorKind::Config, "synth sizes must be positive");
  if (!(noise_sigma >= 0.0)) fail(ErrorKind::Config, "synth noise_sigma must be >= 0");
  if (patch_size == 0 || patch_size > image_size) fail(ErrorKind::Config, "synth patch_size must fit the image");
  if (!(eval_fraction >= 0.0 && eval_fraction < 1.0)) fail(ErrorKind::Config, "synth eval_fraction must be in [0,1)");
}

std::vector<std::string> concept_synonyms(std::size_t concept_index) {
  static const std::vector<std::vector<std::string>> kNames = {
      {"dog", "puppy", "hound"},   {"cat", "kitten", "feline"},  {"car", "automobile", "sedan"},
      {"ship", "boat", "vessel"},  {"bird", "sparrow", "finch"}, {"horse", "pony", "stallion"},
      {"frog", "toad", "tadpole"}, {"truck", "lorry", "pickup"}, {"plane", "aircraft", "jet"},
      {"deer", "stag", "fawn"},    {"fish", "trout", "salmon"},  {"tree", "oak", "pine"},
  };
  if (concept_index < kNames.size()) return kNames[concept_index];
  const std::string base = "concept" + std::to_string(concept_index);
  return {base, base + "x", base + "y"};
}

SynthData synth_generate(const SynthSpec& spec) {
  spec.validate();
  static const std::vector<std::string> kCaptionTemplates = {
      "a photo of a {} object", "this is a photo of a {}", "a picture of the {}", "an image showing a {}",
  };
  const std::size_t side = spec.image_size;
  const std::size_t per_image = 3 * side * side;
  std::mt19937_64 rng(spec.seed);

  SynthData out;
  // Prototypes: a ±texture_amplitude dense pattern around mid-grey plus a bright patch
  // whose grid cell identifies the concept.
  std::bernoulli_distribution coin(0.5);
  const std::size_t cells_per_row = side / spec.patch_size;
  const std::size_t cells = cells_per_row * cells_per_row;
  for (std::size_t k = 0; k < spec.num_concepts; ++k) {
    Tensor proto({3, side, side});
    for (double& v : proto.data()) v = 0.5 + (coin(rng) ? spec.texture_amplitude : -spec.texture_amplitude);
    const std::size_t cell = k % cells;
    const std::size_t r0 = (cell / cells_per_row) * spec.patch_size;
    const std::size_t c0 = (cell % cells_per_row) * spec.patch_size;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = r0; y < r0 + spec.patch_size; ++y)
        for (std::size_t x = c0; x < c0 + spec.patch_size; ++x) proto[(c * side + y) * side + x] += spec.patch_amplitude;
    for (double& v : proto.data()) v = std::clamp(v, 0.0, 1.0);
    out.prototypes.push_back(std::move(proto));
    out.class_names.push_back(concept_synonyms(k).front());
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_syn(0, 2);
  std::uniform_int_distribution<std::size_t> pick_tmpl(0, kCaptionTemplates.size() - 1);
  const auto eval_per_concept =
      static_cast<std::size_t>(std::llround(static_cast<double>(spec.pairs_per_concept) * spec.eval_fraction));

  std::vector<std::size_t> train_concepts;
  out.eval.id = "synthetic-eval";
  out.eval.class_names = out.class_names;
  for (std::size_t k = 0; k < spec.num_concepts; ++k) {
    const auto syns = concept_synonyms(k);
    for (std::size_t i = 0; i < spec.pairs_per_concept; ++i) {
      Tensor image({3, side, side});
      for (std::size_t p = 0; p < per_image; ++p) {
        const double v = std::clamp(out.prototypes[k][p] + spec.noise_sigma * noise(rng), 0.0, 1.0);
        // Stored shards are float32; keep pixels exactly representable.
        image[p] = static_cast<double>(static_cast<float>(v));
      }
      std::string caption = kCaptionTemplates[pick_tmpl(rng)];
      caption.replace(caption.find("{}"), 2, syns[pick_syn(rng)]);
      if (i < spec.pairs_per_concept - eval_per_concept) {
        out.train.push_back({std::move(image), std::move(caption)});
        train_concepts.push_back(k);
      } else {
        out.eval.images.push_back(std::move(image));
        out.eval.labels.push_back(k);
      }
    }
  }

  std::vector<std::size_t> order(out.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<ImageTextPair> train;
  train.reserve(order.size());
  for (auto i : order) {
    train.push_back(std::move(out.train[i]));
    out.train_labels.push_back(train_concepts[i]);
  }
  out.train = std::move(train);
  return out;
}

// ---- prompts / batching -------------------------------------------------

std::vector<std::string> class_prompts(const ClassDataset& ds) {
  const auto at = ds.template_text.find(kClassPlaceholder);
  if (at == std::string::npos)
    fail(ErrorKind::Config, "template '" + ds.template_text + "' lacks the " + std::string(kClassPlaceholder) + " placeholder");
  std::vector<std::string> out;
  for (const auto& name : ds.class_names) {
    std::string t = ds.template_text;
    t.replace(at, kClassPlaceholder.size(), name);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<TokenSeq> build_class_texts(const ClassDataset& ds, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<TokenSeq> out;
  for (const auto& p : class_prompts(ds)) out.push_back(tokenize(p, vocab, max_len));
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t num_items, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch, bool drop_last) {
  if (batch_size == 0) fail(ErrorKind::Config, "batch_size must be positive");
  if (batch_size > num_items)
    fail(ErrorKind::Config, "batch_size " + std::to_string(batch_size) + " exceeds dataset size " + std::to_string(num_items));
  std::vector<std::size_t> order(num_items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{seed, static_cast<std::uint64_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < num_items; start += batch_size) {
    const std::size_t end = std::min(start + batch_size, num_items);
    if (end - start < batch_size && drop_last) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Tensor stack_images(const std::vector<Tensor>& images, const std::vector<std::size_t>& indices) {
  if (indices.empty()) fail(ErrorKind::Contract, "cannot stack an empty batch");
  const Shape& one = images.at(indices.front()).shape();
  Shape shape{indices.size()};
  shape.insert(shape.end(), one.begin(), one.end());
  Tensor out(shape);
  const std::size_t per = shape_size(one);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor& img = images.at(indices[b]);
    if (img.shape() != one) fail(ErrorKind::Dimension, "images in a batch must share a shape");
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return out;
}

Tensor stack_images(const std::vector<Tensor>& images) {
  std::vector<std::size_t> idx(images.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return stack_images(images, idx);
}

}  // namespace advflyp
