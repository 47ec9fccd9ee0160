#include <cmath>
#include <fstream>
#include <sstream>

#include "advflyp/encoders.hpp"
#include "advflyp/error.hpp"
#include "binary_io.hpp"

namespace advflyp {

namespace detail {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "short write to '" + path + "'");
}

}  // namespace detail

namespace {

constexpr std::string_view kMagic = "AFCK";
constexpr std::uint32_t kVersion = 1;
constexpr std::string_view kFrozenPrefix = "frozen.";

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

EncoderConfig infer_tower(const ParamMap& params, const std::string& tower, std::size_t input_dim) {
  EncoderConfig cfg;
  cfg.input_dim = input_dim;
  std::size_t width = input_dim;
  for (std::size_t i = 0;; ++i) {
    auto it = params.find(tower + ".fc" + std::to_string(i) + ".weight");
    if (it == params.end()) break;
    const Tensor& w = it->second;
    if (w.ndim() != 2 || w.dim(0) != width) fail(ErrorKind::Format, "inconsistent layer shapes in " + tower);
    cfg.hidden_dims.push_back(w.dim(1));
    width = w.dim(1);
  }
  auto proj = params.find(tower + ".proj.weight");
  if (proj == params.end()) fail(ErrorKind::Format, "checkpoint lacks " + tower + ".proj.weight");
  if (proj->second.ndim() != 2 || proj->second.dim(0) != width)
    fail(ErrorKind::Format, "inconsistent projection shape in " + tower);
  cfg.embed_dim = proj->second.dim(1);
  return cfg;
}

}  // namespace

std::string serialize_checkpoint(const ModelState& state) {
  std::map<std::string, const Tensor*> all;
  for (const auto& [n, t] : state.theta) all.emplace(n, &t);
  for (const auto& [n, t] : state.phi) all.emplace(n, &t);
  if (state.theta0)
    for (const auto& [n, t] : *state.theta0) all.emplace(std::string(kFrozenPrefix) + n, &t);

  detail::ByteWriter w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.f64(state.tau);
  w.u32(static_cast<std::uint32_t>(all.size()));
  for (const auto& [name, t] : all) {
    if (name.size() > 0xFFFF) fail(ErrorKind::Format, "parameter name too long");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u8(static_cast<std::uint8_t>(t->ndim()));
    for (auto d : t->shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t->data()) w.f64(v);
  }
  return w.take();
}

ModelState deserialize_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic)
    fail(ErrorKind::Format, "bad checkpoint magic");
  r.raw(kMagic.size());
  if (const auto v = r.u32(); v != kVersion) fail(ErrorKind::Format, "unsupported checkpoint version " + std::to_string(v));

  ModelState state;
  state.tau = r.f64();
  if (!(state.tau > 0.0) || !std::isfinite(state.tau)) fail(ErrorKind::Format, "checkpoint tau must be positive");
  const std::uint32_t count = r.u32();
  ParamMap frozen;
  for (std::uint32_t p = 0; p < count; ++p) {
    std::string name(r.raw(r.u16()));
    const std::uint8_t ndim = r.u8();
    Shape shape(ndim);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) fail(ErrorKind::Format, "zero dimension in parameter '" + name + "'");
    }
    const std::size_t n = shape_size(shape);
    if (r.remaining() < n * 8) fail(ErrorKind::Io, "checkpoint truncated inside parameter '" + name + "'");
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    Tensor t(std::move(shape), std::move(data));

    bool fresh = false;
    if (starts_with(name, kFrozenPrefix))
      fresh = frozen.emplace(name.substr(kFrozenPrefix.size()), std::move(t)).second;
    else if (starts_with(name, "vision."))
      fresh = state.theta.emplace(name, std::move(t)).second;
    else if (starts_with(name, "text."))
      fresh = state.phi.emplace(name, std::move(t)).second;
    else
      fail(ErrorKind::Format, "unexpected parameter '" + name + "'");
    if (!fresh) fail(ErrorKind::Format, "duplicate parameter '" + name + "'");
  }
  if (!r.at_end()) fail(ErrorKind::Format, "trailing bytes after checkpoint");

  auto first_fc = state.theta.find("vision.fc0.weight");
  auto vproj = state.theta.find("vision.proj.weight");
  if (vproj == state.theta.end()) fail(ErrorKind::Format, "checkpoint lacks vision.proj.weight");
  const std::size_t vin = (first_fc != state.theta.end() ? first_fc->second : vproj->second).dim(0);
  state.vision = infer_tower(state.theta, "vision", vin);

  auto table = state.phi.find("text.token_embedding");
  if (table == state.phi.end() || table->second.ndim() != 2)
    fail(ErrorKind::Format, "checkpoint lacks text.token_embedding");
  state.text = infer_tower(state.phi, "text", table->second.dim(1));
  state.text.vocab_size = table->second.dim(0);
  if (state.vision.embed_dim != state.text.embed_dim) fail(ErrorKind::Format, "tower embed dims differ");

  if (!frozen.empty()) {
    if (frozen.size() != state.theta.size()) fail(ErrorKind::Format, "frozen snapshot does not mirror theta");
    for (const auto& [n, t] : frozen) {
      auto it = state.theta.find(n);
      if (it == state.theta.end() || it->second.shape() != t.shape())
        fail(ErrorKind::Format, "frozen parameter '" + n + "' does not mirror theta");
    }
    state.theta0 = std::make_shared<const ParamMap>(std::move(frozen));
  }
  return state;
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  detail::write_file(path.string(), serialize_checkpoint(state));
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_file(path.string()));
}

}  // namespace advflyp
