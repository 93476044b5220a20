// SPDX-License-Identifier: Apache-2.0
#include "maskgru/checkpoint.hpp"

#include <fstream>
#include <map>

#include "binary_io.hpp"

namespace maskgru {

namespace {
constexpr char kMagic[9] = "MGRUCKPT";
constexpr std::uint32_t kVersion = 1;

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  io::put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  io::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) io::put_u64(out, d);
  for (double v : t.data()) io::put_f64(out, v);
}

std::pair<std::string, Tensor> get_tensor(std::istream& in, const std::string& file) {
  const std::uint32_t len = io::get_u32(in, "tensor name length");
  if (len == 0 || len > 4096) throw DataError(file + ": implausible tensor name length");
  std::string name(len, '\0');
  if (!in.read(name.data(), len)) throw DataError(file + ": truncated tensor name");
  const std::uint32_t rank = io::get_u32(in, "tensor rank");
  if (rank == 0 || rank > 8) throw DataError(file + ": tensor '" + name + "' has implausible rank");
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = io::get_u64(in, "tensor dims");
    if (d == 0 || d > (1u << 28)) throw DataError(file + ": tensor '" + name + "' has implausible dims");
    n *= d;
    if (n > (1u << 28)) throw DataError(file + ": tensor '" + name + "' is too large");
  }
  std::vector<double> data(n);
  for (double& v : data) v = io::get_f64(in, "tensor data");
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

}  // namespace

const Tensor* Checkpoint::find_extra(const std::string& name) const {
  for (const auto& [n, t] : extra)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const NamedTensors& extra) {
  const ModelConfig& c = params.config;
  c.validate();
  const auto named = params.named();
  for (const auto& [name, t] : extra) {
    for (const auto& [pname, pt] : named)
      if (pname == name) throw UsageError("checkpoint extra tensor '" + name + "' shadows a parameter");
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(kMagic, 8);
    io::put_u32(out, kVersion);
    io::put_u8(out, static_cast<std::uint8_t>(c.kind));
    for (std::size_t v : {c.kernel, c.pool_kernel, c.pool_stride, c.hidden1, c.hidden2}) {
      io::put_u32(out, static_cast<std::uint32_t>(v));
    }
    io::put_f64(out, c.beta);
    io::put_u8(out, c.instance_norm ? 1 : 0);
    io::put_u8(out, static_cast<std::uint8_t>(c.activation));
    io::put_u8(out, static_cast<std::uint8_t>(c.initial_state));
    io::put_u32(out, static_cast<std::uint32_t>(c.height));
    io::put_u32(out, static_cast<std::uint32_t>(c.width));
    io::put_f64(out, c.mask_value);
    io::put_f64(out, c.input_scale);
    io::put_u32(out, static_cast<std::uint32_t>(named.size() + extra.size()));
    for (const auto& [name, t] : named) put_tensor(out, name, *t);
    for (const auto& [name, t] : extra) put_tensor(out, name, t);
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + file);
  io::expect_magic(in, kMagic, file);
  const std::uint32_t version = io::get_u32(in, "version");
  if (version != kVersion) throw DataError(file + ": unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  const std::uint8_t kind = io::get_u8(in, "model kind");
  if (kind > 1) throw DataError(file + ": unknown model kind tag");
  c.kind = static_cast<ModelKind>(kind);
  c.kernel = io::get_u32(in, "kernel");
  c.pool_kernel = io::get_u32(in, "pool kernel");
  c.pool_stride = io::get_u32(in, "pool stride");
  c.hidden1 = io::get_u32(in, "hidden1");
  c.hidden2 = io::get_u32(in, "hidden2");
  c.beta = io::get_f64(in, "beta");
  c.instance_norm = io::get_u8(in, "instance norm") != 0;
  const std::uint8_t act = io::get_u8(in, "activation");
  const std::uint8_t init = io::get_u8(in, "initial state");
  if (act > 1 || init > 1) throw DataError(file + ": unknown activation or initial-state tag");
  c.activation = static_cast<HeadActivation>(act);
  c.initial_state = static_cast<InitialState>(init);
  c.height = io::get_u32(in, "height");
  c.width = io::get_u32(in, "width");
  c.mask_value = io::get_f64(in, "mask value");
  c.input_scale = io::get_f64(in, "input scale");
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw DataError(file + ": invalid hyperparameters: " + e.what());
  }

  Checkpoint ck;
  ck.params = ModelParams::zeros(c);
  std::map<std::string, Tensor*> slots;
  for (auto& ref : ck.params.named()) slots[ref.name] = ref.tensor;
  const std::uint32_t count = io::get_u32(in, "tensor count");
  std::size_t filled = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = get_tensor(in, file);
    auto it = slots.find(name);
    if (it == slots.end()) {
      ck.extra.emplace_back(std::move(name), std::move(t));
      continue;
    }
    if (!it->second) throw DataError(file + ": duplicate tensor '" + name + "'");
    if (t.shape() != it->second->shape()) {
      throw DataError(file + ": tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                      shape_str(it->second->shape()));
    }
    *it->second = std::move(t);
    it->second = nullptr;
    ++filled;
  }
  if (filled != slots.size()) throw DataError(file + ": missing model tensors");
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(file + ": trailing bytes");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, ModelKind expected) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.params.config.kind != expected) {
    throw UsageError(path.string() + " holds a " + model_kind_name(ck.params.config.kind) + " model, not " +
                     model_kind_name(expected));
  }
  return ck;
}

}  // namespace maskgru
