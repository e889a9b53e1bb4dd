#include "kft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "json_fields.hpp"
#include "kft/config.hpp"

namespace kft {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'K', 'F', 'T', 'C', 'K', 'P', 'T', '1'};

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  std::memcpy(&v, b, sizeof(T));
  return v;
}

template <class T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& in, const std::string& file) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError(file + ": truncated checkpoint");
  return to_little(v);
}

}  // namespace

const DenseTensor& Archive::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw DataError("checkpoint has no tensor '" + name + "'");
}

bool Archive::has(const std::string& name) const {
  for (const auto& entry : tensors) {
    if (entry.first == name) return true;
  }
  return false;
}

void write_archive(const std::filesystem::path& file, const Archive& archive) {
  json manifest = archive.manifest;
  manifest["tensors"] = json::array();
  for (const auto& [name, t] : archive.tensors) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  }
  const std::string text = manifest.dump();
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(file.string() + ": cannot open for writing");
  out.write(kMagic, sizeof kMagic);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& entry : archive.tensors) {
    for (double v : entry.second.data()) put(out, v);
  }
  if (!out) throw DataError(file.string() + ": write failed");
}

Archive read_archive(const std::filesystem::path& file) {
  const std::string name = file.string();
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError(name + ": cannot open checkpoint");
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw DataError(name + ": not a checkpoint file");
  }
  const auto length = take<std::uint64_t>(in, name);
  if (length > (std::uint64_t{1} << 32)) throw DataError(name + ": corrupt manifest length");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw DataError(name + ": truncated checkpoint");
  Archive archive;
  try {
    archive.manifest = json::parse(text);
    for (const auto& entry : archive.manifest.at("tensors")) {
      DenseTensor t(entry.at("shape").get<Shape>());
      for (auto& v : t.data()) v = take<double>(in, name);
      archive.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception& e) {
    throw DataError(name + ": malformed manifest (" + e.what() + ")");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(name + ": trailing bytes after tensors");
  archive.manifest.erase("tensors");
  return archive;
}

json to_json(const ModelConfig& c) {
  return json{{"variant", to_string(c.variant)},
              {"space", to_string(c.space)},
              {"extents", c.extents},
              {"grouping", c.grouping},
              {"rank", c.rank},
              {"scale_rank", c.scale_rank},
              {"bias_rank", c.bias_rank},
              {"reg", c.reg},
              {"aux_reg", c.aux_reg},
              {"kernel", to_string(c.kernel)},
              {"lengthscale", c.lengthscale},
              {"rff_features", c.rff_features},
              {"rff_seed", c.rff_seed},
              {"init_seed", c.init_seed},
              {"init_scale", c.init_scale},
              {"aux_noise", c.aux_noise}};
}

ModelConfig model_config_from_json(const json& j, const std::string& prefix) {
  detail::JsonFields f(j, prefix);
  ModelConfig c;
  if (f.has("variant")) {
    const auto s = f.require<std::string>("variant");
    c.variant = detail::with_path(f.path("variant"), [&] { return variant_from_string(s); });
  }
  if (f.has("space")) {
    const auto s = f.require<std::string>("space");
    c.space = detail::with_path(f.path("space"), [&] { return space_from_string(s); });
  }
  if (f.has("kernel")) {
    const auto s = f.require<std::string>("kernel");
    c.kernel = detail::with_path(f.path("kernel"), [&] { return kernel_kind_from_string(s); });
  }
  f.get("extents", c.extents);
  f.get("grouping", c.grouping);
  f.get("rank", c.rank);
  f.get("scale_rank", c.scale_rank);
  f.get("bias_rank", c.bias_rank);
  f.get("reg", c.reg);
  f.get("aux_reg", c.aux_reg);
  f.get("lengthscale", c.lengthscale);
  f.get("rff_features", c.rff_features);
  f.get("rff_seed", c.rff_seed);
  f.get("init_seed", c.init_seed);
  f.get("init_scale", c.init_scale);
  f.get("aux_noise", c.aux_noise);
  f.finish();
  return c;
}

Archive model_archive(KftModel& model, const ZTransform& targets) {
  Archive a;
  a.manifest = {{"format", "kft-model"},
                {"version", 1},
                {"model", to_json(model.config())},
                {"target_transform", {{"mean", targets.mean}, {"scale", targets.scale}}}};
  const Parameters& p = model.params();
  auto add = [&](const std::string& stem, const std::vector<DenseTensor>& list) {
    for (std::size_t k = 0; k < list.size(); ++k) a.tensors.emplace_back(stem + std::to_string(k), list[k]);
  };
  add("core.", p.cores);
  add("weight.", p.weights);
  add("scale.", p.scales);
  add("bias.", p.biases);
  add("log_lengthscale.", p.log_lengthscales);
  for (std::size_t m = 0; m < model.order(); ++m) {
    if (model.side()[m]) a.tensors.emplace_back("side." + std::to_string(m), *model.side()[m]);
  }
  return a;
}

void save_model(const std::filesystem::path& file, KftModel& model, const ZTransform& targets) {
  write_archive(file, model_archive(model, targets));
}

namespace {

LoadedModel model_part(const Archive& a) {
  ModelConfig config;
  try {
    config = model_config_from_json(a.manifest.at("model"));
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint model block: ") + e.what());
  }
  SideFeatures side(config.extents.size());
  for (std::size_t m = 0; m < side.size(); ++m) {
    if (a.has("side." + std::to_string(m))) side[m] = a.tensor("side." + std::to_string(m));
  }
  LoadedModel out{KftModel(config, side), ZTransform{}};
  const auto& tt = a.manifest.at("target_transform");
  out.targets.mean = tt.at("mean").get<double>();
  out.targets.scale = tt.at("scale").get<double>();

  Parameters& p = out.model.params();
  auto fill = [&](const std::string& stem, std::vector<DenseTensor>& list) {
    for (std::size_t k = 0; k < list.size(); ++k) {
      const DenseTensor& t = a.tensor(stem + std::to_string(k));
      if (t.shape() != list[k].shape()) {
        throw DataError("checkpoint tensor " + stem + std::to_string(k) + " has shape " +
                        shape_string(t.shape()) + ", model expects " + shape_string(list[k].shape()));
      }
      list[k] = t;
    }
  };
  fill("core.", p.cores);
  fill("weight.", p.weights);
  fill("scale.", p.scales);
  fill("bias.", p.biases);
  fill("log_lengthscale.", p.log_lengthscales);
  return out;
}

}  // namespace

LoadedModel model_from_archive(const Archive& a) {
  if (checkpoint_format(a) != "kft-model") throw DataError("checkpoint is not a frequentist model");
  return model_part(a);
}

LoadedModel load_model(const std::filesystem::path& file) { return model_from_archive(read_archive(file)); }

Archive vi_model_archive(VariationalModel& model, const ZTransform& targets) {
  Archive a = model_archive(model.means(), targets);
  a.manifest["format"] = "kft-vi-model";
  a.manifest["vi"] = to_json(model.config());
  for (auto g : {VarianceGroup::Cores, VarianceGroup::Aux}) {
    for (const auto& [name, tensor] : model.variance_tensors(g)) a.tensors.emplace_back("var." + name, *tensor);
  }
  return a;
}

void save_vi_model(const std::filesystem::path& file, VariationalModel& model, const ZTransform& targets) {
  write_archive(file, vi_model_archive(model, targets));
}

LoadedViModel vi_model_from_archive(const Archive& a) {
  if (checkpoint_format(a) != "kft-vi-model") throw DataError("checkpoint is not a variational model");
  LoadedModel means = model_part(a);
  VariationalConfig vi;
  try {
    vi = variational_config_from_json(a.manifest.at("vi"));
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint vi block: ") + e.what());
  }
  LoadedViModel out{VariationalModel(means.model.config(), means.model.side(), vi), means.targets};
  out.model.means().params() = means.model.params();
  for (auto g : {VarianceGroup::Cores, VarianceGroup::Aux}) {
    for (auto& [name, tensor] : out.model.variance_tensors(g)) {
      const DenseTensor& t = a.tensor("var." + name);
      if (t.shape() != tensor->shape()) {
        throw DataError("checkpoint tensor var." + name + " has shape " + shape_string(t.shape()) +
                        ", model expects " + shape_string(tensor->shape()));
      }
      *tensor = t;
    }
  }
  return out;
}

LoadedViModel load_vi_model(const std::filesystem::path& file) { return vi_model_from_archive(read_archive(file)); }

std::string checkpoint_format(const Archive& a) {
  const auto it = a.manifest.find("format");
  if (it == a.manifest.end() || !it->is_string()) throw DataError("checkpoint manifest has no format");
  const std::string f = it->get<std::string>();
  if (f != "kft-model" && f != "kft-vi-model") throw DataError("unknown checkpoint format '" + f + "'");
  return f;
}

}  // namespace kft
