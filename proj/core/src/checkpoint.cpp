#include "carotidseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace carotidseg {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'C', 'S', 'E', 'G', 'A', 'R', 'C', 'V'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_str(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::string read_str(std::istream& is) {
  std::uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

}  // namespace

const Tensor& TensorArchive::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::out_of_range("archive: tensor not found: " + name);
}

bool TensorArchive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void save_archive(const TensorArchive& a, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write archive: " + path.string());
  os.write(kMagic, 8);
  write_u32(os, kVersion);
  write_u64(os, a.meta.size());
  for (const auto& [k, v] : a.meta) {
    write_str(os, k);
    write_str(os, v);
  }
  write_u64(os, a.tensors.size());
  for (const auto& [name, t] : a.tensors) {
    write_str(os, name);
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) write_u64(os, static_cast<std::uint64_t>(t.dim(d)));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
  }
  if (!os) throw std::runtime_error("archive write failed: " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open archive: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("bad archive magic in " + path.string());
  std::uint32_t version = read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported archive version " + std::to_string(version) + " in " +
                             path.string());
  TensorArchive a;
  std::uint64_t n_meta = read_u64(is);
  for (std::uint64_t i = 0; i < n_meta; ++i) {
    std::string k = read_str(is);
    a.meta[k] = read_str(is);
  }
  std::uint64_t n_tensors = read_u64(is);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    std::string name = read_str(is);
    std::uint32_t rank = read_u32(is);
    std::vector<std::int64_t> dims;
    for (std::uint32_t d = 0; d < rank; ++d) dims.push_back(static_cast<std::int64_t>(read_u64(is)));
    Tensor t(dims);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!is) throw std::runtime_error("truncated archive: " + path.string());
  return a;
}

std::string model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["arch"] = to_string(cfg.arch);
  j["n_sequences"] = cfg.n_sequences;
  j["depth"] = cfg.depth;
  j["base_channels"] = cfg.base_channels;
  j["fusion"] = to_string(cfg.fusion);
  j["use_se"] = cfg.use_se;
  j["use_deep_supervision"] = cfg.use_deep_supervision;
  j["dropout_rate"] = cfg.dropout_rate;
  j["n_classes"] = cfg.n_classes;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& s) {
  json j = json::parse(s);
  ModelConfig cfg;
  cfg.arch = arch_from_string(j.at("arch").get<std::string>());
  cfg.n_sequences = j.at("n_sequences").get<int>();
  cfg.depth = j.at("depth").get<int>();
  cfg.base_channels = j.at("base_channels").get<int>();
  cfg.fusion = fusion_from_string(j.at("fusion").get<std::string>());
  cfg.use_se = j.at("use_se").get<bool>();
  cfg.use_deep_supervision = j.at("use_deep_supervision").get<bool>();
  cfg.dropout_rate = j.at("dropout_rate").get<double>();
  cfg.n_classes = j.at("n_classes").get<int>();
  cfg.validate();
  return cfg;
}

void save_model_checkpoint(const Model& model, const std::filesystem::path& path,
                           const std::map<std::string, std::string>& extra) {
  TensorArchive a;
  a.meta = extra;
  a.meta["kind"] = "model";
  a.meta["model_config"] = model_config_to_json(model.config());
  for (const auto& it : model.params().items) a.tensors.emplace_back(it.name, it.var.value());
  save_archive(a, path);
}

Model load_model_checkpoint(const std::filesystem::path& path,
                            std::map<std::string, std::string>* extra_out) {
  TensorArchive a = load_archive(path);
  if (!a.meta.count("model_config"))
    throw std::runtime_error("archive has no model_config: " + path.string());
  Model m(model_config_from_json(a.meta.at("model_config")), 0);
  for (auto& it : m.params().items) {
    const Tensor& t = a.tensor(it.name);
    if (!t.same_shape(it.var.value()))
      throw std::runtime_error("checkpoint tensor shape mismatch for " + it.name);
    it.var.value_mut() = t;
  }
  if (extra_out) *extra_out = a.meta;
  return m;
}

}  // namespace carotidseg
