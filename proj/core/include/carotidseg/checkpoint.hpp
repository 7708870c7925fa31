#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "carotidseg/nets.hpp"
#include "carotidseg/tensor.hpp"

namespace carotidseg {

// Single-file tensor archive with a versioned binary header: string metadata
// plus named tensors in a fixed order. Writes are byte-deterministic.
struct TensorArchive {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_archive(const TensorArchive& a, const std::filesystem::path& path);
TensorArchive load_archive(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& s);

// Model checkpoints: config + named weights (+ caller metadata).
void save_model_checkpoint(const Model& model, const std::filesystem::path& path,
                           const std::map<std::string, std::string>& extra = {});
Model load_model_checkpoint(const std::filesystem::path& path,
                            std::map<std::string, std::string>* extra_out = nullptr);

}  // namespace carotidseg
