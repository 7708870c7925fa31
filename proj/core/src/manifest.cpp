#include "carotidseg/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "carotidseg/rng.hpp"

namespace carotidseg {

using json = nlohmann::ordered_json;

std::vector<std::string> default_sequence_names() { return {"PDw", "T1w", "T1ce", "T2w", "TOF"}; }

std::filesystem::path DatasetManifest::resolve(const std::string& rel) const {
  std::filesystem::path p(rel);
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

const PatientEntry& DatasetManifest::patient(const std::string& id) const {
  for (const auto& p : patients)
    if (p.id == id) return p;
  throw std::runtime_error("manifest: unknown patient id '" + id + "'");
}

void validate_manifest_structure(const DatasetManifest& m) {
  std::set<std::string> ids;
  for (const auto& p : m.patients) {
    if (p.id.empty()) throw std::runtime_error("manifest: patients[].id must be non-empty");
    if (!ids.insert(p.id).second)
      throw std::runtime_error("manifest: duplicate patient id '" + p.id + "'");
    for (const auto& seq : m.sequence_names) {
      if (!p.volumes.count(seq))
        throw std::runtime_error("manifest: patients[" + p.id + "].volumes is missing sequence '" +
                                 seq + "'");
    }
    if (p.volumes.size() != m.sequence_names.size())
      throw std::runtime_error("manifest: patients[" + p.id + "].volumes lists " +
                               std::to_string(p.volumes.size()) + " sequences, expected " +
                               std::to_string(m.sequence_names.size()));
    bool has_mask = p.mask.has_value();
    if (has_mask != !p.labeled_slices.empty())
      throw std::runtime_error("manifest: patients[" + p.id +
                               "]: mask must be present iff labeled_slices is non-empty");
    for (int s : p.labeled_slices)
      if (s < 0)
        throw std::runtime_error("manifest: patients[" + p.id + "].labeled_slices: negative index");
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest parse error in " + path.string() + ": " + e.what());
  }

  auto require = [&](const json& obj, const char* key, const std::string& ctx) -> const json& {
    if (!obj.contains(key))
      throw std::runtime_error("manifest: missing key " + ctx + "." + key + " in " + path.string());
    return obj.at(key);
  };

  DatasetManifest m;
  m.base_dir = path.parent_path();
  try {
    for (const auto& s : require(j, "sequence_names", "$")) m.sequence_names.push_back(s.get<std::string>());
    m.class_scheme = class_scheme_from_string(require(j, "class_scheme", "$").get<std::string>());
    int idx = 0;
    for (const auto& pj : require(j, "patients", "$")) {
      std::string ctx = "$.patients[" + std::to_string(idx) + "]";
      PatientEntry p;
      p.id = require(pj, "id", ctx).get<std::string>();
      for (const auto& [k, v] : require(pj, "volumes", ctx).items())
        p.volumes[k] = v.get<std::string>();
      for (const auto& s : require(pj, "labeled_slices", ctx)) p.labeled_slices.push_back(s.get<int>());
      if (pj.contains("mask") && !pj.at("mask").is_null())
        p.mask = pj.at("mask").get<std::string>();
      m.patients.push_back(std::move(p));
      ++idx;
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest schema error in " + path.string() + ": " + e.what());
  }

  validate_manifest_structure(m);

  for (const auto& p : m.patients) {
    for (const auto& [seq, rel] : p.volumes) {
      auto vp = m.resolve(rel);
      if (!std::filesystem::exists(vp))
        throw std::runtime_error("manifest: volume file not found: " + vp.string() + " (patient " +
                                 p.id + ", sequence " + seq + ")");
    }
    if (p.mask) {
      auto mp = m.resolve(*p.mask);
      if (!std::filesystem::exists(mp))
        throw std::runtime_error("manifest: mask file not found: " + mp.string() + " (patient " +
                                 p.id + ")");
    }
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  validate_manifest_structure(m);
  json j;
  j["sequence_names"] = m.sequence_names;
  j["class_scheme"] = to_string(m.class_scheme);
  j["patients"] = json::array();
  for (const auto& p : m.patients) {
    json pj;
    pj["id"] = p.id;
    json vols;
    for (const auto& [k, v] : p.volumes) vols[k] = v;
    pj["volumes"] = vols;
    pj["labeled_slices"] = p.labeled_slices;
    if (p.mask) pj["mask"] = *p.mask;
    j["patients"].push_back(pj);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
}

std::string split_group_of(const std::string& patient_id) {
  auto pos = patient_id.find('/');
  return pos == std::string::npos ? patient_id : patient_id.substr(0, pos);
}

namespace {

std::vector<std::string> shuffled_groups(const DatasetManifest& m, std::uint64_t seed) {
  std::set<std::string> gset;
  for (const auto& p : m.patients) gset.insert(split_group_of(p.id));
  std::vector<std::string> groups(gset.begin(), gset.end());
  Rng rng(seed);
  rng.shuffle(groups.begin(), groups.end());
  return groups;
}

std::vector<std::string> members_of(const DatasetManifest& m, const std::vector<std::string>& groups) {
  std::vector<std::string> out;
  for (const auto& g : groups)
    for (const auto& p : m.patients)
      if (split_group_of(p.id) == g) out.push_back(p.id);
  return out;
}

}  // namespace

DatasetSplits split_patientwise(const DatasetManifest& m, double train_frac, double val_frac,
                                double test_frac, std::uint64_t seed) {
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw std::invalid_argument("split_patientwise: fractions must sum to 1");
  auto groups = shuffled_groups(m, seed);
  std::int64_t n = static_cast<std::int64_t>(groups.size());
  std::int64_t i1 = static_cast<std::int64_t>(std::llround(train_frac * n));
  std::int64_t i2 = static_cast<std::int64_t>(std::llround((train_frac + val_frac) * n));
  i1 = std::clamp<std::int64_t>(i1, 0, n);
  i2 = std::clamp<std::int64_t>(i2, i1, n);
  DatasetSplits s;
  s.train = members_of(m, {groups.begin(), groups.begin() + i1});
  s.val = members_of(m, {groups.begin() + i1, groups.begin() + i2});
  s.test = members_of(m, {groups.begin() + i2, groups.end()});
  return s;
}

std::vector<FoldSplit> split_kfold(const DatasetManifest& m, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("split_kfold: k must be >= 2");
  auto groups = shuffled_groups(m, seed);
  if (static_cast<int>(groups.size()) < k)
    throw std::invalid_argument("split_kfold: fewer patients (" + std::to_string(groups.size()) +
                                ") than folds (" + std::to_string(k) + ")");
  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  for (int f = 0; f < k; ++f) {
    std::vector<std::string> val_groups, train_groups;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (static_cast<int>(i % static_cast<std::size_t>(k)) == f)
        val_groups.push_back(groups[i]);
      else
        train_groups.push_back(groups[i]);
    }
    folds[static_cast<std::size_t>(f)].train = members_of(m, train_groups);
    folds[static_cast<std::size_t>(f)].val = members_of(m, val_groups);
  }
  return folds;
}

}  // namespace carotidseg
