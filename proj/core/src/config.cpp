#include "carotidseg/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace carotidseg {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

}  // namespace

ConfigMap parse_toml(const std::string& text) {
  ConfigMap map;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
    std::string full = section.empty() ? key : section + "." + key;
    map[full] = val;
  }
  return map;
}

ConfigMap parse_toml_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_toml(ss.str());
}

void apply_override(ConfigMap& map, const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must be section.key=value, got '" + assignment + "'");
  map[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

namespace {

std::int64_t to_i64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    std::int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (...) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

double to_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (...) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + v + "'");
}

std::string to_str(const std::string& key, const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  if (v.find('"') != std::string::npos)
    throw ConfigError("config key '" + key + "': malformed string literal " + v);
  return v;
}

std::vector<double> to_f64_array(const std::string& key, const std::string& v) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']')
    throw ConfigError("config key '" + key + "': expected [a, b, ...], got '" + v + "'");
  std::vector<double> out;
  std::string inner = v.substr(1, v.size() - 2);
  std::istringstream is(inner);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(to_f64(key, item));
  }
  return out;
}

// key -> type tag: i nteger, f loat, b ool, s tring, a rray-of-float
const std::map<std::string, char>& schema() {
  static const std::map<std::string, char> s = {
      {"run.schema_version", 'i'}, {"run.seed", 'i'}, {"run.out_dir", 's'},
      {"data.manifest", 's'},
      {"model.arch", 's'}, {"model.n_sequences", 'i'}, {"model.depth", 'i'},
      {"model.base_channels", 'i'}, {"model.fusion", 's'}, {"model.use_se", 'b'},
      {"model.use_deep_supervision", 'b'}, {"model.dropout_rate", 'f'}, {"model.n_classes", 'i'},
      {"train.task", 's'}, {"train.lr", 'f'}, {"train.weight_decay", 'f'},
      {"train.adam_beta1", 'f'}, {"train.adam_beta2", 'f'}, {"train.max_epochs", 'i'},
      {"train.patience", 'i'}, {"train.lr_factor", 'f'}, {"train.lr_patience", 'i'},
      {"train.batch_labeled", 'i'}, {"train.batch_unlabeled", 'i'}, {"train.ssl_mode", 's'},
      {"train.t_mc", 'i'}, {"train.ema_alpha", 'f'}, {"train.mc_noise_std", 'f'},
      {"train.augment_labeled", 'b'}, {"train.aug_rotation_deg", 'f'},
      {"loss.lambda_loc", 'f'}, {"loss.delta_loc", 'f'}, {"loss.lambda_seg", 'f'},
      {"loss.delta_seg", 'f'}, {"loss.vartheta", 'f'}, {"loss.rampup_r", 'f'},
      {"loss.rampup_k", 'f'}, {"loss.omega", 'f'}, {"loss.eps", 'f'},
      {"prior.max_row_diff", 'i'}, {"prior.binarize_threshold", 'f'},
      {"prior.min_components", 'i'}, {"prior.max_components", 'i'},
      {"policy.enable_flip", 'b'}, {"policy.flip_prob", 'f'},
      {"policy.enable_rotation", 'b'}, {"policy.rotation_min", 'f'}, {"policy.rotation_max", 'f'},
      {"policy.enable_scale", 'b'}, {"policy.scale_weak_min", 'f'}, {"policy.scale_weak_max", 'f'},
      {"policy.scale_strong_min", 'f'}, {"policy.scale_strong_max", 'f'},
      {"policy.strong_scale_prob", 'f'}, {"policy.enable_crop", 'b'},
      {"policy.max_crop_offset", 'i'}, {"policy.enable_perspective", 'b'},
      {"policy.max_perspective_frac", 'f'}, {"policy.enable_noise", 'b'},
      {"policy.noise_min", 'f'}, {"policy.noise_max", 'f'}, {"policy.enable_sharpness", 'b'},
      {"policy.sharpness_min", 'f'}, {"policy.sharpness_max", 'f'},
      {"policy.enable_intensity", 'b'}, {"policy.intensity_gamma_min", 'f'},
      {"policy.intensity_gamma_max", 'f'},
      {"synth.n_patients", 'i'}, {"synth.slices_per_patient", 'i'}, {"synth.height", 'i'},
      {"synth.width", 'i'}, {"synth.plaque_probability", 'f'}, {"synth.distractor_rate", 'f'},
      {"synth.labeled_fraction", 'f'}, {"synth.n_sequences", 'i'}, {"synth.noise_std", 'a'},
      {"synth.class_scheme", 's'}, {"synth.seed", 'i'},
      {"extract.roi_size", 'i'}, {"extract.use_prior_filter", 'b'},
  };
  return s;
}

}  // namespace

RunConfig default_run_config(Task task) {
  RunConfig c;
  if (task == Task::localization) {
    c.run.model = ModelConfig::coarse_defaults();
    c.run.train = TrainConfig::loc_defaults();
    c.run.loss = LossConfig::loc_defaults();
  } else {
    c.run.model = ModelConfig::fine_defaults();
    c.run.train = TrainConfig::seg_defaults();
    c.run.loss = LossConfig::seg_defaults();
  }
  return c;
}

RunConfig run_config_from_map(const ConfigMap& map, Task default_task) {
  for (const auto& [key, value] : map) {
    auto it = schema().find(key);
    if (it == schema().end()) throw ConfigError("unknown config key '" + key + "'");
    switch (it->second) {  // type check even when the value is a default
      case 'i': to_i64(key, value); break;
      case 'f': to_f64(key, value); break;
      case 'b': to_bool(key, value); break;
      case 'a': to_f64_array(key, value); break;
      default: break;
    }
  }

  Task task = default_task;
  if (auto it = map.find("train.task"); it != map.end())
    task = task_from_string(to_str("train.task", it->second));
  RunConfig c = default_run_config(task);
  c.run.train.task = task;

  auto geti = [&](const char* k, std::int64_t& dst) {
    if (auto it = map.find(k); it != map.end()) dst = to_i64(k, it->second);
  };
  auto getint = [&](const char* k, int& dst) {
    if (auto it = map.find(k); it != map.end()) dst = static_cast<int>(to_i64(k, it->second));
  };
  auto getf = [&](const char* k, double& dst) {
    if (auto it = map.find(k); it != map.end()) dst = to_f64(k, it->second);
  };
  auto getb = [&](const char* k, bool& dst) {
    if (auto it = map.find(k); it != map.end()) dst = to_bool(k, it->second);
  };
  auto gets = [&](const char* k, std::string& dst) {
    if (auto it = map.find(k); it != map.end()) dst = to_str(k, it->second);
  };

  if (auto it = map.find("run.schema_version"); it != map.end()) {
    c.schema_version = static_cast<int>(to_i64("run.schema_version", it->second));
    if (c.schema_version != 1)
      throw ConfigError("config key 'run.schema_version': unsupported version " +
                        std::to_string(c.schema_version) + " (expected 1)");
  }
  std::int64_t seed = static_cast<std::int64_t>(c.seed);
  geti("run.seed", seed);
  c.seed = static_cast<std::uint64_t>(seed);
  gets("run.out_dir", c.out_dir);
  gets("data.manifest", c.manifest);

  auto wrap = [&](const char* key, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + std::string(key) + "': " + e.what());
    }
  };

  ModelConfig& mc = c.run.model;
  if (auto it = map.find("model.arch"); it != map.end())
    wrap("model.arch", [&] { mc.arch = arch_from_string(to_str("model.arch", it->second)); });
  getint("model.n_sequences", mc.n_sequences);
  getint("model.depth", mc.depth);
  getint("model.base_channels", mc.base_channels);
  if (auto it = map.find("model.fusion"); it != map.end())
    wrap("model.fusion", [&] { mc.fusion = fusion_from_string(to_str("model.fusion", it->second)); });
  getb("model.use_se", mc.use_se);
  getb("model.use_deep_supervision", mc.use_deep_supervision);
  getf("model.dropout_rate", mc.dropout_rate);
  getint("model.n_classes", mc.n_classes);

  TrainConfig& tc = c.run.train;
  getf("train.lr", tc.lr);
  getf("train.weight_decay", tc.weight_decay);
  getf("train.adam_beta1", tc.adam_beta1);
  getf("train.adam_beta2", tc.adam_beta2);
  getint("train.max_epochs", tc.max_epochs);
  getint("train.patience", tc.patience);
  getf("train.lr_factor", tc.lr_factor);
  getint("train.lr_patience", tc.lr_patience);
  getint("train.batch_labeled", tc.batch_labeled);
  getint("train.batch_unlabeled", tc.batch_unlabeled);
  if (auto it = map.find("train.ssl_mode"); it != map.end())
    wrap("train.ssl_mode",
         [&] { tc.ssl_mode = ssl_mode_from_string(to_str("train.ssl_mode", it->second)); });
  getint("train.t_mc", tc.t_mc);
  getf("train.ema_alpha", tc.ema_alpha);
  getf("train.mc_noise_std", tc.mc_noise_std);
  getb("train.augment_labeled", tc.augment_labeled);
  getf("train.aug_rotation_deg", tc.aug_rotation_deg);
  tc.seed = c.seed;

  LossConfig& lc = c.run.loss;
  getf("loss.lambda_loc", lc.lambda_loc);
  getf("loss.delta_loc", lc.delta_loc);
  getf("loss.lambda_seg", lc.lambda_seg);
  getf("loss.delta_seg", lc.delta_seg);
  getf("loss.vartheta", lc.vartheta);
  getf("loss.rampup_r", lc.rampup_R);
  getf("loss.rampup_k", lc.rampup_k);
  getf("loss.omega", lc.omega);
  getf("loss.eps", lc.eps);

  PriorConfig& pc = c.run.prior;
  getint("prior.max_row_diff", pc.max_row_diff);
  getf("prior.binarize_threshold", pc.binarize_threshold);
  getint("prior.min_components", pc.min_components_per_side);
  getint("prior.max_components", pc.max_components_per_side);

  PerturbationPolicy& pol = c.run.policy;
  getb("policy.enable_flip", pol.enable_flip);
  getf("policy.flip_prob", pol.flip_prob);
  getb("policy.enable_rotation", pol.enable_rotation);
  getf("policy.rotation_min", pol.rotation_deg.lo);
  getf("policy.rotation_max", pol.rotation_deg.hi);
  getb("policy.enable_scale", pol.enable_scale);
  getf("policy.scale_weak_min", pol.scale_weak.lo);
  getf("policy.scale_weak_max", pol.scale_weak.hi);
  getf("policy.scale_strong_min", pol.scale_strong.lo);
  getf("policy.scale_strong_max", pol.scale_strong.hi);
  getf("policy.strong_scale_prob", pol.strong_scale_prob);
  getb("policy.enable_crop", pol.enable_crop);
  getint("policy.max_crop_offset", pol.max_crop_offset);
  getb("policy.enable_perspective", pol.enable_perspective);
  getf("policy.max_perspective_frac", pol.max_perspective_frac);
  getb("policy.enable_noise", pol.enable_noise);
  getf("policy.noise_min", pol.noise_std.lo);
  getf("policy.noise_max", pol.noise_std.hi);
  getb("policy.enable_sharpness", pol.enable_sharpness);
  getf("policy.sharpness_min", pol.sharpness.lo);
  getf("policy.sharpness_max", pol.sharpness.hi);
  getb("policy.enable_intensity", pol.enable_intensity);
  getf("policy.intensity_gamma_min", pol.intensity_gamma.lo);
  getf("policy.intensity_gamma_max", pol.intensity_gamma.hi);

  PhantomSpec& sp = c.synth;
  getint("synth.n_patients", sp.n_patients);
  getint("synth.slices_per_patient", sp.slices_per_patient);
  geti("synth.height", sp.height);
  geti("synth.width", sp.width);
  getf("synth.plaque_probability", sp.plaque_probability);
  getf("synth.distractor_rate", sp.distractor_rate);
  getf("synth.labeled_fraction", sp.labeled_fraction);
  getint("synth.n_sequences", sp.n_sequences);
  if (auto it = map.find("synth.noise_std"); it != map.end())
    sp.noise_std = to_f64_array("synth.noise_std", it->second);
  if (auto it = map.find("synth.class_scheme"); it != map.end())
    wrap("synth.class_scheme",
         [&] { sp.class_scheme = class_scheme_from_string(to_str("synth.class_scheme", it->second)); });
  std::int64_t synth_seed = static_cast<std::int64_t>(c.seed);
  geti("synth.seed", synth_seed);
  sp.seed = static_cast<std::uint64_t>(synth_seed);

  getint("extract.roi_size", c.roi_size);
  getb("extract.use_prior_filter", c.use_prior_filter);

  wrap("model", [&] { mc.validate(); });
  wrap("train", [&] { tc.validate(); });
  wrap("policy", [&] { pol.validate(); });
  wrap("prior", [&] { pc.validate(); });
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides, Task default_task) {
  ConfigMap map = parse_toml_file(path);
  for (const auto& o : overrides) apply_override(map, o);
  return run_config_from_map(map, default_task);
}

namespace {

std::string ff(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string run_config_to_toml(const RunConfig& c) {
  std::ostringstream os;
  os << "[run]\n"
     << "schema_version = " << c.schema_version << "\n"
     << "seed = " << c.seed << "\n"
     << "out_dir = \"" << c.out_dir << "\"\n\n";
  os << "[data]\n"
     << "manifest = \"" << c.manifest << "\"\n\n";
  const ModelConfig& mc = c.run.model;
  os << "[model]\n"
     << "arch = \"" << to_string(mc.arch) << "\"\n"
     << "n_sequences = " << mc.n_sequences << "\n"
     << "depth = " << mc.depth << "\n"
     << "base_channels = " << mc.base_channels << "\n"
     << "fusion = \"" << to_string(mc.fusion) << "\"\n"
     << "use_se = " << (mc.use_se ? "true" : "false") << "\n"
     << "use_deep_supervision = " << (mc.use_deep_supervision ? "true" : "false") << "\n"
     << "dropout_rate = " << ff(mc.dropout_rate) << "\n"
     << "n_classes = " << mc.n_classes << "\n\n";
  const TrainConfig& tc = c.run.train;
  os << "[train]\n"
     << "task = \"" << to_string(tc.task) << "\"\n"
     << "lr = " << ff(tc.lr) << "\n"
     << "weight_decay = " << ff(tc.weight_decay) << "\n"
     << "adam_beta1 = " << ff(tc.adam_beta1) << "\n"
     << "adam_beta2 = " << ff(tc.adam_beta2) << "\n"
     << "max_epochs = " << tc.max_epochs << "\n"
     << "patience = " << tc.patience << "\n"
     << "lr_factor = " << ff(tc.lr_factor) << "\n"
     << "lr_patience = " << tc.lr_patience << "\n"
     << "batch_labeled = " << tc.batch_labeled << "\n"
     << "batch_unlabeled = " << tc.batch_unlabeled << "\n"
     << "ssl_mode = \"" << to_string(tc.ssl_mode) << "\"\n"
     << "t_mc = " << tc.t_mc << "\n"
     << "ema_alpha = " << ff(tc.ema_alpha) << "\n"
     << "mc_noise_std = " << ff(tc.mc_noise_std) << "\n"
     << "augment_labeled = " << (tc.augment_labeled ? "true" : "false") << "\n"
     << "aug_rotation_deg = " << ff(tc.aug_rotation_deg) << "\n\n";
  const LossConfig& lc = c.run.loss;
  os << "[loss]\n"
     << "lambda_loc = " << ff(lc.lambda_loc) << "\n"
     << "delta_loc = " << ff(lc.delta_loc) << "\n"
     << "lambda_seg = " << ff(lc.lambda_seg) << "\n"
     << "delta_seg = " << ff(lc.delta_seg) << "\n"
     << "vartheta = " << ff(lc.vartheta) << "\n"
     << "rampup_r = " << ff(lc.rampup_R) << "\n"
     << "rampup_k = " << ff(lc.rampup_k) << "\n"
     << "omega = " << ff(lc.omega) << "\n"
     << "eps = " << ff(lc.eps) << "\n\n";
  const PriorConfig& pc = c.run.prior;
  os << "[prior]\n"
     << "max_row_diff = " << pc.max_row_diff << "\n"
     << "binarize_threshold = " << ff(pc.binarize_threshold) << "\n"
     << "min_components = " << pc.min_components_per_side << "\n"
     << "max_components = " << pc.max_components_per_side << "\n\n";
  const PerturbationPolicy& pol = c.run.policy;
  os << "[policy]\n"
     << "enable_flip = " << (pol.enable_flip ? "true" : "false") << "\n"
     << "flip_prob = " << ff(pol.flip_prob) << "\n"
     << "enable_rotation = " << (pol.enable_rotation ? "true" : "false") << "\n"
     << "rotation_min = " << ff(pol.rotation_deg.lo) << "\n"
     << "rotation_max = " << ff(pol.rotation_deg.hi) << "\n"
     << "enable_scale = " << (pol.enable_scale ? "true" : "false") << "\n"
     << "scale_weak_min = " << ff(pol.scale_weak.lo) << "\n"
     << "scale_weak_max = " << ff(pol.scale_weak.hi) << "\n"
     << "scale_strong_min = " << ff(pol.scale_strong.lo) << "\n"
     << "scale_strong_max = " << ff(pol.scale_strong.hi) << "\n"
     << "strong_scale_prob = " << ff(pol.strong_scale_prob) << "\n"
     << "enable_crop = " << (pol.enable_crop ? "true" : "false") << "\n"
     << "max_crop_offset = " << pol.max_crop_offset << "\n"
     << "enable_perspective = " << (pol.enable_perspective ? "true" : "false") << "\n"
     << "max_perspective_frac = " << ff(pol.max_perspective_frac) << "\n"
     << "enable_noise = " << (pol.enable_noise ? "true" : "false") << "\n"
     << "noise_min = " << ff(pol.noise_std.lo) << "\n"
     << "noise_max = " << ff(pol.noise_std.hi) << "\n"
     << "enable_sharpness = " << (pol.enable_sharpness ? "true" : "false") << "\n"
     << "sharpness_min = " << ff(pol.sharpness.lo) << "\n"
     << "sharpness_max = " << ff(pol.sharpness.hi) << "\n"
     << "enable_intensity = " << (pol.enable_intensity ? "true" : "false") << "\n"
     << "intensity_gamma_min = " << ff(pol.intensity_gamma.lo) << "\n"
     << "intensity_gamma_max = " << ff(pol.intensity_gamma.hi) << "\n\n";
  const PhantomSpec& sp = c.synth;
  os << "[synth]\n"
     << "n_patients = " << sp.n_patients << "\n"
     << "slices_per_patient = " << sp.slices_per_patient << "\n"
     << "height = " << sp.height << "\n"
     << "width = " << sp.width << "\n"
     << "plaque_probability = " << ff(sp.plaque_probability) << "\n"
     << "distractor_rate = " << ff(sp.distractor_rate) << "\n"
     << "labeled_fraction = " << ff(sp.labeled_fraction) << "\n"
     << "n_sequences = " << sp.n_sequences << "\n";
  os << "noise_std = [";
  for (std::size_t i = 0; i < sp.noise_std.size(); ++i) os << (i ? ", " : "") << ff(sp.noise_std[i]);
  os << "]\n"
     << "class_scheme = \"" << to_string(sp.class_scheme) << "\"\n"
     << "seed = " << sp.seed << "\n\n";
  os << "[extract]\n"
     << "roi_size = " << c.roi_size << "\n"
     << "use_prior_filter = " << (c.use_prior_filter ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace carotidseg
