#include "carotidseg/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace carotidseg {

using ag::Var;

void ModelConfig::validate() const {
  if (n_sequences < 1) throw std::invalid_argument("model: n_sequences must be >= 1");
  if (depth < 2) throw std::invalid_argument("model: depth must be >= 2");
  if (base_channels < 1) throw std::invalid_argument("model: base_channels must be >= 1");
  if (n_classes < 1) throw std::invalid_argument("model: n_classes must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw std::invalid_argument("model: dropout_rate must be in [0,1)");
  if (arch == Arch::basic && use_deep_supervision)
    throw std::invalid_argument("model: the basic baseline has no deep supervision");
}

int ModelConfig::channels_at(int level) const { return base_channels << level; }

ModelConfig ModelConfig::fine_defaults() {
  ModelConfig c;
  c.depth = 4;
  c.base_channels = 32;
  c.use_se = true;
  c.use_deep_supervision = true;
  c.n_classes = 3;
  return c;
}

ModelConfig ModelConfig::coarse_defaults() {
  ModelConfig c;
  c.depth = 5;
  c.base_channels = 32;
  c.use_se = false;
  c.use_deep_supervision = false;
  c.n_classes = 1;
  return c;
}

std::string to_string(ModelConfig::Arch a) { return a == ModelConfig::Arch::ours ? "ours" : "basic"; }
std::string to_string(ModelConfig::Fusion f) {
  return f == ModelConfig::Fusion::input ? "input" : "bottleneck";
}

ModelConfig::Arch arch_from_string(const std::string& s) {
  if (s == "ours") return ModelConfig::Arch::ours;
  if (s == "basic") return ModelConfig::Arch::basic;
  throw std::invalid_argument("unknown arch '" + s + "' (ours|basic)");
}

ModelConfig::Fusion fusion_from_string(const std::string& s) {
  if (s == "input") return ModelConfig::Fusion::input;
  if (s == "bottleneck") return ModelConfig::Fusion::bottleneck;
  throw std::invalid_argument("unknown fusion '" + s + "' (input|bottleneck)");
}

Var ParamStore::add(std::string name, Tensor init) {
  for (const auto& it : items)
    if (it.name == name) throw std::logic_error("duplicate parameter name " + name);
  items.push_back({std::move(name), ag::leaf(std::move(init), true)});
  return items.back().var;
}

const Var& ParamStore::find(const std::string& name) const {
  for (const auto& it : items)
    if (it.name == name) return it.var;
  throw std::out_of_range("parameter not found: " + name);
}

void ParamStore::zero_grads() {
  for (auto& it : items) it.var.grad().fill(0.0f);
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& it : items) n += it.var.value().numel();
  return n;
}

void ema_update(ParamStore& teacher, const ParamStore& student, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("ema_update: alpha must be in [0,1]");
  if (teacher.items.size() != student.items.size())
    throw std::invalid_argument("ema_update: parameter count mismatch");
  float a = static_cast<float>(alpha);
  for (std::size_t i = 0; i < teacher.items.size(); ++i) {
    auto& t = teacher.items[i];
    const auto& s = student.items[i];
    if (t.name != s.name || !t.var.value().same_shape(s.var.value()))
      throw std::invalid_argument("ema_update: structure mismatch at " + t.name);
    Tensor& tv = t.var.value_mut();
    const Tensor& sv = s.var.value();
    for (std::int64_t k = 0; k < tv.numel(); ++k) tv[k] = a * tv[k] + (1.0f - a) * sv[k];
  }
}

// ---------------------------------------------------------------------------

namespace {

Tensor he_normal(std::vector<std::int64_t> dims, std::int64_t fan_in, Rng& rng) {
  Tensor t(std::move(dims));
  double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal(0.0, std));
  return t;
}

}  // namespace

SEBlock SEBlock::create(int channels, int reduction, Rng& rng, ParamStore& store,
                        const std::string& prefix) {
  int hidden = std::max(1, channels / reduction);
  SEBlock se;
  se.w1 = store.add(prefix + ".fc1.w", he_normal({hidden, channels, 1, 1}, channels, rng));
  se.b1 = store.add(prefix + ".fc1.b", Tensor::zeros({hidden}));
  se.w2 = store.add(prefix + ".fc2.w", he_normal({channels, hidden, 1, 1}, hidden, rng));
  se.b2 = store.add(prefix + ".fc2.b", Tensor::zeros({channels}));
  return se;
}

Var SEBlock::gates(const Var& x) const {
  Var g = ag::global_avg_pool(x);
  g = ag::relu(ag::conv2d(g, w1, b1, 1, 0));
  g = ag::sigmoid(ag::conv2d(g, w2, b2, 1, 0));
  return g;
}

Var SEBlock::forward(const Var& x) const { return scale(x, gates(x)); }

Var SEBlock::scale(const Var& x, const Var& g) { return ag::mul_bcast(x, g); }

// ---------------------------------------------------------------------------

Var Model::Conv::operator()(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }

Model::Conv Model::make_conv(const std::string& name, int cin, int cout, int k, int stride, int pad,
                             Rng& rng) {
  Conv c;
  c.w = params_.add(name + ".w",
                    he_normal({cout, cin, k, k}, static_cast<std::int64_t>(cin) * k * k, rng));
  c.b = params_.add(name + ".b", Tensor::zeros({cout}));
  c.stride = stride;
  c.pad = pad;
  return c;
}

Model::Block Model::make_block(const std::string& prefix, int cin, int cout, bool residual,
                               Rng& rng) {
  Block b;
  b.residual = residual;
  b.c1 = make_conv(prefix + ".conv1", cin, cout, 3, 1, 1, rng);
  b.n1.g = params_.add(prefix + ".in1.g", Tensor::ones({cout}));
  b.n1.b = params_.add(prefix + ".in1.b", Tensor::zeros({cout}));
  if (prelu_) b.a1.slope = params_.add(prefix + ".act1.a", Tensor::full({cout}, 0.25f));
  b.c2 = make_conv(prefix + ".conv2", cout, cout, 3, 1, 1, rng);
  b.n2.g = params_.add(prefix + ".in2.g", Tensor::ones({cout}));
  b.n2.b = params_.add(prefix + ".in2.b", Tensor::zeros({cout}));
  if (prelu_) b.a2.slope = params_.add(prefix + ".act2.a", Tensor::full({cout}, 0.25f));
  if (cfg_.use_se && cfg_.arch == ModelConfig::Arch::ours)
    b.se = SEBlock::create(cout, 16, rng, params_, prefix + ".se");
  return b;
}

Var Model::run_block(const Block& b, const Var& x) const {
  auto act = [&](const Act& a, const Var& v) {
    return a.slope.defined() ? ag::prelu(v, a.slope) : ag::relu(v);
  };
  Var y = act(b.a1, ag::instance_norm(b.c1(x), b.n1.g, b.n1.b));
  y = act(b.a2, ag::instance_norm(b.c2(y), b.n2.g, b.n2.b));
  if (b.residual) y = ag::add(y, x);
  if (b.se) y = b.se->forward(y);
  return y;
}

Model::Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg), init_rng_(init_seed) {
  cfg_.validate();
  prelu_ = cfg_.arch == ModelConfig::Arch::ours;
  Rng& rng = init_rng_;
  bool ours = cfg_.arch == ModelConfig::Arch::ours;
  int m = cfg_.fusion == ModelConfig::Fusion::bottleneck ? cfg_.n_sequences : 1;
  int in_ch = cfg_.fusion == ModelConfig::Fusion::bottleneck ? 1 : cfg_.n_sequences;
  int D = cfg_.depth;

  for (int e = 0; e < m; ++e) {
    std::string ep = m == 1 ? "enc" : "enc" + std::to_string(e);
    std::vector<EncLevel> levels;
    for (int l = 0; l < D; ++l) {
      EncLevel lv;
      int cout = cfg_.channels_at(l);
      std::string lp = ep + ".l" + std::to_string(l);
      if (ours) {
        if (l == 0)
          lv.pre = make_conv(lp + ".stem", in_ch, cout, 3, 1, 1, rng);
        else
          lv.pre = make_conv(lp + ".down", cfg_.channels_at(l - 1), cout, 2, 2, 0, rng);
        lv.block = make_block(lp + ".res", cout, cout, true, rng);
      } else {
        lv.maxpool = l > 0;
        int cin = l == 0 ? in_ch : cfg_.channels_at(l - 1);
        lv.block = make_block(lp + ".conv", cin, cout, false, rng);
      }
      levels.push_back(std::move(lv));
    }
    encoders_.push_back(std::move(levels));
  }

  int top = cfg_.channels_at(D - 1);
  bottleneck_ = make_block("bot", top * m, top, false, rng);

  for (int l = D - 2; l >= 0; --l) {
    DecLevel dl;
    int ch = cfg_.channels_at(l);
    std::string lp = "dec.l" + std::to_string(l);
    if (ours) {
      dl.duc = true;
      dl.up = make_conv(lp + ".duc", cfg_.channels_at(l + 1), 4 * ch, 3, 1, 1, rng);
    } else {
      dl.duc = false;
      dl.up = make_conv(lp + ".up", cfg_.channels_at(l + 1), ch, 3, 1, 1, rng);
    }
    dl.block = make_block(lp + ".conv", (m + 1) * ch, ch, false, rng);
    decoders_.push_back(std::move(dl));
  }

  if (cfg_.use_deep_supervision) {
    for (int l = D - 2; l >= 0; --l) {
      DSHead h;
      h.r = 1 << l;
      h.conv = make_conv("ds.l" + std::to_string(l), cfg_.channels_at(l),
                         h.r * h.r * cfg_.n_classes, 1, 1, 0, rng);
      ds_heads_.push_back(std::move(h));
    }
    ds_refine_ = make_conv("ds.refine", (D - 1) * cfg_.n_classes, cfg_.n_classes, 3, 1, 1, rng);
  } else {
    head_ = make_conv("head", cfg_.base_channels, cfg_.n_classes, 1, 1, 0, rng);
  }
}

ModelOutput Model::forward(const Tensor& batch, bool dropout_active, std::uint64_t dropout_seed) {
  if (batch.rank() != 4)
    throw std::invalid_argument("model: expected (N,m,H,W), got " + batch.shape_str());
  if (batch.dim(1) != cfg_.n_sequences)
    throw std::invalid_argument("model: expected " + std::to_string(cfg_.n_sequences) +
                                " sequence channels, got " + std::to_string(batch.dim(1)));
  std::int64_t stride_total = 1 << (cfg_.depth - 1);
  if (batch.dim(2) % stride_total != 0 || batch.dim(3) % stride_total != 0)
    throw std::invalid_argument("model: H,W must be divisible by " + std::to_string(stride_total));

  bool drop = dropout_active && cfg_.arch == ModelConfig::Arch::ours && cfg_.dropout_rate > 0.0;
  std::uint64_t drop_counter = 0;

  Var input = ag::constant(batch);
  int m = static_cast<int>(encoders_.size());
  int D = cfg_.depth;

  // per-encoder, per-level feature maps
  std::vector<std::vector<Var>> feats(static_cast<std::size_t>(m));
  for (int e = 0; e < m; ++e) {
    Var cur = m == 1 ? input : ag::slice_channels(input, e, e + 1);
    for (int l = 0; l < D; ++l) {
      const EncLevel& lv = encoders_[static_cast<std::size_t>(e)][static_cast<std::size_t>(l)];
      if (lv.pre) cur = (*lv.pre)(cur);
      if (lv.maxpool) cur = ag::maxpool2x2(cur);
      cur = run_block(lv.block, cur);
      if (drop)
        cur = ag::dropout(cur, static_cast<float>(cfg_.dropout_rate),
                          derive_seed(dropout_seed, drop_counter++), true);
      feats[static_cast<std::size_t>(e)].push_back(cur);
    }
  }

  std::vector<Var> deepest;
  for (int e = 0; e < m; ++e) deepest.push_back(feats[static_cast<std::size_t>(e)].back());
  Var cur = run_block(bottleneck_, m == 1 ? deepest[0] : ag::concat_channels(deepest));

  std::vector<Var> ds_maps;
  for (std::size_t di = 0; di < decoders_.size(); ++di) {
    const DecLevel& dl = decoders_[di];
    int l = D - 2 - static_cast<int>(di);
    Var up = dl.duc ? ag::pixel_shuffle(dl.up(cur), 2) : dl.up(ag::upsample_bilinear2x(cur));
    std::vector<Var> cat{up};
    for (int e = 0; e < m; ++e) cat.push_back(feats[static_cast<std::size_t>(e)][static_cast<std::size_t>(l)]);
    cur = run_block(dl.block, ag::concat_channels(cat));
    if (cfg_.use_deep_supervision) {
      const DSHead& h = ds_heads_[di];
      Var map = h.conv(cur);
      if (h.r > 1) map = ag::pixel_shuffle(map, h.r);
      ds_maps.push_back(map);
    }
  }

  Var logits = cfg_.use_deep_supervision ? ds_refine_(ag::concat_channels(ds_maps)) : head_(cur);
  ModelOutput out;
  out.probs = cfg_.n_classes == 1 ? ag::sigmoid(logits) : ag::softmax_channels(logits);
  out.level_maps = std::move(ds_maps);
  return out;
}

std::vector<std::string> Model::param_names() const {
  std::vector<std::string> names;
  for (const auto& it : params_.items) names.push_back(it.name);
  return names;
}

std::int64_t Model::param_count() const { return params_.total_elements(); }

Model Model::clone_of(const Model& other) {
  Model m(other.cfg_, 0);
  for (std::size_t i = 0; i < m.params_.items.size(); ++i)
    m.params_.items[i].var.value_mut() = other.params_.items[i].var.value();
  return m;
}

}  // namespace carotidseg
