#pragma once

#include <optional>
#include <string>
#include <vector>

#include "carotidseg/autograd.hpp"
#include "carotidseg/rng.hpp"
#include "carotidseg/tensor.hpp"

namespace carotidseg {

struct ModelConfig {
  enum class Arch { ours, basic };
  enum class Fusion { input, bottleneck };

  Arch arch = Arch::ours;
  int n_sequences = 5;
  int depth = 4;          // encoder/decoder blocks: 4 fine, 5 coarse
  int base_channels = 32; // doubled per level
  Fusion fusion = Fusion::bottleneck;
  bool use_se = true;
  bool use_deep_supervision = true;
  double dropout_rate = 0.3;
  int n_classes = 3;      // 1 selects a sigmoid head, >1 a softmax head

  void validate() const;
  int channels_at(int level) const;

  static ModelConfig fine_defaults();
  static ModelConfig coarse_defaults();
};

std::string to_string(ModelConfig::Arch a);
std::string to_string(ModelConfig::Fusion f);
ModelConfig::Arch arch_from_string(const std::string& s);
ModelConfig::Fusion fusion_from_string(const std::string& s);

// Named learnable tensors in registration order.
struct ParamStore {
  struct Item {
    std::string name;
    ag::Var var;
  };
  std::vector<Item> items;

  ag::Var add(std::string name, Tensor init);
  const ag::Var& find(const std::string& name) const;
  void zero_grads();
  std::int64_t total_elements() const;
};

// theta'_t = alpha * theta'_{t-1} + (1 - alpha) * theta_t, elementwise.
// Structures must match by name and shape.
void ema_update(ParamStore& teacher, const ParamStore& student, double alpha);

// Channel squeeze-and-excitation: GAP -> bottleneck (reduction 16) -> sigmoid
// gates -> per-channel rescale.
struct SEBlock {
  ag::Var w1, b1, w2, b2;

  static SEBlock create(int channels, int reduction, Rng& rng, ParamStore& store,
                        const std::string& prefix);
  ag::Var gates(const ag::Var& x) const;                       // (N,C,1,1) in (0,1)
  ag::Var forward(const ag::Var& x) const;                     // scale(x, gates(x))
  static ag::Var scale(const ag::Var& x, const ag::Var& g);    // per-channel rescale
};

struct ModelOutput {
  ag::Var probs;                    // (N,C,H,W); per-pixel simplex or sigmoid
  std::vector<ag::Var> level_maps;  // deep-supervision maps, full resolution
};

// Multi-level multi-sequence U-Net plus the plain U-Net baseline; fusion at
// the input (channel concatenation, one encoder) or at the bottleneck (one
// encoder per sequence, per-level skip concatenation).
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t init_seed);

  // batch is (N, m, H, W) with H, W divisible by 2^(depth-1). Deterministic
  // given (weights, input, dropout_active, dropout_seed).
  ModelOutput forward(const Tensor& batch, bool dropout_active = false,
                      std::uint64_t dropout_seed = 0);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::vector<std::string> param_names() const;
  std::int64_t param_count() const;

  static Model clone_of(const Model& other);

 private:
  struct Conv {
    ag::Var w, b;
    int stride = 1, pad = 1;
    ag::Var operator()(const ag::Var& x) const;
  };
  struct Norm {
    ag::Var g, b;
  };
  struct Act {
    ag::Var slope;  // defined => PReLU, otherwise ReLU
  };
  struct Block {
    Conv c1, c2;
    Norm n1, n2;
    Act a1, a2;
    bool residual = false;
    std::optional<SEBlock> se;
  };
  struct EncLevel {
    std::optional<Conv> pre;  // stem (level 0) or strided down conv; basic uses maxpool
    bool maxpool = false;
    Block block;
  };
  struct DecLevel {
    Conv up;  // DUC conv for ours (followed by pixel shuffle), post-bilinear conv for basic
    bool duc = true;
    Block block;
  };
  struct DSHead {
    Conv conv;  // 1x1 -> r^2 * C channels
    int r = 1;
  };

  Conv make_conv(const std::string& name, int cin, int cout, int k, int stride, int pad, Rng& rng);
  Block make_block(const std::string& prefix, int cin, int cout, bool residual, Rng& rng);
  ag::Var run_block(const Block& b, const ag::Var& x) const;

  ModelConfig cfg_;
  ParamStore params_;
  Rng init_rng_;
  std::vector<std::vector<EncLevel>> encoders_;
  Block bottleneck_;
  std::vector<DecLevel> decoders_;  // deepest first
  std::vector<DSHead> ds_heads_;    // aligned with decoders_
  Conv ds_refine_;
  Conv head_;
  bool prelu_ = true;
};

}  // namespace carotidseg
