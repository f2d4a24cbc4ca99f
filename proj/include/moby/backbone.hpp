#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "moby/nn.hpp"

namespace moby {

enum class BackboneVariant { kSwinLite, kVitLite };

struct BackboneConfig {
  BackboneVariant variant = BackboneVariant::kSwinLite;
  Index image_size = 32;
  Index in_channels = 3;
  Index patch_size = 4;
  Index embed_dim = 48;
  std::vector<Index> depths{2, 2};
  std::vector<Index> num_heads{3, 6};
  Index window_size = 4;
  double mlp_ratio = 4.0;
  NormKind norm_before_mlp = NormKind::kLayerNorm;
  double drop_path_rate = 0.1;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;

  /// Width of the pooled feature vector.
  Index feature_dim() const;
};

template <typename Scalar>
using TensorVisitor = std::function<void(const std::string&, Tensor<Scalar>&, TensorRole)>;

/// Additive attention-mask value for token pairs that must not attend.
inline constexpr double kMaskedLogit = -1e9;

/// Row indices that gather a [B*H*W, C] token grid into windows of
/// window*window tokens after a cyclic shift of (-shift, -shift). Windows are
/// ordered (batch, window row, window col), tokens row-major within a window.
std::vector<Index> window_partition_index(Index batch, Index height, Index width, Index window, Index shift);

/// Inverse permutation of `window_partition_index`.
std::vector<Index> inverse_permutation(const std::vector<Index>& perm);

/// Region id (0..8) of every position of the shifted H x W grid; tokens from
/// different regions share a window only because of the cyclic wrap.
std::vector<int> shift_region_ids(Index height, Index width, Index window, Index shift);

/// [num_windows, T, T] additive mask (0 or kMaskedLogit) for a shifted partition.
template <typename Scalar>
Tensor<Scalar> shifted_window_mask(Index height, Index width, Index window, Index shift);

/// Relative-position lookup into a [(2w-1)^2, heads] bias table, T*T entries.
std::vector<Index> relative_position_index(Index window);

/// Stochastic depth on a residual branch: each sample (leading index) is
/// kept with probability 1 - rate and rescaled by 1 / (1 - rate).
template <typename Scalar>
Tensor<Scalar> drop_path(const Tensor<Scalar>& x, double rate, bool training, Rng& rng);

/// Multi-head self-attention inside windows of tokens.
template <typename Scalar>
struct WindowAttention {
  Index dim = 0;
  Index heads = 1;
  Index window = 1;
  Linear<Scalar> qkv;
  Linear<Scalar> proj;
  Tensor<Scalar> relative_bias;  // [(2w-1)^2, heads]; undefined when disabled
  std::vector<Index> relative_index;

  WindowAttention() = default;
  WindowAttention(Index dim, Index heads, Index window, bool relative_position_bias, Rng& rng);

  /// windows: [B * nW, T, C]. mask, when defined, is [nW, T, T].
  Tensor<Scalar> forward(const Tensor<Scalar>& windows, const Tensor<Scalar>& mask, Index windows_per_image) const;

  void visit(const std::string& prefix, const TensorVisitor<Scalar>& f);
};

/// Window attention applied to a token grid [B, H, W, C]: cyclic shift,
/// partition, attention (masked across pre-shift regions when shifted),
/// merge, inverse shift.
template <typename Scalar>
Tensor<Scalar> window_attention(const Tensor<Scalar>& grid, Index shift, const WindowAttention<Scalar>& attn);

/// Shared interface of the two backbone variants. forward maps normalized
/// images [b, C, s, s] to pooled features [b, feature_dim()].
template <typename Scalar>
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual Tensor<Scalar> forward(const Tensor<Scalar>& images, double drop_path_rate, bool training, Rng& rng) = 0;
  virtual void visit(const std::string& prefix, const TensorVisitor<Scalar>& f) = 0;

  const BackboneConfig& config() const { return config_; }
  Index feature_dim() const { return config_.feature_dim(); }

 protected:
  explicit Backbone(BackboneConfig config) : config_(std::move(config)) {}

 private:
  BackboneConfig config_;
};

template <typename Scalar>
std::unique_ptr<Backbone<Scalar>> make_backbone(const BackboneConfig& config, Rng& init);

/// [b, C, s, s] images to [b * (s/p)^2, C*p*p] patch rows, patches in
/// raster order and each row ordered (channel, row, col) within the patch.
template <typename Scalar>
Tensor<Scalar> extract_patches(const Tensor<Scalar>& images, Index patch_size);

template <typename Scalar>
struct PatchEmbed {
  Index patch_size = 4;
  Linear<Scalar> proj;
  LayerNorm<Scalar> norm;

  PatchEmbed() = default;
  PatchEmbed(Index in_channels, Index patch_size, Index dim, Rng& rng);

  /// images [b, C, s, s] -> token grid [b, s/p, s/p, dim].
  Tensor<Scalar> forward(const Tensor<Scalar>& images) const;
  void visit(const std::string& prefix, const TensorVisitor<Scalar>& f);
};

template <typename Scalar>
struct PatchMerging {
  LayerNorm<Scalar> norm;
  Linear<Scalar> reduction;

  PatchMerging() = default;
  PatchMerging(Index dim, Rng& rng);

  /// [B, H, W, C] -> [B, H/2, W/2, 2C].
  Tensor<Scalar> forward(const Tensor<Scalar>& grid) const;
  void visit(const std::string& prefix, const TensorVisitor<Scalar>& f);
};

}  // namespace moby
