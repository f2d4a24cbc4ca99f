#include "moby/backbone.hpp"

#include <cmath>

namespace moby {

void BackboneConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || in_channels <= 0) throw ConfigError("image_size, patch_size and in_channels must be positive");
  if (image_size % patch_size != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (embed_dim <= 0) throw ConfigError("embed_dim must be positive");
  if (depths.empty() || depths.size() != num_heads.size()) {
    throw ConfigError("depths and num_heads must be non-empty and of equal length");
  }
  const Index grid = image_size / patch_size;
  if (window_size <= 0) throw ConfigError("window_size must be positive");
  if (variant == BackboneVariant::kSwinLite && grid % window_size != 0) {
    throw ConfigError("token grid " + std::to_string(grid) + " is not divisible by window_size " +
                      std::to_string(window_size));
  }
  Index dim = embed_dim;
  Index extent = grid;
  for (std::size_t s = 0; s < depths.size(); ++s) {
    if (depths[s] <= 0 || num_heads[s] <= 0) throw ConfigError("depths and num_heads entries must be positive");
    if (dim % num_heads[s] != 0) {
      throw ConfigError("stage " + std::to_string(s) + " width " + std::to_string(dim) +
                        " is not divisible by its head count " + std::to_string(num_heads[s]));
    }
    if (variant == BackboneVariant::kVitLite) break;
    if (s + 1 < depths.size()) {
      if (extent % 2 != 0) throw ConfigError("stage " + std::to_string(s) + " grid has odd extent; cannot merge patches");
      extent /= 2;
      dim *= 2;
      if (extent > window_size && extent % window_size != 0) {
        throw ConfigError("stage " + std::to_string(s + 1) + " grid is not divisible by window_size");
      }
    }
  }
  if (!(mlp_ratio > 0)) throw ConfigError("mlp_ratio must be positive");
  if (!(drop_path_rate >= 0 && drop_path_rate < 1)) throw ConfigError("drop_path_rate must lie in [0, 1)");
}

Index BackboneConfig::feature_dim() const {
  if (variant == BackboneVariant::kVitLite) return embed_dim;
  return embed_dim << (depths.size() - 1);
}

std::vector<Index> window_partition_index(Index batch, Index height, Index width, Index window, Index shift) {
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(batch * height * width));
  for (Index b = 0; b < batch; ++b) {
    for (Index wh = 0; wh < height / window; ++wh) {
      for (Index ww = 0; ww < width / window; ++ww) {
        for (Index i = 0; i < window; ++i) {
          for (Index j = 0; j < window; ++j) {
            const Index r = (wh * window + i + shift) % height;
            const Index c = (ww * window + j + shift) % width;
            idx.push_back((b * height + r) * width + c);
          }
        }
      }
    }
  }
  return idx;
}

std::vector<Index> inverse_permutation(const std::vector<Index>& perm) {
  std::vector<Index> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
  return inv;
}

std::vector<int> shift_region_ids(Index height, Index width, Index window, Index shift) {
  auto band = [&](Index pos, Index extent) {
    if (pos < extent - window) return 0;
    if (pos < extent - shift) return 1;
    return 2;
  };
  std::vector<int> ids(static_cast<std::size_t>(height * width));
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) ids[static_cast<std::size_t>(r * width + c)] = 3 * band(r, height) + band(c, width);
  }
  return ids;
}

template <typename Scalar>
Tensor<Scalar> shifted_window_mask(Index height, Index width, Index window, Index shift) {
  const auto ids = shift_region_ids(height, width, window, shift);
  const Index nw = (height / window) * (width / window);
  const Index t = window * window;
  Tensor<Scalar> mask({nw, t, t});
  Index w = 0;
  for (Index wh = 0; wh < height / window; ++wh) {
    for (Index ww = 0; ww < width / window; ++ww, ++w) {
      std::vector<int> local;
      for (Index i = 0; i < window; ++i) {
        for (Index j = 0; j < window; ++j) {
          local.push_back(ids[static_cast<std::size_t>((wh * window + i) * width + ww * window + j)]);
        }
      }
      for (Index a = 0; a < t; ++a) {
        for (Index b = 0; b < t; ++b) {
          mask.data()[(w * t + a) * t + b] =
              local[static_cast<std::size_t>(a)] == local[static_cast<std::size_t>(b)] ? Scalar(0) : Scalar(kMaskedLogit);
        }
      }
    }
  }
  return mask;
}

std::vector<Index> relative_position_index(Index window) {
  const Index t = window * window;
  std::vector<Index> idx(static_cast<std::size_t>(t * t));
  for (Index a = 0; a < t; ++a) {
    for (Index b = 0; b < t; ++b) {
      const Index dr = a / window - b / window + window - 1;
      const Index dc = a % window - b % window + window - 1;
      idx[static_cast<std::size_t>(a * t + b)] = dr * (2 * window - 1) + dc;
    }
  }
  return idx;
}

template <typename Scalar>
Tensor<Scalar> drop_path(const Tensor<Scalar>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("drop_path rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const double keep = 1.0 - rate;
  std::vector<Scalar> factors(static_cast<std::size_t>(x.dim(0)));
  for (auto& f : factors) f = rng.bernoulli(keep) ? static_cast<Scalar>(1.0 / keep) : Scalar(0);
  return scale_samples(x, std::span<const Scalar>(factors));
}

template <typename Scalar>
WindowAttention<Scalar>::WindowAttention(Index dim_, Index heads_, Index window_, bool relative_position_bias, Rng& rng)
    : dim(dim_), heads(heads_), window(window_), qkv(dim_, 3 * dim_, rng), proj(dim_, dim_, rng) {
  if (relative_position_bias) {
    relative_bias = truncated_normal_tensor<Scalar>({(2 * window - 1) * (2 * window - 1), heads}, 0.02, rng);
    relative_index = relative_position_index(window);
  }
}

template <typename Scalar>
Tensor<Scalar> WindowAttention<Scalar>::forward(const Tensor<Scalar>& windows, const Tensor<Scalar>& mask,
                                                Index windows_per_image) const {
  const Index groups = windows.dim(0), t = windows.dim(1);
  const Index head_dim = dim / heads;
  const Index images = groups / windows_per_image;
  Tensor<Scalar> packed = reshape(linear(windows, qkv.weight, qkv.bias), {groups, t, 3, heads, head_dim});
  packed = permute(packed, {2, 0, 3, 1, 4});  // [3, G, heads, T, d]
  auto part = [&](Index i) { return reshape(slice(packed, 0, i, i + 1), {groups * heads, t, head_dim}); };
  const Tensor<Scalar> q = scale(part(0), Scalar(1) / std::sqrt(Scalar(head_dim)));
  const Tensor<Scalar> k = part(1);
  const Tensor<Scalar> v = part(2);

  Tensor<Scalar> scores = reshape(batched_matmul(q, k, true), {images, windows_per_image, heads, t, t});
  if (relative_bias.defined()) {
    Tensor<Scalar> bias = gather_rows(relative_bias, std::span<const Index>(relative_index));  // [T*T, heads]
    bias = reshape(transpose(bias), {heads, t, t});
    scores = add(scores, bias);
  }
  if (mask.defined()) {
    Tensor<Scalar> expanded({windows_per_image, heads, t, t});
    for (Index w = 0; w < windows_per_image; ++w) {
      for (Index h = 0; h < heads; ++h) {
        expanded.data().segment((w * heads + h) * t * t, t * t) = mask.data().segment(w * t * t, t * t);
      }
    }
    scores = add(scores, expanded);
  }
  const Tensor<Scalar> attn = reshape(softmax(scores, -1), {groups * heads, t, t});
  Tensor<Scalar> out = reshape(batched_matmul(attn, v), {groups, heads, t, head_dim});
  out = reshape(permute(out, {0, 2, 1, 3}), {groups, t, dim});
  return proj(out);
}

template <typename Scalar>
void WindowAttention<Scalar>::visit(const std::string& prefix, const TensorVisitor<Scalar>& f) {
  qkv.visit(join_name(prefix, "qkv"), f);
  proj.visit(join_name(prefix, "proj"), f);
  if (relative_bias.defined()) f(join_name(prefix, "relative_position_bias_table"), relative_bias, TensorRole::kParameter);
}

template <typename Scalar>
Tensor<Scalar> window_attention(const Tensor<Scalar>& grid, Index shift, const WindowAttention<Scalar>& attn) {
  if (grid.rank() != 4) throw ShapeError("window_attention: expected a [B, H, W, C] grid, got " + to_string(grid.shape()));
  const Index b = grid.dim(0), h = grid.dim(1), w = grid.dim(2), c = grid.dim(3);
  const Index win = attn.window;
  if (h % win != 0 || w % win != 0) {
    throw ConfigError("window_attention: grid " + std::to_string(h) + "x" + std::to_string(w) +
                      " is not divisible by window " + std::to_string(win));
  }
  if (shift < 0 || shift >= win) throw ConfigError("window_attention: shift must lie in [0, window)");
  if (c != attn.dim) throw ShapeError("window_attention: grid channels do not match attention width");
  const Index nw = (h / win) * (w / win);
  const auto perm = window_partition_index(b, h, w, win, shift);
  const Tensor<Scalar> rows = reshape(grid, {b * h * w, c});
  const Tensor<Scalar> windows = reshape(gather_rows(rows, std::span<const Index>(perm)), {b * nw, win * win, c});
  const Tensor<Scalar> mask = shift > 0 ? shifted_window_mask<Scalar>(h, w, win, shift) : Tensor<Scalar>();
  const Tensor<Scalar> out = reshape(attn.forward(windows, mask, nw), {b * h * w, c});
  const auto inv = inverse_permutation(perm);
  return reshape(gather_rows(out, std::span<const Index>(inv)), {b, h, w, c});
}

template <typename Scalar>
Tensor<Scalar> extract_patches(const Tensor<Scalar>& images, Index p) {
  if (images.rank() != 4) throw ShapeError("extract_patches: expected [b, C, s, s], got " + to_string(images.shape()));
  const Index b = images.dim(0), ch = images.dim(1), s = images.dim(2);
  if (images.dim(3) != s) throw ShapeError("extract_patches: images must be square");
  if (s % p != 0) throw ConfigError("image size " + std::to_string(s) + " is not divisible by patch size " + std::to_string(p));
  const Index g = s / p;
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(images.size()));
  for (Index n = 0; n < b; ++n) {
    for (Index gr = 0; gr < g; ++gr) {
      for (Index gc = 0; gc < g; ++gc) {
        for (Index k = 0; k < ch; ++k) {
          for (Index i = 0; i < p; ++i) {
            for (Index j = 0; j < p; ++j) idx.push_back(((n * ch + k) * s + gr * p + i) * s + gc * p + j);
          }
        }
      }
    }
  }
  const Tensor<Scalar> flat = reshape(images, {images.size(), 1});
  return reshape(gather_rows(flat, std::span<const Index>(idx)), {b * g * g, ch * p * p});
}

template <typename Scalar>
PatchEmbed<Scalar>::PatchEmbed(Index in_channels, Index patch, Index dim, Rng& rng)
    : patch_size(patch), proj(in_channels * patch * patch, dim, rng), norm(dim) {}

template <typename Scalar>
Tensor<Scalar> PatchEmbed<Scalar>::forward(const Tensor<Scalar>& images) const {
  const Index b = images.dim(0), g = images.dim(2) / patch_size;
  const Tensor<Scalar> tokens = norm(proj(extract_patches(images, patch_size)));
  return reshape(tokens, {b, g, g, tokens.dim(1)});
}

template <typename Scalar>
void PatchEmbed<Scalar>::visit(const std::string& prefix, const TensorVisitor<Scalar>& f) {
  proj.visit(join_name(prefix, "proj"), f);
  norm.visit(join_name(prefix, "norm"), f);
}

template <typename Scalar>
PatchMerging<Scalar>::PatchMerging(Index dim, Rng& rng) : norm(4 * dim), reduction(4 * dim, 2 * dim, rng, false) {}

template <typename Scalar>
Tensor<Scalar> PatchMerging<Scalar>::forward(const Tensor<Scalar>& grid) const {
  const Index b = grid.dim(0), h = grid.dim(1), w = grid.dim(2), c = grid.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ConfigError("patch_merging: grid " + std::to_string(h) + "x" + std::to_string(w) + " has an odd extent");
  }
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(b * h * w));
  for (Index n = 0; n < b; ++n) {
    for (Index i = 0; i < h / 2; ++i) {
      for (Index j = 0; j < w / 2; ++j) {
        // (2i, 2j), (2i+1, 2j), (2i, 2j+1), (2i+1, 2j+1)
        for (auto [di, dj] : {std::pair{0, 0}, std::pair{1, 0}, std::pair{0, 1}, std::pair{1, 1}}) {
          idx.push_back((n * h + 2 * i + di) * w + 2 * j + dj);
        }
      }
    }
  }
  const Tensor<Scalar> merged =
      reshape(gather_rows(reshape(grid, {b * h * w, c}), std::span<const Index>(idx)), {b * (h / 2) * (w / 2), 4 * c});
  return reshape(reduction(norm(merged)), {b, h / 2, w / 2, 2 * c});
}

template <typename Scalar>
void PatchMerging<Scalar>::visit(const std::string& prefix, const TensorVisitor<Scalar>& f) {
  norm.visit(join_name(prefix, "norm"), f);
  reduction.visit(join_name(prefix, "reduction"), f);
}

namespace {

// Pre-norm block: x + drop_path(attn(norm1(x))), then x + drop_path(mlp(norm2(x))).
template <typename Scalar>
struct Block {
  Index shift = 0;
  double depth_fraction = 0.0;  // share of the encoder's drop-path rate
  LayerNorm<Scalar> norm1;
  WindowAttention<Scalar> attn;
  ChannelNorm<Scalar> norm2;
  Linear<Scalar> fc1;
  Linear<Scalar> fc2;

  Block(Index dim, Index heads, Index window, Index shift_, bool relative_bias, const BackboneConfig& cfg,
        double fraction, Rng& rng)
      : shift(shift_),
        depth_fraction(fraction),
        norm1(dim),
        attn(dim, heads, window, relative_bias, rng),
        norm2(cfg.norm_before_mlp, dim),
        fc1(dim, static_cast<Index>(std::lround(static_cast<double>(dim) * cfg.mlp_ratio)), rng),
        fc2(static_cast<Index>(std::lround(static_cast<double>(dim) * cfg.mlp_ratio)), dim, rng) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, double rate, bool training, Rng& rng) {
    const double r = rate * depth_fraction;
    Tensor<Scalar> y = add(x, drop_path(window_attention(norm1(x), shift, attn), r, training, rng));
    const Tensor<Scalar> hidden = fc2(gelu(fc1(norm2(y, training))));
    return add(y, drop_path(hidden, r, training, rng));
  }

  void visit(const std::string& prefix, const TensorVisitor<Scalar>& f) {
    norm1.visit(join_name(prefix, "norm1"), f);
    attn.visit(join_name(prefix, "attn"), f);
    norm2.visit(join_name(prefix, "norm2"), f);
    fc1.visit(join_name(prefix, "mlp.fc1"), f);
    fc2.visit(join_name(prefix, "mlp.fc2"), f);
  }
};

// Stochastic-depth convention: block i of n gets rate * i / (n - 1).
double depth_fraction(Index i, Index total) { return total > 1 ? static_cast<double>(i) / static_cast<double>(total - 1) : 0.0; }

template <typename Scalar>
class SwinLite final : public Backbone<Scalar> {
 public:
  SwinLite(const BackboneConfig& cfg, Rng& rng)
      : Backbone<Scalar>(cfg), embed_(cfg.in_channels, cfg.patch_size, cfg.embed_dim, rng) {
    Index dim = cfg.embed_dim;
    Index extent = cfg.image_size / cfg.patch_size;
    Index total = 0;
    for (Index d : cfg.depths) total += d;
    Index block_id = 0;
    for (std::size_t s = 0; s < cfg.depths.size(); ++s) {
      // A window never exceeds the grid; with a single window there is nothing to shift.
      const Index window = std::min(cfg.window_size, extent);
      std::vector<Block<Scalar>> blocks;
      for (Index i = 0; i < cfg.depths[s]; ++i, ++block_id) {
        const Index shift = (i % 2 == 1 && window < extent) ? window / 2 : 0;
        blocks.emplace_back(dim, cfg.num_heads[s], window, shift, true, cfg, depth_fraction(block_id, total), rng);
      }
      stages_.push_back(std::move(blocks));
      if (s + 1 < cfg.depths.size()) {
        merges_.emplace_back(dim, rng);
        dim *= 2;
        extent /= 2;
      }
    }
    norm_ = LayerNorm<Scalar>(dim);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& images, double rate, bool training, Rng& rng) override {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("drop_path rate must lie in [0, 1)");
    Tensor<Scalar> x = embed_.forward(images);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (auto& block : stages_[s]) x = block.forward(x, rate, training, rng);
      if (s < merges_.size()) x = merges_[s].forward(x);
    }
    const Index b = x.dim(0), tokens = x.dim(1) * x.dim(2), c = x.dim(3);
    return mean(norm_(reshape(x, {b, tokens, c})), 1);
  }

  void visit(const std::string& prefix, const TensorVisitor<Scalar>& f) override {
    embed_.visit(join_name(prefix, "patch_embed"), f);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string stage = join_name(prefix, "stage" + std::to_string(s));
      for (std::size_t i = 0; i < stages_[s].size(); ++i) stages_[s][i].visit(join_name(stage, "block" + std::to_string(i)), f);
      if (s < merges_.size()) merges_[s].visit(join_name(stage, "downsample"), f);
    }
    norm_.visit(join_name(prefix, "norm"), f);
  }

 private:
  PatchEmbed<Scalar> embed_;
  std::vector<std::vector<Block<Scalar>>> stages_;
  std::vector<PatchMerging<Scalar>> merges_;
  LayerNorm<Scalar> norm_;
};

// Plain ViT-style encoder: global attention over all patches with a learned
// absolute position embedding, mean pooled like SwinLite.
template <typename Scalar>
class VitLite final : public Backbone<Scalar> {
 public:
  VitLite(const BackboneConfig& cfg, Rng& rng)
      : Backbone<Scalar>(cfg), embed_(cfg.in_channels, cfg.patch_size, cfg.embed_dim, rng) {
    const Index extent = cfg.image_size / cfg.patch_size;
    pos_ = truncated_normal_tensor<Scalar>({extent, extent, cfg.embed_dim}, 0.02, rng);
    Index total = 0;
    for (Index d : cfg.depths) total += d;
    for (Index i = 0; i < total; ++i) {
      blocks_.emplace_back(cfg.embed_dim, cfg.num_heads[0], extent, 0, false, cfg, depth_fraction(i, total), rng);
    }
    norm_ = LayerNorm<Scalar>(cfg.embed_dim);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& images, double rate, bool training, Rng& rng) override {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("drop_path rate must lie in [0, 1)");
    Tensor<Scalar> x = add(embed_.forward(images), pos_);
    for (auto& block : blocks_) x = block.forward(x, rate, training, rng);
    const Index b = x.dim(0), tokens = x.dim(1) * x.dim(2), c = x.dim(3);
    return mean(norm_(reshape(x, {b, tokens, c})), 1);
  }

  void visit(const std::string& prefix, const TensorVisitor<Scalar>& f) override {
    embed_.visit(join_name(prefix, "patch_embed"), f);
    f(join_name(prefix, "pos_embed"), pos_, TensorRole::kParameter);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(join_name(prefix, "block" + std::to_string(i)), f);
    norm_.visit(join_name(prefix, "norm"), f);
  }

 private:
  PatchEmbed<Scalar> embed_;
  Tensor<Scalar> pos_;
  std::vector<Block<Scalar>> blocks_;
  LayerNorm<Scalar> norm_;
};

}  // namespace

template <typename Scalar>
std::unique_ptr<Backbone<Scalar>> make_backbone(const BackboneConfig& config, Rng& init) {
  config.validate();
  if (config.variant == BackboneVariant::kVitLite) return std::make_unique<VitLite<Scalar>>(config, init);
  return std::make_unique<SwinLite<Scalar>>(config, init);
}

#define MOBY_INSTANTIATE_BACKBONE(S)                                                                   \
  template Tensor<S> shifted_window_mask<S>(Index, Index, Index, Index);                               \
  template Tensor<S> drop_path(const Tensor<S>&, double, bool, Rng&);                                  \
  template struct WindowAttention<S>;                                                                  \
  template Tensor<S> window_attention(const Tensor<S>&, Index, const WindowAttention<S>&);             \
  template Tensor<S> extract_patches(const Tensor<S>&, Index);                                         \
  template struct PatchEmbed<S>;                                                                       \
  template struct PatchMerging<S>;                                                                     \
  template std::unique_ptr<Backbone<S>> make_backbone<S>(const BackboneConfig&, Rng&);

MOBY_INSTANTIATE_BACKBONE(float)
MOBY_INSTANTIATE_BACKBONE(double)

}  // namespace moby
