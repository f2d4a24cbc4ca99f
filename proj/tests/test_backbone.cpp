#include <doctest.h>

#include <cmath>
#include <set>

#include "gradcheck.hpp"
#include "moby/backbone.hpp"

using namespace moby;
using moby::testing::grad_check;
using moby::testing::project;
using moby::testing::random_tensor;
using Mat = Eigen::MatrixXd;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.embed_dim = 12;
  cfg.depths = {2, 2};
  cfg.num_heads = {2, 4};
  cfg.window_size = 2;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

// Plain softmax attention over all N tokens of one image, written with dense
// matrices. bias(h) is the additive [N, N] term for head h.
Mat dense_attention(const Mat& x, const WindowAttention<double>& a, const std::function<Mat(Index)>& bias) {
  const Index n = x.rows(), c = a.dim, hd = c / a.heads;
  Mat w_qkv(c, 3 * c), w_proj(c, c);
  for (Index i = 0; i < c; ++i) {
    for (Index j = 0; j < 3 * c; ++j) w_qkv(i, j) = a.qkv.weight.data()[i * 3 * c + j];
    for (Index j = 0; j < c; ++j) w_proj(i, j) = a.proj.weight.data()[i * c + j];
  }
  Mat qkv = x * w_qkv;
  for (Index j = 0; j < 3 * c; ++j) qkv.col(j).array() += a.qkv.bias.data()[j];
  Mat heads_out(n, c);
  for (Index h = 0; h < a.heads; ++h) {
    const Mat q = qkv.middleCols(h * hd, hd) / std::sqrt(static_cast<double>(hd));
    const Mat k = qkv.middleCols(c + h * hd, hd);
    const Mat v = qkv.middleCols(2 * c + h * hd, hd);
    Mat s = q * k.transpose() + bias(h);
    for (Index r = 0; r < n; ++r) {
      const double mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp();
      s.row(r) /= s.row(r).sum();
    }
    heads_out.middleCols(h * hd, hd) = s * v;
  }
  Mat out = heads_out * w_proj;
  for (Index j = 0; j < c; ++j) out.col(j).array() += a.proj.bias.data()[j];
  return out;
}

template <typename Scalar>
Index count(Backbone<Scalar>& net, TensorRole role) {
  Index n = 0;
  net.visit("", [&](const std::string&, Tensor<Scalar>& t, TensorRole r) {
    if (r == role) n += t.size();
  });
  return n;
}

}  // namespace

TEST_CASE("patch embed shapes and zero input") {
  Rng rng(1);
  PatchEmbed<double> embed(3, 4, 48, rng);
  const auto out = embed.forward(Tensor<double>({2, 3, 32, 32}));
  CHECK(out.shape() == Shape{2, 8, 8, 48});
  CHECK(out.data().isZero(0.0));
  CHECK_THROWS_AS(embed.forward(Tensor<double>({1, 3, 30, 30})), ConfigError);
}

TEST_CASE("extract_patches ordering") {
  Tensor<double> img({1, 2, 4, 4});
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = static_cast<double>(i);
  const auto p = extract_patches(img, 2);
  CHECK(p.shape() == Shape{4, 8});
  // Patch (0, 1): channel 0 rows 0-1 cols 2-3, then channel 1.
  const std::vector<double> expected{2, 3, 6, 7, 18, 19, 22, 23};
  for (Index j = 0; j < 8; ++j) CHECK(p.data()[8 + j] == expected[static_cast<std::size_t>(j)]);
}

TEST_CASE("patch embed gradient matches finite differences") {
  Rng rng(2);
  PatchEmbed<double> embed(3, 4, 8, rng);
  const auto images = random_tensor({2, 3, 8, 8}, rng, 1.0, false);
  const auto r = grad_check([&] { return project(embed.forward(images), 5); }, {embed.proj.weight, embed.proj.bias});
  CHECK(r.rel_error < 1e-5);
  CHECK(r.analytic_norm > 0);
}

TEST_CASE("window attention with one window equals dense global attention") {
  Rng rng(3);
  WindowAttention<double> attn(12, 3, 4, true, rng);
  for (Index i = 0; i < attn.relative_bias.size(); ++i) attn.relative_bias.data()[i] = rng.uniform(-1, 1);
  for (Index i = 0; i < attn.qkv.bias.size(); ++i) attn.qkv.bias.data()[i] = rng.uniform(-0.5, 0.5);
  const auto grid = random_tensor({2, 4, 4, 12}, rng, 2.0, false);
  const auto out = window_attention(grid, 0, attn);
  CHECK(out.shape() == grid.shape());

  auto bias = [&](Index h) {
    Mat b(16, 16);
    for (Index a = 0; a < 16; ++a) {
      for (Index c = 0; c < 16; ++c) {
        const Index dr = a / 4 - c / 4 + 3, dc = a % 4 - c % 4 + 3;
        b(a, c) = attn.relative_bias.data()[(dr * 7 + dc) * 3 + h];
      }
    }
    return b;
  };
  double worst = 0.0;
  for (Index n = 0; n < 2; ++n) {
    Mat x(16, 12);
    for (Index t = 0; t < 16; ++t) {
      for (Index c = 0; c < 12; ++c) x(t, c) = grid.data()[(n * 16 + t) * 12 + c];
    }
    const Mat ref = dense_attention(x, attn, bias);
    for (Index t = 0; t < 16; ++t) {
      for (Index c = 0; c < 12; ++c) worst = std::max(worst, std::abs(ref(t, c) - out.data()[(n * 16 + t) * 12 + c]));
    }
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("window attention rejects bad grids and shifts") {
  Rng rng(4);
  WindowAttention<double> attn(6, 2, 4, true, rng);
  CHECK_THROWS_AS(window_attention(Tensor<double>({1, 6, 6, 6}), 0, attn), ConfigError);
  CHECK_THROWS_AS(window_attention(Tensor<double>({1, 8, 8, 6}), 4, attn), ConfigError);
  CHECK_THROWS_AS(window_attention(Tensor<double>({1, 8, 8, 6}), -1, attn), ConfigError);
}

TEST_CASE("shifted mask agrees with wrap-around enumeration") {
  // A token at shifted position p came from (p + s) mod H. Two tokens of one
  // window may attend iff neither or both wrapped, per axis.
  const Index h = 8, w = 8, win = 4, s = 2;
  const auto mask = shifted_window_mask<double>(h, w, win, s);
  CHECK(mask.shape() == Shape{4, 16, 16});
  Index masked = 0;
  for (Index wr = 0; wr < 2; ++wr) {
    for (Index wc = 0; wc < 2; ++wc) {
      for (Index a = 0; a < 16; ++a) {
        for (Index b = 0; b < 16; ++b) {
          const Index ra = wr * win + a / win, ca = wc * win + a % win;
          const Index rb = wr * win + b / win, cb = wc * win + b % win;
          const bool same = ((ra + s >= h) == (rb + s >= h)) && ((ca + s >= w) == (cb + s >= w));
          const double m = mask.data()[((wr * 2 + wc) * 16 + a) * 16 + b];
          CHECK(m == (same ? 0.0 : kMaskedLogit));
          masked += same ? 0 : 1;
        }
      }
    }
  }
  CHECK(masked > 0);

  // Post-softmax: rows sum to one and no mass crosses regions, even for large logits.
  Rng rng(5);
  auto logits = random_tensor({4, 16, 16}, rng, 50.0, false);
  const auto probs = softmax(add(logits, mask), -1);
  double worst_leak = 0.0, worst_sum = 0.0;
  for (Index row = 0; row < 4 * 16; ++row) {
    double total = 0.0;
    for (Index b = 0; b < 16; ++b) {
      const double p = probs.data()[row * 16 + b];
      total += p;
      if (mask.data()[row * 16 + b] != 0.0) worst_leak = std::max(worst_leak, p);
    }
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
  }
  CHECK(worst_leak < 1e-30);
  CHECK(worst_sum < 1e-12);
}

TEST_CASE("shifted window attention never mixes tokens across regions") {
  // Perturbing one input token may only change outputs that share both its
  // shifted window and its region.
  const Index h = 8, win = 4, s = 2, c = 6;
  Rng rng(6);
  WindowAttention<double> attn(c, 2, win, true, rng);
  const auto grid = random_tensor({1, h, h, c}, rng, 1.0, false);
  const auto base = window_attention(grid, s, attn);
  auto key = [&](Index r, Index col) {
    const Index sr = (r - s + h) % h, sc = (col - s + h) % h;  // shifted coordinates
    return std::tuple{sr / win, sc / win, sr + s >= h, sc + s >= h};
  };
  bool isolated = true;
  Index changed_total = 0;
  for (Index j = 0; j < h * h; ++j) {
    auto bumped = grid.clone();
    for (Index k = 0; k < c; ++k) bumped.data()[j * c + k] += 0.5;
    const auto out = window_attention(bumped, s, attn);
    for (Index i = 0; i < h * h; ++i) {
      const bool changed = (out.data().segment(i * c, c) != base.data().segment(i * c, c)).any();
      const bool allowed = key(i / h, i % h) == key(j / h, j % h);
      if (changed && !allowed) isolated = false;
      changed_total += changed ? 1 : 0;
    }
  }
  CHECK(isolated);
  CHECK(changed_total > h * h);
}

TEST_CASE("window partition is a permutation and its inverse restores order") {
  const auto perm = window_partition_index(2, 8, 8, 4, 2);
  const auto inv = inverse_permutation(perm);
  std::set<Index> seen(perm.begin(), perm.end());
  CHECK(seen.size() == 128);
  for (std::size_t i = 0; i < perm.size(); ++i) CHECK(perm[static_cast<std::size_t>(inv[i])] == static_cast<Index>(i));
}

TEST_CASE("window attention gradient") {
  Rng rng(7);
  WindowAttention<double> attn(8, 2, 2, true, rng);
  const auto grid = random_tensor({2, 4, 4, 8}, rng, 1.0, true);
  for (Index shift : {Index{0}, Index{1}}) {
    const auto r = grad_check([&] { return project(window_attention(grid, shift, attn), 11); },
                              {grid, attn.qkv.weight, attn.qkv.bias, attn.proj.weight, attn.relative_bias});
    CHECK(r.rel_error < 1e-5);
  }
}

TEST_CASE("patch merging") {
  Rng rng(8);
  PatchMerging<double> merge(48, rng);
  Tensor<double> grid({2, 8, 8, 48});
  CHECK(merge.forward(grid).shape() == Shape{2, 4, 4, 96});

  // Every token equal: every merged token is equal too.
  Eigen::ArrayXd token = Eigen::ArrayXd::Random(48);
  for (Index t = 0; t < 2 * 64; ++t) grid.data().segment(t * 48, 48) = token;
  const auto out = merge.forward(grid);
  for (Index t = 1; t < 2 * 16; ++t) CHECK((out.data().segment(t * 96, 96) == out.data().segment(0, 96)).all());

  CHECK_THROWS_AS(merge.forward(Tensor<double>({1, 7, 8, 48})), ConfigError);
}

TEST_CASE("patch merging neighbourhood order and gradient") {
  Rng rng(9);
  PatchMerging<double> merge(2, rng);
  const auto grid = random_tensor({1, 4, 4, 2}, rng, 1.0, true);
  // Reduction picks merged channels 0, 2, 4, 6, i.e. channel 0 of each neighbour.
  merge.reduction.weight.data().setZero();
  for (Index k = 0; k < 4; ++k) merge.reduction.weight.data()[(2 * k) * 4 + k] = 1.0;
  const auto out = merge.forward(grid);
  auto at = [&](Index r, Index c, Index ch) { return grid.data()[(r * 4 + c) * 2 + ch]; };
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 2; ++j) {
      Eigen::ArrayXd cat(8);
      const Index offsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
      for (Index n = 0; n < 4; ++n) {
        for (Index ch = 0; ch < 2; ++ch) cat[n * 2 + ch] = at(2 * i + offsets[n][0], 2 * j + offsets[n][1], ch);
      }
      const double mu = cat.mean();
      const double var = (cat - mu).square().mean();
      const Eigen::ArrayXd normed = (cat - mu) / std::sqrt(var + 1e-5);
      for (Index k = 0; k < 4; ++k) CHECK(std::abs(out.data()[(i * 2 + j) * 4 + k] - normed[2 * k]) < 1e-12);
    }
  }
  Rng fresh(19);
  PatchMerging<double> trained(2, fresh);
  const auto r = grad_check([&] { return project(trained.forward(grid), 13); },
                            {grid, trained.reduction.weight, trained.norm.gamma, trained.norm.beta});
  CHECK(r.rel_error < 1e-5);
}

TEST_CASE("drop_path identities and errors") {
  Rng rng(10);
  const auto x = random_tensor({8, 3, 5}, rng, 1.0, false);
  CHECK(drop_path(x, 0.0, true, rng).shares_storage_with(x));
  CHECK(drop_path(x, 0.7, false, rng).shares_storage_with(x));
  CHECK_THROWS_AS(drop_path(x, 1.0, true, rng), ConfigError);
  CHECK_THROWS_AS(drop_path(x, -0.1, true, rng), ConfigError);
}

TEST_CASE("drop_path is unbiased") {
  Rng rng(11);
  const Index draws = 10000;
  const Eigen::ArrayXd sample = (Eigen::ArrayXd(4) << 1.0, -2.0, 0.5, 3.0).finished();
  Tensor<double> x({draws, 4});
  for (Index i = 0; i < draws; ++i) x.data().segment(i * 4, 4) = sample;
  const auto y = drop_path(x, 0.2, true, rng);
  Eigen::ArrayXd avg = Eigen::ArrayXd::Zero(4);
  Index kept = 0;
  for (Index i = 0; i < draws; ++i) {
    avg += y.data().segment(i * 4, 4);
    const double first = y.data()[i * 4];
    CHECK((first == 0.0 || std::abs(first - 1.0 / 0.8) < 1e-12));
    kept += first != 0.0;
  }
  avg /= static_cast<double>(draws);
  CHECK(((avg - sample).abs() / sample.abs()).maxCoeff() < 0.05);
  CHECK(std::abs(static_cast<double>(kept) / draws - 0.8) < 0.02);
}

TEST_CASE("default swin-lite forward") {
  Rng rng(12);
  BackboneConfig cfg;
  auto net = make_backbone<double>(cfg, rng);
  CHECK(net->feature_dim() == 96);
  const auto images = random_tensor({3, 3, 32, 32}, rng, 1.0, false);
  Rng r1(1), r2(2);
  const auto a = net->forward(images, 0.1, false, r1);
  const auto b = net->forward(images, 0.1, false, r2);
  CHECK(a.shape() == Shape{3, 96});
  CHECK((a.data() == b.data()).all());
  CHECK(a.data().allFinite());
}

TEST_CASE("batch norm before the MLP") {
  BackboneConfig ln_cfg, bn_cfg;
  bn_cfg.norm_before_mlp = NormKind::kBatchNorm;
  Rng ra(13), rb(13);
  auto ln = make_backbone<double>(ln_cfg, ra);
  auto bn = make_backbone<double>(bn_cfg, rb);
  Rng data(14);
  const auto images = random_tensor({4, 3, 32, 32}, data, 1.0, false);
  Rng r(0);
  const auto ya = ln->forward(images, 0.0, true, r);
  const auto yb = bn->forward(images, 0.0, true, r);
  CHECK(ya.shape() == yb.shape());
  CHECK(yb.data().allFinite());
  CHECK((ya.data() - yb.data()).abs().maxCoeff() > 1e-6);

  // Same trainable parameter count; only the running statistics are extra.
  CHECK(count(*ln, TensorRole::kParameter) == count(*bn, TensorRole::kParameter));
  CHECK(count(*ln, TensorRole::kBuffer) == 0);
  CHECK(count(*bn, TensorRole::kBuffer) == 2 * (2 * 48 + 2 * 96));
}

TEST_CASE("vit-lite is a drop-in replacement") {
  BackboneConfig cfg = tiny_config();
  cfg.variant = BackboneVariant::kVitLite;
  Rng rng(15);
  std::unique_ptr<Backbone<double>> net = make_backbone<double>(cfg, rng);
  CHECK(net->feature_dim() == cfg.embed_dim);
  const auto images = random_tensor({2, 3, 16, 16}, rng, 1.0, false);
  Rng r(0);
  const auto y = net->forward(images, 0.1, true, r);
  CHECK(y.shape() == Shape{2, cfg.embed_dim});
  bool has_pos = false;
  net->visit("", [&](const std::string& name, Tensor<double>&, TensorRole) { has_pos |= name == "pos_embed"; });
  CHECK(has_pos);
}

TEST_CASE("config validation names the field") {
  auto message = [](BackboneConfig cfg) {
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  BackboneConfig cfg;
  cfg.image_size = 30;
  CHECK(message(cfg).find("patch_size") != std::string::npos);
  cfg = {};
  cfg.num_heads = {3};
  CHECK(message(cfg).find("num_heads") != std::string::npos);
  cfg = {};
  cfg.window_size = 3;
  CHECK(message(cfg).find("window_size") != std::string::npos);
  cfg = {};
  cfg.drop_path_rate = 1.0;
  CHECK(message(cfg).find("drop_path_rate") != std::string::npos);
  cfg = {};
  Rng rng(0);
  cfg.embed_dim = 0;
  CHECK_THROWS_AS(make_backbone<double>(cfg, rng), ConfigError);
}

TEST_CASE("whole backbone gradient on sampled coordinates") {
  for (NormKind kind : {NormKind::kLayerNorm, NormKind::kBatchNorm}) {
    for (BackboneVariant variant : {BackboneVariant::kSwinLite, BackboneVariant::kVitLite}) {
      BackboneConfig cfg = tiny_config();
      cfg.norm_before_mlp = kind;
      cfg.variant = variant;
      Rng rng(16);
      auto net = make_backbone<double>(cfg, rng);
      const auto images = random_tensor({3, 3, 16, 16}, rng, 1.0, false);
      std::vector<Tensor<double>> params;
      net->visit("", [&](const std::string&, Tensor<double>& t, TensorRole role) {
        if (role == TensorRole::kParameter) params.push_back(t);
      });
      // Batch-norm running stats drift between evaluations but do not affect
      // training-mode outputs, so the loss stays a pure function of weights.
      const auto r = grad_check(
          [&] {
            Rng unused(0);
            return project(net->forward(images, 0.0, true, unused), 17);
          },
          params, 1e-6, 3);
      CHECK(r.rel_error < 1e-5);
      CHECK(r.analytic_norm > 0);
    }
  }
}
