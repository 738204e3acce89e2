#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sslwb/augmentation.hpp"
#include "sslwb/nn.hpp"

namespace sslwb {

// Desk-scale encoders (residual CNN and patch transformer), the heads that
// the pretraining methods attach, and the EMA teacher mechanism.

enum class Arch { conv_residual, patch_transformer };

inline const char* arch_name(Arch a) {
  return a == Arch::conv_residual ? "conv_residual" : "patch_transformer";
}
inline Arch arch_from_name(const std::string& s) {
  if (s == "conv_residual") return Arch::conv_residual;
  if (s == "patch_transformer") return Arch::patch_transformer;
  throw ValidationError("unknown architecture: '" + s + "'");
}

struct EncoderConfig {
  Arch arch = Arch::patch_transformer;
  std::size_t depth = 4;       // residual blocks or transformer blocks
  std::size_t width = 128;     // base channels (conv) or embed dim (transformer)
  std::size_t patch_size = 4;  // patch transformer only
  std::size_t input_size = 32;
  std::size_t heads = 4;       // attention heads
  std::size_t mlp_ratio = 4;

  void validate() const {
    require(depth >= 1, "encoder depth must be >= 1");
    require(width >= 8, "encoder width must be >= 8");
    require(input_size >= 8 && input_size <= 256,
            "input size must lie in [8, 256] (resolution cap)");
    if (arch == Arch::patch_transformer) {
      require(patch_size >= 1 && input_size % patch_size == 0,
              "input size must be divisible by patch size");
      require(width % heads == 0, "embed dim must be divisible by head count");
    }
  }
};

enum class HeadKind { projection, classification, decoder };

struct HeadConfig {
  HeadKind kind = HeadKind::projection;
  std::string name = "proj";
  std::vector<std::size_t> hidden_dims;  // MLP hidden layers (projection kind)
  std::size_t output_dim = 64;
  bool l2_bottleneck = false;  // normalize before a final prototype layer

  void validate() const {
    require(output_dim > 0, "head output dim must be positive");
    require(!name.empty(), "head needs a name");
  }
};

// ---------------------------------------------------------------------------
// Patch-transformer encoder.

template <class T>
class ViTEncoder {
 public:
  ViTEncoder(const EncoderConfig& cfg, ParamSet<T>& ps, const std::string& prefix)
      : cfg_(cfg) {
    base_grid_ = cfg.input_size / cfg.patch_size;
    const std::size_t ppx = cfg.patch_size * cfg.patch_size * 3;
    patch_proj_.init(ps, prefix + ".patch", ppx, cfg.width, true, InitKind::normal, 0.02);
    cls_ = ps.create(prefix + ".cls", {cfg.width}, InitKind::normal, 0.02);
    pos_ = ps.create(prefix + ".pos", {1 + base_grid_ * base_grid_, cfg.width},
                     InitKind::normal, 0.02);
    blocks_.resize(cfg.depth);
    for (std::size_t i = 0; i < cfg.depth; ++i)
      blocks_[i].init(ps, prefix + ".block" + std::to_string(i), cfg.width, cfg.heads,
                      cfg.mlp_ratio);
    ln_final_.init(ps, prefix + ".ln", cfg.width);
  }

  std::size_t embed_dim() const { return cfg_.width; }
  std::size_t base_grid() const { return base_grid_; }
  std::size_t n_patch_tokens(std::size_t image_size) const {
    const std::size_t g = image_size / cfg_.patch_size;
    return g * g;
  }

  struct Trace {
    Tensor<T> patches;                    // [B*npk, ppx]
    std::vector<std::vector<std::size_t>> kept;  // patch indices per sample
    std::vector<typename TransformerBlock<T>::Cache> blocks;
    typename LayerNorm<T>::Cache lnf;
    std::size_t batch = 0, n_tok = 0, grid = 0, npk = 0;
  };

  /// Token latents after the final norm, flat [B * (1 + npk), dim]; token 0 of
  /// each sample is the class token. `masks`, when given, restricts the
  /// encoder to the visible patches of each sample (counts must agree).
  Tensor<T> forward_tokens(const Tensor<T>& images,
                           const std::vector<MaskSpec>* masks, Trace& tr) const {
    const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2);
    require(h == w, "patch transformer expects square inputs");
    require(h % cfg_.patch_size == 0, "image size not divisible by patch size");
    const std::size_t g = h / cfg_.patch_size;
    const std::size_t np = g * g;
    const std::size_t ps = cfg_.patch_size;
    const std::size_t ppx = ps * ps * 3;
    const std::size_t dim = cfg_.width;

    tr.kept.assign(b, {});
    if (masks) {
      require(masks->size() == b, "one mask per image required");
      for (std::size_t i = 0; i < b; ++i) {
        const MaskSpec& m = (*masks)[i];
        require(m.grid_h == g && m.grid_w == g, "mask grid does not match image grid");
        std::vector<bool> bit = m.mask_bitmap();
        for (std::size_t p = 0; p < np; ++p)
          if (!bit[p]) tr.kept[i].push_back(p);
        require(!tr.kept[i].empty(), "at least 1 visible patch required");
        require(tr.kept[i].size() == tr.kept[0].size(),
                "all masks in a batch must keep the same patch count");
      }
    } else {
      for (std::size_t i = 0; i < b; ++i) {
        tr.kept[i].resize(np);
        for (std::size_t p = 0; p < np; ++p) tr.kept[i][p] = p;
      }
    }
    const std::size_t npk = tr.kept[0].size();
    const std::size_t n_tok = 1 + npk;
    tr.batch = b;
    tr.n_tok = n_tok;
    tr.grid = g;
    tr.npk = npk;

    // Gather patches (row-major within a patch: dy, dx, channel).
    tr.patches = Tensor<T>({b * npk, ppx});
#pragma omp parallel for schedule(static)
    for (long bi = 0; bi < static_cast<long>(b); ++bi) {
      const std::size_t bb = static_cast<std::size_t>(bi);
      for (std::size_t t = 0; t < npk; ++t) {
        const std::size_t p = tr.kept[bb][t];
        const std::size_t py = p / g, px = p % g;
        T* dst = &tr.patches.data[(bb * npk + t) * ppx];
        for (std::size_t dy = 0; dy < ps; ++dy)
          for (std::size_t dx = 0; dx < ps; ++dx)
            for (std::size_t ch = 0; ch < 3; ++ch)
              *dst++ = images.at(bb, py * ps + dy, px * ps + dx, ch);
      }
    }

    Tensor<T> proj = patch_proj_.forward(tr.patches);
    Tensor<T> pos_grid = interpolated_pos(g);

    Tensor<T> tokens({b * n_tok, dim});
    for (std::size_t bb = 0; bb < b; ++bb) {
      for (std::size_t j = 0; j < dim; ++j)
        tokens.at(bb * n_tok, j) = cls_->value[j] + pos_->value.at(0, j);
      for (std::size_t t = 0; t < npk; ++t) {
        const std::size_t p = tr.kept[bb][t];
        for (std::size_t j = 0; j < dim; ++j)
          tokens.at(bb * n_tok + 1 + t, j) =
              proj.at(bb * npk + t, j) + pos_grid.at(p, j);
      }
    }

    tr.blocks.resize(blocks_.size());
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      tokens = blocks_[i].forward(tokens, b, n_tok, tr.blocks[i]);
    return ln_final_.forward(tokens, tr.lnf);
  }

  /// Backpropagates token gradients into the parameters. Image gradients are
  /// not produced (inputs are data).
  void backward_tokens(const Trace& tr, const Tensor<T>& dlat) const {
    Tensor<T> dtok = ln_final_.backward(tr.lnf, dlat);
    for (std::size_t i = blocks_.size(); i-- > 0;)
      dtok = blocks_[i].backward(tr.blocks[i], dtok);

    const std::size_t b = tr.batch, n_tok = tr.n_tok, npk = tr.npk, dim = cfg_.width;
    Tensor<T> dproj({b * npk, dim});
    Tensor<T> dpos_grid({tr.grid * tr.grid, dim});
    for (std::size_t bb = 0; bb < b; ++bb) {
      for (std::size_t j = 0; j < dim; ++j) {
        cls_->grad[j] += dtok.at(bb * n_tok, j);
        pos_->grad.at(0, j) += dtok.at(bb * n_tok, j);
      }
      for (std::size_t t = 0; t < npk; ++t) {
        const std::size_t p = tr.kept[bb][t];
        for (std::size_t j = 0; j < dim; ++j) {
          T gv = dtok.at(bb * n_tok + 1 + t, j);
          dproj.at(bb * npk + t, j) = gv;
          dpos_grid.at(p, j) += gv;
        }
      }
    }
    scatter_pos_grad(tr.grid, dpos_grid);
    patch_proj_.backward(tr.patches, dproj, /*want_dx=*/false);
  }

 private:
  /// Learned position table lives at the base grid; other grids (local crops)
  /// get bilinearly interpolated rows.
  Tensor<T> interpolated_pos(std::size_t g) const {
    const std::size_t g0 = base_grid_, dim = cfg_.width;
    Tensor<T> out({g * g, dim});
    if (g == g0) {
      for (std::size_t p = 0; p < g * g; ++p)
        for (std::size_t j = 0; j < dim; ++j) out.at(p, j) = pos_->value.at(1 + p, j);
      return out;
    }
    for (std::size_t ty = 0; ty < g; ++ty)
      for (std::size_t tx = 0; tx < g; ++tx) {
        auto [c, wgt] = interp_corners(g, ty, tx);
        for (std::size_t j = 0; j < dim; ++j) {
          T v = T(0);
          for (int q = 0; q < 4; ++q)
            v += static_cast<T>(wgt[q]) * pos_->value.at(1 + c[q], j);
          out.at(ty * g + tx, j) = v;
        }
      }
    return out;
  }

  void scatter_pos_grad(std::size_t g, const Tensor<T>& dpos_grid) const {
    const std::size_t g0 = base_grid_, dim = cfg_.width;
    if (g == g0) {
      for (std::size_t p = 0; p < g * g; ++p)
        for (std::size_t j = 0; j < dim; ++j)
          pos_->grad.at(1 + p, j) += dpos_grid.at(p, j);
      return;
    }
    for (std::size_t ty = 0; ty < g; ++ty)
      for (std::size_t tx = 0; tx < g; ++tx) {
        auto [c, wgt] = interp_corners(g, ty, tx);
        for (std::size_t j = 0; j < dim; ++j) {
          T gv = dpos_grid.at(ty * g + tx, j);
          for (int q = 0; q < 4; ++q)
            pos_->grad.at(1 + c[q], j) += static_cast<T>(wgt[q]) * gv;
        }
      }
  }

  std::pair<std::array<std::size_t, 4>, std::array<double, 4>> interp_corners(
      std::size_t g, std::size_t ty, std::size_t tx) const {
    const std::size_t g0 = base_grid_;
    auto axis = [g, g0](std::size_t t) {
      double f = (static_cast<double>(t) + 0.5) * static_cast<double>(g0) /
                     static_cast<double>(g) - 0.5;
      f = std::clamp(f, 0.0, static_cast<double>(g0 - 1));
      std::size_t lo = static_cast<std::size_t>(f);
      std::size_t hi = std::min(lo + 1, g0 - 1);
      return std::tuple<std::size_t, std::size_t, double>{lo, hi, f - static_cast<double>(lo)};
    };
    auto [y0, y1, wy] = axis(ty);
    auto [x0, x1, wx] = axis(tx);
    std::array<std::size_t, 4> corners{y0 * g0 + x0, y0 * g0 + x1, y1 * g0 + x0,
                                       y1 * g0 + x1};
    std::array<double, 4> weights{(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx),
                                  wy * wx};
    return {corners, weights};
  }

  EncoderConfig cfg_;
  std::size_t base_grid_ = 0;
  Dense<T> patch_proj_;
  Param<T>* cls_ = nullptr;
  Param<T>* pos_ = nullptr;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_final_;
};

// ---------------------------------------------------------------------------
// Residual CNN encoder.

template <class T>
class ConvEncoder {
 public:
  ConvEncoder(const EncoderConfig& cfg, ParamSet<T>& ps, const std::string& prefix)
      : cfg_(cfg) {
    const std::size_t n_stages = std::min<std::size_t>(4, cfg.depth);
    std::vector<std::size_t> blocks_per(n_stages, cfg.depth / n_stages);
    for (std::size_t i = 0; i < cfg.depth % n_stages; ++i) ++blocks_per[i];
    std::size_t ch = cfg.width;
    stem_conv_.init(ps, prefix + ".stem.conv", 3, ch, 3, 1);
    stem_norm_.init(ps, prefix + ".stem.norm", ch, norm_groups(ch));
    std::size_t cin = ch;
    for (std::size_t s = 0; s < n_stages; ++s) {
      std::size_t cout = cfg.width << s;
      for (std::size_t bidx = 0; bidx < blocks_per[s]; ++bidx) {
        Block blk;
        std::size_t stride = (s > 0 && bidx == 0) ? 2 : 1;
        std::string bp = prefix + ".s" + std::to_string(s) + ".b" + std::to_string(bidx);
        blk.conv1.init(ps, bp + ".conv1", cin, cout, 3, stride);
        blk.norm1.init(ps, bp + ".norm1", cout, norm_groups(cout));
        blk.conv2.init(ps, bp + ".conv2", cout, cout, 3, 1);
        blk.norm2.init(ps, bp + ".norm2", cout, norm_groups(cout));
        blk.has_skip_proj = (stride != 1 || cin != cout);
        if (blk.has_skip_proj) {
          blk.skip_conv.init(ps, bp + ".skip.conv", cin, cout, 1, stride);
          blk.skip_norm.init(ps, bp + ".skip.norm", cout, norm_groups(cout));
        }
        blocks_.push_back(std::move(blk));
        cin = cout;
      }
    }
    embed_dim_ = cin;
  }

  std::size_t embed_dim() const { return embed_dim_; }

  struct BlockCache {
    Tensor<T> x, n1, r1, pre;
    typename GroupNorm<T>::Cache gn1, gn2, gns;
  };
  struct Trace {
    Tensor<T> stem_in, stem_n;
    typename GroupNorm<T>::Cache stem_gn;
    std::vector<BlockCache> blocks;
    std::size_t batch = 0, final_px = 0;
  };

  /// Global-average-pooled embedding [B, D].
  Tensor<T> forward(const Tensor<T>& images, Trace& tr) const {
    tr.batch = images.dim(0);
    tr.stem_in = images;
    Tensor<T> a = stem_conv_.forward(images);
    tr.stem_n = stem_norm_.forward(a, tr.stem_gn);
    Tensor<T> x = Relu<T>::forward(tr.stem_n);
    tr.blocks.resize(blocks_.size());
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      x = block_forward(blocks_[i], x, tr.blocks[i]);
    const std::size_t b = x.dim(0), px = x.dim(1) * x.dim(2), ch = x.dim(3);
    tr.final_px = px;
    Tensor<T> emb({b, ch});
    for (std::size_t bb = 0; bb < b; ++bb)
      for (std::size_t p = 0; p < px; ++p)
        for (std::size_t c = 0; c < ch; ++c)
          emb.at(bb, c) += x.data[(bb * px + p) * ch + c] / static_cast<T>(px);
    return emb;
  }

  void backward(const Trace& tr, const Tensor<T>& demb) const {
    const std::size_t b = tr.batch, px = tr.final_px, ch = embed_dim_;
    const Tensor<T>& last_pre = tr.blocks.back().pre;
    Tensor<T> dx(last_pre.shape);
    for (std::size_t bb = 0; bb < b; ++bb)
      for (std::size_t p = 0; p < px; ++p)
        for (std::size_t c = 0; c < ch; ++c)
          dx.data[(bb * px + p) * ch + c] = demb.at(bb, c) / static_cast<T>(px);
    for (std::size_t i = blocks_.size(); i-- > 0;)
      dx = block_backward(blocks_[i], tr.blocks[i], dx);
    Tensor<T> dstem = Relu<T>::backward(tr.stem_n, dx);
    Tensor<T> da = stem_norm_.backward(tr.stem_gn, dstem);
    stem_conv_.backward(tr.stem_in, da, /*want_dx=*/false);
  }

 private:
  static std::size_t norm_groups(std::size_t ch) { return ch % 8 == 0 ? 8 : 1; }

  struct Block {
    Conv2d<T> conv1, conv2, skip_conv;
    GroupNorm<T> norm1, norm2, skip_norm;
    bool has_skip_proj = false;
  };

  Tensor<T> block_forward(const Block& blk, const Tensor<T>& x, BlockCache& c) const {
    c.x = x;
    Tensor<T> a1 = blk.conv1.forward(x);
    c.n1 = blk.norm1.forward(a1, c.gn1);
    c.r1 = Relu<T>::forward(c.n1);
    Tensor<T> a2 = blk.conv2.forward(c.r1);
    Tensor<T> n2 = blk.norm2.forward(a2, c.gn2);
    Tensor<T> skip;
    if (blk.has_skip_proj) {
      Tensor<T> sa = blk.skip_conv.forward(x);
      skip = blk.skip_norm.forward(sa, c.gns);
    } else {
      skip = x;
    }
    c.pre = n2;
    for (std::size_t i = 0; i < c.pre.numel(); ++i) c.pre[i] += skip[i];
    return Relu<T>::forward(c.pre);
  }

  Tensor<T> block_backward(const Block& blk, const BlockCache& c,
                           const Tensor<T>& dy) const {
    Tensor<T> dpre = Relu<T>::backward(c.pre, dy);
    Tensor<T> da2 = blk.norm2.backward(c.gn2, dpre);
    Tensor<T> dr1 = blk.conv2.backward(c.r1, da2);
    Tensor<T> dn1 = Relu<T>::backward(c.n1, dr1);
    Tensor<T> da1 = blk.norm1.backward(c.gn1, dn1);
    Tensor<T> dx = blk.conv1.backward(c.x, da1);
    if (blk.has_skip_proj) {
      Tensor<T> dsa = blk.skip_norm.backward(c.gns, dpre);
      Tensor<T> dskip = blk.skip_conv.backward(c.x, dsa);
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dskip[i];
    } else {
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dpre[i];
    }
    return dx;
  }

  EncoderConfig cfg_;
  std::size_t embed_dim_ = 0;
  Conv2d<T> stem_conv_;
  GroupNorm<T> stem_norm_;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------
// Heads.

template <class T>
class Head {
 public:
  Head(const HeadConfig& cfg, std::size_t in_dim, ParamSet<T>& ps)
      : cfg_(cfg), in_dim_(in_dim) {
    cfg.validate();
    require(cfg.kind != HeadKind::decoder,
            "decoder heads are built as part of the masked-autoencoder model");
    const std::string prefix = "head." + cfg.name;
    if (cfg.kind == HeadKind::classification) {
      require(cfg.hidden_dims.empty(), "classification head is a single linear layer");
      fc_out_.init(ps, prefix + ".out", in_dim, cfg.output_dim, true, InitKind::normal,
                   0.02);
      return;
    }
    std::size_t d = in_dim;
    for (std::size_t i = 0; i < cfg.hidden_dims.size(); ++i) {
      Dense<T> fc;
      fc.init(ps, prefix + ".fc" + std::to_string(i), d, cfg.hidden_dims[i]);
      d = cfg.hidden_dims[i];
      hidden_.push_back(fc);
    }
    if (cfg.l2_bottleneck) {
      bottleneck_.init(ps, prefix + ".bottleneck", d, cfg.output_dim, true,
                       InitKind::normal, 0.02);
      // weight-normalized prototype layer: unit inputs against unit prototype
      // columns keep the logits in [-1, 1], so teacher sharpening stays
      // meaningful as training rescales the head
      proto_w_ = ps.create(prefix + ".prototypes", {cfg.output_dim, cfg.output_dim},
                           InitKind::normal, 0.1);
    } else {
      fc_out_.init(ps, prefix + ".out", d, cfg.output_dim, true, InitKind::normal, 0.02);
    }
  }

  const HeadConfig& config() const { return cfg_; }
  std::size_t input_dim() const { return in_dim_; }

  struct Trace {
    std::vector<Tensor<T>> pre;  // pre-activation per hidden layer
    std::vector<Tensor<T>> act;  // inputs to each layer
    Tensor<T> bn_in, bn_out, unit;
    std::vector<T> norms;
    Tensor<T> proto_unit;        // column-normalized prototype weights
    std::vector<T> proto_norms;
  };

  Tensor<T> forward(const Tensor<T>& emb, Trace& tr) const {
    Tensor<T> x = emb;
    tr.act.clear();
    tr.pre.clear();
    for (const auto& fc : hidden_) {
      tr.act.push_back(x);
      Tensor<T> p = fc.forward(x);
      tr.pre.push_back(p);
      x = activation_forward(p);
    }
    if (cfg_.kind == HeadKind::projection && cfg_.l2_bottleneck) {
      tr.bn_in = x;
      tr.bn_out = bottleneck_.forward(x);
      const std::size_t r = tr.bn_out.dim(0), d = tr.bn_out.dim(1);
      tr.unit = Tensor<T>({r, d});
      tr.norms.resize(r);
      for (std::size_t i = 0; i < r; ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < d; ++j) s += tr.bn_out.at(i, j) * tr.bn_out.at(i, j);
        T nrm = std::sqrt(s + T(1e-12));
        tr.norms[i] = nrm;
        for (std::size_t j = 0; j < d; ++j) tr.unit.at(i, j) = tr.bn_out.at(i, j) / nrm;
      }
      // column-normalize the prototype matrix
      const std::size_t p = cfg_.output_dim;
      tr.proto_unit = Tensor<T>({d, p});
      tr.proto_norms.resize(p);
      for (std::size_t jp = 0; jp < p; ++jp) {
        T s = T(0);
        for (std::size_t j = 0; j < d; ++j)
          s += proto_w_->value.at(j, jp) * proto_w_->value.at(j, jp);
        T nrm = std::sqrt(s + T(1e-12));
        tr.proto_norms[jp] = nrm;
        for (std::size_t j = 0; j < d; ++j)
          tr.proto_unit.at(j, jp) = proto_w_->value.at(j, jp) / nrm;
      }
      Tensor<T> logits({r, p});
      logits.mat(r, p).noalias() = tr.unit.mat(r, d) * tr.proto_unit.mat(d, p);
      return logits;
    }
    tr.act.push_back(x);
    return fc_out_.forward(x);
  }

  Tensor<T> backward(const Trace& tr, const Tensor<T>& dout) const {
    Tensor<T> dx;
    if (cfg_.kind == HeadKind::projection && cfg_.l2_bottleneck) {
      const std::size_t r = tr.unit.dim(0), d = tr.unit.dim(1);
      const std::size_t p = cfg_.output_dim;
      // through the weight-normalized prototype product
      Tensor<T> dunit({r, d});
      dunit.mat(r, d).noalias() = dout.mat(r, p) * tr.proto_unit.mat(d, p).transpose();
      Tensor<T> dproto_unit({d, p});
      dproto_unit.mat(d, p).noalias() = tr.unit.mat(r, d).transpose() * dout.mat(r, p);
      for (std::size_t jp = 0; jp < p; ++jp) {
        T dot = T(0);
        for (std::size_t j = 0; j < d; ++j)
          dot += dproto_unit.at(j, jp) * tr.proto_unit.at(j, jp);
        for (std::size_t j = 0; j < d; ++j)
          proto_w_->grad.at(j, jp) +=
              (dproto_unit.at(j, jp) - dot * tr.proto_unit.at(j, jp)) /
              tr.proto_norms[jp];
      }
      // through the input L2 normalization
      Tensor<T> dbn({r, d});
      for (std::size_t i = 0; i < r; ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < d; ++j) dot += dunit.at(i, j) * tr.unit.at(i, j);
        for (std::size_t j = 0; j < d; ++j)
          dbn.at(i, j) = (dunit.at(i, j) - dot * tr.unit.at(i, j)) / tr.norms[i];
      }
      dx = bottleneck_.backward(tr.bn_in, dbn);
    } else {
      dx = fc_out_.backward(tr.act.back(), dout);
    }
    for (std::size_t i = hidden_.size(); i-- > 0;) {
      dx = activation_backward(tr.pre[i], dx);
      dx = hidden_[i].backward(tr.act[i], dx);
    }
    return dx;
  }

 private:
  Tensor<T> activation_forward(const Tensor<T>& x) const {
    return cfg_.l2_bottleneck ? Gelu<T>::forward(x) : Relu<T>::forward(x);
  }
  Tensor<T> activation_backward(const Tensor<T>& x, const Tensor<T>& dy) const {
    return cfg_.l2_bottleneck ? Gelu<T>::backward(x, dy) : Relu<T>::backward(x, dy);
  }

  HeadConfig cfg_;
  std::size_t in_dim_ = 0;
  std::vector<Dense<T>> hidden_;
  Dense<T> fc_out_, bottleneck_;
  Param<T>* proto_w_ = nullptr;  // weight-normalized prototype matrix
};

// ---------------------------------------------------------------------------
// Network: one backbone plus named heads, each with its own parameter set so
// head replacement leaves the backbone untouched.

template <class T>
class Network {
 public:
  Network(const EncoderConfig& cfg, const std::vector<HeadConfig>& head_cfgs,
          std::uint64_t seed)
      : cfg_(cfg), seed_(seed) {
    cfg.validate();
    if (cfg.arch == Arch::patch_transformer)
      vit_ = std::make_unique<ViTEncoder<T>>(cfg, backbone_params_, "backbone");
    else
      conv_ = std::make_unique<ConvEncoder<T>>(cfg, backbone_params_, "backbone");
    backbone_params_.initialize(seed);
    for (const auto& hc : head_cfgs) attach_head(hc);
  }

  const EncoderConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t embed_dim() const {
    return vit_ ? vit_->embed_dim() : conv_->embed_dim();
  }
  std::size_t parameter_count() const {
    std::size_t n = backbone_params_.total_count();
    for (const auto& h : head_params_) n += h->total_count();
    return n;
  }

  ViTEncoder<T>* vit() { return vit_.get(); }
  const ViTEncoder<T>* vit() const { return vit_.get(); }

  void attach_head(const HeadConfig& hc) {
    for (const auto& h : heads_)
      require(h->config().name != hc.name, "duplicate head name: " + hc.name);
    head_params_.push_back(std::make_unique<ParamSet<T>>());
    heads_.push_back(std::make_unique<Head<T>>(hc, embed_dim(), *head_params_.back()));
    head_params_.back()->initialize(seed_);
  }

  /// Drops all heads and attaches the given one; backbone parameters are not
  /// touched.
  void replace_heads(const HeadConfig& hc, std::uint64_t head_seed) {
    heads_.clear();
    head_params_.clear();
    std::uint64_t hold = seed_;
    seed_ = head_seed;
    attach_head(hc);
    seed_ = hold;
  }

  Head<T>& head(const std::string& name) {
    for (auto& h : heads_)
      if (h->config().name == name) return *h;
    throw EngineError("no head named '" + name + "'");
  }
  const Head<T>& head(const std::string& name) const {
    return const_cast<Network*>(this)->head(name);
  }
  std::size_t head_count() const { return heads_.size(); }
  std::vector<std::string> head_names() const {
    std::vector<std::string> out;
    for (const auto& h : heads_) out.push_back(h->config().name);
    return out;
  }

  struct EmbedTrace {
    typename ViTEncoder<T>::Trace vit;
    typename ConvEncoder<T>::Trace conv;
    std::size_t batch = 0;
  };

  /// Pooled embeddings [B, D]; keeps activations in `tr` for backward.
  Tensor<T> embed(const Tensor<T>& images, EmbedTrace& tr) const {
    require(images.ndim() == 4 && images.dim(3) == 3, "expected [B,H,W,3] batch");
    tr.batch = images.dim(0);
    Tensor<T> emb;
    if (vit_) {
      Tensor<T> lat = vit_->forward_tokens(images, nullptr, tr.vit);
      emb = Tensor<T>({tr.batch, embed_dim()});
      for (std::size_t b = 0; b < tr.batch; ++b)
        for (std::size_t j = 0; j < embed_dim(); ++j)
          emb.at(b, j) = lat.at(b * tr.vit.n_tok, j);
    } else {
      emb = conv_->forward(images, tr.conv);
    }
    if (!emb.is_finite()) throw EngineError("non-finite activations in encoder");
    return emb;
  }

  /// Inference-only embedding (trace discarded).
  Tensor<T> embed(const Tensor<T>& images) const {
    EmbedTrace tr;
    return embed(images, tr);
  }

  void backward_embed(const EmbedTrace& tr, const Tensor<T>& demb) const {
    if (vit_) {
      Tensor<T> dlat({tr.vit.batch * tr.vit.n_tok, embed_dim()});
      for (std::size_t b = 0; b < tr.batch; ++b)
        for (std::size_t j = 0; j < embed_dim(); ++j)
          dlat.at(b * tr.vit.n_tok, j) = demb.at(b, j);
      vit_->backward_tokens(tr.vit, dlat);
    } else {
      conv_->backward(tr.conv, demb);
    }
  }

  void zero_grads() {
    backbone_params_.zero_grads();
    for (auto& h : head_params_) h->zero_grads();
  }

  std::vector<ParamSet<T>*> param_sets() {
    std::vector<ParamSet<T>*> out{&backbone_params_};
    for (auto& h : head_params_) out.push_back(h.get());
    return out;
  }
  ParamSet<T>& head_param_set(const std::string& name) {
    for (std::size_t i = 0; i < heads_.size(); ++i)
      if (heads_[i]->config().name == name) return *head_params_[i];
    throw EngineError("no head named '" + name + "'");
  }

  Param<T>* find_param(const std::string& name) {
    if (Param<T>* p = backbone_params_.find(name)) return p;
    for (auto& h : head_params_)
      if (Param<T>* p = h->find(name)) return p;
    return nullptr;
  }
  const Param<T>* find_param(const std::string& name) const {
    return const_cast<Network*>(this)->find_param(name);
  }

  /// Walks backbone parameters then each head's, in creation order.
  template <class Fn>
  void for_each_param(Fn&& fn) {
    backbone_params_.for_each(fn);
    for (auto& h : head_params_) h->for_each(fn);
  }
  template <class Fn>
  void for_each_param(Fn&& fn) const {
    backbone_params_.for_each(fn);
    for (const auto& h : head_params_) h->for_each(fn);
  }
  template <class Fn>
  void for_each_backbone_param(Fn&& fn) {
    backbone_params_.for_each(fn);
  }

  using NamedArrays = std::vector<std::pair<std::string, Tensor<T>>>;

  NamedArrays snapshot() const {
    NamedArrays out;
    for_each_param([&out](const Param<T>& p) { out.emplace_back(p.name, p.value); });
    return out;
  }
  NamedArrays snapshot_backbone() const {
    NamedArrays out;
    backbone_params_.for_each(
        [&out](const Param<T>& p) { out.emplace_back(p.name, p.value); });
    return out;
  }

  /// Loads values by name; every parameter of this network must be present
  /// with a matching shape. Extra arrays are ignored.
  void load(const NamedArrays& arrays, bool backbone_only = false) {
    std::map<std::string, const Tensor<T>*> by_name;
    for (const auto& [n, t] : arrays) by_name[n] = &t;
    auto apply = [&by_name](Param<T>& p) {
      auto it = by_name.find(p.name);
      require(it != by_name.end(), "checkpoint missing parameter: " + p.name);
      require(it->second->shape == p.value.shape,
              "checkpoint shape mismatch for parameter: " + p.name);
      p.value = *it->second;
    };
    if (backbone_only)
      backbone_params_.for_each(apply);
    else
      for_each_param(apply);
  }

 private:
  EncoderConfig cfg_;
  std::uint64_t seed_ = 0;
  ParamSet<T> backbone_params_;
  std::vector<std::unique_ptr<ParamSet<T>>> head_params_;
  std::vector<std::unique_ptr<Head<T>>> heads_;
  std::unique_ptr<ViTEncoder<T>> vit_;
  std::unique_ptr<ConvEncoder<T>> conv_;
};

/// t' = m * t + (1 - m) * s, elementwise, matched by name. Every teacher
/// parameter must exist in the student with the same shape (the student may
/// carry extra heads the teacher does not mirror).
template <class T>
inline void ema_update(Network<T>& teacher, const Network<T>& student, T momentum) {
  require(momentum >= T(0) && momentum <= T(1), "EMA momentum must lie in [0,1]");
  teacher.for_each_param([&student, momentum](Param<T>& t) {
    const Param<T>* s = student.find_param(t.name);
    require(s != nullptr && s->value.shape == t.value.shape,
            "teacher/student parameter schema mismatch at " + t.name);
    for (std::size_t j = 0; j < t.value.numel(); ++j)
      t.value[j] = momentum * t.value[j] + (T(1) - momentum) * s->value[j];
  });
}

/// EMA teacher: architecturally identical copy of the student plus the
/// centering state used to sharpen its outputs.
template <class T>
struct TeacherState {
  std::unique_ptr<Network<T>> net;
  T momentum = T(0.996);
  Tensor<T> center;

  static TeacherState make(const Network<T>& student,
                           const std::vector<HeadConfig>& head_cfgs, T momentum,
                           std::size_t center_dim) {
    TeacherState t;
    t.net = std::make_unique<Network<T>>(student.config(), head_cfgs, student.seed());
    // start from the student's weights
    t.net->load(student.snapshot());
    t.momentum = momentum;
    t.center = Tensor<T>({center_dim});
    return t;
  }
};

// ---------------------------------------------------------------------------
// Masked autoencoder: transformer encoder over visible patches plus a light
// decoder that fills masked positions with a learned token.

template <class T>
class MAEDecoder {
 public:
  MAEDecoder(const EncoderConfig& enc_cfg, std::size_t dec_dim, std::size_t dec_depth,
             std::size_t dec_heads, ParamSet<T>& ps)
      : enc_dim_(enc_cfg.width),
        dec_dim_(dec_dim),
        patch_size_(enc_cfg.patch_size),
        grid_(enc_cfg.input_size / enc_cfg.patch_size) {
    embed_.init(ps, "decoder.embed", enc_dim_, dec_dim_, true, InitKind::normal, 0.02);
    mask_token_ = ps.create("decoder.mask_token", {dec_dim_}, InitKind::normal, 0.02);
    pos_ = ps.create("decoder.pos", {grid_ * grid_, dec_dim_}, InitKind::normal, 0.02);
    blocks_.resize(dec_depth);
    for (std::size_t i = 0; i < dec_depth; ++i)
      blocks_[i].init(ps, "decoder.block" + std::to_string(i), dec_dim_, dec_heads, 4);
    ln_.init(ps, "decoder.ln", dec_dim_);
    out_.init(ps, "decoder.out", dec_dim_, patch_size_ * patch_size_ * 3, true,
              InitKind::normal, 0.02);
  }

  struct Trace {
    Tensor<T> vis_lat;   // [B*nvis, enc_dim]
    Tensor<T> embedded;  // [B*nvis, dec_dim]
    Tensor<T> ln_out;    // [B*np, dec_dim]
    std::vector<std::vector<std::size_t>> kept;
    std::vector<typename TransformerBlock<T>::Cache> blocks;
    typename LayerNorm<T>::Cache lnc;
    std::size_t batch = 0, nvis = 0;
  };

  /// latents: encoder output for visible tokens, flat [B*(1+nvis), enc_dim]
  /// with the class token first per sample. Returns reconstructions [B,H,W,3].
  Tensor<T> forward(const Tensor<T>& latents,
                    const std::vector<std::vector<std::size_t>>& kept,
                    std::size_t batch, Trace& tr) const {
    const std::size_t np = grid_ * grid_;
    const std::size_t nvis = kept.empty() ? 0 : kept[0].size();
    require(nvis > 0, "decoder needs at least one visible patch");
    require(latents.numel() == batch * (1 + nvis) * enc_dim_,
            "latent/mask mismatch: token count does not match visible patches");
    tr.batch = batch;
    tr.nvis = nvis;
    tr.kept = kept;

    tr.vis_lat = Tensor<T>({batch * nvis, enc_dim_});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < nvis; ++t)
        for (std::size_t j = 0; j < enc_dim_; ++j)
          tr.vis_lat.at(b * nvis + t, j) = latents[(b * (1 + nvis) + 1 + t) * enc_dim_ + j];
    tr.embedded = embed_.forward(tr.vis_lat);

    Tensor<T> tokens({batch * np, dec_dim_});
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<bool> vis(np, false);
      // visible tokens land at their own patch positions, in whatever order
      // the encoder emitted them
      for (std::size_t t = 0; t < nvis; ++t) {
        const std::size_t p = kept[b][t];
        require(p < np && !vis[p], "mask/latent mismatch in decoder");
        vis[p] = true;
        T* dst = &tokens.data[(b * np + p) * dec_dim_];
        const T* src = &tr.embedded.data[(b * nvis + t) * dec_dim_];
        for (std::size_t j = 0; j < dec_dim_; ++j) dst[j] = src[j] + pos_->value.at(p, j);
      }
      for (std::size_t p = 0; p < np; ++p) {
        if (vis[p]) continue;
        T* dst = &tokens.data[(b * np + p) * dec_dim_];
        for (std::size_t j = 0; j < dec_dim_; ++j)
          dst[j] = mask_token_->value[j] + pos_->value.at(p, j);
      }
    }

    tr.blocks.resize(blocks_.size());
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      tokens = blocks_[i].forward(tokens, batch, np, tr.blocks[i]);
    tr.ln_out = ln_.forward(tokens, tr.lnc);
    Tensor<T> pix = out_.forward(tr.ln_out);  // [B*np, ps*ps*3]

    const std::size_t hw = grid_ * patch_size_;
    Tensor<T> img({batch, hw, hw, 3});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < np; ++p) {
        const std::size_t py = p / grid_, px = p % grid_;
        const T* src = &pix.data[(b * np + p) * patch_size_ * patch_size_ * 3];
        for (std::size_t dy = 0; dy < patch_size_; ++dy)
          for (std::size_t dx = 0; dx < patch_size_; ++dx)
            for (std::size_t c = 0; c < 3; ++c)
              img.at(b, py * patch_size_ + dy, px * patch_size_ + dx, c) =
                  *src++;
      }
    return img;
  }

  /// Returns gradient w.r.t. the encoder latents, flat [B*(1+nvis), enc_dim]
  /// (class-token rows are zero: the decoder does not consume them).
  Tensor<T> backward(const Trace& tr, const Tensor<T>& dimg) const {
    const std::size_t np = grid_ * grid_, batch = tr.batch, nvis = tr.nvis;
    Tensor<T> dpix({batch * np, patch_size_ * patch_size_ * 3});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t p = 0; p < np; ++p) {
        const std::size_t py = p / grid_, px = p % grid_;
        T* dst = &dpix.data[(b * np + p) * patch_size_ * patch_size_ * 3];
        for (std::size_t dy = 0; dy < patch_size_; ++dy)
          for (std::size_t dx = 0; dx < patch_size_; ++dx)
            for (std::size_t c = 0; c < 3; ++c)
              *dst++ = dimg.at(b, py * patch_size_ + dy, px * patch_size_ + dx, c);
      }
    Tensor<T> dln = out_.backward(tr.ln_out, dpix);
    Tensor<T> dtok = ln_.backward(tr.lnc, dln);
    for (std::size_t i = blocks_.size(); i-- > 0;)
      dtok = blocks_[i].backward(tr.blocks[i], dtok);

    Tensor<T> dembedded({batch * nvis, dec_dim_});
    for (std::size_t b = 0; b < batch; ++b) {
      std::vector<bool> vis(np, false);
      for (std::size_t t = 0; t < nvis; ++t) {
        const std::size_t p = tr.kept[b][t];
        vis[p] = true;
        const T* src = &dtok.data[(b * np + p) * dec_dim_];
        T* dst = &dembedded.data[(b * nvis + t) * dec_dim_];
        for (std::size_t j = 0; j < dec_dim_; ++j) dst[j] = src[j];
      }
      for (std::size_t p = 0; p < np; ++p) {
        const T* src = &dtok.data[(b * np + p) * dec_dim_];
        for (std::size_t j = 0; j < dec_dim_; ++j) pos_->grad.at(p, j) += src[j];
        if (!vis[p])
          for (std::size_t j = 0; j < dec_dim_; ++j) mask_token_->grad[j] += src[j];
      }
    }
    Tensor<T> dvis = embed_.backward(tr.vis_lat, dembedded);
    Tensor<T> dlat({batch * (1 + nvis), enc_dim_});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < nvis; ++t)
        for (std::size_t j = 0; j < enc_dim_; ++j)
          dlat[(b * (1 + nvis) + 1 + t) * enc_dim_ + j] = dvis.at(b * nvis + t, j);
    return dlat;
  }

 private:
  std::size_t enc_dim_, dec_dim_, patch_size_, grid_;
  Dense<T> embed_;
  Param<T>* mask_token_ = nullptr;
  Param<T>* pos_ = nullptr;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_;
  Dense<T> out_;
};

}  // namespace sslwb
