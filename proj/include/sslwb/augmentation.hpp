#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "sslwb/image.hpp"
#include "sslwb/rng.hpp"

namespace sslwb {

// View generation for the pretext tasks: two-view pairs (contrastive),
// 2-global + k-local multi-crop sets (self-distillation), patch masks
// (masked autoencoding) and the plain supervised policy. Every operation is a
// pure function of (inputs, stream), so data workers can run in parallel
// without changing outputs.

struct ScaleRange {
  double lo = 0.0, hi = 1.0;
};

struct ColorJitter {
  double brightness = 0.0;  // multiplicative, +/- strength
  double contrast = 0.0;
  double saturation = 0.0;
};

struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.29f, 0.29f, 0.29f};
};

struct AugmentationPolicy {
  ScaleRange crop_scale_global{0.4, 1.0};
  ScaleRange crop_scale_local{0.05, 0.4};
  ScaleRange aspect_range{0.75, 4.0 / 3.0};
  double flip_probability = 0.5;
  ColorJitter color_jitter{0.4, 0.4, 0.2};
  Normalization normalization;
  std::size_t out_size_global = 32;
  std::size_t out_size_local = 16;

  void validate() const {
    auto ok = [](const ScaleRange& r) {
      return r.lo > 0.0 && r.hi <= 1.0 && r.lo <= r.hi;
    };
    require(ok(crop_scale_global) && ok(crop_scale_local),
            "crop scale ranges must lie within (0,1]");
    require(crop_scale_local.hi <= crop_scale_global.lo,
            "local crop scale upper bound must not exceed global lower bound");
    require(flip_probability >= 0.0 && flip_probability <= 1.0,
            "flip probability must lie in [0,1]");
    require(aspect_range.lo > 0.0 && aspect_range.lo <= aspect_range.hi,
            "bad aspect ratio range");
    require(out_size_global >= 4 && out_size_local >= 4, "view sizes must be >= 4");
    for (float s : normalization.stddev)
      require(s > 0.0f, "normalization stddev must be positive");
  }

  /// No crop, no flip, no jitter: the view is the normalized input.
  static AugmentationPolicy identity(std::size_t out_size) {
    AugmentationPolicy p;
    p.crop_scale_global = {1.0, 1.0};
    p.crop_scale_local = {1.0, 1.0};
    p.aspect_range = {1.0, 1.0};
    p.flip_probability = 0.0;
    p.color_jitter = {0.0, 0.0, 0.0};
    p.out_size_global = out_size;
    p.out_size_local = out_size;
    return p;
  }
};

/// Source-rectangle geometry of a sampled crop, kept so tests and callers can
/// compare global vs local coverage.
struct CropGeom {
  std::size_t x = 0, y = 0, w = 0, h = 0;
  double area_fraction = 1.0;
};

struct ViewPair {
  Image view_a, view_b;
  CropGeom geom_a, geom_b;
  std::size_t source_index = 0;
};

struct MultiCropSet {
  std::vector<Image> globals;  // exactly 2
  std::vector<Image> locals;   // exactly k
  std::vector<CropGeom> global_geom, local_geom;
  std::size_t k = 0;
  std::size_t total_views() const { return globals.size() + locals.size(); }
};

struct MaskSpec {
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<std::size_t> masked_indices;  // sorted ascending
  double ratio = 0.0;

  std::size_t n_patches() const { return grid_h * grid_w; }
  std::vector<bool> mask_bitmap() const {
    std::vector<bool> b(n_patches(), false);
    for (std::size_t i : masked_indices) b[i] = true;
    return b;
  }
};

namespace detail {

inline void apply_normalization(Image& img, const Normalization& nz) {
  const std::size_t px = img.dim(0) * img.dim(1);
  for (std::size_t i = 0; i < px; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      img[i * 3 + c] = (img[i * 3 + c] - nz.mean[c]) / nz.stddev[c];
}

inline void apply_color_jitter(Image& img, const ColorJitter& j, RngStream& rng) {
  if (j.brightness == 0.0 && j.contrast == 0.0 && j.saturation == 0.0) return;
  float fb = static_cast<float>(1.0 + rng.uniform(-j.brightness, j.brightness));
  float fc = static_cast<float>(1.0 + rng.uniform(-j.contrast, j.contrast));
  float fsat = static_cast<float>(1.0 + rng.uniform(-j.saturation, j.saturation));
  const std::size_t px = img.dim(0) * img.dim(1);
  double mean_acc = 0.0;
  for (std::size_t i = 0; i < px * 3; ++i) mean_acc += img[i];
  float mean = static_cast<float>(mean_acc / static_cast<double>(px * 3));
  for (std::size_t i = 0; i < px; ++i) {
    float r = img[i * 3 + 0], g = img[i * 3 + 1], b = img[i * 3 + 2];
    float gray = 0.299f * r + 0.587f * g + 0.114f * b;
    r = gray + (r - gray) * fsat;
    g = gray + (g - gray) * fsat;
    b = gray + (b - gray) * fsat;
    r = mean + (r - mean) * fc;
    g = mean + (g - mean) * fc;
    b = mean + (b - mean) * fc;
    img[i * 3 + 0] = std::clamp(r * fb, 0.0f, 1.0f);
    img[i * 3 + 1] = std::clamp(g * fb, 0.0f, 1.0f);
    img[i * 3 + 2] = std::clamp(b * fb, 0.0f, 1.0f);
  }
}

/// Random resized crop: sample an area fraction and aspect ratio, clamp the
/// rectangle into the image, place it uniformly, resize to out x out.
inline Image random_resized_crop(const Image& src, const ScaleRange& scale,
                                 const ScaleRange& aspect, std::size_t out,
                                 RngStream& rng, CropGeom& geom) {
  const std::size_t H = src.dim(0), W = src.dim(1);
  const double area = static_cast<double>(H * W);
  double f = rng.uniform(scale.lo, scale.hi);
  double a = rng.uniform(aspect.lo, aspect.hi);
  auto clamp_dim = [](double v, std::size_t mx) {
    return std::min<std::size_t>(mx, std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(v))));
  };
  std::size_t cw = clamp_dim(std::sqrt(f * area * a), W);
  std::size_t ch = clamp_dim(std::sqrt(f * area / a), H);
  std::size_t x = cw < W ? static_cast<std::size_t>(rng.uniform_index(W - cw + 1)) : 0;
  std::size_t y = ch < H ? static_cast<std::size_t>(rng.uniform_index(H - ch + 1)) : 0;
  geom = {x, y, cw, ch, static_cast<double>(cw * ch) / area};
  Image c = crop(src, y, x, ch, cw);
  if (ch == out && cw == out) return c;
  return resize_bilinear(c, out, out);
}

inline Image make_view(const Image& src, const AugmentationPolicy& p, bool local,
                       RngStream& rng, CropGeom& geom) {
  Image v = random_resized_crop(src, local ? p.crop_scale_local : p.crop_scale_global,
                                p.aspect_range, local ? p.out_size_local : p.out_size_global,
                                rng, geom);
  if (rng.bernoulli(p.flip_probability)) hflip_inplace(v);
  apply_color_jitter(v, p.color_jitter, rng);
  apply_normalization(v, p.normalization);
  return v;
}

}  // namespace detail

/// Two independently augmented views of one image.
inline ViewPair make_view_pair(const Image& image, const AugmentationPolicy& policy,
                               RngStream rng, std::size_t source_index = 0) {
  require(image.dim(0) >= 8 && image.dim(1) >= 8,
          "image smaller than the 8px crop floor");
  ViewPair vp;
  vp.source_index = source_index;
  vp.view_a = detail::make_view(image, policy, false, rng, vp.geom_a);
  vp.view_b = detail::make_view(image, policy, false, rng, vp.geom_b);
  return vp;
}

/// Two global crops plus k local crops; globals precede locals.
inline MultiCropSet make_multicrop(const Image& image, int k,
                                   const AugmentationPolicy& policy, RngStream rng) {
  require(k >= 0, "local crop count k must be non-negative");
  require(image.dim(0) >= 8 && image.dim(1) >= 8,
          "image smaller than the 8px crop floor");
  MultiCropSet set;
  set.k = static_cast<std::size_t>(k);
  for (int i = 0; i < 2; ++i) {
    CropGeom g;
    set.globals.push_back(detail::make_view(image, policy, false, rng, g));
    set.global_geom.push_back(g);
  }
  for (int i = 0; i < k; ++i) {
    CropGeom g;
    set.locals.push_back(detail::make_view(image, policy, true, rng, g));
    set.local_geom.push_back(g);
  }
  return set;
}

/// Plain single view (supervised / finetune policy).
inline Image make_supervised_view(const Image& image, const AugmentationPolicy& policy,
                                  RngStream rng) {
  CropGeom g;
  return detail::make_view(image, policy, false, rng, g);
}

/// Deterministic evaluation view: resize + normalize, no randomness.
inline Image make_eval_view(const Image& image, const AugmentationPolicy& policy) {
  Image v = image;
  if (v.dim(0) != policy.out_size_global || v.dim(1) != policy.out_size_global)
    v = resize_bilinear(v, policy.out_size_global, policy.out_size_global);
  detail::apply_normalization(v, policy.normalization);
  return v;
}

/// Uniformly random set of floor(ratio * grid_h * grid_w) masked patch
/// indices, sorted ascending.
inline MaskSpec make_mask(std::size_t grid_h, std::size_t grid_w, double ratio,
                          RngStream rng) {
  require(ratio >= 0.0 && ratio <= 1.0, "mask ratio must lie in [0,1]");
  require(grid_h > 0 && grid_w > 0, "mask grid must be non-empty");
  MaskSpec spec;
  spec.grid_h = grid_h;
  spec.grid_w = grid_w;
  spec.ratio = ratio;
  const std::size_t n = grid_h * grid_w;
  const std::size_t m = static_cast<std::size_t>(
      std::floor(ratio * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // partial Fisher-Yates: first m entries become the masked set
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(n - i));
    std::swap(idx[i], idx[j]);
  }
  spec.masked_indices.assign(idx.begin(), idx.begin() + static_cast<long>(m));
  std::sort(spec.masked_indices.begin(), spec.masked_indices.end());
  return spec;
}

}  // namespace sslwb
