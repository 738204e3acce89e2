#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "sslwb/dataset.hpp"
#include "sslwb/image.hpp"
#include "sslwb/rng.hpp"

namespace sslwb {

// Procedural stand-in corpus. Each class is a parametric shape family
// (polygon order, stroke pattern, hue band); within a class, rotation, scale,
// position, color and background vary per image. That gives controllable
// interclass similarity and high intraclass appearance variance, which is the
// regime the downstream task cares about.

struct VarianceKnobs {
  double rotation_deg = 40.0;       // shape rotation range, +/- degrees
  double scale_lo = 0.45;           // shape radius as fraction of half-image
  double scale_hi = 0.85;
  double color_jitter = 0.25;       // brightness/saturation jitter strength
  double hue_band_deg = 18.0;       // per-class hue wobble
  int background_textures = 4;      // number of background kinds to draw from
};

struct SyntheticCorpusSpec {
  int num_classes = 10;
  std::vector<std::size_t> per_class_counts;  // empty = uniform `per_class`
  std::size_t per_class = 50;
  std::size_t image_size = 32;
  std::uint64_t seed = 0;
  VarianceKnobs knobs;
  std::vector<std::string> class_names;  // optional, else "class_XX"

  void validate() const {
    require(num_classes >= 2, "synthetic corpus needs at least 2 classes");
    require(image_size >= 16, "synthetic image size must be >= 16");
    require(per_class_counts.empty() ||
                per_class_counts.size() == static_cast<std::size_t>(num_classes),
            "per_class_counts size must equal num_classes");
    require(knobs.scale_lo > 0 && knobs.scale_hi >= knobs.scale_lo,
            "bad shape scale range");
    require(knobs.background_textures >= 1, "need at least one background texture");
  }
};

namespace detail {

struct ClassStyle {
  int sides;        // polygon order (3..9)
  int stroke;       // 0 plain, 1 stripes, 2 rings, 3 hollow
  float hue_deg;    // class hue band center
  float elongation; // aspect of the shape
};

inline ClassStyle class_style(int class_index) {
  ClassStyle s;
  s.sides = 3 + (class_index % 7);
  s.stroke = (class_index / 7) % 4;
  // golden-angle spacing so neighboring classes land in distinct hue bands
  s.hue_deg = static_cast<float>(std::fmod(class_index * 137.508, 360.0));
  s.elongation = 1.0f + 0.35f * static_cast<float>((class_index / 28) % 3);
  return s;
}

// Signed distance to a regular n-gon of circumradius r centered at origin
// (negative inside).
inline float ngon_sdf(float x, float y, int n, float r) {
  float an = static_cast<float>(M_PI) / static_cast<float>(n);
  float angle = std::atan2(y, x);
  float d = std::sqrt(x * x + y * y);
  float a = std::fmod(angle + 2.0f * static_cast<float>(M_PI), 2.0f * an);
  return d * std::cos(a - an) - r * std::cos(an);
}

inline void paint_background(Image& img, int kind, RngStream& rng) {
  const std::size_t n = img.dim(0);
  float base_h = static_cast<float>(rng.uniform(0.0, 360.0));
  float base_v = static_cast<float>(rng.uniform(0.25, 0.75));
  float r0, g0, b0;
  hsv_to_rgb(base_h, 0.15f, base_v, r0, g0, b0);
  switch (kind % 4) {
    case 0: {  // vertical-ish gradient
      float slope = static_cast<float>(rng.uniform(-0.4, 0.4));
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          float t = (static_cast<float>(y) + slope * static_cast<float>(x)) /
                    static_cast<float>(n);
          img.at(y, x, 0) = r0 * (0.6f + 0.5f * t);
          img.at(y, x, 1) = g0 * (0.6f + 0.5f * t);
          img.at(y, x, 2) = b0 * (0.6f + 0.5f * t);
        }
      break;
    }
    case 1: {  // checker
      std::size_t cell = 2 + static_cast<std::size_t>(rng.uniform_index(5));
      float alt = static_cast<float>(rng.uniform(0.5, 0.9));
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          bool odd = ((y / cell) + (x / cell)) % 2 == 1;
          float m = odd ? alt : 1.0f;
          img.at(y, x, 0) = r0 * m;
          img.at(y, x, 1) = g0 * m;
          img.at(y, x, 2) = b0 * m;
        }
      break;
    }
    case 2: {  // value noise (coarse grid, bilinear)
      const std::size_t g = 5;
      float grid[g * g];
      for (auto& v : grid) v = static_cast<float>(rng.uniform(0.5, 1.1));
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          float fy = static_cast<float>(y) / static_cast<float>(n) * (g - 1);
          float fx = static_cast<float>(x) / static_cast<float>(n) * (g - 1);
          std::size_t y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
          float wy = fy - y0, wx = fx - x0;
          std::size_t y1 = std::min(y0 + 1, g - 1), x1 = std::min(x0 + 1, g - 1);
          float m = grid[y0 * g + x0] * (1 - wy) * (1 - wx) +
                    grid[y0 * g + x1] * (1 - wy) * wx +
                    grid[y1 * g + x0] * wy * (1 - wx) + grid[y1 * g + x1] * wy * wx;
          img.at(y, x, 0) = r0 * m;
          img.at(y, x, 1) = g0 * m;
          img.at(y, x, 2) = b0 * m;
        }
      break;
    }
    default: {  // diagonal stripes
      float period = static_cast<float>(rng.uniform(4.0, 9.0));
      float alt = static_cast<float>(rng.uniform(0.55, 0.9));
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
          float m = std::fmod(static_cast<float>(x + y), period) < period / 2 ? 1.0f : alt;
          img.at(y, x, 0) = r0 * m;
          img.at(y, x, 1) = g0 * m;
          img.at(y, x, 2) = b0 * m;
        }
    }
  }
}

inline Image render_sample(const SyntheticCorpusSpec& spec, int class_index,
                           RngStream& rng) {
  const std::size_t n = spec.image_size;
  const ClassStyle style = class_style(class_index);
  const VarianceKnobs& k = spec.knobs;

  Image img({n, n, 3});
  int bg = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(k.background_textures)));
  paint_background(img, bg, rng);

  float rot = static_cast<float>(rng.uniform(-k.rotation_deg, k.rotation_deg) * M_PI / 180.0);
  float radius = static_cast<float>(rng.uniform(k.scale_lo, k.scale_hi)) *
                 static_cast<float>(n) * 0.5f;
  float cx = static_cast<float>(n) * 0.5f +
             static_cast<float>(rng.uniform(-0.12, 0.12)) * static_cast<float>(n);
  float cy = static_cast<float>(n) * 0.5f +
             static_cast<float>(rng.uniform(-0.12, 0.12)) * static_cast<float>(n);

  float hue = style.hue_deg + static_cast<float>(rng.uniform(-k.hue_band_deg, k.hue_band_deg));
  hue = std::fmod(hue + 360.0f, 360.0f);
  float sat = std::clamp(0.8f + static_cast<float>(rng.uniform(-k.color_jitter, k.color_jitter)),
                         0.2f, 1.0f);
  float val = std::clamp(0.85f + static_cast<float>(rng.uniform(-k.color_jitter, k.color_jitter)),
                         0.25f, 1.0f);
  float fr, fg, fb;
  hsv_to_rgb(hue, sat, val, fr, fg, fb);
  float stripe_phase = static_cast<float>(rng.uniform(0.0, 6.28318));

  const float cosr = std::cos(rot), sinr = std::sin(rot);
  const float edge = 0.9f;  // soft-edge width in pixels
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      float px = (static_cast<float>(x) + 0.5f - cx);
      float py = (static_cast<float>(y) + 0.5f - cy);
      float rx = (cosr * px + sinr * py) * style.elongation;
      float ry = -sinr * px + cosr * py;
      float d = ngon_sdf(rx, ry, style.sides, radius);
      float alpha = std::clamp(0.5f - d / edge, 0.0f, 1.0f);
      if (alpha <= 0.0f) continue;
      float m = 1.0f;
      switch (style.stroke) {
        case 1:  // stripes across the shape
          m = 0.55f + 0.45f * (std::sin(rx * 6.28318f / (radius * 0.5f) + stripe_phase) > 0 ? 1.0f : 0.0f);
          break;
        case 2:  // concentric rings
          m = 0.55f + 0.45f * (std::fmod(std::sqrt(rx * rx + ry * ry), radius * 0.34f) <
                               radius * 0.17f ? 1.0f : 0.0f);
          break;
        case 3:  // hollow: fade interior back toward background
          if (d < -0.35f * radius) alpha *= 0.25f;
          break;
        default: break;
      }
      for (std::size_t c = 0; c < 3; ++c) {
        float fill = (c == 0 ? fr : c == 1 ? fg : fb) * m;
        img.at(y, x, c) = img.at(y, x, c) * (1.0f - alpha) + fill * alpha;
      }
    }
  }
  return img;
}

}  // namespace detail

/// Renders the corpus under out_dir (images/<class>/img_xxxxx.ppm) and returns
/// the manifest with paths relative to out_dir. Byte-identical output for
/// identical spec, since every image draws from its own (seed, index) stream.
inline DatasetManifest generate_synthetic_corpus(const SyntheticCorpusSpec& spec,
                                                 const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw EngineError("cannot create output directory: " + out_dir.string());

  DatasetManifest m;
  m.seed = spec.seed;

  struct Job {
    int class_index;
    std::size_t within_class;
    std::size_t global_index;
    std::string rel_path;
  };
  std::vector<Job> jobs;
  std::size_t global = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    std::size_t count =
        spec.per_class_counts.empty() ? spec.per_class : spec.per_class_counts[c];
    ClassSpec cs;
    cs.class_id = c + 1;
    cs.name = c < static_cast<int>(spec.class_names.size())
                  ? spec.class_names[c]
                  : "class_" + std::to_string(c + 1);
    cs.expected_count = count;
    m.classes.push_back(cs);

    std::string cdir = "images/c" + std::to_string(c + 1);
    fs::create_directories(out_dir / cdir, ec);
    if (ec) throw EngineError("cannot create output directory: " + (out_dir / cdir).string());
    for (std::size_t i = 0; i < count; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "/img_%05zu.ppm", i);
      jobs.push_back({c, i, global++, cdir + buf});
      ImageRecord r;
      r.path = jobs.back().rel_path;
      r.class_id = c + 1;
      r.width = static_cast<int>(spec.image_size);
      r.height = static_cast<int>(spec.image_size);
      m.records.push_back(r);
    }
  }

#pragma omp parallel for schedule(dynamic)
  for (long ji = 0; ji < static_cast<long>(jobs.size()); ++ji) {
    const Job& j = jobs[ji];
    RngStream rng = RngStream::derived(spec.seed, "corpus", j.global_index);
    Image img = detail::render_sample(spec, j.class_index, rng);
    write_ppm(out_dir / j.rel_path, img);
  }

  m.validate();
  return m;
}

}  // namespace sslwb
