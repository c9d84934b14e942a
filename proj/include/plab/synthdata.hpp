#pragma once

// Self-contained 10-class glyph corpus, written in the same binary formats the
// loaders consume (IDX and CIFAR-10 batches). Classes are stroke drawings
// with per-sample affine jitter, stroke weight/intensity variation, and pixel
// noise. Two class pairs (ring vs gapped ring, X vs hollow X) differ only in
// fine detail, so a 4x block-average blur makes them nearly indistinguishable
// while leaving the other classes separable; most classes are asymmetric
// under vertical flips. Sample i is a fixed function of (seed, i).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "plab/rng.hpp"
#include "plab/tensor.hpp"

namespace plab {
namespace glyph {

struct Prim {
  enum Kind { Segment, Arc, Disk } kind;
  // Segment: (x0,y0)-(x1,y1); Arc: center (x0,y0), radius r, angles a0..a1;
  // Disk: center (x0,y0), radius r. thick scales the stroke width.
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0, r = 0, a0 = 0, a1 = 0, thick = 1.0;
};

inline double deg(double d) { return d * 3.14159265358979323846 / 180.0; }

inline std::vector<Prim> class_template(int cls) {
  auto seg = [](double x0, double y0, double x1, double y1, double t = 1.0) {
    Prim p;
    p.kind = Prim::Segment;
    p.x0 = x0; p.y0 = y0; p.x1 = x1; p.y1 = y1; p.thick = t;
    return p;
  };
  auto arc = [](double cx, double cy, double r, double a0, double a1) {
    Prim p;
    p.kind = Prim::Arc;
    p.x0 = cx; p.y0 = cy; p.r = r; p.a0 = a0; p.a1 = a1;
    return p;
  };
  auto disk = [](double cx, double cy, double r) {
    Prim p;
    p.kind = Prim::Disk;
    p.x0 = cx; p.y0 = cy; p.r = r;
    return p;
  };
  switch (cls) {
    case 0:  // ring
      return {arc(.5, .5, .34, 0, deg(360))};
    case 1:  // ring with three gaps; blurs into class 0
      return {arc(.5, .5, .34, deg(5), deg(95)),
              arc(.5, .5, .34, deg(125), deg(215)),
              arc(.5, .5, .34, deg(245), deg(335))};
    case 2:  // triangle
      return {seg(.5, .16, .84, .8), seg(.84, .8, .16, .8),
              seg(.16, .8, .5, .16)};
    case 3:  // X
      return {seg(.2, .2, .8, .8), seg(.8, .2, .2, .8)};
    case 4:  // hollow X with a center dot; blurs into class 3
      return {seg(.2, .2, .38, .38), seg(.8, .8, .62, .62),
              seg(.8, .2, .62, .38), seg(.2, .8, .38, .62),
              disk(.5, .5, .045)};
    case 5:  // thick bar over thin bar
      return {seg(.18, .32, .82, .32, 1.6), seg(.18, .66, .82, .66, 0.7)};
    case 6:  // seven
      return {seg(.2, .2, .78, .2), seg(.78, .2, .38, .84)};
    case 7:  // L
      return {seg(.26, .16, .26, .82), seg(.26, .82, .8, .82)};
    case 8:  // filled disk, slightly above center
      return {disk(.5, .45, .2)};
    case 9:  // Z
      return {seg(.2, .24, .8, .24), seg(.8, .24, .2, .76),
              seg(.2, .76, .8, .76)};
    default:
      fail(msg("class_template: no class ", cls));
  }
}

inline double seg_dist(double px, double py, const Prim& p) {
  const double vx = p.x1 - p.x0, vy = p.y1 - p.y0;
  const double wx = px - p.x0, wy = py - p.y0;
  const double vv = vx * vx + vy * vy;
  const double t = vv > 0 ? std::clamp((wx * vx + wy * vy) / vv, 0.0, 1.0)
                          : 0.0;
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

inline double arc_dist(double px, double py, const Prim& p) {
  const double dx = px - p.x0, dy = py - p.y0;
  const double d = std::sqrt(dx * dx + dy * dy);
  double ang = std::atan2(dy, dx);
  const double two_pi = 2 * 3.14159265358979323846;
  auto norm = [&](double a) {
    while (a < 0) a += two_pi;
    while (a >= two_pi) a -= two_pi;
    return a;
  };
  const double a = norm(ang), lo = norm(p.a0);
  double span = norm(p.a1 - p.a0);
  if (span == 0) span = two_pi;  // full circle
  const double rel = norm(a - lo);
  if (rel <= span) return std::abs(d - p.r);
  // outside the angular span: distance to the nearer endpoint
  const double ex0 = p.x0 + p.r * std::cos(p.a0);
  const double ey0 = p.y0 + p.r * std::sin(p.a0);
  const double ex1 = p.x0 + p.r * std::cos(p.a1);
  const double ey1 = p.y0 + p.r * std::sin(p.a1);
  const double d0 = std::hypot(px - ex0, py - ey0);
  const double d1 = std::hypot(px - ex1, py - ey1);
  return std::min(d0, d1);
}

// Signed distance to the ink boundary (<= 0 inside the stroke).
inline double ink_dist(double px, double py, const Prim& p,
                       double half_stroke) {
  switch (p.kind) {
    case Prim::Segment:
      return seg_dist(px, py, p) - half_stroke * p.thick;
    case Prim::Arc:
      return arc_dist(px, py, p) - half_stroke * p.thick;
    case Prim::Disk: {
      return std::hypot(px - p.x0, py - p.y0) - p.r;
    }
  }
  return 1e9;
}

// Renders one 28x28 glyph into [0,1] doubles. The jitter distributions are
// part of the corpus definition; changing them changes every sample.
inline void render(int cls, std::uint64_t seed, std::uint64_t index,
                   double* out) {
  Rng rng(derive_seed(seed, "glyph", index));
  const double rot = rng.uniform(-0.12, 0.12);
  const double scale = rng.uniform(0.88, 1.08);
  const double dx = double(rng.uniform_int(-2, 3));
  const double dy = double(rng.uniform_int(-2, 3));
  const double stroke = rng.uniform(1.5, 2.1);       // pixels, full width
  const double intensity = rng.uniform(0.62, 1.0);
  const double cr = std::cos(rot), sr = std::sin(rot);
  const double box = 20.0 * scale;

  std::vector<Prim> prims = class_template(cls);
  for (Prim& p : prims) {
    auto map = [&](double& x, double& y) {
      const double ux = x - 0.5, uy = y - 0.5;
      x = (cr * ux - sr * uy) * box + 13.5 + dx;
      y = (sr * ux + cr * uy) * box + 13.5 + dy;
    };
    map(p.x0, p.y0);
    if (p.kind == Prim::Segment) map(p.x1, p.y1);
    if (p.kind != Prim::Segment) {
      p.r *= box;
      p.a0 += rot;
      p.a1 += rot;
    }
  }

  const double half_stroke = stroke * scale / 2.0;
  for (int i = 0; i < 28; ++i)
    for (int j = 0; j < 28; ++j) {
      const double px = j + 0.5, py = i + 0.5;
      double v = 0;
      for (const Prim& p : prims) {
        const double d = ink_dist(px, py, p, half_stroke);
        v = std::max(v, std::clamp(0.5 - d, 0.0, 1.0));
      }
      double pix = intensity * v + rng.normal(0.0, 0.025);
      out[std::size_t(i) * 28 + j] = std::clamp(pix, 0.0, 1.0);
    }
}

inline int label_of(std::uint64_t /*seed*/, std::uint64_t index) {
  return int(index % 10);  // exactly balanced
}

}  // namespace glyph

struct GlyphCorpusConfig {
  int train_n = 12000;
  int test_n = 2000;
  std::uint64_t seed = 7;
};

namespace detail {

inline void write_be32(std::ofstream& os, std::uint32_t v) {
  const unsigned char b[4] = {
      (unsigned char)(v >> 24), (unsigned char)(v >> 16),
      (unsigned char)(v >> 8), (unsigned char)v};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_glyph_idx_split(const std::string& images_path,
                                  const std::string& labels_path, int n,
                                  std::uint64_t seed,
                                  std::uint64_t index_base) {
  std::ofstream imgs(images_path, std::ios::binary);
  require(bool(imgs), msg("cannot open '", images_path, "' for writing"));
  write_be32(imgs, 0x00000803u);
  write_be32(imgs, std::uint32_t(n));
  write_be32(imgs, 28);
  write_be32(imgs, 28);
  std::ofstream labs(labels_path, std::ios::binary);
  require(bool(labs), msg("cannot open '", labels_path, "' for writing"));
  write_be32(labs, 0x00000801u);
  write_be32(labs, std::uint32_t(n));
  std::vector<double> img(28 * 28);
  std::vector<unsigned char> bytes(28 * 28);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t index = index_base + std::uint64_t(i);
    const int cls = glyph::label_of(seed, index);
    glyph::render(cls, seed, index, img.data());
    for (std::size_t t = 0; t < bytes.size(); ++t)
      bytes[t] = (unsigned char)std::lround(img[t] * 255.0);
    imgs.write(reinterpret_cast<const char*>(bytes.data()),
               std::streamsize(bytes.size()));
    const unsigned char lb = (unsigned char)cls;
    labs.write(reinterpret_cast<const char*>(&lb), 1);
  }
  require(bool(imgs) && bool(labs), "glyph corpus: write failed");
}

}  // namespace detail

// Writes train-images-idx3-ubyte / train-labels-idx1-ubyte /
// t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte under `dir`. Train and test
// draw from disjoint index ranges of the same generator.
inline void write_glyph_corpus_idx(const std::string& dir,
                                   const GlyphCorpusConfig& cfg) {
  detail::write_glyph_idx_split(dir + "/train-images-idx3-ubyte",
                                dir + "/train-labels-idx1-ubyte", cfg.train_n,
                                cfg.seed, 0);
  detail::write_glyph_idx_split(dir + "/t10k-images-idx3-ubyte",
                                dir + "/t10k-labels-idx1-ubyte", cfg.test_n,
                                cfg.seed, 1u << 24);
}

// Same corpus as colored 32x32 CIFAR-style batches: per-sample stroke tint on
// each channel, glyph centered in the 32x32 frame.
inline void write_glyph_corpus_cifar(const std::string& dir,
                                     const GlyphCorpusConfig& cfg) {
  auto write_split = [&](const std::string& path, int n,
                         std::uint64_t index_base) {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), msg("cannot open '", path, "' for writing"));
    std::vector<double> img(28 * 28);
    std::vector<unsigned char> rec(3073);
    for (int i = 0; i < n; ++i) {
      const std::uint64_t index = index_base + std::uint64_t(i);
      const int cls = glyph::label_of(cfg.seed, index);
      glyph::render(cls, cfg.seed, index, img.data());
      Rng tint_rng(derive_seed(cfg.seed, "glyph-tint", index));
      double tint[3];
      for (double& t : tint) t = tint_rng.uniform(0.35, 1.0);
      rec[0] = (unsigned char)cls;
      std::fill(rec.begin() + 1, rec.end(), (unsigned char)0);
      for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 28; ++r)
          for (int col = 0; col < 28; ++col) {
            const double v = img[std::size_t(r) * 28 + col] * tint[c];
            rec[1 + std::size_t(c) * 1024 + std::size_t(r + 2) * 32 +
                (col + 2)] = (unsigned char)std::lround(v * 255.0);
          }
      os.write(reinterpret_cast<const char*>(rec.data()),
               std::streamsize(rec.size()));
    }
    require(bool(os), msg("glyph corpus: write to '", path, "' failed"));
  };
  write_split(dir + "/data_batch_1.bin", cfg.train_n, 0);
  write_split(dir + "/test_batch.bin", cfg.test_n, 1u << 24);
}

}  // namespace plab
