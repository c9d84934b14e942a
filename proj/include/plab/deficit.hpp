#pragma once

// Timed input/label corruptions. A schedule is a half-open epoch window
// [start, end); the transform applies to training batches only, never to
// evaluation data. Label permutation and noise replacement need per-run
// fixtures (the bijection, the noise corpus), built once in a DeficitContext.

#include <algorithm>
#include <string>
#include <vector>

#include "plab/data.hpp"
#include "plab/rng.hpp"
#include "plab/tensor.hpp"

namespace plab {

enum class DeficitKind { None, Blur, VFlip, LabelPermute, NoiseReplace };

inline const char* deficit_name(DeficitKind k) {
  switch (k) {
    case DeficitKind::None: return "none";
    case DeficitKind::Blur: return "blur";
    case DeficitKind::VFlip: return "vflip";
    case DeficitKind::LabelPermute: return "label_permute";
    case DeficitKind::NoiseReplace: return "noise_replace";
  }
  return "?";
}

inline DeficitKind deficit_from_name(const std::string& s) {
  for (DeficitKind k : {DeficitKind::None, DeficitKind::Blur,
                        DeficitKind::VFlip, DeficitKind::LabelPermute,
                        DeficitKind::NoiseReplace})
    if (s == deficit_name(k)) return k;
  fail(msg("unknown deficit kind '", s, "'"));
}

struct DeficitSchedule {
  DeficitKind kind = DeficitKind::None;
  int start = 0;
  int end = 0;  // exclusive

  bool active(int epoch) const {
    return kind != DeficitKind::None && epoch >= start && epoch < end;
  }
};

// ---------------------------------------------------------------------------
// Blur: 4x4 block average down, bilinear upsample back to full resolution
// (half-pixel centers, edge clamped). Destroys detail above the low-resolution
// Nyquist band while keeping coarse structure.

inline void blur_image(double* img, int C, int H, int W) {
  require(H % 4 == 0 && W % 4 == 0,
          msg("blur_image: spatial size ", H, "x", W,
              " not divisible by the 4x4 block"));
  const int h = H / 4, w = W / 4;
  std::vector<double> low(std::size_t(h) * w);
  for (int c = 0; c < C; ++c) {
    double* plane = img + std::size_t(c) * H * W;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double s = 0;
        for (int di = 0; di < 4; ++di)
          for (int dj = 0; dj < 4; ++dj)
            s += plane[std::size_t(4 * i + di) * W + (4 * j + dj)];
        low[std::size_t(i) * w + j] = s / 16.0;
      }
    for (int i = 0; i < H; ++i) {
      const double sy = std::clamp((i + 0.5) / 4.0 - 0.5, 0.0, double(h - 1));
      const int y0 = int(sy);
      const int y1 = std::min(y0 + 1, h - 1);
      const double fy = sy - y0;
      for (int j = 0; j < W; ++j) {
        const double sx =
            std::clamp((j + 0.5) / 4.0 - 0.5, 0.0, double(w - 1));
        const int x0 = int(sx);
        const int x1 = std::min(x0 + 1, w - 1);
        const double fx = sx - x0;
        const double a = low[std::size_t(y0) * w + x0];
        const double b = low[std::size_t(y0) * w + x1];
        const double c2 = low[std::size_t(y1) * w + x0];
        const double d = low[std::size_t(y1) * w + x1];
        plane[std::size_t(i) * W + j] = (1 - fy) * ((1 - fx) * a + fx * b) +
                                        fy * ((1 - fx) * c2 + fx * d);
      }
    }
  }
}

inline void vflip_image(double* img, int C, int H, int W) {
  for (int c = 0; c < C; ++c) {
    double* plane = img + std::size_t(c) * H * W;
    for (int i = 0; i < H / 2; ++i)
      std::swap_ranges(plane + std::size_t(i) * W,
                       plane + std::size_t(i + 1) * W,
                       plane + std::size_t(H - 1 - i) * W);
  }
}

// ---------------------------------------------------------------------------

struct DeficitContext {
  std::vector<int> label_perm;  // LabelPermute: class c reports as perm[c]
  Dataset noise;                // NoiseReplace: row i replaces train row i
};

// The permutation and the noise corpus are functions of the run seed alone
// (plus dataset geometry), so an arm is reproducible from its config.
inline DeficitContext make_deficit_context(DeficitKind kind,
                                           const Dataset& train,
                                           std::uint64_t seed) {
  DeficitContext ctx;
  if (kind == DeficitKind::LabelPermute) {
    Rng rng(derive_seed(seed, "label-perm"));
    ctx.label_perm = rng.permutation(train.classes);
  } else if (kind == DeficitKind::NoiseReplace) {
    ctx.noise = make_noise_dataset(train.size(), train.channels, train.height,
                                   train.width, train.classes,
                                   derive_seed(seed, "noise-deficit"));
  }
  return ctx;
}

// In-place on a gathered batch; Batch::indices drives the noise pairing.
inline void apply_deficit(DeficitKind kind, const DeficitContext& ctx,
                          Batch& batch) {
  const int N = batch.x->dim(0), C = batch.x->dim(1), H = batch.x->dim(2),
            W = batch.x->dim(3);
  const std::int64_t per = std::int64_t(C) * H * W;
  switch (kind) {
    case DeficitKind::None:
      break;
    case DeficitKind::Blur:
      for (int n = 0; n < N; ++n)
        blur_image(batch.x->data() + n * per, C, H, W);
      break;
    case DeficitKind::VFlip:
      for (int n = 0; n < N; ++n)
        vflip_image(batch.x->data() + n * per, C, H, W);
      break;
    case DeficitKind::LabelPermute:
      require(!ctx.label_perm.empty(),
              "apply_deficit: label permutation context missing");
      for (int& y : batch.labels) y = ctx.label_perm[std::size_t(y)];
      break;
    case DeficitKind::NoiseReplace: {
      require(ctx.noise.size() > 0,
              "apply_deficit: noise replacement context missing");
      for (int n = 0; n < N; ++n) {
        const int idx = batch.indices[std::size_t(n)];
        require(idx >= 0 && idx < ctx.noise.size(),
                msg("apply_deficit: train index ", idx,
                    " has no noise row (corpus size ", ctx.noise.size(), ")"));
        std::copy(ctx.noise.image(idx), ctx.noise.image(idx) + per,
                  batch.x->data() + n * per);
        batch.labels[std::size_t(n)] = ctx.noise.labels[std::size_t(idx)];
      }
      break;
    }
  }
}

}  // namespace plab
