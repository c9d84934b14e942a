#pragma once

// Datasets live in memory as [0,1] doubles. Loaders are strict about file
// layout and report byte offsets on malformed input; everything downstream
// (subsets, batches, augmentation, normalization) is deterministic given the
// seeds it is handed.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "plab/rng.hpp"
#include "plab/tensor.hpp"

namespace plab {

struct Dataset {
  int channels = 0, height = 0, width = 0;
  int classes = 0;
  std::vector<double> images;  // size() * channels * height * width
  std::vector<int> labels;

  int size() const { return int(labels.size()); }
  std::int64_t image_elems() const {
    return std::int64_t(channels) * height * width;
  }
  const double* image(int i) const {
    return images.data() + std::size_t(i) * std::size_t(image_elems());
  }
  double* image(int i) {
    return images.data() + std::size_t(i) * std::size_t(image_elems());
  }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), msg("cannot open '", path, "'"));
  is.seekg(0, std::ios::end);
  const std::streamoff n = is.tellg();
  is.seekg(0);
  std::vector<unsigned char> buf(static_cast<std::size_t>(n));
  is.read(reinterpret_cast<char*>(buf.data()), n);
  require(bool(is), msg("short read from '", path, "'"));
  return buf;
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off,
                          const std::string& path) {
  require(off + 4 <= b.size(),
          msg("'", path, "': truncated at byte ", off, " (need 4 more)"));
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

}  // namespace detail

// IDX image file (magic 0x00000803, dims N x 28 x 28) plus IDX label file
// (magic 0x00000801). Images come out zero-padded to 32x32, scaled to [0,1].
inline Dataset load_mnist_idx(const std::string& images_path,
                              const std::string& labels_path) {
  const auto ib = detail::read_file(images_path);
  require(detail::be32(ib, 0, images_path) == 0x00000803u,
          msg("'", images_path, "': bad IDX image magic at byte 0"));
  const std::uint32_t n = detail::be32(ib, 4, images_path);
  const std::uint32_t rows = detail::be32(ib, 8, images_path);
  const std::uint32_t cols = detail::be32(ib, 12, images_path);
  require(rows == 28 && cols == 28,
          msg("'", images_path, "': expected 28x28 images, got ", rows, "x",
              cols));
  require(ib.size() == 16 + std::size_t(n) * rows * cols,
          msg("'", images_path, "': expected ",
              16 + std::size_t(n) * rows * cols, " bytes, found ", ib.size()));

  const auto lb = detail::read_file(labels_path);
  require(detail::be32(lb, 0, labels_path) == 0x00000801u,
          msg("'", labels_path, "': bad IDX label magic at byte 0"));
  const std::uint32_t ln = detail::be32(lb, 4, labels_path);
  require(ln == n, msg("'", labels_path, "': ", ln, " labels for ", n,
                       " images"));
  require(lb.size() == 8 + std::size_t(n),
          msg("'", labels_path, "': expected ", 8 + std::size_t(n),
              " bytes, found ", lb.size()));

  Dataset ds;
  ds.channels = 1;
  ds.height = 32;
  ds.width = 32;
  ds.classes = 10;
  ds.images.assign(std::size_t(n) * 32 * 32, 0.0);
  ds.labels.resize(n);
  const int pad = 2;  // (32 - 28) / 2
  for (std::uint32_t i = 0; i < n; ++i) {
    const unsigned char* src = ib.data() + 16 + std::size_t(i) * 28 * 28;
    double* dst = ds.images.data() + std::size_t(i) * 32 * 32;
    for (int r = 0; r < 28; ++r)
      for (int c = 0; c < 28; ++c)
        dst[(r + pad) * 32 + (c + pad)] = double(src[r * 28 + c]) / 255.0;
    const int label = int(lb[8 + i]);
    require(label >= 0 && label <= 9,
            msg("'", labels_path, "': label ", label, " out of range at index ",
                i));
    ds.labels[i] = label;
  }
  return ds;
}

// CIFAR-10 binary batches: 3073-byte records, label byte then planar RGB.
inline Dataset load_cifar10_bin(const std::vector<std::string>& paths) {
  require(!paths.empty(), "load_cifar10_bin: no files given");
  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.classes = 10;
  constexpr std::size_t kRecord = 3073;
  for (const std::string& path : paths) {
    const auto b = detail::read_file(path);
    require(b.size() % kRecord == 0,
            msg("'", path, "': size ", b.size(),
                " is not a multiple of the 3073-byte record"));
    const std::size_t n = b.size() / kRecord;
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned char* rec = b.data() + i * kRecord;
      const int label = int(rec[0]);
      require(label >= 0 && label <= 9,
              msg("'", path, "': label ", label, " out of range at byte ",
                  i * kRecord));
      ds.labels.push_back(label);
      const std::size_t base = ds.images.size();
      ds.images.resize(base + 3 * 1024);
      for (int t = 0; t < 3 * 1024; ++t)
        ds.images[base + std::size_t(t)] = double(rec[1 + t]) / 255.0;
    }
  }
  return ds;
}

// Gaussian images (mean 0.5, std 0.25, clamped to [0,1]) with uniform labels;
// row i is a fixed function of (seed, i) regardless of n.
inline Dataset make_noise_dataset(int n, int channels, int height, int width,
                                  int classes, std::uint64_t seed) {
  require(n >= 0 && channels >= 1 && height >= 1 && width >= 1 && classes >= 2,
          "make_noise_dataset: bad arguments");
  Dataset ds;
  ds.channels = channels;
  ds.height = height;
  ds.width = width;
  ds.classes = classes;
  ds.images.resize(std::size_t(n) * channels * height * width);
  ds.labels.resize(std::size_t(n));
  const std::int64_t per = std::int64_t(channels) * height * width;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "noise-image", std::uint64_t(i)));
    double* img = ds.image(i);
    for (std::int64_t t = 0; t < per; ++t)
      img[t] = std::clamp(rng.normal(0.5, 0.25), 0.0, 1.0);
    ds.labels[std::size_t(i)] = int(rng.uniform_int(0, classes));
  }
  return ds;
}

inline Dataset take_rows(const Dataset& ds, const std::vector<int>& rows) {
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.classes = ds.classes;
  out.images.reserve(rows.size() * std::size_t(ds.image_elems()));
  out.labels.reserve(rows.size());
  for (int r : rows) {
    require(r >= 0 && r < ds.size(),
            msg("take_rows: index ", r, " out of range [0,", ds.size(), ")"));
    out.images.insert(out.images.end(), ds.image(r),
                      ds.image(r) + ds.image_elems());
    out.labels.push_back(ds.labels[std::size_t(r)]);
  }
  return out;
}

// Deterministic class-balanced subset: n/classes rows per class (remainder
// spread over the lowest class ids), each class pool shuffled by its own
// substream of `seed`.
inline Dataset stratified_subset(const Dataset& ds, int n,
                                 std::uint64_t seed) {
  require(n >= 1 && n <= ds.size(),
          msg("stratified_subset: n=", n, " for dataset of ", ds.size()));
  const int k = ds.classes;
  std::vector<std::vector<int>> pools(static_cast<std::size_t>(k));
  for (int i = 0; i < ds.size(); ++i)
    pools[std::size_t(ds.labels[std::size_t(i)])].push_back(i);
  std::vector<int> rows;
  rows.reserve(std::size_t(n));
  for (int c = 0; c < k; ++c) {
    const int want = n / k + (c < n % k ? 1 : 0);
    require(int(pools[std::size_t(c)].size()) >= want,
            msg("stratified_subset: class ", c, " has ",
                pools[std::size_t(c)].size(), " rows, need ", want));
    Rng rng(derive_seed(seed, "subset", std::uint64_t(c)));
    rng.shuffle(pools[std::size_t(c)]);
    rows.insert(rows.end(), pools[std::size_t(c)].begin(),
                pools[std::size_t(c)].begin() + want);
  }
  std::sort(rows.begin(), rows.end());
  return take_rows(ds, rows);
}

// ---------------------------------------------------------------------------
// Normalization and augmentation

struct NormStats {
  std::vector<double> mean, stddev;
};

// Per-channel statistics over every pixel of (clean) training data.
inline NormStats compute_norm_stats(const Dataset& ds) {
  require(ds.size() > 0, "compute_norm_stats: empty dataset");
  const int C = ds.channels;
  const std::int64_t hw = std::int64_t(ds.height) * ds.width;
  NormStats st;
  st.mean.assign(std::size_t(C), 0.0);
  st.stddev.assign(std::size_t(C), 0.0);
  const std::int64_t per_channel = std::int64_t(ds.size()) * hw;
  for (int i = 0; i < ds.size(); ++i) {
    const double* img = ds.image(i);
    for (int c = 0; c < C; ++c) {
      const double* p = img + std::int64_t(c) * hw;
      for (std::int64_t t = 0; t < hw; ++t) st.mean[std::size_t(c)] += p[t];
    }
  }
  for (int c = 0; c < C; ++c) st.mean[std::size_t(c)] /= double(per_channel);
  for (int i = 0; i < ds.size(); ++i) {
    const double* img = ds.image(i);
    for (int c = 0; c < C; ++c) {
      const double* p = img + std::int64_t(c) * hw;
      const double m = st.mean[std::size_t(c)];
      for (std::int64_t t = 0; t < hw; ++t)
        st.stddev[std::size_t(c)] += (p[t] - m) * (p[t] - m);
    }
  }
  for (int c = 0; c < C; ++c)
    st.stddev[std::size_t(c)] =
        std::max(std::sqrt(st.stddev[std::size_t(c)] / double(per_channel)),
                 1e-8);
  return st;
}

// In-place (x - mean) / std on a [N,C,H,W] batch tensor.
inline void normalize_batch(Tensor& x, const NormStats& st) {
  require(x.ndim() == 4, "normalize_batch: expected [N,C,H,W]");
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t hw = std::int64_t(x.dim(2)) * x.dim(3);
  require(int(st.mean.size()) == C,
          msg("normalize_batch: stats cover ", st.mean.size(),
              " channels, batch has ", C));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double* p = x.data() + (std::int64_t(n) * C + c) * hw;
      const double m = st.mean[std::size_t(c)];
      const double inv = 1.0 / st.stddev[std::size_t(c)];
      for (std::int64_t t = 0; t < hw; ++t) p[t] = (p[t] - m) * inv;
    }
}

// Integer translation with zero fill, then optional horizontal flip with
// probability 1/2. Per image: dx, dy, then (only when flips are enabled) the
// flip draw, all from `rng` in that order.
inline void augment_batch(Tensor& x, int max_shift, bool hflip, Rng& rng) {
  require(x.ndim() == 4, "augment_batch: expected [N,C,H,W]");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> tmp(std::size_t(H) * W);
  for (int n = 0; n < N; ++n) {
    const int dx = int(rng.uniform_int(-max_shift, max_shift + 1));
    const int dy = int(rng.uniform_int(-max_shift, max_shift + 1));
    const bool flip = hflip && rng.uniform() < 0.5;
    for (int c = 0; c < C; ++c) {
      double* img = x.data() + (std::int64_t(n) * C + c) * H * W;
      if (dx != 0 || dy != 0) {
        std::fill(tmp.begin(), tmp.end(), 0.0);
        for (int r = 0; r < H; ++r) {
          const int sr = r - dy;
          if (sr < 0 || sr >= H) continue;
          for (int col = 0; col < W; ++col) {
            const int sc = col - dx;
            if (sc >= 0 && sc < W) tmp[std::size_t(r) * W + col] =
                img[std::size_t(sr) * W + sc];
          }
        }
        std::copy(tmp.begin(), tmp.end(), img);
      }
      if (flip) {
        for (int r = 0; r < H; ++r) {
          double* row = img + std::size_t(r) * W;
          std::reverse(row, row + W);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  TensorPtr x;              // [N,C,H,W]
  std::vector<int> labels;
  std::vector<int> indices;  // rows of the source dataset
};

inline Batch gather_batch(const Dataset& ds, const int* rows, int count) {
  Batch b;
  b.x = make_tensor({count, ds.channels, ds.height, ds.width});
  b.labels.resize(std::size_t(count));
  b.indices.assign(rows, rows + count);
  const std::int64_t per = ds.image_elems();
  for (int i = 0; i < count; ++i) {
    require(rows[i] >= 0 && rows[i] < ds.size(),
            msg("gather_batch: index ", rows[i], " out of range"));
    std::copy(ds.image(rows[i]), ds.image(rows[i]) + per,
              b.x->data() + std::int64_t(i) * per);
    b.labels[std::size_t(i)] = ds.labels[std::size_t(rows[i])];
  }
  return b;
}

}  // namespace plab
