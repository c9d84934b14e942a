#pragma once

// First-layer filter export as PGM/PPM grids, plus a smoothness index used to
// compare filters learned under blurred and clean data.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "plab/model.hpp"

namespace plab {

struct FilterImage {
  int width = 0, height = 0, channels = 1;  // 1 = PGM, 3 = PPM
  std::vector<unsigned char> pixels;        // row-major, interleaved for PPM
};

// Tiles conv kernels [K,C,kh,kw] into a grid: 10 columns (row-major, last row
// partial), 1-pixel black separators. Each kernel is min-max normalized to
// [0,255] on its own; constant kernels render mid-gray (128). 3-channel
// kernels become color tiles; any other channel count lays each (kernel,
// channel) plane out as its own grayscale tile.
inline FilterImage render_filter_grid(const Tensor& w) {
  require(w.ndim() == 4, msg("render_filter_grid: expected [K,C,kh,kw], got ",
                             shape_str(w.shape)));
  const int K = w.dim(0), C = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const bool color = C == 3;
  const int tiles = color ? K : K * C;
  const int cols = std::min(tiles, 10);
  const int rows = (tiles + cols - 1) / cols;

  FilterImage img;
  img.channels = color ? 3 : 1;
  img.width = cols * kw + (cols - 1);
  img.height = rows * kh + (rows - 1);
  img.pixels.assign(std::size_t(img.width) * img.height * img.channels, 0);

  std::vector<double> lo(static_cast<std::size_t>(K)), hi(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    const double* kern = w.data() + std::size_t(k) * C * kh * kw;
    double mn = kern[0], mx = kern[0];
    for (int t = 1; t < C * kh * kw; ++t) {
      mn = std::min(mn, kern[t]);
      mx = std::max(mx, kern[t]);
    }
    lo[std::size_t(k)] = mn;
    hi[std::size_t(k)] = mx;
  }
  auto to_byte = [&](int k, double v) {
    const double mn = lo[std::size_t(k)], mx = hi[std::size_t(k)];
    if (mx - mn <= 0) return (unsigned char)128;
    return (unsigned char)std::lround((v - mn) / (mx - mn) * 255.0);
  };

  for (int t = 0; t < tiles; ++t) {
    const int k = color ? t : t / C;
    const int c = color ? -1 : t % C;
    const int row = t / cols, col = t % cols;
    const int y0 = row * (kh + 1), x0 = col * (kw + 1);
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const std::size_t at =
            (std::size_t(y0 + i) * img.width + std::size_t(x0 + j)) *
            img.channels;
        if (color) {
          for (int ch = 0; ch < 3; ++ch)
            img.pixels[at + std::size_t(ch)] = to_byte(
                k, w.values[((std::size_t(k) * C + std::size_t(ch)) * kh + i) *
                                kw +
                            j]);
        } else {
          img.pixels[at] = to_byte(
              k,
              w.values[((std::size_t(k) * C + std::size_t(c)) * kh + i) * kw +
                       j]);
        }
      }
  }
  return img;
}

inline void write_pnm(const std::string& path, const FilterImage& img) {
  require(img.channels == 1 || img.channels == 3,
          "write_pnm: 1 or 3 channels only");
  std::ofstream os(path, std::ios::binary);
  require(bool(os), msg("cannot open '", path, "' for writing"));
  os << (img.channels == 3 ? "P6" : "P5") << "\n"
     << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()),
           std::streamsize(img.pixels.size()));
  require(bool(os), msg("write to '", path, "' failed"));
}

inline FilterImage read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), msg("cannot open '", path, "'"));
  std::string magic;
  is >> magic;
  require(magic == "P5" || magic == "P6",
          msg("'", path, "': not a binary PGM/PPM (magic '", magic, "')"));
  FilterImage img;
  img.channels = magic == "P6" ? 3 : 1;
  int maxval = 0;
  is >> img.width >> img.height >> maxval;
  require(bool(is) && maxval == 255,
          msg("'", path, "': unsupported header"));
  is.get();  // single whitespace after maxval
  img.pixels.resize(std::size_t(img.width) * img.height * img.channels);
  is.read(reinterpret_cast<char*>(img.pixels.data()),
          std::streamsize(img.pixels.size()));
  require(bool(is), msg("'", path, "': truncated pixel data"));
  return img;
}

// Finds the conv weight of the given parameter group and writes its grid.
inline FilterImage export_filters(const ModelState& st, int group,
                                  const std::string& path) {
  const Tensor* w = nullptr;
  for (const ParamInfo& p : st.params) {
    if (p.group == group && p.tensor->ndim() == 4 &&
        p.name.find(".w") != std::string::npos) {
      w = p.tensor.get();
      break;
    }
  }
  require(w != nullptr, msg("export_filters: group ", group,
                            " has no convolution weight"));
  FilterImage img = render_filter_grid(*w);
  write_pnm(path, img);
  return img;
}

// Mean squared first difference (horizontal + vertical, per channel) divided
// by the kernel's element variance. Zero-variance kernels return 0; 1x1
// kernels have no differences and also return 0. One value per kernel.
inline std::vector<double> smoothness_index(const Tensor& w) {
  require(w.ndim() == 4, msg("smoothness_index: expected [K,C,kh,kw], got ",
                             shape_str(w.shape)));
  const int K = w.dim(0), C = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  std::vector<double> out(std::size_t(K), 0.0);
  for (int k = 0; k < K; ++k) {
    const double* kern = w.data() + std::size_t(k) * C * kh * kw;
    const int n = C * kh * kw;
    double mean = 0;
    for (int t = 0; t < n; ++t) mean += kern[t];
    mean /= n;
    double var = 0;
    for (int t = 0; t < n; ++t) var += (kern[t] - mean) * (kern[t] - mean);
    var /= n;
    if (var < 1e-24) continue;

    double ss = 0;
    int count = 0;
    for (int c = 0; c < C; ++c) {
      const double* plane = kern + std::size_t(c) * kh * kw;
      for (int i = 0; i < kh; ++i)
        for (int j = 0; j + 1 < kw; ++j) {
          const double d = plane[i * kw + j + 1] - plane[i * kw + j];
          ss += d * d;
          ++count;
        }
      for (int i = 0; i + 1 < kh; ++i)
        for (int j = 0; j < kw; ++j) {
          const double d = plane[(i + 1) * kw + j] - plane[i * kw + j];
          ss += d * d;
          ++count;
        }
    }
    if (count > 0) out[std::size_t(k)] = ss / double(count) / var;
  }
  return out;
}

}  // namespace plab
