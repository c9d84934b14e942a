#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "testutil.hpp"

using namespace plab;

namespace {

TensorPtr kernels(int K, int C, int kh, int kw, std::uint64_t seed) {
  TensorPtr w = make_tensor({K, C, kh, kw});
  Rng rng(seed);
  for (double& v : w->values) v = rng.uniform(-1, 1);
  return w;
}

std::string temp_path(const std::string& leaf) {
  return (std::filesystem::temp_directory_path() / leaf).string();
}

}  // namespace

TEST_CASE("grid layout: ten columns, separators, partial last row") {
  TensorPtr w = kernels(96, 3, 3, 3, 1);
  FilterImage img = render_filter_grid(*w);
  REQUIRE(img.channels == 3);
  // 96 color tiles: 10 columns x 10 rows, last row 6 tiles
  REQUIRE(img.width == 10 * 3 + 9);
  REQUIRE(img.height == 10 * 3 + 9);
  // separator column between tiles is black
  for (int y = 0; y < img.height; ++y)
    for (int ch = 0; ch < 3; ++ch)
      REQUIRE(img.pixels[(std::size_t(y) * img.width + 3) * 3 +
                         std::size_t(ch)] == 0);
  // the empty area after the 96th tile stays black
  const int y_last = 9 * 4, x_empty = 6 * 4;
  REQUIRE(img.pixels[(std::size_t(y_last) * img.width + x_empty) * 3] == 0);

  // fewer tiles than ten: exactly `tiles` columns
  TensorPtr w2 = kernels(4, 3, 5, 5, 2);
  FilterImage img2 = render_filter_grid(*w2);
  REQUIRE(img2.width == 4 * 5 + 3);
  REQUIRE(img2.height == 5);
}

TEST_CASE("non-rgb kernels tile each channel plane separately") {
  TensorPtr w = kernels(3, 2, 3, 3, 3);
  FilterImage img = render_filter_grid(*w);
  REQUIRE(img.channels == 1);
  // 6 grayscale tiles in one row of 6
  REQUIRE(img.width == 6 * 3 + 5);
  REQUIRE(img.height == 3);
}

TEST_CASE("per-kernel min-max scaling with constant kernels mid-gray") {
  TensorPtr w = make_tensor({2, 1, 2, 2});
  w->values = {0.0, 1.0, 0.25, 0.75,   // kernel 0: full range
               0.4, 0.4, 0.4, 0.4};    // kernel 1: constant
  FilterImage img = render_filter_grid(*w);
  REQUIRE(img.channels == 1);
  REQUIRE(img.width == 2 * 2 + 1);
  // kernel 0 occupies columns 0..1
  REQUIRE(img.pixels[0] == 0);
  REQUIRE(img.pixels[1] == 255);
  REQUIRE(img.pixels[std::size_t(img.width)] == 64);
  REQUIRE(img.pixels[std::size_t(img.width) + 1] == 191);
  // kernel 1 renders mid-gray everywhere
  REQUIRE(img.pixels[3] == 128);
  REQUIRE(img.pixels[4] == 128);
  REQUIRE(img.pixels[std::size_t(img.width) + 3] == 128);
}

TEST_CASE("scaling is per kernel, not global") {
  TensorPtr w = make_tensor({2, 1, 1, 2});
  w->values = {0.0, 10.0, 0.0, 0.1};
  FilterImage img = render_filter_grid(*w);
  // both kernels hit the full range despite very different magnitudes
  REQUIRE(img.pixels[0] == 0);
  REQUIRE(img.pixels[1] == 255);
  REQUIRE(img.pixels[3] == 0);
  REQUIRE(img.pixels[4] == 255);
}

TEST_CASE("pnm files round trip byte for byte") {
  TensorPtr rgb = kernels(7, 3, 3, 3, 5);
  FilterImage img = render_filter_grid(*rgb);
  const std::string p6 = temp_path("plab_filters_test.ppm");
  write_pnm(p6, img);
  FilterImage back = read_pnm(p6);
  REQUIRE(back.channels == 3);
  REQUIRE(back.width == img.width);
  REQUIRE(back.height == img.height);
  REQUIRE(back.pixels == img.pixels);

  TensorPtr gray = kernels(5, 1, 3, 3, 6);
  FilterImage gimg = render_filter_grid(*gray);
  const std::string p5 = temp_path("plab_filters_test.pgm");
  write_pnm(p5, gimg);
  FilterImage gback = read_pnm(p5);
  REQUIRE(gback.channels == 1);
  REQUIRE(gback.pixels == gimg.pixels);

  // writing the same grid twice yields identical files
  const std::string p6b = temp_path("plab_filters_test_b.ppm");
  write_pnm(p6b, img);
  std::ifstream f1(p6, std::ios::binary), f2(p6b, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  REQUIRE(b1 == b2);

  REQUIRE_THROWS(read_pnm(temp_path("plab_filters_missing.pgm")));
}

TEST_CASE("export finds the conv weight of a group") {
  ModelState st = init_model(build_allcnn({3, 32, 32}, 1.0 / 12, 10), 9);
  const std::string path = temp_path("plab_filters_export.ppm");
  FilterImage img = export_filters(st, 0, path);
  REQUIRE(img.channels == 3);  // rgb input kernels
  REQUIRE(std::filesystem::exists(path));
  FilterImage back = read_pnm(path);
  REQUIRE(back.pixels == img.pixels);

  REQUIRE_THROWS(export_filters(st, 99, temp_path("plab_none.ppm")));

  // fc models have no 4-d weights anywhere
  ModelState fc = init_model(build_fc({1, 4, 4}, {8}, 2), 3);
  REQUIRE_THROWS(export_filters(fc, 0, temp_path("plab_none2.ppm")));
}

TEST_CASE("checkerboard is the roughest sign pattern") {
  // enumerate all 3x3 +-1 patterns; the checkerboard must attain the maximum
  const double checker[9] = {1, -1, 1, -1, 1, -1, 1, -1, 1};
  TensorPtr w = make_tensor({1, 1, 3, 3});
  double best = -1, checker_val = -1;
  for (int mask = 0; mask < 512; ++mask) {
    for (int t = 0; t < 9; ++t)
      w->values[std::size_t(t)] = (mask >> t) & 1 ? 1.0 : -1.0;
    const double idx = smoothness_index(*w)[0];
    best = std::max(best, idx);
    bool is_checker = true;
    for (int t = 0; t < 9 && is_checker; ++t)
      is_checker = w->values[std::size_t(t)] == checker[t] ||
                   w->values[std::size_t(t)] == -checker[t];
    // only count the two exact checkerboards
    bool exact = true, exact_neg = true;
    for (int t = 0; t < 9; ++t) {
      exact = exact && w->values[std::size_t(t)] == checker[t];
      exact_neg = exact_neg && w->values[std::size_t(t)] == -checker[t];
    }
    if (exact || exact_neg) checker_val = idx;
  }
  REQUIRE(checker_val == Catch::Approx(best));
  REQUIRE(checker_val > 0);
}

TEST_CASE("blurring a kernel lowers its roughness") {
  TensorPtr w = make_tensor({1, 1, 8, 8});
  Rng rng(derive_seed(4, "rough"));
  for (double& v : w->values) v = rng.uniform(-1, 1);
  const double before = smoothness_index(*w)[0];

  // 3x3 box smoothing with edge clamping
  TensorPtr sm = make_tensor({1, 1, 8, 8});
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      double s = 0;
      int n = 0;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const int y = i + di, x = j + dj;
          if (y < 0 || y >= 8 || x < 0 || x >= 8) continue;
          s += w->values[std::size_t(y) * 8 + x];
          ++n;
        }
      sm->values[std::size_t(i) * 8 + j] = s / n;
    }
  const double after = smoothness_index(*sm)[0];
  REQUIRE(after < before);
}

TEST_CASE("degenerate kernels report zero roughness") {
  TensorPtr c = make_tensor({1, 2, 3, 3});
  for (double& v : c->values) v = 0.7;
  REQUIRE(smoothness_index(*c)[0] == 0.0);

  TensorPtr one = make_tensor({2, 1, 1, 1});
  one->values = {0.5, -0.5};
  const std::vector<double> idx = smoothness_index(*one);
  REQUIRE(idx[0] == 0.0);
  REQUIRE(idx[1] == 0.0);

  TensorPtr bad = make_tensor({2, 3});
  REQUIRE_THROWS(smoothness_index(*bad));
}
