#include <cmath>
#include <map>

#include "doctest.h"
#include "deepwaste/errors.hpp"
#include "deepwaste/imaging.hpp"
#include "image_fixtures.hpp"

using namespace deepwaste;

namespace {

ImageRGB8 random_image(std::size_t w, std::size_t h, Rng& rng) {
  ImageRGB8 img(w, h);
  for (std::size_t i = 0; i < w * h * 3; ++i) img.raw()[i] = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

// Pixel (r, g, b) = (x, y, 7) so positions can be read back after transforms.
ImageRGB8 coordinate_image(std::size_t w, std::size_t h) {
  ImageRGB8 img(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      img.at(x, y, 0) = static_cast<std::uint8_t>(x);
      img.at(x, y, 1) = static_cast<std::uint8_t>(y);
      img.at(x, y, 2) = 7;
    }
  }
  return img;
}

template <std::size_t N>
std::span<const std::uint8_t> bytes(const std::uint8_t (&a)[N]) {
  return {a, N};
}

// Fixture shapes: odd and even sides, square and not.
const std::pair<std::size_t, std::size_t> kShapes[] = {{1, 1}, {1, 2}, {2, 1}, {3, 5}, {4, 4}, {7, 2}, {6, 9}};

}  // namespace

TEST_CASE("image buffer invariants") {
  CHECK_THROWS_AS(ImageRGB8(0, 3), InvalidArgument);
  CHECK_THROWS_AS(ImageRGB8(2, 2, std::vector<std::uint8_t>(11)), InvalidArgument);
  const ImageRGB8 img(3, 2, 9);
  CHECK(img.pixels().size() == 18);
}

TEST_CASE("decode known png fixtures") {
  const ImageRGB8 red = decode(bytes(fixtures::kRedPng));
  REQUIRE(red.width() == 1);
  REQUIRE(red.height() == 1);
  CHECK(red.pixels() == std::vector<std::uint8_t>{255, 0, 0});

  const ImageRGB8 rgba = decode(bytes(fixtures::kRgbaPng), ImageFormat::kPng);
  REQUIRE(rgba.width() == 2);
  // alpha dropped, colour kept even where alpha was zero
  CHECK(rgba.pixels() == std::vector<std::uint8_t>{10, 20, 30, 40, 50, 60});

  const ImageRGB8 gray = decode(bytes(fixtures::kGrayPng));
  CHECK(gray.pixels() == std::vector<std::uint8_t>{7, 7, 7});
}

TEST_CASE("decode grayscale jpeg replicates channels") {
  const ImageRGB8 img = decode(bytes(fixtures::kGrayJpeg));
  REQUIRE(img.width() == 8);
  REQUIRE(img.height() == 8);
  for (std::size_t i = 0; i < img.pixels().size(); i += 3) {
    CHECK(img.raw()[i] == img.raw()[i + 1]);
    CHECK(img.raw()[i] == img.raw()[i + 2]);
    CHECK(std::abs(int(img.raw()[i]) - 128) <= 1);
  }
}

TEST_CASE("format sniffing and mismatches") {
  CHECK(sniff_format(bytes(fixtures::kRedPng)) == ImageFormat::kPng);
  CHECK(sniff_format(bytes(fixtures::kGrayJpeg)) == ImageFormat::kJpeg);
  CHECK_FALSE(sniff_format(std::span<const std::uint8_t>{}).has_value());
  CHECK_THROWS_AS(decode(bytes(fixtures::kRedPng), ImageFormat::kJpeg), DecodeError);
  CHECK_THROWS_AS(decode(std::string_view("GIF89a....")), DecodeError);
  CHECK_THROWS_AS(decode(std::string_view("")), DecodeError);
}

TEST_CASE("truncated streams fail to decode") {
  Rng rng(1);
  const ImageRGB8 img = random_image(32, 24, rng);
  for (const auto& encoded : {encode_png(img), encode_jpeg(img)}) {
    for (std::size_t keep : {encoded.size() - 1, encoded.size() / 2, std::size_t{12}}) {
      const std::span<const std::uint8_t> cut(encoded.data(), keep);
      CHECK_THROWS_AS(decode(cut), DecodeError);
    }
  }
  const std::span<const std::uint8_t> red = bytes(fixtures::kRedPng);
  CHECK_THROWS_AS(decode(red.first(red.size() - 13)), DecodeError);
}

TEST_CASE("corrupt png data fails") {
  std::vector<std::uint8_t> bad(std::begin(fixtures::kRedPng), std::end(fixtures::kRedPng));
  bad[45] ^= 0xff;  // inside IDAT
  CHECK_THROWS_AS(decode(bad), DecodeError);
}

TEST_CASE("png round trip is lossless") {
  Rng rng(2);
  for (auto [w, h] : kShapes) {
    const ImageRGB8 img = random_image(w, h, rng);
    CHECK(decode(encode_png(img)) == img);
  }
}

TEST_CASE("jpeg round trip is close") {
  ImageRGB8 img(16, 16);
  for (std::size_t y = 0; y < 16; ++y) {
    for (std::size_t x = 0; x < 16; ++x) {
      img.at(x, y, 0) = static_cast<std::uint8_t>(x * 16);
      img.at(x, y, 1) = static_cast<std::uint8_t>(y * 16);
      img.at(x, y, 2) = 100;
    }
  }
  const ImageRGB8 back = decode(encode_jpeg(img, 95));
  REQUIRE(back.width() == 16);
  double err = 0.0;
  for (std::size_t i = 0; i < img.pixels().size(); ++i) err += std::abs(int(img.raw()[i]) - int(back.raw()[i]));
  CHECK(err / static_cast<double>(img.pixels().size()) < 4.0);
}

TEST_CASE("resize identity and constant invariance") {
  Rng rng(3);
  const ImageRGB8 img = random_image(5, 7, rng);
  CHECK(resize_bilinear(img, 5, 7) == img);
  const ImageRGB8 flat(9, 4, 77);
  CHECK(resize_bilinear(flat, 3, 13) == ImageRGB8(3, 13, 77));
  CHECK(resize_bilinear(flat, 20, 1) == ImageRGB8(20, 1, 77));
  CHECK_THROWS_AS(resize_bilinear(img, 0, 4), InvalidArgument);
}

TEST_CASE("resize 2x2 to 4x4 matches the half-pixel formula") {
  ImageRGB8 img(2, 2);
  const std::uint8_t v[2][2] = {{0, 100}, {200, 40}};
  for (std::size_t y = 0; y < 2; ++y) {
    for (std::size_t x = 0; x < 2; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>(v[y][x] + c);
    }
  }
  const ImageRGB8 out = resize_bilinear(img, 4, 4);
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      // source coordinate, clamped to the pixel-centre range
      const double sx = std::clamp((x + 0.5) * 0.5 - 0.5, 0.0, 1.0);
      const double sy = std::clamp((y + 0.5) * 0.5 - 0.5, 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double expect = (1 - sy) * ((1 - sx) * (v[0][0] + c) + sx * (v[0][1] + c)) +
                              sy * ((1 - sx) * (v[1][0] + c) + sx * (v[1][1] + c));
        CHECK(out.at(x, y, c) == static_cast<int>(std::floor(expect + 0.5)));
      }
    }
  }
  // corners stay put, interior is the 1:3 blend
  CHECK(out.at(0, 0, 0) == 0);
  CHECK(out.at(3, 3, 0) == 40);
  CHECK(out.at(1, 0, 0) == 25);
}

TEST_CASE("crops") {
  const ImageRGB8 img = coordinate_image(4, 4);
  CHECK(center_crop(img, 4, 4) == img);
  const ImageRGB8 c = center_crop(img, 2, 2);
  REQUIRE(c.width() == 2);
  for (std::size_t y = 0; y < 2; ++y) {
    for (std::size_t x = 0; x < 2; ++x) {
      CHECK(c.at(x, y, 0) == x + 1);
      CHECK(c.at(x, y, 1) == y + 1);
    }
  }
  CHECK_THROWS_AS(center_crop(img, 5, 2), InvalidArgument);
  CHECK_THROWS_AS(crop(img, 3, 0, 2, 2), InvalidArgument);
}

TEST_CASE("random crop is seeded and stays inside") {
  const ImageRGB8 img = coordinate_image(40, 25);
  AugmentationPolicy policy;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng a(seed), b(seed);
    const ImageRGB8 ca = random_crop(img, policy, a);
    CHECK(ca == random_crop(img, policy, b));
    CHECK(ca.width() == ca.height());
    CHECK(ca.width() >= 20);  // 0.8 * 25
    CHECK(ca.width() <= 25);
    // contiguous: coordinates increase by one along each axis
    const std::size_t x0 = ca.at(0, 0, 0), y0 = ca.at(0, 0, 1);
    CHECK(ca.at(ca.width() - 1, ca.height() - 1, 0) == x0 + ca.width() - 1);
    CHECK(ca.at(ca.width() - 1, ca.height() - 1, 1) == y0 + ca.height() - 1);
  }
  AugmentationPolicy full;
  full.crop_scale_min = full.crop_scale_max = 1.0;
  Rng rng(1);
  const ImageRGB8 square = coordinate_image(6, 6);
  CHECK(random_crop(square, full, rng) == square);
}

TEST_CASE("rotate90 coordinate map") {
  // 1 wide, 2 tall: [A; B]
  ImageRGB8 col(1, 2);
  col.at(0, 0, 0) = 'A';
  col.at(0, 1, 0) = 'B';
  const ImageRGB8 r = rotate90(col, 1);
  REQUIRE(r.width() == 2);
  REQUIRE(r.height() == 1);
  CHECK(r.at(0, 0, 0) == 'A');
  CHECK(r.at(1, 0, 0) == 'B');

  for (auto [w, h] : kShapes) {
    const ImageRGB8 img = coordinate_image(w, h);
    const ImageRGB8 q = rotate90(img, 1);
    REQUIRE(q.width() == h);
    REQUIRE(q.height() == w);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        CHECK(q.at(y, w - 1 - x, 0) == x);
        CHECK(q.at(y, w - 1 - x, 1) == y);
      }
    }
    CHECK(rotate90(img, 0) == img);
    CHECK(rotate90(img, 2) == rotate90(rotate90(img, 1), 1));
    CHECK(rotate90(img, 3) == rotate90(rotate90(img, 2), 1));
    CHECK(rotate90(img, -1) == rotate90(img, 3));
  }
}

TEST_CASE("rotation and flip group laws") {
  Rng rng(4);
  for (auto [w, h] : kShapes) {
    const ImageRGB8 img = random_image(w, h, rng);
    ImageRGB8 r = img;
    for (int i = 0; i < 4; ++i) r = rotate90(r, 1);
    CHECK(r == img);
    CHECK(flip_horizontal(flip_horizontal(img)) == img);
    CHECK(rotate90(flip_horizontal(img), 2) == flip_horizontal(rotate90(img, 2)));
    // a reflection conjugates a rotation to its inverse
    CHECK(flip_horizontal(rotate90(flip_horizontal(img), 1)) == rotate90(img, 3));
  }
}

TEST_CASE("flip examples") {
  ImageRGB8 pair(2, 1, std::vector<std::uint8_t>{1, 2, 3, 4, 5, 6});
  CHECK(flip_horizontal(pair) == ImageRGB8(2, 1, std::vector<std::uint8_t>{4, 5, 6, 1, 2, 3}));
  ImageRGB8 sym(3, 1, std::vector<std::uint8_t>{9, 9, 9, 1, 1, 1, 9, 9, 9});
  CHECK(flip_horizontal(sym) == sym);
}

TEST_CASE("gaussian kernel") {
  for (double sigma : {0.3, 0.5, 1.0, 1.37, 1.5, 4.0}) {
    const auto k = gaussian_kernel(sigma);
    CHECK(k.size() == 2 * static_cast<std::size_t>(std::ceil(3 * sigma)) + 1);
    double sum = 0.0;
    for (double v : k) sum += v;
    CHECK(std::fabs(sum - 1.0) <= 1e-6);
    for (std::size_t i = 0; i < k.size(); ++i) CHECK(k[i] == doctest::Approx(k[k.size() - 1 - i]));
  }
  CHECK_THROWS_AS(gaussian_kernel(0.0), InvalidArgument);
  CHECK_THROWS_AS(gaussian_kernel(-1.0), InvalidArgument);
}

TEST_CASE("blur preserves constants") {
  const ImageRGB8 flat(7, 5, 123);
  CHECK(gaussian_blur(flat, 1.2) == flat);
  const ImageRGB8 tiny(1, 1, 50);
  CHECK(gaussian_blur(tiny, 3.0) == tiny);
}

TEST_CASE("blur impulse response is the kernel outer product") {
  const double sigma = 1.0;
  const auto k = gaussian_kernel(sigma);
  const std::size_t r = k.size() / 2;
  const std::size_t n = 2 * r + 5;
  ImageRGB8 img(n, n, 0);
  const std::size_t cx = n / 2;
  for (std::size_t c = 0; c < 3; ++c) img.at(cx, cx, c) = 255;
  const ImageRGB8 out = gaussian_blur(img, sigma);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const long dx = static_cast<long>(x) - static_cast<long>(cx);
      const long dy = static_cast<long>(y) - static_cast<long>(cx);
      double expect = 0.0;
      if (std::labs(dx) <= static_cast<long>(r) && std::labs(dy) <= static_cast<long>(r)) {
        expect = 255.0 * k[static_cast<std::size_t>(dx + static_cast<long>(r))] *
                 k[static_cast<std::size_t>(dy + static_cast<long>(r))];
      }
      CHECK(std::fabs(out.at(x, y, 1) - expect) <= 0.5 + 1e-9);
    }
  }
}

TEST_CASE("to_input_tensor normalization") {
  InputSpec raw;
  raw.height = 2;
  raw.width = 3;
  raw.mean = {0, 0, 0};
  raw.std = {1, 1, 1};
  const Tensor t = to_input_tensor(ImageRGB8(3, 2, 255), raw);
  CHECK(t.shape() == Shape{1, 3, 2, 3});
  for (float v : t.data()) CHECK(v == 1.0f);

  InputSpec imagenet;
  imagenet.height = imagenet.width = 4;
  ImageRGB8 white(4, 4, 255);
  const Tensor n = to_input_tensor(white, imagenet);
  CHECK(n.shape() == Shape{1, 3, 4, 4});
  CHECK(n.at(0, 0, 1, 1) == doctest::Approx((1.0 - 0.485) / 0.229).epsilon(1e-4));
  CHECK(std::fabs(n.at(0, 0, 0, 0) - 2.2489f) <= 1e-4f);
  CHECK(n.at(0, 2, 3, 3) == doctest::Approx((1.0 - 0.406) / 0.225).epsilon(1e-4));
}

TEST_CASE("to_input_tensor layout is CHW and resizes") {
  InputSpec spec;
  spec.height = 2;
  spec.width = 2;
  spec.mean = {0, 0, 0};
  spec.std = {1, 1, 1};
  ImageRGB8 img(2, 2, std::vector<std::uint8_t>{0, 51, 102, 153, 204, 255, 0, 0, 0, 255, 255, 255});
  const Tensor t = to_input_tensor(img, spec);
  CHECK(t.at(0, 0, 0, 1) == doctest::Approx(153 / 255.0));
  CHECK(t.at(0, 1, 0, 0) == doctest::Approx(51 / 255.0));
  CHECK(t.at(0, 2, 1, 1) == doctest::Approx(1.0));

  Rng rng(5);
  const ImageRGB8 big = random_image(50, 30, rng);
  InputSpec sized;
  sized.height = 17;
  sized.width = 11;
  const Tensor r = to_input_tensor(big, sized);
  CHECK(r.shape() == Shape{1, 3, 17, 11});
  CHECK(r.all_finite());
  CHECK(r == to_input_tensor(big, sized));

  const std::vector<ImageRGB8> imgs{big, random_image(9, 9, rng)};
  const Tensor b = to_input_batch(imgs, sized);
  CHECK(b.shape() == Shape{2, 3, 17, 11});
  CHECK(b.slice_batch(0) == r);
}

TEST_CASE("policy validation") {
  AugmentationPolicy p;
  CHECK_NOTHROW(p.validate());
  p.rotations = {};
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
  p = {};
  p.rotations = {45};
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
  p = {};
  p.flip_probability = 1.5;
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
  p = {};
  p.blur_sigma_min = 0.0;
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
  p = {};
  p.crop_scale_min = 0.9;
  p.crop_scale_max = 0.8;
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
}

TEST_CASE("degenerate policy is identity up to resize") {
  Rng rng(6);
  const ImageRGB8 img = random_image(12, 12, rng);
  const AugmentationPolicy same = AugmentationPolicy::identity(12, 12);
  for (std::uint64_t i = 0; i < 5; ++i) CHECK(augment(img, same, i) == img);
  const AugmentationPolicy smaller = AugmentationPolicy::identity(5, 7);
  CHECK(augment(img, smaller, 3) == resize_bilinear(img, 5, 7));
}

TEST_CASE("augmentation is keyed by seed and draw index") {
  Rng rng(7);
  const ImageRGB8 img = random_image(30, 20, rng);
  AugmentationPolicy p;
  p.output_width = p.output_height = 16;
  p.seed = 99;
  p.blur_probability = 0.5;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const ImageRGB8 a = augment(img, p, i);
    CHECK(a == augment(img, p, i));
    CHECK(a.width() == 16);
    CHECK(a.height() == 16);
  }
  // different keys give different streams
  std::size_t distinct = 0;
  for (std::uint64_t i = 0; i < 20; ++i) distinct += augment(img, p, i) != augment(img, p, i + 1000);
  CHECK(distinct >= 15);
  AugmentationPolicy q = p;
  q.seed = 100;
  CHECK(augment(img, p, 0) != augment(img, q, 0));
}

TEST_CASE("every rotation is drawn") {
  // four distinct pixels: each quarter turn gives a different pixel order
  AugmentationPolicy p = AugmentationPolicy::identity(2, 2);
  p.rotations = {0, 90, 180, 270};
  p.seed = 5;
  ImageRGB8 img(2, 2, std::vector<std::uint8_t>{10, 0, 0, 20, 0, 0, 30, 0, 0, 40, 0, 0});
  std::map<std::vector<std::uint8_t>, int> counts;
  for (std::uint64_t i = 0; i < 1000; ++i) ++counts[augment(img, p, i).pixels()];
  CHECK(counts.size() == 4);
  for (int k = 0; k < 4; ++k) CHECK(counts.count(rotate90(img, k).pixels()) == 1);
  for (const auto& [pixels, n] : counts) CHECK(n > 150);
}
