#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "fluxamba/data.hpp"
#include "test_util.hpp"

using namespace flux;
using testutil::max_abs_diff;

TEST_CASE("generator") {
  GenSpec spec;
  spec.count = 4;
  spec.size = 32;
  SECTION("deterministic per seed, bit level") {
    auto a = generate(spec);
    auto b = generate(spec);
    REQUIRE(a.size() == 4);
    for (size_t i = 0; i < a.size(); ++i) {
      REQUIRE(max_abs_diff(a[i].image, b[i].image) == 0.0);
      REQUIRE(max_abs_diff(a[i].mask, b[i].mask) == 0.0);
      REQUIRE(a[i].id == b[i].id);
    }
    spec.seed = 43;
    auto c = generate(spec);
    REQUIRE(max_abs_diff(a[0].image, c[0].image) > 0.0);
  }
  SECTION("masks binary, images in range, shapes match") {
    for (const auto& s : generate(spec)) {
      REQUIRE(s.image.shape == Shape{1, 32, 32});
      REQUIRE(s.mask.shape == s.image.shape);
      for (size_t i = 0; i < s.mask.size(); ++i) {
        REQUIRE((s.mask.at(i) == 0.0 || s.mask.at(i) == 1.0));
        REQUIRE(s.image.at(i) >= 0.0);
        REQUIRE(s.image.at(i) <= 1.0);
      }
    }
  }
  SECTION("zero strokes -> empty masks") {
    spec.strokes = 0;
    for (const auto& s : generate(spec))
      for (size_t i = 0; i < s.mask.size(); ++i) REQUIRE(s.mask.at(i) == 0.0);
  }
  SECTION("max contrast on flat background is threshold-separable") {
    spec.bg_amplitude = 0.0;
    spec.craters = 0;
    spec.contrast_min = spec.contrast_max = 0.5;
    for (const auto& s : generate(spec)) {
      // background sits at 0.45; stroke support at >= 0.95 (pre-clamp)
      for (size_t i = 0; i < s.mask.size(); ++i) {
        if (s.mask.at(i) == 1.0) REQUIRE(s.image.at(i) >= 0.94);
      }
    }
  }
  SECTION("degenerate size rejected") {
    spec.size = 4;
    REQUIRE_THROWS_AS(generate(spec), ConfigError);
  }
}

TEST_CASE("gaussian noise") {
  std::mt19937_64 rng(51);
  Tensor x = testutil::random_tensor({1, 20, 20}, rng, DType::f64, 0.2, 0.8);
  SECTION("sigma 0 is the identity") {
    Tensor y = add_gaussian_noise(x, 0.0, 7);
    REQUIRE(max_abs_diff(x, y) == 0.0);
  }
  SECTION("output clamped to [0,1], shape preserved") {
    Tensor y = add_gaussian_noise(x, 0.5, 7);
    REQUIRE(y.shape == x.shape);
    for (size_t i = 0; i < y.size(); ++i) {
      REQUIRE(y.at(i) >= 0.0);
      REQUIRE(y.at(i) <= 1.0);
    }
  }
  SECTION("seeded: same seed same noise, different seed different") {
    Tensor a = add_gaussian_noise(x, 0.1, 7);
    Tensor b = add_gaussian_noise(x, 0.1, 7);
    Tensor c = add_gaussian_noise(x, 0.1, 8);
    REQUIRE(max_abs_diff(a, b) == 0.0);
    REQUIRE(max_abs_diff(a, c) > 0.0);
  }
  SECTION("empirical stdev within 2% of sigma on 1e6 pixels") {
    Tensor mid = Tensor::full({1, 1000, 1000}, 0.5, DType::f64);
    Tensor y = add_gaussian_noise(mid, 0.1, 9);
    // 0.5 +- 0.1 noise essentially never clamps, so measure directly
    double mean = 0;
    for (size_t i = 0; i < y.size(); ++i) mean += y.at(i) - 0.5;
    mean /= y.size();
    double var = 0;
    for (size_t i = 0; i < y.size(); ++i) {
      double d = y.at(i) - 0.5 - mean;
      var += d * d;
    }
    var /= y.size();
    REQUIRE(std::sqrt(var) == Catch::Approx(0.1).epsilon(0.02));
  }
}

TEST_CASE("augment") {
  GenSpec spec;
  spec.count = 1;
  spec.size = 16;
  Sample s = generate(spec)[0];
  SECTION("image and mask receive the same transform") {
    // tag: put a unique ramp in the image and copy into the mask slots
    Sample tagged;
    tagged.id = "t";
    tagged.image = Tensor::zeros({1, 4, 4}, DType::f64);
    tagged.mask = Tensor::zeros({1, 4, 4}, DType::f64);
    for (int i = 0; i < 16; ++i) {
      tagged.image.store(i, i / 16.0);
      tagged.mask.store(i, i / 16.0);  // not binary, but tracks coordinates
    }
    for (uint64_t seed = 0; seed < 8; ++seed) {
      Sample a = augment(tagged, seed);
      REQUIRE(max_abs_diff(a.image, a.mask) == 0.0);
    }
  }
  SECTION("some seed yields identity, transforms preserve content multiset") {
    bool saw_identity = false;
    for (uint64_t seed = 0; seed < 64 && !saw_identity; ++seed) {
      Sample a = augment(s, seed);
      if (a.image.shape == s.image.shape &&
          max_abs_diff(a.image, s.image) == 0.0)
        saw_identity = true;
    }
    REQUIRE(saw_identity);
    Sample a = augment(s, 3);
    std::vector<double> va(a.image.data()), vs(s.image.data());
    std::sort(va.begin(), va.end());
    std::sort(vs.begin(), vs.end());
    REQUIRE(va == vs);
  }
  SECTION("double h-flip is the identity") {
    Tensor once = detail::flip_rot(s.image, true, false, 0);
    Tensor twice = detail::flip_rot(once, true, false, 0);
    REQUIRE(max_abs_diff(twice, s.image) == 0.0);
  }
  SECTION("four quarter-rotations are the identity") {
    Tensor r = detail::flip_rot(s.image, false, false, 4);
    REQUIRE(max_abs_diff(r, s.image) == 0.0);
  }
}

TEST_CASE("pgm io") {
  namespace fs = std::filesystem;
  fs::path tmp = fs::temp_directory_path() / "flux_pgm_test";
  fs::create_directories(tmp);
  SECTION("round trip exact for 8-bit data") {
    Tensor t = Tensor::zeros({1, 3, 5}, DType::f64);
    for (size_t i = 0; i < t.size(); ++i) t.store(i, (i * 17 % 256) / 255.0);
    std::string p = (tmp / "rt.pgm").string();
    write_pgm(t, p);
    Tensor back = read_pgm(p);
    REQUIRE(back.shape == t.shape);
    REQUIRE(max_abs_diff(back, t) == 0.0);
  }
  SECTION("known byte payload decodes to expected values") {
    std::string p = (tmp / "bytes.pgm").string();
    {
      std::ofstream f(p, std::ios::binary);
      f << "P5\n# a comment\n2 2\n255\n";
      unsigned char bytes[4] = {0, 255, 128, 64};
      f.write(reinterpret_cast<const char*>(bytes), 4);
    }
    Tensor t = read_pgm(p);
    REQUIRE(t.shape == Shape{1, 2, 2});
    REQUIRE(t.at(0) == 0.0);
    REQUIRE(t.at(1) == 1.0);
    REQUIRE(t.at(2) == Catch::Approx(128.0 / 255.0).margin(1e-12));
    REQUIRE(t.at(3) == Catch::Approx(64.0 / 255.0).margin(1e-12));
  }
  SECTION("distinct failure modes") {
    std::string ascii = (tmp / "ascii.pgm").string();
    { std::ofstream f(ascii); f << "P2\n2 2\n255\n0 1 2 3\n"; }
    REQUIRE_THROWS_WITH(read_pgm(ascii),
                        Catch::Matchers::ContainsSubstring("magic"));
    std::string badmax = (tmp / "badmax.pgm").string();
    { std::ofstream f(badmax, std::ios::binary); f << "P5\n2 2\n65535\n"; f << "xxxxxxxx"; }
    REQUIRE_THROWS_WITH(read_pgm(badmax),
                        Catch::Matchers::ContainsSubstring("maxval"));
    std::string trunc = (tmp / "trunc.pgm").string();
    { std::ofstream f(trunc, std::ios::binary); f << "P5\n4 4\n255\n"; f << "ab"; }
    REQUIRE_THROWS_WITH(read_pgm(trunc),
                        Catch::Matchers::ContainsSubstring("truncated"));
    REQUIRE_THROWS_AS(read_pgm((tmp / "missing.pgm").string()), DataError);
  }
}

TEST_CASE("dataset directory round trip and splits") {
  namespace fs = std::filesystem;
  fs::path tmp = fs::temp_directory_path() / "flux_ds_test";
  fs::remove_all(tmp);
  GenSpec spec;
  spec.count = 10;
  spec.size = 16;
  auto samples = generate(spec);
  save_dataset(samples, tmp.string());

  SECTION("8/1/1 split by position") {
    Splits sp = split_ids(samples);
    REQUIRE(sp.train.size() == 8);
    REQUIRE(sp.val.size() == 1);
    REQUIRE(sp.test.size() == 1);
  }
  SECTION("load returns quantized-equal images and exact masks") {
    auto train = load_dataset(tmp.string(), "train");
    REQUIRE(train.size() == 8);
    for (size_t i = 0; i < train.size(); ++i) {
      REQUIRE(train[i].id == samples[i].id);
      REQUIRE(max_abs_diff(train[i].mask, samples[i].mask) == 0.0);
      // images pass through 8-bit quantization
      REQUIRE(max_abs_diff(train[i].image, samples[i].image) <= 0.5 / 255.0);
    }
    REQUIRE(load_dataset(tmp.string(), "val").size() == 1);
    REQUIRE_THROWS_AS(load_dataset(tmp.string(), "nope"), DataError);
  }
}
