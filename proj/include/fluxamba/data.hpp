#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "fluxamba/tensor.hpp"

namespace flux {

struct Sample {
  Tensor image;  // [1,H,W] in [0,1]
  Tensor mask;   // [1,H,W] binary
  std::string id;
};

struct GenSpec {
  int count = 16;
  int size = 64;
  int strokes = 3;
  double thickness_min = 1.5, thickness_max = 3.5;
  double contrast_min = 0.25, contrast_max = 0.6;
  int craters = 2;
  double bg_scale = 16.0;      // base texture wavelength in pixels
  double bg_amplitude = 0.1;   // 0 gives a flat background
  uint64_t seed = 42;
};

namespace detail {

// Octave-summed value noise on a bilinear lattice.
inline std::vector<double> value_noise(int size, double scale, double amp,
                                       std::mt19937_64& rng) {
  std::vector<double> img(static_cast<size_t>(size) * size, 0.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int oct = 0; oct < 3; ++oct, scale /= 2, amp /= 2) {
    int cells = std::max(2, static_cast<int>(std::ceil(size / std::max(2.0, scale)))) + 1;
    std::vector<double> lat(static_cast<size_t>(cells) * cells);
    for (auto& v : lat) v = u(rng);
    double step = static_cast<double>(size) / (cells - 1);
    for (int h = 0; h < size; ++h)
      for (int w = 0; w < size; ++w) {
        double fy = h / step, fx = w / step;
        int y0 = std::min(static_cast<int>(fy), cells - 2);
        int x0 = std::min(static_cast<int>(fx), cells - 2);
        double ty = fy - y0, tx = fx - x0;
        double v = (1 - ty) * ((1 - tx) * lat[static_cast<size_t>(y0) * cells + x0] +
                               tx * lat[static_cast<size_t>(y0) * cells + x0 + 1]) +
                   ty * ((1 - tx) * lat[static_cast<size_t>(y0 + 1) * cells + x0] +
                         tx * lat[static_cast<size_t>(y0 + 1) * cells + x0 + 1]);
        img[static_cast<size_t>(h) * size + w] += amp * v;
      }
  }
  return img;
}

struct P2 {
  double x, y;
};

inline P2 bezier(const P2& a, const P2& b, const P2& c, const P2& d, double t) {
  double s = 1 - t;
  return {s * s * s * a.x + 3 * s * s * t * b.x + 3 * s * t * t * c.x + t * t * t * d.x,
          s * s * s * a.y + 3 * s * s * t * b.y + 3 * s * t * t * c.y + t * t * t * d.y};
}

inline double seg_dist(const P2& p, const P2& a, const P2& b) {
  double vx = b.x - a.x, vy = b.y - a.y;
  double len2 = vx * vx + vy * vy;
  double t = len2 == 0 ? 0 : ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2;
  t = std::min(1.0, std::max(0.0, t));
  double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

inline Sample generate_one(const GenSpec& spec, int index) {
  if (spec.size < 8) throw ConfigError("generate: size must be >= 8");
  if (spec.thickness_min > spec.thickness_max ||
      spec.contrast_min > spec.contrast_max)
    throw ConfigError("generate: invalid range");
  int S = spec.size;
  std::mt19937_64 rng(spec.seed * 1000003ull + static_cast<uint64_t>(index));
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  std::vector<double> img = detail::value_noise(S, spec.bg_scale,
                                                spec.bg_amplitude, rng);
  for (auto& v : img) v += 0.45;

  // crater distractors: bright rim, darkened bowl
  for (int k = 0; k < spec.craters; ++k) {
    double cx = u01(rng) * S, cy = u01(rng) * S;
    double r = (S / 16.0) + u01(rng) * (S / 16.0);
    for (int h = 0; h < S; ++h)
      for (int w = 0; w < S; ++w) {
        double d = std::hypot(h - cy, w - cx);
        double& v = img[static_cast<size_t>(h) * S + w];
        if (d < r) v -= 0.08 * (1.0 - d / r);
        else if (d < r + 1.5) v += 0.12 * (1.0 - (d - r) / 1.5);
      }
  }

  Tensor mask = Tensor::zeros({1, S, S}, DType::f64);
  for (int k = 0; k < spec.strokes; ++k) {
    detail::P2 cp[4];
    for (auto& p : cp) p = {u01(rng) * S, u01(rng) * S};
    double th = spec.thickness_min +
                u01(rng) * (spec.thickness_max - spec.thickness_min);
    double contrast = spec.contrast_min +
                      u01(rng) * (spec.contrast_max - spec.contrast_min);
    std::vector<detail::P2> poly;
    for (int i = 0; i <= 48; ++i)
      poly.push_back(detail::bezier(cp[0], cp[1], cp[2], cp[3], i / 48.0));
    for (int h = 0; h < S; ++h)
      for (int w = 0; w < S; ++w) {
        detail::P2 p{static_cast<double>(w), static_cast<double>(h)};
        double d = 1e300;
        for (size_t i = 0; i + 1 < poly.size(); ++i)
          d = std::min(d, detail::seg_dist(p, poly[i], poly[i + 1]));
        size_t idx = static_cast<size_t>(h) * S + w;
        if (d <= th / 2) {
          mask.store(idx, 1.0);  // hard support, no gray values
          img[idx] += contrast;
        } else if (d <= th / 2 + 1.0) {
          img[idx] += contrast * (th / 2 + 1.0 - d);  // one-pixel soft edge
        }
      }
  }

  Sample s;
  s.image = Tensor::zeros({1, S, S}, DType::f64);
  for (size_t i = 0; i < img.size(); ++i)
    s.image.store(i, std::min(1.0, std::max(0.0, img[i])));
  s.mask = mask;
  s.id = "sample_" + std::to_string(index);
  return s;
}

inline std::vector<Sample> generate(const GenSpec& spec) {
  std::vector<Sample> out;
  for (int i = 0; i < spec.count; ++i) out.push_back(generate_one(spec, i));
  return out;
}

// x + sigma*N(0,1), clamped to [0,1]. Explicit Box-Muller so the stream is
// identical across platforms.
inline Tensor add_gaussian_noise(const Tensor& x, double sigma, uint64_t seed) {
  if (sigma < 0) throw ConfigError("add_gaussian_noise: sigma >= 0 required");
  Tensor out = x.like();
  if (sigma == 0.0) {
    for (size_t i = 0; i < x.size(); ++i) out.store(i, x.at(i));
    return out;
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double spare = 0.0;
  bool has_spare = false;
  for (size_t i = 0; i < x.size(); ++i) {
    double n;
    if (has_spare) {
      n = spare;
      has_spare = false;
    } else {
      double a = 0.0;
      while (a == 0.0) a = u(rng);
      double b = u(rng);
      double r = std::sqrt(-2.0 * std::log(a));
      n = r * std::cos(2.0 * M_PI * b);
      spare = r * std::sin(2.0 * M_PI * b);
      has_spare = true;
    }
    out.store(i, std::min(1.0, std::max(0.0, x.at(i) + sigma * n)));
  }
  return out;
}

namespace detail {
inline Tensor flip_rot(const Tensor& t, bool hflip, bool vflip, int krot) {
  int H = t.shape[1], W = t.shape[2];
  Tensor cur = t;
  auto apply = [&](int OH, int OW, auto coord) {
    Tensor out({1, OH, OW}, cur.dtype);
    for (int h = 0; h < OH; ++h)
      for (int w = 0; w < OW; ++w) {
        auto [sh, sw] = coord(h, w);
        out.store(static_cast<size_t>(h) * OW + w,
                  cur.at(static_cast<size_t>(sh) * cur.shape[2] + sw));
      }
    return out;
  };
  if (hflip)
    cur = apply(H, W, [&](int h, int w) { return std::pair(h, W - 1 - w); });
  if (vflip)
    cur = apply(H, W, [&](int h, int w) { return std::pair(H - 1 - h, w); });
  for (int k = 0; k < krot; ++k) {
    int CH = cur.shape[1], CW = cur.shape[2];
    // 90 degrees counter-clockwise: out(h,w) = in(w, CW-1-h) on [CW,CH]
    cur = apply(CW, CH, [&](int h, int w) { return std::pair(w, CW - 1 - h); });
  }
  return cur;
}
}  // namespace detail

inline Sample augment(const Sample& s, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  bool hflip = u(rng) < 0.5;
  bool vflip = u(rng) < 0.5;
  int krot = static_cast<int>(u(rng) * 4.0) % 4;
  Sample out;
  out.image = detail::flip_rot(s.image, hflip, vflip, krot);
  out.mask = detail::flip_rot(s.mask, hflip, vflip, krot);
  out.id = s.id;
  return out;
}

// ---- PGM P5 I/O ----

inline void write_pgm(const Tensor& t, const std::string& path) {
  if (t.shape.size() != 3 || t.shape[0] != 1)
    throw ShapeError("write_pgm: [1,H,W] required");
  int H = t.shape[1], W = t.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_pgm: cannot open " + path);
  f << "P5\n" << W << " " << H << "\n255\n";
  for (size_t i = 0; i < t.size(); ++i) {
    double v = std::min(1.0, std::max(0.0, t.at(i)));
    unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
    f.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!f) throw DataError("write_pgm: short write to " + path);
}

inline Tensor read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_pgm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5")
    throw DataError("read_pgm: unsupported magic '" + magic + "' in " + path);
  auto next_token = [&]() {
    std::string tok;
    while (f >> tok) {
      if (tok[0] == '#') {
        std::string rest;
        std::getline(f, rest);
        continue;
      }
      return tok;
    }
    throw DataError("read_pgm: truncated header in " + path);
  };
  int W = std::stoi(next_token());
  int H = std::stoi(next_token());
  int maxval = std::stoi(next_token());
  if (maxval != 255)
    throw DataError("read_pgm: maxval " + std::to_string(maxval) +
                    " unsupported (need 255) in " + path);
  f.get();  // single whitespace after maxval
  std::vector<char> buf(static_cast<size_t>(W) * H);
  f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size()))
    throw DataError("read_pgm: truncated payload in " + path);
  Tensor t({1, H, W}, DType::f64);
  for (size_t i = 0; i < buf.size(); ++i)
    t.store(i, static_cast<unsigned char>(buf[i]) / 255.0);
  return t;
}

// ---- dataset directory layout: images/ + masks/ + split lists ----

struct Splits {
  std::vector<std::string> train, val, test;
};

// 8:1:1 by position.
inline Splits split_ids(const std::vector<Sample>& samples) {
  Splits sp;
  for (size_t i = 0; i < samples.size(); ++i) {
    size_t r = i % 10;
    (r < 8 ? sp.train : r == 8 ? sp.val : sp.test).push_back(samples[i].id);
  }
  return sp;
}

inline void save_dataset(const std::vector<Sample>& samples,
                         const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  for (const auto& s : samples) {
    write_pgm(s.image, (fs::path(dir) / "images" / (s.id + ".pgm")).string());
    Tensor m = s.mask.like();
    for (size_t i = 0; i < s.mask.size(); ++i)
      m.store(i, s.mask.at(i) >= 0.5 ? 1.0 : 0.0);
    write_pgm(m, (fs::path(dir) / "masks" / (s.id + ".pgm")).string());
  }
  Splits sp = split_ids(samples);
  auto dump = [&](const std::vector<std::string>& ids, const char* name) {
    std::ofstream f((fs::path(dir) / name).string());
    for (const auto& id : ids) f << id << "\n";
  };
  dump(sp.train, "train.txt");
  dump(sp.val, "val.txt");
  dump(sp.test, "test.txt");
}

inline std::vector<Sample> load_dataset(const std::string& dir,
                                        const std::string& split) {
  namespace fs = std::filesystem;
  std::ifstream list((fs::path(dir) / (split + ".txt")).string());
  if (!list) throw DataError("load_dataset: missing split list " + split);
  std::vector<Sample> out;
  std::string id;
  while (std::getline(list, id)) {
    if (id.empty()) continue;
    Sample s;
    s.id = id;
    s.image = read_pgm((fs::path(dir) / "images" / (id + ".pgm")).string());
    Tensor m = read_pgm((fs::path(dir) / "masks" / (id + ".pgm")).string());
    s.mask = m.like();
    for (size_t i = 0; i < m.size(); ++i)
      s.mask.store(i, m.at(i) >= 0.5 ? 1.0 : 0.0);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace flux
