#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fluxamba/model.hpp"
#include "test_util.hpp"

using namespace flux;
using testutil::max_abs_diff;

namespace {

ModelConfig micro_cfg(DType dt = DType::f32) {
  ModelConfig c = ModelConfig::variant("micro");
  c.dtype = dt;
  return c;
}

// Structurally independent recount: walks the per-module params() lists
// instead of the named-tensor enumeration used by count_params.
uint64_t recount_params(Model& m) {
  uint64_t n = 0;
  auto add = [&](const std::vector<Tensor*>& ps) {
    for (Tensor* t : ps) n += t->size();
  };
  for (Tensor* t : {&m.stem.w1, &m.stem.b1, &m.stem.bn_g, &m.stem.bn_b,
                    &m.stem.w2, &m.stem.b2})
    n += t->size();
  for (auto& d : m.downs) n += d.w.size() + d.b.size();
  for (size_t s = 0; s < m.stages.size(); ++s) {
    SfbConfig bc = m.block_config(static_cast<int>(s) + 1);
    for (auto& b : m.stages[s]) add(b.params(bc));
  }
  add(m.head.params());
  return n;
}

std::vector<Sample> tiny_dataset(int count, int size) {
  GenSpec spec;
  spec.count = count;
  spec.size = size;
  spec.craters = 1;
  return generate(spec);
}

}  // namespace

TEST_CASE("variants and parameter counts") {
  SECTION("depth schedules") {
    REQUIRE(ModelConfig::variant("tiny").depths == std::vector<int>{1, 1, 2, 1});
    REQUIRE(ModelConfig::variant("small").depths == std::vector<int>{2, 2, 3, 2});
    REQUIRE(ModelConfig::variant("base").depths == std::vector<int>{2, 2, 4, 2});
    REQUIRE(ModelConfig::variant("large").depths == std::vector<int>{2, 3, 6, 3});
    REQUIRE_THROWS_AS(ModelConfig::variant("huge"), ConfigError);
  }
  SECTION("params strictly increasing tiny < small < base < large") {
    uint64_t prev = 0;
    for (const char* v : {"tiny", "small", "base", "large"}) {
      Model m = build(ModelConfig::variant(v));
      uint64_t p = count_params(m);
      REQUIRE(p > prev);
      prev = p;
    }
  }
  SECTION("count matches an independent enumeration") {
    Model m = build(micro_cfg());
    REQUIRE(count_params(m) == recount_params(m));
    ModelConfig c = micro_cfg();
    c.enable_asg = false;
    c.enable_hffu = false;
    Model m2 = build(c);
    REQUIRE(count_params(m2) == recount_params(m2));
    REQUIRE(count_params(m2) < count_params(m));
  }
  SECTION("named tensors are unique and running stats are frozen") {
    Model m = build(micro_cfg());
    std::set<std::string> seen;
    for (auto& nt : named_tensors(m)) {
      REQUIRE(seen.insert(nt.name).second);
      bool is_stat = nt.name.find("_rm") != std::string::npos ||
                     nt.name.find("_rv") != std::string::npos;
      REQUIRE(nt.trainable == !is_stat);
    }
  }
}

TEST_CASE("build determinism") {
  ModelConfig c = micro_cfg();
  Model a = build(c), b = build(c);
  auto na = named_tensors(a), nb = named_tensors(b);
  REQUIRE(na.size() == nb.size());
  for (size_t i = 0; i < na.size(); ++i) {
    REQUIRE(na[i].name == nb[i].name);
    REQUIRE(max_abs_diff(*na[i].t, *nb[i].t) == 0.0);
  }
  c.seed = 7;
  Model d = build(c);
  REQUIRE(max_abs_diff(*named_tensors(d)[0].t, *na[0].t) > 0.0);
}

TEST_CASE("forward shapes and batch independence") {
  Model m = build(micro_cfg());
  SECTION("full pipeline shapes at 64x64") {
    Tensor x = Tensor::zeros({1, 1, 64, 64}, DType::f32);
    ForwardOut out = forward_full(m, x, NormMode::eval);
    REQUIRE(out.stem.shape == Shape{1, 4, 16, 16});
    REQUIRE(out.stages[0].shape == Shape{1, 4, 16, 16});
    REQUIRE(out.stages[1].shape == Shape{1, 8, 8, 8});
    REQUIRE(out.stages[2].shape == Shape{1, 16, 4, 4});
    REQUIRE(out.stages[3].shape == Shape{1, 32, 2, 2});
    REQUIRE(out.head.m_bound.shape == Shape{1, 1, 16, 16});
    REQUIRE(out.head.logits.shape == Shape{1, 1, 64, 64});
    for (size_t i = 0; i < out.head.logits.size(); ++i)
      REQUIRE(std::isfinite(out.head.logits.at(i)));
  }
  SECTION("identical batch rows give identical eval outputs") {
    std::mt19937_64 rng(5);
    Tensor row = testutil::random_tensor({1, 1, 32, 32}, rng, DType::f32, 0, 1);
    Tensor x = Tensor::zeros({2, 1, 32, 32}, DType::f32);
    for (size_t i = 0; i < row.size(); ++i) {
      x.store(i, row.at(i));
      x.store(row.size() + i, row.at(i));
    }
    Tensor logits = forward(m, x, NormMode::eval).logits;
    size_t n = logits.size() / 2;
    for (size_t i = 0; i < n; ++i)
      REQUIRE(logits.at(i) == logits.at(n + i));
  }
  SECTION("input validation") {
    REQUIRE_THROWS_AS(forward(m, Tensor::zeros({1, 1, 48, 64}, DType::f32),
                              NormMode::eval),
                      ConfigError);
    REQUIRE_THROWS_WITH(forward(m, Tensor::zeros({1, 1, 40, 64}, DType::f32),
                                NormMode::eval),
                        Catch::Matchers::ContainsSubstring("pad"));
    REQUIRE_THROWS_AS(forward(m, Tensor::zeros({1, 2, 64, 64}, DType::f32),
                              NormMode::eval),
                      ShapeError);
    REQUIRE_THROWS_AS(forward(m, Tensor::zeros({1, 64, 64}, DType::f32),
                              NormMode::eval),
                      ShapeError);
  }
  SECTION("predict reflect-pads odd sizes and returns probabilities") {
    Tensor img = Tensor::full({1, 40, 52}, 0.5, DType::f64);
    Tensor p = predict(m, img);
    REQUIRE(p.shape == Shape{1, 40, 52});
    // f32 storage may round an extreme sigmoid to exactly 0 or 1
    for (size_t i = 0; i < p.size(); ++i) {
      REQUIRE(p.at(i) >= 0.0);
      REQUIRE(p.at(i) <= 1.0);
    }
  }
}

TEST_CASE("scan presets") {
  std::vector<ScanStrategy> routes;
  bool gated = true;
  scan_preset("sass", routes, gated);
  REQUIRE(routes == std::vector<ScanStrategy>{ScanStrategy::ParallelSnake,
                                              ScanStrategy::DiagSnake});
  REQUIRE_FALSE(gated);
  scan_preset("fs2d", routes, gated);
  REQUIRE(routes.size() == 4);
  REQUIRE(gated);
  REQUIRE_THROWS_AS(scan_preset("zigzag", routes, gated), ConfigError);

  ModelConfig c = micro_cfg();
  scan_preset("sass", c.routes, c.gate_routes);
  Model m = build(c);
  Tensor x = Tensor::zeros({1, 1, 32, 32}, DType::f32);
  REQUIRE(forward(m, x, NormMode::eval).logits.shape == Shape{1, 1, 32, 32});
}

TEST_CASE("flop accounting") {
  SECTION("conv oracle: 1x1, Cin=2, Cout=3, 4x4, no bias -> 192") {
    Tensor x = Tensor::zeros({1, 2, 4, 4}, DType::f64);
    Tensor w = Tensor::zeros({3, 2, 1, 1}, DType::f64);
    FlopCounter c;
    {
      FlopScope s(c);
      conv2d(x, w, nullptr, ConvSpec::uniform(1, 0));
    }
    REQUIRE(c.flops() == 192);
  }
  SECTION("model flops positive and monotone in resolution") {
    Model m = build(micro_cfg());
    uint64_t f32x = count_flops(m, 32, 32);
    uint64_t f64x = count_flops(m, 64, 64);
    REQUIRE(f32x > 0);
    REQUIRE(f64x > 2 * f32x);
  }
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  ModelConfig c = micro_cfg();
  c.enable_asg = false;  // exercise a non-default config block
  c.seed = 11;
  Model m = build(c);
  fs::path tmp = fs::temp_directory_path() / "flux_model_test";
  fs::create_directories(tmp);
  std::string path = (tmp / "m.flxa").string();
  save(m, path);

  SECTION("weights and forward outputs bitwise identical after reload") {
    Model r = load(path);
    auto nm = named_tensors(m), nr = named_tensors(r);
    REQUIRE(nm.size() == nr.size());
    for (size_t i = 0; i < nm.size(); ++i) {
      REQUIRE(nm[i].name == nr[i].name);
      REQUIRE(max_abs_diff(*nm[i].t, *nr[i].t) == 0.0);
    }
    REQUIRE(r.cfg.enable_asg == false);
    REQUIRE(r.cfg.seed == 11);
    std::mt19937_64 rng(3);
    Tensor x = testutil::random_tensor({1, 1, 32, 32}, rng, DType::f32, 0, 1);
    Tensor a = forward(m, x, NormMode::eval).logits;
    Tensor b = forward(r, x, NormMode::eval).logits;
    REQUIRE(max_abs_diff(a, b) == 0.0);
  }
  SECTION("file size matches the byte-accounting oracle") {
    uint64_t expect = 4 + 4 + 4;  // magic, version, tensor count
    for (auto& nt : named_tensors(m)) {
      size_t elem = nt.t->dtype == DType::f64 ? 8 : 4;
      expect += 2 + nt.name.size() + 1 + 1 + 4 * nt.t->shape.size() +
                elem * nt.t->size();
    }
    expect += 4 + detail::config_text(m.cfg).size();
    REQUIRE(fs::file_size(path) == expect);
  }
  SECTION("distinct corruption errors") {
    std::string bytes = serialize_model(m);
    auto write_file = [&](const std::string& p, const std::string& b) {
      std::ofstream f(p, std::ios::binary);
      f.write(b.data(), static_cast<std::streamsize>(b.size()));
    };
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    write_file((tmp / "magic.flxa").string(), bad_magic);
    REQUIRE_THROWS_WITH(load((tmp / "magic.flxa").string()),
                        Catch::Matchers::ContainsSubstring("magic"));
    std::string bad_ver = bytes;
    bad_ver[4] = 9;
    write_file((tmp / "ver.flxa").string(), bad_ver);
    REQUIRE_THROWS_WITH(load((tmp / "ver.flxa").string()),
                        Catch::Matchers::ContainsSubstring("version"));
    write_file((tmp / "trunc.flxa").string(), bytes.substr(0, bytes.size() / 2));
    REQUIRE_THROWS_WITH(load((tmp / "trunc.flxa").string()),
                        Catch::Matchers::ContainsSubstring("truncated"));
    REQUIRE_THROWS_AS(load((tmp / "missing.flxa").string()), DataError);
  }
}

TEST_CASE("training loop") {
  auto samples = tiny_dataset(4, 32);
  SECTION("lr 0 leaves every weight untouched") {
    Model m = build(micro_cfg());
    std::vector<std::vector<double>> before;
    for (auto& nt : named_tensors(m))
      if (nt.trainable) before.push_back(nt.t->data());
    TrainConfig tc;
    tc.lr = 0.0;
    tc.epochs = 1;
    tc.batch = 2;
    train_loop(m, samples, {}, tc);
    size_t i = 0;
    for (auto& nt : named_tensors(m))
      if (nt.trainable) REQUIRE(nt.t->data() == before[i++]);
  }
  SECTION("loss decreases when actually training") {
    Model m = build(micro_cfg());
    TrainConfig tc;
    tc.lr = 1e-3;
    tc.epochs = 10;
    tc.batch = 4;
    TrainResult res = train_loop(m, samples, {}, tc);
    REQUIRE(res.losses.size() == 10);
    double head = res.losses.front();
    double tail = (res.losses[7] + res.losses[8] + res.losses[9]) / 3.0;
    REQUIRE(tail < head);
    REQUIRE_FALSE(res.best_checkpoint.empty());
  }
  SECTION("deterministic given the same seed; logs well formed") {
    TrainConfig tc;
    tc.lr = 1e-3;
    tc.epochs = 2;
    tc.batch = 2;
    Model a = build(micro_cfg());
    Model b = build(micro_cfg());
    TrainResult ra = train_loop(a, samples, {}, tc);
    TrainResult rb = train_loop(b, samples, {}, tc);
    REQUIRE(ra.losses == rb.losses);
    REQUIRE(ra.log_lines == rb.log_lines);
    for (const auto& line : ra.log_lines) {
      std::istringstream is(line);
      int epoch, step;
      double loss, lr;
      REQUIRE((is >> epoch >> step >> loss >> lr));
    }
  }
  SECTION("validation selects a best checkpoint") {
    Model m = build(micro_cfg());
    TrainConfig tc;
    tc.lr = 1e-3;
    tc.epochs = 2;
    tc.batch = 2;
    std::vector<Sample> val = {samples[3]};
    TrainResult res = train_loop(m, samples, val, tc);
    REQUIRE(res.best_epoch >= 0);
    REQUIRE(res.best_val_f1 >= 0.0);
    std::istringstream is(res.best_checkpoint, std::ios::binary);
    Model best = deserialize_model(is, "<memory>");
    REQUIRE(count_params(best) == count_params(m));
  }
  SECTION("config validation") {
    Model m = build(micro_cfg());
    TrainConfig tc;
    tc.batch = 1;
    REQUIRE_THROWS_AS(train_loop(m, samples, {}, tc), ConfigError);
    tc.batch = 2;
    REQUIRE_THROWS_AS(train_loop(m, {}, {}, tc), DataError);
  }
}

TEST_CASE("robustness sweep") {
  Model m = build(micro_cfg());
  auto samples = tiny_dataset(2, 32);
  RobustnessReport rep = robustness_sweep(m, samples, {0.0, 0.2});
  REQUIRE(rep.reports.size() == 2);
  REQUIRE(rep.rows.size() == 2);
  REQUIRE(rep.rows[0].sigma == 0.0);
  REQUIRE(rep.rows[0].drop == 0.0);
  for (const auto& r : rep.reports) {
    REQUIRE(r.ods >= 0.0);
    REQUIRE(r.ods <= 1.0);
  }
  REQUIRE_THROWS_AS(robustness_sweep(m, samples, {-0.1}), ConfigError);
}
