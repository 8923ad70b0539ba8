#include <catch2/catch_amalgamated.hpp>

#include "fluxamba/metrics.hpp"
#include "test_util.hpp"

using namespace flux;
using testutil::random_tensor;

namespace {

Tensor random_mask(int n, std::mt19937_64& rng, double pos_rate = 0.3) {
  std::uniform_real_distribution<double> u(0, 1);
  Tensor y = Tensor::zeros({n}, DType::f64);
  for (int i = 0; i < n; ++i) y.store(i, u(rng) < pos_rate ? 1.0 : 0.0);
  return y;
}

}  // namespace

TEST_CASE("confusion counting") {
  SECTION("hand instance tp=1 fp=1 fn=0 tn=2") {
    Tensor y = Tensor::from({2, 2}, {1, 0, 0, 0}, DType::f64);
    Tensor p = Tensor::from({2, 2}, {0.9, 0.8, 0.1, 0.1}, DType::f64);
    ConfusionCounts c = confusion(p, y, 0.5);
    REQUIRE(c.tp == 1);
    REQUIRE(c.fp == 1);
    REQUIRE(c.fn == 0);
    REQUIRE(c.tn == 2);
    REQUIRE(c.total() == 4);
  }
  SECTION("binary map predicting itself has no errors") {
    std::mt19937_64 rng(41);
    Tensor y = random_mask(50, rng);
    for (double t : {0.1, 0.5, 0.9}) {
      ConfusionCounts c = confusion(y, y, t);
      REQUIRE(c.fp == 0);
      REQUIRE(c.fn == 0);
    }
  }
  SECTION("threshold above max(p) -> nothing predicted") {
    Tensor y = Tensor::from({3}, {1, 0, 1}, DType::f64);
    Tensor p = Tensor::from({3}, {0.4, 0.3, 0.2}, DType::f64);
    ConfusionCounts c = confusion(p, y, 0.45);
    REQUIRE(c.tp == 0);
    REQUIRE(c.fp == 0);
  }
  SECTION("invalid threshold rejected") {
    Tensor y = Tensor::zeros({2}, DType::f64);
    REQUIRE_THROWS_AS(confusion(y, y, 0.0), ConfigError);
    REQUIRE_THROWS_AS(confusion(y, y, 1.0), ConfigError);
  }
}

TEST_CASE("precision/recall/f1 conventions") {
  SECTION("tp=1 fp=1 fn=0") {
    ConfusionCounts c{1, 1, 0, 2};
    REQUIRE(precision(c) == 0.5);
    REQUIRE(recall(c) == 1.0);
    REQUIRE(f1_from_counts(c) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
  }
  SECTION("all-zero counts -> 0") {
    ConfusionCounts c;
    REQUIRE(precision(c) == 0.0);
    REQUIRE(recall(c) == 0.0);
    REQUIRE(f1_from_counts(c) == 0.0);
  }
  SECTION("perfect -> 1") {
    ConfusionCounts c{10, 0, 0, 5};
    REQUIRE(f1_from_counts(c) == 1.0);
  }
}

TEST_CASE("miou") {
  SECTION("hand instance -> 0.58333") {
    ConfusionCounts c{1, 1, 0, 2};
    REQUIRE(miou_from_counts(c) == Catch::Approx(0.5 * (0.5 + 2.0 / 3.0)).epsilon(1e-12));
    REQUIRE(miou_from_counts(c) == Catch::Approx(0.58333).margin(5e-6));
  }
  SECTION("perfect two-class prediction -> 1") {
    Tensor y = Tensor::from({4}, {1, 0, 1, 0}, DType::f64);
    REQUIRE(miou(y, y) == 1.0);
  }
  SECTION("empty foreground, perfect background -> 0.5 (0/0 -> 0)") {
    Tensor y = Tensor::zeros({4}, DType::f64);
    REQUIRE(miou(y, y) == 0.5);
  }
  SECTION("printed and standard forms coincide; range [0,1]") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 50; ++trial) {
      Tensor y = random_mask(30, rng);
      Tensor p = random_tensor({30}, rng, DType::f64, 0, 1);
      double a = miou(p, y, 0.5, false);
      double b = miou(p, y, 0.5, true);
      REQUIRE(a == Catch::Approx(b).margin(1e-12));
      REQUIRE(a >= 0.0);
      REQUIRE(a <= 1.0);
    }
  }
}

TEST_CASE("ods and ois") {
  std::mt19937_64 rng(43);
  SECTION("perfect predictions -> 1 everywhere") {
    std::vector<Tensor> masks = {random_mask(20, rng), random_mask(20, rng)};
    ThresholdSweep s = make_sweep(masks, masks);
    REQUIRE(ods(s) == 1.0);
    REQUIRE(ois(s) == 1.0);
  }
  SECTION("single image: ods == ois") {
    Tensor y = random_mask(40, rng);
    Tensor p = random_tensor({40}, rng, DType::f64, 0, 1);
    ThresholdSweep s = make_sweep({p}, {y});
    REQUIRE(ods(s) == Catch::Approx(ois(s)).margin(1e-12));
  }
  SECTION("matches a brute-force grid oracle; OIS >= ODS") {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor> preds, masks;
      for (int i = 0; i < 3; ++i) {
        masks.push_back(random_mask(25, rng));
        preds.push_back(random_tensor({25}, rng, DType::f64, 0, 1));
      }
      ThresholdSweep s = make_sweep(preds, masks);
      auto grid = default_thresholds();
      double best_pool = 0;
      for (double t : grid) {
        ConfusionCounts pooled;
        for (int i = 0; i < 3; ++i) pooled += confusion(preds[i], masks[i], t);
        best_pool = std::max(best_pool, f1_from_counts(pooled));
      }
      double mean_best = 0;
      for (int i = 0; i < 3; ++i) {
        double b = 0;
        for (double t : grid)
          b = std::max(b, f1_from_counts(confusion(preds[i], masks[i], t)));
        mean_best += b;
      }
      mean_best /= 3;
      REQUIRE(ods(s) == Catch::Approx(best_pool).margin(1e-9));
      REQUIRE(ois(s) == Catch::Approx(mean_best).margin(1e-9));
      REQUIRE(ois(s) >= ods(s) - 1e-12);
    }
  }
  SECTION("disjoint optimal thresholds -> OIS strictly above ODS") {
    // image A perfect at low t, image B perfect at high t
    Tensor ya = Tensor::from({2}, {1, 0}, DType::f64);
    Tensor pa = Tensor::from({2}, {0.2, 0.05}, DType::f64);  // needs t <= 0.2
    Tensor yb = Tensor::from({2}, {1, 0}, DType::f64);
    Tensor pb = Tensor::from({2}, {0.95, 0.8}, DType::f64);  // needs t > 0.8
    ThresholdSweep s = make_sweep({pa, pb}, {ya, yb});
    REQUIRE(ois(s) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(ods(s) < 1.0);
  }
  SECTION("tp monotone non-increasing in t; empty sweep rejected") {
    Tensor y = random_mask(30, rng);
    Tensor p = random_tensor({30}, rng, DType::f64, 0, 1);
    ThresholdSweep s = make_sweep({p}, {y});
    for (size_t ti = 1; ti < s.thresholds.size(); ++ti)
      REQUIRE(s.counts[0][ti].tp <= s.counts[0][ti - 1].tp);
    ThresholdSweep empty;
    REQUIRE_THROWS_AS(ods(empty), DataError);
    REQUIRE_THROWS_AS(ois(empty), DataError);
  }
}

TEST_CASE("evaluate and robustness aggregation") {
  std::mt19937_64 rng(44);
  std::vector<Tensor> preds, masks;
  for (int i = 0; i < 2; ++i) {
    masks.push_back(random_mask(36, rng));
    preds.push_back(random_tensor({36}, rng, DType::f64, 0, 1));
  }
  SECTION("report fields consistent with direct computation") {
    EvalReport r = evaluate(preds, masks);
    ConfusionCounts pooled;
    for (int i = 0; i < 2; ++i) pooled += confusion(preds[i], masks[i], 0.5);
    REQUIRE(r.f1 == Catch::Approx(f1_from_counts(pooled)).margin(1e-12));
    REQUIRE(r.miou == Catch::Approx(miou_from_counts(pooled)).margin(1e-12));
    REQUIRE(r.f1 <= r.ods + 1e-12);  // fixed t never beats the optimum
    REQUIRE(r.ods <= r.ois + 1e-12);
  }
  SECTION("drop rates: sigma 0 row is 0 by construction") {
    auto rows = drop_rates({0.0, 0.1, 0.3}, {0.8, 0.72, 0.6});
    REQUIRE(rows[0].drop == 0.0);
    REQUIRE(rows[1].drop == Catch::Approx(0.1).margin(1e-12));
    REQUIRE(rows[2].drop == Catch::Approx(0.25).margin(1e-12));
  }
  SECTION("csv and table emitters mention every metric") {
    EvalReport r = evaluate(preds, masks);
    std::string csv = report_csv(r);
    for (const char* k : {"ods", "ois", "precision", "recall", "f1", "miou"})
      REQUIRE(csv.find(k) != std::string::npos);
    std::string tab = report_table(r);
    REQUIRE(tab.find("mIoU") != std::string::npos);
    std::string rc = robustness_csv(drop_rates({0.0, 0.1}, {0.5, 0.4}));
    REQUIRE(rc.find("sigma,miou,drop") != std::string::npos);
  }
}
