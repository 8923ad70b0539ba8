// fluxamba: data generation, training, inference, evaluation, benchmarking
// and gradient checking for the segmentation model in include/fluxamba.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <iostream>

#include "fluxamba/model.hpp"

using namespace flux;
namespace fs = std::filesystem;

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch())
      .count();
}

ModelConfig make_model_config(const std::string& variant, const std::string& scan,
                              const std::string& disable, const std::string& dtype,
                              uint64_t seed) {
  ModelConfig mc = ModelConfig::variant(variant);
  scan_preset(scan, mc.routes, mc.gate_routes);
  std::istringstream ds(disable);
  std::string tok;
  while (std::getline(ds, tok, ',')) {
    if (tok.empty()) continue;
    if (tok == "asg") mc.enable_asg = false;
    else if (tok == "pmf") mc.enable_pmf = false;
    else if (tok == "hsr") mc.enable_hsr = false;
    else if (tok == "hffu") mc.enable_hffu = false;
    else throw ConfigError("unknown module '" + tok + "' in --disable");
  }
  if (dtype == "f64") mc.dtype = DType::f64;
  else if (dtype != "f32") throw ConfigError("dtype must be f32 or f64");
  mc.seed = seed;
  return mc;
}

std::vector<double> parse_sigmas(const std::string& csv) {
  std::vector<double> out;
  std::istringstream is(csv);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
  if (out.empty()) throw ConfigError("--noise: no sigma values given");
  return out;
}

// Single-tensor dump in the checkpoint container layout.
void write_tensor_file(const std::string& path, const std::string& name,
                       const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("dump: cannot open " + path);
  f.write("FLXA", 4);
  detail::put<uint32_t>(f, 1);
  detail::put<uint32_t>(f, 1);
  detail::put<uint16_t>(f, static_cast<uint16_t>(name.size()));
  f.write(name.data(), static_cast<std::streamsize>(name.size()));
  detail::put<uint8_t>(f, t.dtype == DType::f64 ? 1 : 0);
  detail::put<uint8_t>(f, static_cast<uint8_t>(t.shape.size()));
  for (int d : t.shape) detail::put<uint32_t>(f, static_cast<uint32_t>(d));
  if (t.dtype == DType::f64)
    for (size_t i = 0; i < t.size(); ++i) detail::put<double>(f, t.at(i));
  else
    for (size_t i = 0; i < t.size(); ++i)
      detail::put<float>(f, static_cast<float>(t.at(i)));
  detail::put<uint32_t>(f, 0);  // empty config block
}

// ---------------------------------------------------------------------------
// gradcheck support

double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double denom = std::max(1e-8, std::abs(a[i]) + std::abs(b[i]));
    m = std::max(m, std::abs(a[i] - b[i]) / denom);
  }
  return m;
}

// Full-leaf finite-difference check for small graphs. Each coordinate is
// scored against the better of two step sizes: the optimal h trades
// truncation against roundoff and differs per coordinate.
double fd_check(const std::function<Tensor()>& fn, std::vector<Tensor> leaves,
                double h = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    backward(fn(), tape);
  }
  double worst = 0;
  for (auto& leaf : leaves) {
    for (size_t i = 0; i < leaf.size(); ++i) {
      double g = leaf.grad()[i];
      double err = 1e9;
      for (double hh : {h, 10 * h}) {
        double saved = leaf.at(i);
        leaf.store(i, saved + hh);
        double up = fn().at(0);
        leaf.store(i, saved - hh);
        double dn = fn().at(0);
        leaf.store(i, saved);
        double fd = (up - dn) / (2 * hh);
        err = std::min(err, std::abs(g - fd) /
                                std::max(1e-8, std::abs(g) + std::abs(fd)));
      }
      worst = std::max(worst, err);
    }
  }
  return worst;
}

Tensor rand_t(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(s, DType::f64);
  for (size_t i = 0; i < t.size(); ++i) t.store(i, u(rng));
  return t;
}

int gradcheck_ops(bool sabotage) {
  std::mt19937_64 rng(17);
  int failures = 0;
  auto run = [&](const std::string& name, std::function<Tensor()> fn,
                 std::vector<Tensor> leaves) {
    double err = fd_check(fn, leaves);
    if (sabotage) err += 1.0;  // negative control: force a reported failure
    bool ok = err < 1e-6;
    std::cout << (ok ? "pass" : "FAIL") << "  " << name << "  rel_err=" << err
              << "\n";
    if (!ok) ++failures;
  };
  Tensor a = rand_t({2, 3}, rng).set_requires_grad();
  Tensor b = rand_t({2, 3}, rng, 0.5, 1.5).set_requires_grad();
  run("add/mul/div", [&] { return sum(div(mul(add(a, b), a), b)); }, {a, b});
  run("sigmoid", [&] { return sum(sigmoid(a)); }, {a});
  run("softplus/gelu", [&] { return sum(mul(softplus(a), gelu(b))); }, {a, b});
  run("tanh/exp", [&] { return sum(mul(tanh_op(a), exp_op(a))); }, {a});
  run("log", [&] { return sum(log_op(b)); }, {b});
  run("softmax", [&] { return sum(mul(softmax(a, 1), b)); }, {a, b});
  run("mean/scale", [&] { return scale(mean(mul(a, a)), 3.0); }, {a});
  Tensor m1 = rand_t({3, 4}, rng).set_requires_grad();
  Tensor m2 = rand_t({4, 2}, rng).set_requires_grad();
  run("matmul", [&] { return sum(matmul(m1, m2)); }, {m1, m2});
  Tensor x = rand_t({1, 2, 5, 5}, rng).set_requires_grad();
  Tensor w = rand_t({3, 2, 3, 3}, rng).set_requires_grad();
  Tensor bias = rand_t({3}, rng).set_requires_grad();
  run("conv2d",
      [&] { return sum(conv2d(x, w, &bias, ConvSpec::uniform(1, 1))); },
      {x, w, bias});
  Tensor g = rand_t({2}, rng, 0.5, 1.5).set_requires_grad();
  Tensor beta = rand_t({2}, rng).set_requires_grad();
  run("layer_norm", [&] { return sum(mul(layer_norm(x, {1}, g, beta), x)); },
      {x, g, beta});
  Tensor sp = rand_t({1, 2, 8}, rng).set_requires_grad();
  SsmParams p;
  p.n_state = 3;
  p.a_log = rand_t({2, 3}, rng, -1.5, -0.5).set_requires_grad();
  p.d = rand_t({2}, rng).set_requires_grad();
  p.w_delta = rand_t({2}, rng, -0.3, 0.3).set_requires_grad();
  p.b_delta = rand_t({2}, rng, -0.3, 0.3).set_requires_grad();
  p.w_b = rand_t({2, 3}, rng).set_requires_grad();
  p.w_c = rand_t({2, 3}, rng).set_requires_grad();
  run("selective_scan", [&] { return sum(selective_scan(sp, p)); },
      {sp, p.a_log, p.d, p.w_delta, p.b_delta, p.w_b, p.w_c});
  std::cout << (failures == 0 ? "gradcheck ops: all passed"
                              : "gradcheck ops: FAILURES")
            << "\n";
  return failures == 0 ? 0 : 3;
}

int gradcheck_blocks() {
  std::mt19937_64 rng(23);
  int failures = 0;
  for (int stage : {1, 3}) {
    SfbConfig cfg;
    cfg.stage = stage;
    ModelConfig mc;
    mc.dtype = DType::f64;
    mc.n_state = 2;
    mc.heads = 2;
    mc.seed = 5 + stage;
    std::mt19937_64 wrng(mc.seed);
    SfbWeights w = flux::detail::build_sfb(4, stage, mc, wrng);
    Tensor x = rand_t({1, 4, 6, 6}, rng).set_requires_grad();
    std::vector<Tensor> leaves = {x};
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (Tensor* t : w.params(cfg)) {
      // perturb away from the trainer's zero-init projections: a zero
      // gradient path checks nothing
      for (size_t j = 0; j < t->size(); ++j) t->store(j, t->at(j) + u(rng));
      t->set_requires_grad();
      leaves.push_back(*t);
    }
    double err = fd_check([&] { return sum(sfb_forward(x, cfg, w)); }, leaves, 1e-5);
    bool ok = err < 1e-5;
    std::cout << (ok ? "pass" : "FAIL") << "  sfb stage " << stage
              << "  rel_err=" << err << "\n";
    if (!ok) ++failures;
  }
  return failures == 0 ? 0 : 3;
}

int gradcheck_model() {
  ModelConfig mc = ModelConfig::variant("micro");
  mc.dtype = DType::f64;
  Model m = build(mc);
  std::mt19937_64 rng(31);
  Tensor x = rand_t({1, 1, 32, 32}, rng, 0.0, 1.0);
  Tensor y = Tensor::zeros({1, 1, 32, 32}, DType::f64);
  std::uniform_real_distribution<double> u(0, 1);
  for (size_t i = 0; i < y.size(); ++i) y.store(i, u(rng) < 0.3 ? 1.0 : 0.0);
  auto named = named_tensors(m);
  std::vector<Tensor> leaves;
  for (auto& nt : named)
    if (nt.trainable) {
      nt.t->set_requires_grad();
      leaves.push_back(*nt.t);
    }
  LossWeights lw;
  auto loss_fn = [&] {
    BmfOut out = forward(m, x, NormMode::eval);
    return total_loss(out.logits, out.m_bound, y, lw).total;
  };
  for (auto& l : leaves) l.zero_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    backward(loss_fn(), tape);
  }
  // Sample coordinates whose analytic gradient is large enough that the
  // finite-difference quotient is not dominated by evaluation roundoff;
  // relative error is meaningless where the true gradient vanishes.
  struct Coord { size_t leaf, idx; };
  std::vector<Coord> pool;
  for (size_t li = 0; li < leaves.size(); ++li)
    for (size_t i = 0; i < leaves[li].size(); ++i)
      if (std::abs(leaves[li].grad()[i]) >= 1e-2) pool.push_back({li, i});
  std::shuffle(pool.begin(), pool.end(), rng);
  size_t n = std::min<size_t>(60, pool.size());
  double h = 1e-5, worst = 0;
  for (size_t k = 0; k < n; ++k) {
    Tensor& leaf = leaves[pool[k].leaf];
    size_t i = pool[k].idx;
    double saved = leaf.at(i);
    leaf.store(i, saved + h);
    double up = loss_fn().at(0);
    leaf.store(i, saved - h);
    double dn = loss_fn().at(0);
    leaf.store(i, saved);
    double fd = (up - dn) / (2 * h);
    double g = leaf.grad()[i];
    worst = std::max(worst,
                     std::abs(g - fd) / std::max(1e-8, std::abs(g) + std::abs(fd)));
  }
  bool ok = worst < 1e-5;
  std::cout << (ok ? "pass" : "FAIL") << "  model micro 32x32 f64  coords=" << n
            << "  rel_err=" << worst << "\n";
  return ok ? 0 : 3;
}

// ---------------------------------------------------------------------------
// commands

struct GenOpts {
  std::string out;
  GenSpec spec;
};

int cmd_gen(const GenOpts& o) {
  if (o.spec.count <= 0) throw ConfigError("gen: --count must be positive");
  auto samples = generate(o.spec);
  save_dataset(samples, o.out);
  Splits sp = split_ids(samples);
  std::cout << "wrote " << samples.size() << " samples to " << o.out << " ("
            << sp.train.size() << " train, " << sp.val.size() << " val, "
            << sp.test.size() << " test)\n";
  return 0;
}

struct TrainOpts {
  std::string data, out = "model.flxa", log_path;
  std::string variant = "tiny", scan = "fs2d", disable, dtype = "f32";
  TrainConfig tc;
  uint64_t seed = 42;
};

int cmd_train(const TrainOpts& o) {
  auto train = load_dataset(o.data, "train");
  auto val = load_dataset(o.data, "val");
  Model m = build(make_model_config(o.variant, o.scan, o.disable, o.dtype, o.seed));
  std::string log_path = o.log_path.empty() ? o.out + ".log" : o.log_path;
  std::ofstream log(log_path);
  if (!log) throw DataError("train: cannot open log file " + log_path);
  TrainConfig tc = o.tc;
  tc.seed = o.seed;
  std::ostringstream tee;
  TrainResult res = train_loop(m, train, val, tc, &tee);
  std::cout << tee.str();
  log << tee.str();
  save(m, o.out);
  if (!res.best_checkpoint.empty()) {
    std::ofstream best(o.out + ".best", std::ios::binary);
    best.write(res.best_checkpoint.data(),
               static_cast<std::streamsize>(res.best_checkpoint.size()));
  }
  std::cout << "final checkpoint: " << o.out << "\n";
  if (res.best_epoch >= 0)
    std::cout << "best checkpoint: " << o.out << ".best (epoch " << res.best_epoch
              << ", val F1 " << res.best_val_f1 << ")\n";
  return 0;
}

struct InferOpts {
  std::string ckpt, input, out, dump_dir;
};

int cmd_infer(const InferOpts& o) {
  Model m = load(o.ckpt);
  Tensor img = read_pgm(o.input);
  int H = img.shape[1], W = img.shape[2];
  int pb = (32 - H % 32) % 32, pr = (32 - W % 32) % 32;
  Tensor x = reshape(img, {1, 1, H, W});
  if (pb || pr) {
    x = reflect_pad2d(x, 0, pb, 0, pr);
    std::cout << "note: input " << H << "x" << W << " reflect-padded to "
              << H + pb << "x" << W + pr << ", output cropped back\n";
  }
  ForwardOut fo = forward_full(m, x, NormMode::eval);
  Tensor prob = sigmoid(fo.head.logits);
  Tensor mask = Tensor::zeros({1, H, W}, DType::f64);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      mask.store(static_cast<size_t>(h) * W + w,
                 prob.at(static_cast<size_t>(h) * (W + pr) + w) >= 0.5 ? 1.0 : 0.0);
  write_pgm(mask, o.out);
  std::cout << "wrote mask " << o.out << "\n";
  if (!o.dump_dir.empty()) {
    fs::create_directories(o.dump_dir);
    std::vector<std::pair<std::string, const Tensor*>> taps = {
        {"stem", &fo.stem},         {"stage1", &fo.stages[0]},
        {"stage2", &fo.stages[1]},  {"stage3", &fo.stages[2]},
        {"stage4", &fo.stages[3]},  {"boundary", &fo.head.m_bound}};
    for (auto& [name, t] : taps)
      write_tensor_file((fs::path(o.dump_dir) / (name + ".flxa")).string(), name,
                        *t);
    std::cout << "dumped " << taps.size() << " feature tensors to " << o.dump_dir
              << "\n";
  }
  return 0;
}

struct EvalOpts {
  std::string ckpt, data, split = "test", noise, csv;
  uint64_t seed = 1234;
};

int cmd_eval(const EvalOpts& o) {
  Model m = load(o.ckpt);
  auto samples = load_dataset(o.data, o.split);
  if (samples.empty()) throw DataError("eval: split '" + o.split + "' is empty");
  std::ostringstream csv;
  if (o.noise.empty()) {
    std::vector<Tensor> preds, masks;
    for (const auto& s : samples) {
      preds.push_back(predict(m, s.image));
      masks.push_back(s.mask);
    }
    EvalReport r = evaluate(preds, masks);
    std::cout << report_table(r);
    csv << report_csv(r);
  } else {
    RobustnessReport rep = robustness_sweep(m, samples, parse_sigmas(o.noise),
                                            o.seed);
    for (size_t i = 0; i < rep.sigmas.size(); ++i) {
      std::cout << "sigma " << rep.sigmas[i] << "\n"
                << report_table(rep.reports[i]);
      csv << "# sigma " << rep.sigmas[i] << "\n" << report_csv(rep.reports[i]);
    }
    std::cout << robustness_csv(rep.rows);
    csv << robustness_csv(rep.rows);
  }
  if (!o.csv.empty()) {
    std::ofstream f(o.csv);
    if (!f) throw DataError("eval: cannot open " + o.csv);
    f << csv.str();
  }
  return 0;
}

struct BenchOpts {
  std::string variant = "tiny";
  int size = 64;
  int repeat = 1000;
};

int cmd_bench(const BenchOpts& o) {
  ModelConfig mc = ModelConfig::variant(o.variant);
  Model m = build(mc);
  CostReport cr = cost_report(m, o.size, o.size);
  std::cout << "variant " << o.variant << "  input " << o.size << "x" << o.size
            << "\n";
  std::cout << "params " << cr.params << "\nflops " << cr.flops << "\nsize_bytes "
            << cr.size_bytes << "\n";
  Tensor x = Tensor::zeros({1, mc.in_channels, o.size, o.size}, mc.dtype);
  int warm = (o.repeat + 9) / 10;
  for (int i = 0; i < warm; ++i) forward(m, x, NormMode::eval);
  std::vector<double> times;
  for (int i = 0; i < o.repeat; ++i) {
    double t0 = now_ms();
    forward(m, x, NormMode::eval);
    times.push_back(now_ms() - t0);
  }
  std::sort(times.begin(), times.end());
  double mean = 0;
  for (double t : times) mean += t;
  mean /= times.size();
  std::cout << "latency_ms mean " << mean << " median "
            << times[times.size() / 2] << " over " << o.repeat << " runs ("
            << warm << " warm-up)\n";
  // scan scaling table for the linear-complexity check
  std::cout << "scan_scaling L time_ms\n";
  std::mt19937_64 rng(7);
  ModelConfig tiny_mc;
  tiny_mc.n_state = 8;
  std::mt19937_64 wrng(7);
  SfbWeights sw = flux::detail::build_sfb(4, 1, tiny_mc, wrng);
  for (long L : {4096L, 16384L, 65536L}) {
    Tensor seq = Tensor::zeros({1, 4, static_cast<int>(L)}, DType::f32);
    for (size_t i = 0; i < seq.size(); ++i) seq.store(i, std::sin(0.01 * i));
    selective_scan(seq, sw.ssm[0]);  // warm-up
    double t0 = now_ms();
    for (int r = 0; r < 3; ++r) selective_scan(seq, sw.ssm[0]);
    std::cout << "scan " << L << " " << (now_ms() - t0) / 3 << "\n";
  }
  return 0;
}

}  // namespace

// Expand `--config FILE` (flat key=value lines, # comments) into trailing
// `--key value` arguments; flags already on the command line win.
std::vector<std::string> apply_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  auto it = std::find(args.begin(), args.end(), "--config");
  if (it == args.end()) return args;
  if (it + 1 == args.end()) throw ConfigError("--config: missing file argument");
  std::string path = *(it + 1);
  args.erase(it, it + 2);
  std::ifstream f(path);
  if (!f) throw DataError("--config: cannot open " + path);
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#' || line[0] == '[') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("--config: expected key=value, got '" + line + "'");
    std::string key = "--" + line.substr(0, eq);
    if (std::find(args.begin(), args.end(), key) == args.end()) {
      args.push_back(key);
      args.push_back(line.substr(eq + 1));
    }
  }
  return args;
}

int main(int argc, char** argv) {
  CLI::App app{"anisotropic state-space lineament segmentation"};
  app.require_subcommand(1);

  GenOpts g;
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--out", g.out, "output directory")->required();
  gen->add_option("--count", g.spec.count, "number of samples (default 16)");
  gen->add_option("--size", g.spec.size, "image side length (default 64)");
  gen->add_option("--seed", g.spec.seed, "generator seed (default 42)");
  gen->add_option("--strokes", g.spec.strokes, "strokes per image (default 3)");
  gen->add_option("--craters", g.spec.craters, "crater distractors (default 2)");

  TrainOpts t;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", t.data, "dataset directory")->required();
  train->add_option("--out", t.out, "checkpoint path (default model.flxa)");
  train->add_option("--log", t.log_path, "log file (default <out>.log)");
  train->add_option("--variant", t.variant,
                    "micro|tiny|small|base|large (default tiny)");
  train->add_option("--scan", t.scan,
                    "fs2d|parallel|diagonal|parasnake|diagsnake|sass");
  train->add_option("--disable", t.disable, "comma list of asg,pmf,hsr,hffu");
  train->add_option("--dtype", t.dtype, "f32|f64 (default f32)");
  train->add_option("--epochs", t.tc.epochs, "epochs (default 200)");
  train->add_option("--batch", t.tc.batch, "batch size (default 2)");
  train->add_option("--lr", t.tc.lr, "base learning rate (default 1e-5)");
  train->add_option("--wd", t.tc.weight_decay, "weight decay (default 0.01)");
  train->add_option("--power", t.tc.power, "poly schedule power (default 0.9)");
  train->add_option("--seed", t.seed, "seed (default 42)");

  InferOpts i;
  auto* infer = app.add_subcommand("infer", "predict a mask for one image");
  infer->add_option("--ckpt", i.ckpt, "checkpoint path")->required();
  infer->add_option("--input", i.input, "input PGM image")->required();
  infer->add_option("--out", i.out, "output mask PGM")->required();
  infer->add_option("--dump-features", i.dump_dir,
                    "directory for per-stage feature tensors");

  EvalOpts e;
  auto* eval = app.add_subcommand("eval", "evaluate on a dataset split");
  eval->add_option("--ckpt", e.ckpt, "checkpoint path")->required();
  eval->add_option("--data", e.data, "dataset directory")->required();
  eval->add_option("--split", e.split, "train|val|test (default test)");
  eval->add_option("--noise", e.noise, "comma list of gaussian sigmas");
  eval->add_option("--csv", e.csv, "write CSV report here");
  eval->add_option("--seed", e.seed, "noise seed (default 1234)");

  BenchOpts b;
  auto* bench = app.add_subcommand("bench", "cost and latency report");
  bench->add_option("--variant", b.variant, "model variant (default tiny)");
  bench->add_option("--size", b.size, "input side length (default 64)");
  bench->add_option("--repeat", b.repeat, "timed runs (default 1000)");

  std::string scope = "ops";
  bool sabotage = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--scope", scope, "ops|blocks|model (default ops)");
  gc->add_flag("--negative-control", sabotage,
               "corrupt the analytic gradients; must report failure");

  try {
    std::vector<std::string> args = apply_config(argc, argv);
    // CLI11 consumes reversed argument vectors
    std::vector<std::string> rev(args.rbegin(), args.rend());
    rev.pop_back();  // program name
    app.parse(rev);
    if (*gen) return cmd_gen(g);
    if (*train) return cmd_train(t);
    if (*infer) return cmd_infer(i);
    if (*eval) return cmd_eval(e);
    if (*bench) return cmd_bench(b);
    if (*gc) {
      if (scope == "ops") return gradcheck_ops(sabotage);
      if (scope == "blocks") return gradcheck_blocks();
      if (scope == "model") return gradcheck_model();
      throw ConfigError("gradcheck: unknown scope '" + scope + "'");
    }
    return 0;
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 1;
  } catch (const ShapeError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const DataError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  }
}
