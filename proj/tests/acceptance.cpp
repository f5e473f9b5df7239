// Acceptance run: one PASS/FAIL line per criterion. Training-based criteria
// share one source-only checkpoint per seed and reuse each other's runs where
// a cell coincides (the full module is the l = 3 cell and the lambda = 1 cell).

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dsem/checkpoint.hpp"
#include "dsem/data.hpp"
#include "dsem/detector.hpp"
#include "dsem/dsem.hpp"
#include "dsem/eval.hpp"
#include "dsem/log.hpp"
#include "dsem/ops.hpp"
#include "dsem/training.hpp"
#include "fd_check.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace dsem;
using namespace dsem::testing;
using clk = std::chrono::steady_clock;

namespace {

// Pinned tolerances and thresholds.
constexpr double kTrainingBudgetSeconds = 15 * 60;
constexpr double kEfficacyGain = 0.10;
constexpr double kSourceDrop = 0.03;
constexpr double kProbeLearnable = 0.9;
constexpr double kAblationEndGap = 0.02;
constexpr double kOracleTolerance = 1e-6;
// Frozen regression values of the efficacy runs (means over seeds 1..3),
// matched to this absolute tolerance to allow for platform float differences.
constexpr double kRegressionTolerance = 0.03;
constexpr double kFrozenBaselineTarget = 0.5845;
constexpr double kFrozenAdaptedTarget = 0.7065;

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

// ---------------------------------------------------------------------------
// Shared desk-scale experiment: 200 source / 200 target training images and
// 100 + 100 test images per seed, default shift.

struct SeedData {
  DomainPair train;
  DomainPair test;
  std::vector<UnlabeledImage> target_unlabeled;
};

struct RunResult {
  Checkpoint checkpoint;
  double target_map = 0.0;
  double source_map = 0.0;
  bool finite = true;
};

class Experiment {
 public:
  Experiment() {
    dsem_.inner_channels = 32;
    for (std::uint64_t s : kSeeds) {
      SeedData d;
      d.train = gen_domain_pair(200, 200, shift_preset("default"), 1000 + s);
      d.test = gen_domain_pair(100, 100, shift_preset("default"), 5000 + s);
      d.target_unlabeled = strip_annotations(d.train.target);
      data_.emplace(s, std::move(d));
    }
  }

  const DetectorConfig& detector() const { return det_; }
  const DsemConfig& dsem() const { return dsem_; }
  const AdaptConfig& adapt_config() const { return adapt_; }
  const SeedData& data(std::uint64_t s) const { return data_.at(s); }

  const Checkpoint& pretrained(std::uint64_t seed) {
    return pretrained_for_seed(cache_, seed, data_.at(seed).train.source, det_, adapt_);
  }

  RunResult evaluate(const Checkpoint& ckpt, std::uint64_t seed) const {
    const auto det = load_detector(ckpt, det_);
    RunResult r;
    r.checkpoint = ckpt;
    r.target_map = evaluate_detector(det, data_.at(seed).test.target).map.map;
    r.source_map = evaluate_detector(det, data_.at(seed).test.source).map.map;
    return r;
  }

  // Memoized by cell name and seed.
  const RunResult& run(const std::string& cell, std::uint64_t seed, const DsemConfig& dsem, AdaptConfig cfg) {
    const auto key = std::make_pair(cell, seed);
    if (auto it = runs_.find(key); it != runs_.end()) return it->second;
    cfg.seed = seed;
    const auto& d = data_.at(seed);
    const auto result = adapt(pretrained(seed), d.train.source, d.target_unlabeled, det_, dsem, cfg);
    RunResult r = evaluate(result.checkpoint, seed);
    r.finite = result.metrics.all_finite();
    log_info("cell " + cell + " seed " + std::to_string(seed) + ": target " + fmt(r.target_map) + " source " +
             fmt(r.source_map));
    return runs_.emplace(key, std::move(r)).first->second;
  }

  const RunResult& full(std::uint64_t seed) { return run("full", seed, dsem_, adapt_); }

  const RunResult& source_only(std::uint64_t seed) {
    AdaptConfig cfg = adapt_;
    cfg.dsem_losses = false;
    return run("source-only", seed, dsem_, cfg);
  }

 private:
  DetectorConfig det_;
  DsemConfig dsem_;
  AdaptConfig adapt_;
  std::map<std::uint64_t, SeedData> data_;
  PretrainCache cache_;
  std::map<std::pair<std::string, std::uint64_t>, RunResult> runs_;
};

void write_rows(const fs::path& out, const std::string& stem, const std::vector<AblationRow>& rows) {
  fs::create_directories(out);
  write_ablation_runs_csv(out / (stem + "_runs.csv"), rows);
  write_ablation_summary_csv(out / (stem + "_summary.csv"), summarize_ablation(rows));
}

// ---------------------------------------------------------------------------

Verdict gradient_correctness() {
  double worst = 0.0;
  std::string worst_op;
  int ops = 0, failures = 0;
  for (const auto& check : differentiable_op_checks()) {
    ++ops;
    Rng rng = derive_stream(7, "acceptance/fd/" + check.name);
    for (int i = 0; i < 20; ++i) {
      const double err = check.instance(rng);
      if (!(err < kFdTolerance)) ++failures;
      if (!(err <= worst)) {
        worst = err;
        worst_op = check.name;
      }
    }
  }
  return {failures == 0, std::to_string(ops) + " ops x 20 instances, step " + fmt(kFdStep, 5) + ", worst error " +
                             std::to_string(worst) + " (" + worst_op + "), failures " + std::to_string(failures)};
}

Verdict grl_contract() {
  Rng rng(21);
  bool forward_ok = true, backward_ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const double c = rng.uniform(0.0, 3.0);
    Tensor x = Tensor::zeros({2, 3, 5, 4}, true);
    for (float& v : x.mutable_data()) v = static_cast<float>(rng.uniform(-2, 2));
    std::vector<float> g(x.numel());
    for (float& v : g) v = static_cast<float>(rng.uniform(-2, 2));
    const Tensor y = grl(x, c);
    forward_ok = forward_ok && std::equal(y.data().begin(), y.data().end(), x.data().begin(), x.data().end());
    backward(y, std::span<const float>(g));
    const float factor = static_cast<float>(-c);
    for (std::size_t i = 0; i < g.size(); ++i) backward_ok = backward_ok && x.grad()[i] == factor * g[i];
  }

  // Backbone gradient of the alignment losses, with and without the reversal.
  const DetectorConfig dc;
  Detector<float> det(dc);
  det.init(5);
  DsemConfig mc;
  mc.inner_channels = 32;
  std::vector<std::unique_ptr<Dsem<float>>> mods;
  for (int s : {8, 32}) {
    mods.push_back(std::make_unique<Dsem<float>>(mc, s, det.feature_channels(s), dc.input_size / s));
    mods.back()->init(5);
  }
  const auto pair = gen_domain_pair(2, 2, shift_preset("default"), 77);
  std::vector<const Image*> si, ti;
  std::vector<std::vector<Box>> boxes;
  for (const auto& s : pair.source) {
    si.push_back(&s.image);
    std::vector<Box> b;
    for (const auto& o : s.objects) b.push_back(o.box);
    boxes.push_back(b);
  }
  for (const auto& s : pair.target) ti.push_back(&s.image);
  const Tensor src = make_batch(si), tgt = make_batch(ti);
  const auto backbone = det.backbone_params();
  auto collect = [&] {
    std::vector<float> out;
    for (auto* p : backbone) {
      if (p->tensor.has_grad()) out.insert(out.end(), p->tensor.grad().begin(), p->tensor.grad().end());
      else out.insert(out.end(), p->tensor.numel(), 0.0f);
    }
    return out;
  };
  auto clear = [&] {
    for (auto* p : det.params().all()) p->tensor.zero_grad();
    for (auto& m : mods)
      for (auto* p : m->params().all()) p->tensor.zero_grad();
  };
  bool backbone_ok = true;
  double norm = 0.0;
  for (double c : {1.0, 0.5, 0.25, 2.0}) {
    clear();
    {
      const auto fs_ = det.backbone_forward(src), ft_ = det.backbone_forward(tgt);
      Tensor total;
      for (auto& m : mods) {
        const auto l = m->losses(m->forward_domain(fs_.at(m->stride()), Domain::source, &boxes, c),
                                 m->forward_domain(ft_.at(m->stride()), Domain::target, nullptr, c));
        total = total.defined() ? add(total, l.adv) : l.adv;
      }
      backward(total);
    }
    const auto with_grl = collect();
    clear();
    {
      const auto fs_ = det.backbone_forward(src), ft_ = det.backbone_forward(tgt);
      Tensor total;
      for (auto& m : mods) {
        auto plain = [&](const Tensor& f) {
          const auto mask = m->seg_branch_forward(f.detach()).mask;
          return m->classifier().logits(m->encode(elementwise_mul(mask, f)));
        };
        const Tensor l = domain_adv_loss(plain(fs_.at(m->stride())), plain(ft_.at(m->stride())));
        total = total.defined() ? add(total, l) : l;
      }
      backward(total);
    }
    const auto without = collect();
    const float factor = static_cast<float>(-c);
    for (std::size_t i = 0; i < without.size(); ++i) {
      backbone_ok = backbone_ok && with_grl[i] == factor * without[i];
      norm += static_cast<double>(without[i]) * without[i];
    }
  }
  backbone_ok = backbone_ok && norm > 0.0;
  return {forward_ok && backward_ok && backbone_ok,
          std::string("forward identity ") + (forward_ok ? "bitwise" : "BROKEN") + "; backward -c*g " +
              (backward_ok ? "exact" : "INEXACT") + " on 20 random coefficients; backbone gradient at c in {1, 0.5, "
              "0.25, 2} " + (backbone_ok ? "equals" : "differs from") + " -c x plain gradient over " +
              std::to_string(backbone.size()) + " tensors"};
}

Verdict inference_equivalence() {
  // A detector that has been through a short adaptation, so its checkpoint
  // carries trained DSEM parameters.
  const DetectorConfig dc;
  DsemConfig mc;
  mc.inner_channels = 32;
  AdaptConfig cfg;
  cfg.pretrain_iters = 20;
  cfg.adapt_iters = 20;
  cfg.seed = 3;
  const auto pair = gen_domain_pair(32, 32, shift_preset("default"), 31);
  Detector<float> pre_det(dc);
  const auto pre = pretrain_source(pre_det, pair.source, cfg);
  const auto adapted = adapt(pre, pair.source, strip_annotations(pair.target), dc, mc, cfg).checkpoint;

  const auto bare = load_detector(strip_prefix(adapted, "dsem."), dc);
  const auto host = load_detector(adapted, dc);
  std::vector<std::unique_ptr<Dsem<float>>> mods;
  for (int s : cfg.dsem_strides) {
    mods.push_back(std::make_unique<Dsem<float>>(mc, s, host.feature_channels(s), dc.input_size / s));
    std::vector<std::string> ignored{"detector."};
    for (int other : cfg.dsem_strides)
      if (other != s) ignored.push_back("dsem.s" + std::to_string(other) + ".");
    apply_checkpoint<float>(adapted, mods.back()->params().all(), ignored);
  }

  const auto images = gen_domain_pair(25, 25, shift_preset("default"), 4242);
  std::vector<const Image*> all;
  for (const auto& s : images.source) all.push_back(&s.image);
  for (const auto& s : images.target) all.push_back(&s.image);
  int identical = 0;
  for (const Image* img : all) {
    const Tensor x = make_batch(std::span<const Image* const>(&img, 1));
    const auto plain = bare.forward(x);
    const auto feats = host.backbone_forward(x);
    for (const auto& m : mods) m->forward_domain(feats.at(m->stride()), Domain::target, nullptr, 1.0);
    const auto with = host.heads(feats);
    bool same = std::equal(plain.cls.data().begin(), plain.cls.data().end(), with.cls.data().begin(),
                           with.cls.data().end()) &&
                std::equal(plain.loc.data().begin(), plain.loc.data().end(), with.loc.data().begin(),
                           with.loc.data().end());
    const auto da = decode_and_nms(plain, bare.flat_anchors(), NmsConfig{});
    const auto db = decode_and_nms(with, host.flat_anchors(), NmsConfig{});
    same = same && da[0].size() == db[0].size();
    for (std::size_t k = 0; same && k < da[0].size(); ++k)
      same = da[0][k].box == db[0][k].box && da[0][k].class_id == db[0][k].class_id && da[0][k].score == db[0][k].score;
    identical += same;
  }
  return {identical == static_cast<int>(all.size()),
          std::to_string(identical) + "/" + std::to_string(all.size()) +
              " images with bitwise-identical head outputs and detections"};
}

Verdict architecture_invariants() {
  const DsemConfig def;
  bool ok = def.dilations() == std::vector<int>{1, 2, 4, 8} && def.dense_depth == 3 &&
            def.pool_bins == std::vector<int>{1, 2, 4, 8};
  const DetectorConfig dc;
  Detector<float> det(dc);
  det.init(1);
  Rng rng(4);
  int shapes = 0;
  for (int s : dc.head_strides) {
    for (int depth : {0, 1, 2, 3, 4}) {
      DsemConfig c;
      c.dense_depth = depth;
      c.inner_channels = 16;
      Dsem<float> m(c, s, det.feature_channels(s), dc.input_size / s);
      m.init(2);
      Tensor x = Tensor::zeros({2, det.feature_channels(s), dc.input_size / s, dc.input_size / s});
      for (float& v : x.mutable_data()) v = static_cast<float>(rng.uniform(-1, 1));
      const Shape in = x.shape(), mid = m.dense_dilated_encode(x).shape(), out = m.encode(x).shape();
      ok = ok && mid.h == in.h && mid.w == in.w && out.h == in.h && out.w == in.w;
      ++shapes;
    }
  }
  return {ok, "dilations {1, 2, 4, 8} at l = 3, default bins {1, 2, 4, 8}, encoder keeps H x W in " +
                  std::to_string(shapes) + " stride/depth combinations"};
}

Verdict adaptation_efficacy(Experiment& ex, const fs::path& out) {
  std::vector<double> base_t, base_s, full_t, full_s;
  std::vector<double> pre_t;
  std::vector<AblationRow> rows;
  bool finite = true;
  for (std::uint64_t s : kSeeds) {
    const auto pre = ex.evaluate(ex.pretrained(s), s);
    const auto& b = ex.source_only(s);
    const auto& f = ex.full(s);
    pre_t.push_back(pre.target_map);
    base_t.push_back(b.target_map);
    base_s.push_back(b.source_map);
    full_t.push_back(f.target_map);
    full_s.push_back(f.source_map);
    finite = finite && b.finite && f.finite;
    rows.push_back({"pretrained", s, pre.target_map, pre.source_map});
    rows.push_back({"source-only", s, b.target_map, b.source_map});
    rows.push_back({"dsem", s, f.target_map, f.source_map});
  }
  write_rows(out, "efficacy", rows);
  const double gain = mean(full_t) - mean(base_t);
  const double drop = mean(base_s) - mean(full_s);
  const bool frozen_ok = std::abs(mean(base_t) - kFrozenBaselineTarget) <= kRegressionTolerance &&
                         std::abs(mean(full_t) - kFrozenAdaptedTarget) <= kRegressionTolerance;
  const std::string frozen = std::string("frozen values ") + (frozen_ok ? "matched" : "MISMATCHED");
  return {gain >= kEfficacyGain && drop <= kSourceDrop && finite && frozen_ok,
          "target mAP " + fmt(mean(full_t)) + " vs source-only " + fmt(mean(base_t)) + " (gain " + fmt(gain) +
              ", need >= " + fmt(kEfficacyGain, 2) + "); source mAP " + fmt(mean(full_s)) + " vs " +
              fmt(mean(base_s)) + " (drop " + fmt(drop) + ", need <= " + fmt(kSourceDrop, 2) +
              "); pretrained target " + fmt(mean(pre_t)) + "; metrics " + (finite ? "finite" : "NOT FINITE") +
              "; " + frozen};
}

Verdict adversarial_convergence(Experiment& ex) {
  std::vector<double> before, after;
  for (std::uint64_t s : kSeeds) {
    const auto& d = ex.data(s);
    AdaptConfig cfg = ex.adapt_config();
    cfg.seed = s;
    before.push_back(probe_domain_accuracy(ex.pretrained(s), d.test.source, d.test.target, ex.detector(), ex.dsem(), cfg));
    after.push_back(probe_domain_accuracy(ex.full(s).checkpoint, d.test.source, d.test.target, ex.detector(),
                                          ex.dsem(), cfg));
  }
  auto per_seed = [](const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : "/") + fmt(x, 3);
    return s;
  };
  return {mean(before) > kProbeLearnable && mean(after) < mean(before),
          "probe accuracy before " + fmt(mean(before)) + " [" + per_seed(before) + "] (need > " +
              fmt(kProbeLearnable, 1) + "), after " + fmt(mean(after)) + " [" + per_seed(after) + "] (need < before)"};
}

// Paired noise of a mean difference: sd of per-seed differences / sqrt(n).
double paired_noise(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double m = mean(d);
  double ss = 0.0;
  for (double x : d) ss += (x - m) * (x - m);
  return std::sqrt(ss / (d.size() - 1)) / std::sqrt(static_cast<double>(d.size()));
}

Verdict ablation_directionality(Experiment& ex, const fs::path& out) {
  std::vector<AblationRow> rows;
  // Target mAP per seed; every run is also recorded as a CSV row.
  auto cell = [&](const std::string& name, const DsemConfig& c) {
    std::vector<double> t;
    for (std::uint64_t s : kSeeds) {
      const auto& r = ex.run(name, s, c, ex.adapt_config());
      rows.push_back({name, s, r.target_map, r.source_map});
      t.push_back(r.target_map);
    }
    return t;
  };
  auto variant = [&](auto edit) {
    DsemConfig c = ex.dsem();
    edit(c);
    return c;
  };
  const auto fe_da = cell("full", ex.dsem());
  const auto fe_only = cell("fe-no-da", variant([](DsemConfig& c) { c.seg_domain_adapt = false; }));
  const auto no_fe = cell("no-fe", variant([](DsemConfig& c) { c.foreground_enhance = false; }));
  const auto l0 = cell("l=0", variant([](DsemConfig& c) { c.dense_depth = 0; }));
  const auto l1 = cell("l=1", variant([](DsemConfig& c) { c.dense_depth = 1; }));
  write_rows(out, "ablation", rows);

  const double gap1 = mean(fe_da) - mean(fe_only), gap2 = mean(fe_only) - mean(no_fe);
  const double noise1 = paired_noise(fe_da, fe_only), noise2 = paired_noise(fe_only, no_fe);
  const double ends = mean(fe_da) - mean(no_fe);
  const double depth_gap = mean(fe_da) - mean(l0);
  const bool ok = gap1 >= -noise1 && gap2 >= -noise2 && ends >= kAblationEndGap && depth_gap >= kAblationEndGap;
  return {ok, "FE+DA " + fmt(mean(fe_da)) + ", FE w/o DA " + fmt(mean(fe_only)) + ", w/o FE " + fmt(mean(no_fe)) +
                  " (gaps " + fmt(gap1) + " >= -" + fmt(noise1) + ", " + fmt(gap2) + " >= -" + fmt(noise2) +
                  ", ends " + fmt(ends) + " >= " + fmt(kAblationEndGap, 2) + "); l = 0/1/3: " + fmt(mean(l0)) +
                  "/" + fmt(mean(l1)) + "/" + fmt(mean(fe_da)) + " (l3 - l0 " + fmt(depth_gap) + " >= " +
                  fmt(kAblationEndGap, 2) + ")"};
}

Verdict lambda_harness(Experiment& ex, const fs::path& out) {
  std::vector<AblationRow> rows;
  std::map<double, double> means;
  for (double lambda : {0.0, 0.1, 0.5, 1.0, 2.0}) {
    std::vector<double> t;
    std::ostringstream name;
    name << "lambda=" << lambda;
    for (std::uint64_t s : kSeeds) {
      AdaptConfig cfg = ex.adapt_config();
      cfg.lambda = lambda;
      const auto& r = lambda == 1.0 ? ex.full(s) : ex.run(name.str(), s, ex.dsem(), cfg);
      rows.push_back({name.str(), s, r.target_map, r.source_map});
      t.push_back(r.target_map);
    }
    means[lambda] = mean(t);
  }
  write_rows(out, "lambda", rows);
  bool strict_min = true;
  double best = 0.0, best_lambda = 0.0;
  std::string table;
  for (const auto& [lambda, m] : means) {
    if (lambda != 0.0) strict_min = strict_min && means[0.0] < m;
    if (m > best) best = m, best_lambda = lambda;
    table += (table.empty() ? "" : ", ") + fmt(lambda, 1) + ": " + fmt(m);
  }
  const bool csv = fs::exists(out / "lambda_runs.csv") && fs::exists(out / "lambda_summary.csv");
  return {strict_min && csv, "target mAP by lambda {" + table + "}; lambda = 0 strict minimum: " +
                                 (strict_min ? "yes" : "no") + "; best lambda " + fmt(best_lambda, 1) +
                                 " (reported only); csv " + (out / "lambda_summary.csv").string()};
}

Verdict oracle_equivalences() {
  Rng rng(99);
  int checks = 0, bad = 0;
  auto expect = [&](bool ok) {
    ++checks;
    bad += !ok;
  };
  // IoU against cell counting on a 1/32 grid.
  auto corner = [&] { return static_cast<double>(rng.below(33)) / 32.0; };
  auto grid_box = [&] {
    Box b{corner(), corner(), corner(), corner()};
    if (b.xmin > b.xmax) std::swap(b.xmin, b.xmax);
    if (b.ymin > b.ymax) std::swap(b.ymin, b.ymax);
    return b;
  };
  for (int i = 0; i < 500; ++i) {
    const Box a = grid_box(), b = grid_box();
    expect(std::abs(iou(a, b) - grid_iou(a, b, 32)) <= kOracleTolerance);
  }
  // NMS against exhaustive suppression on at most 6 boxes.
  for (int i = 0; i < 500; ++i) {
    const std::size_t n = 1 + rng.below(6);
    std::vector<ScoredBox> boxes;
    for (std::size_t k = 0; k < n; ++k) {
      const double x = rng.uniform(0, 0.5), y = rng.uniform(0, 0.5), w = rng.uniform(0.1, 0.5);
      boxes.push_back({{x, y, x + w, y + rng.uniform(0.1, 0.5)}, std::round(rng.uniform(0, 4)) / 4.0, k});
    }
    const double t = rng.uniform(0.1, 0.7);
    expect(greedy_nms(boxes, t) == brute_force_nms(boxes, t));
  }
  // AP against hand-computed precision envelopes.
  auto ap = [](std::vector<unsigned char> tp, int gt) {
    return average_precision(std::span<const unsigned char>(tp), gt);
  };
  expect(std::abs(ap({1, 0, 1}, 2) - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)) <= kOracleTolerance);
  expect(std::abs(ap({0, 1, 1}, 2) - 2.0 / 3.0) <= kOracleTolerance);
  expect(std::abs(ap({1, 0, 0, 1}, 3) - (1.0 / 3.0 + 1.0 / 6.0)) <= kOracleTolerance);
  // Rasterization against cell-center containment.
  for (int i = 0; i < 200; ++i) {
    const int h = 1 + static_cast<int>(rng.below(9)), w = 1 + static_cast<int>(rng.below(9));
    std::vector<Box> boxes;
    for (std::size_t k = rng.below(4); k > 0; --k) {
      const double x = rng.uniform(0, 0.8), y = rng.uniform(0, 0.8);
      boxes.push_back({x, y, x + rng.uniform(0, 0.5), y + rng.uniform(0, 0.5)});
    }
    const auto grid = rasterize_boxes(boxes, h, w);
    bool same = grid.size() == static_cast<std::size_t>(h * w);
    for (int v = 0; same && v < h; ++v)
      for (int u = 0; u < w; ++u) {
        const double cx = (u + 0.5) / w, cy = (v + 0.5) / h;
        bool in = false;
        for (const auto& b : boxes) in = in || (b.xmin <= cx && cx <= b.xmax && b.ymin <= cy && cy <= b.ymax);
        same = same && (grid[v * w + u] != 0) == in;
      }
    expect(same);
  }
  // Two-bin adaptive pooling against quadrant means.
  for (int i = 0; i < 100; ++i) {
    const int half = 1 + static_cast<int>(rng.below(6)), c = 1 + static_cast<int>(rng.below(3));
    const int side = 2 * half;
    std::vector<double> v(static_cast<std::size_t>(c) * side * side);
    for (double& x : v) x = rng.uniform(-3, 3);
    const auto pooled = adaptive_avg_pool(TensorD::from_data({1, c, side, side}, v), 2);
    bool same = true;
    for (int ch = 0; ch < c; ++ch)
      for (int qy = 0; qy < 2; ++qy)
        for (int qx = 0; qx < 2; ++qx) {
          double s = 0.0;
          for (int y = qy * half; y < (qy + 1) * half; ++y)
            for (int x = qx * half; x < (qx + 1) * half; ++x) s += v[(static_cast<std::size_t>(ch) * side + y) * side + x];
          same = same && std::abs(pooled.at(0, ch, qy, qx) - s / (half * half)) <= kOracleTolerance;
        }
    expect(same);
  }
  return {bad == 0, std::to_string(checks - bad) + "/" + std::to_string(checks) +
                        " oracle comparisons match (IoU, NMS, AP, rasterize, pooling; tolerance 1e-6)"};
}

// --- criterion 10 ----------------------------------------------------------

int lab(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DSEM_LAB_BIN) + " -q " + args + " > /dev/null 2>> " + log.string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    files[fs::relative(e.path(), root).string()] = ss.str();
  }
  return files;
}

Verdict determinism(const fs::path& out) {
  const fs::path work = out / "determinism";
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path log = work / "stderr.txt";
  std::ofstream(work / "config.json") << R"({
  "detector": {"backbone_channels": [8, 8, 16, 16, 16]},
  "dsem": {"inner_channels": 8},
  "adapt": {"pretrain_iters": 20, "adapt_iters": 10, "probe_iters": 10, "batch_size": 4}
})";
  int failures = 0;
  const std::string cfg = " --config " + (work / "config.json").string();
  // Both passes run at the same path, since manifests record input paths.
  const fs::path r = work / "run";
  for (const char* tag : {"a", "b"}) {
    const std::string train = (r / "train").string(), test = (r / "test").string();
    auto run_dir = [&](const char* name) { return " --run-dir " + (r / name).string(); };
    failures += lab("gen-data --out " + train + " --n-source 16 --n-target 16 --seed 11", log) != 0;
    failures += lab("gen-data --out " + test + " --n-source 8 --n-target 8 --seed 12", log) != 0;
    failures += lab("pretrain" + cfg + " --data " + train + run_dir("pretrain"), log) != 0;
    failures += lab("adapt" + cfg + " --data " + train + run_dir("adapt") + " --from " + (r / "pretrain").string() +
                        " --eval-data " + test,
                    log) != 0;
    failures += lab("eval" + cfg + " --data " + test + run_dir("eval") + " --checkpoint " + (r / "adapt").string(),
                    log) != 0;
    failures += lab("probe" + cfg + " --data " + test + run_dir("probe") + " --checkpoint " +
                        (r / "adapt").string(),
                    log) != 0;
    failures += lab("ablate" + cfg + " --data " + train + run_dir("ablate") + " --eval-data " + test +
                        " --grid '{\"lambda\": [0, 1]}' --seeds 1,2",
                    log) != 0;
    failures += lab("export-saliency" + cfg + " --data " + test + run_dir("saliency") + " --checkpoint " +
                        (r / "adapt").string() + " --count 2",
                    log) != 0;
    fs::rename(r, work / tag);
  }
  const auto a = tree(work / "a"), b = tree(work / "b");
  int differing = 0;
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) ++differing;
  }
  differing += static_cast<int>(b.size() > a.size() ? b.size() - a.size() : 0);
  const bool has_metrics = a.count("pretrain/metrics.csv") && a.count("adapt/metrics.csv") &&
                           a.count("adapt/checkpoints/adapt/params.bin");
  return {failures == 0 && differing == 0 && has_metrics,
          "7 subcommands run twice: " + std::to_string(a.size()) + " files compared, " + std::to_string(differing) +
              " differ, " + std::to_string(failures) + " command failures"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string out_dir = "acceptance_out";
  std::vector<int> only;
  app.add_option("--out", out_dir, "directory for CSV artifacts")->capture_default_str();
  app.add_option("--only", only, "run only these criteria (numbers)");
  CLI11_PARSE(app, argc, argv);
  set_log_level(LogLevel::error);
  const fs::path out(out_dir);
  fs::create_directories(out);

  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  std::unique_ptr<Experiment> ex;
  auto experiment = [&]() -> Experiment& {
    if (!ex) ex = std::make_unique<Experiment>();
    return *ex;
  };

  struct Criterion {
    int number;
    const char* name;
    bool training;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", false, gradient_correctness},
      {2, "GRL contract", false, grl_contract},
      {3, "inference equivalence", false, inference_equivalence},
      {4, "architecture invariants", false, architecture_invariants},
      {5, "adaptation efficacy", true, [&] { return adaptation_efficacy(experiment(), out); }},
      {6, "adversarial convergence", true, [&] { return adversarial_convergence(experiment()); }},
      {7, "ablation directionality", true, [&] { return ablation_directionality(experiment(), out); }},
      {8, "lambda harness", true, [&] { return lambda_harness(experiment(), out); }},
      {9, "oracle equivalences", false, oracle_equivalences},
      {10, "determinism", false, [&] { return determinism(out); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!wanted(c.number)) continue;
    const auto t0 = clk::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    std::string timing = fmt(secs, 1) + " s";
    if (c.training) {
      const bool in_budget = secs <= kTrainingBudgetSeconds;
      timing += in_budget ? " (within 900 s)" : " (OVER the 900 s budget)";
      v.pass = v.pass && in_budget;
    }
    failed += !v.pass;
    std::cout << "criterion " << c.number << " " << (v.pass ? "PASS" : "FAIL") << " " << c.name << ": " << v.detail
              << "; " << timing << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
