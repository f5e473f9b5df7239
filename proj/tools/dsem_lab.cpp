#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dsem/checkpoint.hpp"
#include "dsem/config.hpp"
#include "dsem/data.hpp"
#include "dsem/log.hpp"
#include "dsem/ops.hpp"
#include "dsem/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dsem;

namespace {

constexpr int kReportSchema = 1;

struct RunOptions {
  std::string config_path;
  std::vector<std::string> data;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON config (detector/dsem/adapt/eval sections)");
  cmd->add_option("--data", o.data, "dataset directory (repeatable)")->required();
  cmd->add_option("--run-dir", o.run_dir, "output directory")->required();
  cmd->add_option("--seed", o.seed, "root seed (overrides adapt.seed)");
  cmd->add_flag("--force", o.force, "reuse a non-empty run directory");
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && !fs::is_empty(p); }

void prepare_dir(const fs::path& dir, bool force, const char* what) {
  if (non_empty_dir(dir) && !force) {
    throw std::runtime_error(std::string(what) + " " + dir.string() + " is not empty (use --force)");
  }
  fs::create_directories(dir);
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

// Defaults < config file < flags; the merge is persisted before any work.
RunConfig resolve_config(const RunOptions& o, const json& flag_overrides) {
  RunConfig c;
  if (!o.config_path.empty()) c = load_config(o.config_path);
  merge_config(c, flag_overrides);
  if (o.seed) c.adapt.seed = *o.seed;
  c.validate();
  return c;
}

void write_run_header(const fs::path& run_dir, const RunConfig& c, const std::string& command,
                      const RunOptions& o) {
  write_json(run_dir / "resolved-config.json", config_to_json(c));
  write_json(run_dir / "run-manifest.json", {{"tool", "dsem_lab"},
                                             {"version", DSEM_LAB_VERSION},
                                             {"command", command},
                                             {"seed", c.adapt.seed},
                                             {"data", o.data},
                                             {"config", config_to_json(c)}});
}

std::vector<Sample> load_all(const std::vector<std::string>& dirs, int num_classes) {
  std::vector<Sample> out;
  std::set<std::string> ids;
  for (const auto& d : dirs) {
    for (auto& s : load_dataset(d)) {
      if (!ids.insert(s.image_id).second) throw std::runtime_error("duplicate image id " + s.image_id + " in " + d);
      for (const auto& o : s.objects) {
        if (o.label >= num_classes) {
          throw std::runtime_error("dataset/model class-count mismatch: image " + s.image_id + " has label " +
                                   std::to_string(o.label) + ", model has " + std::to_string(num_classes) +
                                   " classes");
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::exists(p / "params.bin")) return p;
  for (const char* stage : {"adapt", "pretrain"})
    if (fs::exists(p / "checkpoints" / stage / "params.bin")) return p / "checkpoints" / stage;
  throw std::runtime_error("missing checkpoint at " + p.string());
}

Domain split_domain(const std::string& split) {
  return split == "source-test" ? Domain::source : Domain::target;
}

json map_json(const MapResult& m) {
  json per = json::array();
  for (const auto& ap : m.per_class_ap) per.push_back(ap ? json(*ap) : json(nullptr));
  return {{"mAP", m.map}, {"per_class_ap", per}, {"gt_counts", m.gt_counts}};
}

json report_base(const std::string& command) {
  return {{"schema", kReportSchema}, {"command", command}, {"version", DSEM_LAB_VERSION}};
}

// DSEM modules rebuilt from a checkpoint; empty when it carries none.
std::vector<std::unique_ptr<Dsem<float>>> load_dsems(const Checkpoint& ckpt, const RunConfig& c,
                                                     const Detector<float>& det) {
  std::vector<std::unique_ptr<Dsem<float>>> out;
  const bool any = std::any_of(ckpt.entries.begin(), ckpt.entries.end(),
                               [](const CheckpointEntry& e) { return e.name.rfind("dsem.", 0) == 0; });
  if (!any) return out;
  for (int stride : c.adapt.dsem_strides) {
    auto m = std::make_unique<Dsem<float>>(c.dsem, stride, det.feature_channels(stride),
                                           c.detector.input_size / stride);
    std::vector<std::string> ignored{"detector."};
    for (int other : c.adapt.dsem_strides)
      if (other != stride) ignored.push_back("dsem.s" + std::to_string(other) + ".");
    apply_checkpoint<float>(ckpt, m->params().all(), ignored);
    out.push_back(std::move(m));
  }
  return out;
}

std::string progress_line(const IterationRecord& r) {
  std::ostringstream os;
  os << "iter " << r.iteration << " l_det " << r.l_det;
  for (const auto& [stride, v] : r.l_adv) os << " l_adv_" << stride << " " << v;
  if (r.domain_acc) os << " domain_acc " << *r.domain_acc;
  return os.str();
}

ProgressFn every(int period) {
  return [period](const IterationRecord& r) {
    if (r.iteration % period == 0) log_info(progress_line(r));
  };
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int n_source, int n_target, const std::string& shift_text,
                 std::uint64_t seed, bool force) {
  const ShiftSpec shift = parse_shift(shift_text);
  if (non_empty_dir(out)) {
    if (!force) throw std::runtime_error("output directory " + out + " is not empty (use --force)");
    fs::remove_all(out);
  }
  const auto pair = gen_domain_pair(n_source, n_target, shift, seed);
  std::vector<Sample> all = pair.source;
  all.insert(all.end(), pair.target.begin(), pair.target.end());
  const json genspec{{"shift", shift_to_json(shift)},
                     {"seed", seed},
                     {"n_source", n_source},
                     {"n_target", n_target},
                     {"image_size", kImageSize},
                     {"classes", kClassNames}};
  save_dataset(out, all, genspec);
  const auto cs = class_counts(pair.source, static_cast<int>(kClassNames.size()));
  const auto ct = class_counts(pair.target, static_cast<int>(kClassNames.size()));
  std::cout << "domain  images";
  for (const auto& name : kClassNames) std::cout << "  " << name;
  std::cout << "\nsource  " << n_source;
  for (int v : cs) std::cout << "  " << v;
  std::cout << "\ntarget  " << n_target;
  for (int v : ct) std::cout << "  " << v;
  std::cout << "\n";
  return 0;
}

int cmd_pretrain(const RunOptions& o) {
  const RunConfig c = resolve_config(o, json::object());
  const fs::path run(o.run_dir);
  prepare_dir(run, o.force, "run directory");
  write_run_header(run, c, "pretrain", o);
  const auto samples = load_all(o.data, c.detector.num_classes);
  const auto source = select_domain(samples, Domain::source);
  Detector<float> det(c.detector);
  RunMetrics metrics;
  const Checkpoint ckpt = pretrain_source(det, source, c.adapt, &metrics, every(100));
  save_checkpoint(ckpt, run / "checkpoints" / "pretrain");
  metrics.write_csv(run / "metrics.csv");
  json report = report_base("pretrain");
  report["checkpoint"] = "checkpoints/pretrain";
  report["metrics"] = "metrics.csv";
  report["iterations"] = c.adapt.pretrain_iters;
  report["final_l_det"] = metrics.records.empty() ? json(nullptr) : json(metrics.records.back().l_det);
  write_json(run / "report.json", report);
  return 0;
}

int cmd_adapt(const RunOptions& o, const std::string& from, std::optional<double> lambda,
              const std::vector<std::string>& eval_data) {
  json overrides = json::object();
  if (lambda) overrides["adapt"]["lambda"] = *lambda;
  const RunConfig c = resolve_config(o, overrides);
  c.adapt.validate(true);
  const Checkpoint pre = load_checkpoint(resolve_checkpoint(from));
  const fs::path run(o.run_dir);
  prepare_dir(run, o.force, "run directory");
  write_run_header(run, c, "adapt", o);
  const auto samples = load_all(o.data, c.detector.num_classes);
  const auto source = select_domain(samples, Domain::source);
  auto target_samples = select_domain(samples, Domain::target);
  if (c.adapt.few_shot_target_per_class) {
    target_samples = few_shot_subset(target_samples, *c.adapt.few_shot_target_per_class,
                                     c.detector.num_classes, c.adapt.seed);
    log_info("few-shot target subset: " + std::to_string(target_samples.size()) + " images");
  }
  const auto target = strip_annotations(target_samples);
  auto result = adapt(pre, source, target, c.detector, c.dsem, c.adapt, every(100));
  save_checkpoint(result.checkpoint, run / "checkpoints" / "adapt");
  result.metrics.write_csv(run / "metrics.csv");
  json report = report_base("adapt");
  report["checkpoint"] = "checkpoints/adapt";
  report["metrics"] = "metrics.csv";
  report["iterations"] = c.adapt.adapt_iters;
  if (!eval_data.empty()) {
    const auto test = load_all(eval_data, c.detector.num_classes);
    const auto det = load_detector(result.checkpoint, c.detector);
    for (const char* split : {"source-test", "target-test"}) {
      const auto part = select_domain(test, split_domain(split));
      if (part.empty()) continue;
      const auto ev = evaluate_detector(det, part, c.eval);
      const std::string dump = std::string("detections/") + split + ".jsonl";
      write_detection_dump(run / dump, ev.detections);
      report[split] = map_json(ev.map);
      report[split]["detections"] = dump;
    }
  }
  write_json(run / "report.json", report);
  return 0;
}

int cmd_eval(const RunOptions& o, const std::string& checkpoint, const std::string& split,
             bool oracle_detections) {
  const RunConfig c = resolve_config(o, json::object());
  const fs::path run(o.run_dir);
  std::optional<Checkpoint> ckpt;
  if (!oracle_detections) ckpt = load_checkpoint(resolve_checkpoint(checkpoint));
  prepare_dir(run, o.force, "run directory");
  write_run_header(run, c, "eval", o);
  const auto part = select_domain(load_all(o.data, c.detector.num_classes), split_domain(split));
  if (part.empty()) throw std::runtime_error("no " + split + " images in the given data");

  json report = report_base("eval");
  report["split"] = split;
  report["seg_miou"] = nullptr;
  report["domain_acc"] = nullptr;
  std::vector<ImageDetections> dets;
  MapResult map;
  if (oracle_detections) {
    // Identity case: every ground truth returned as a detection with score 1.
    std::vector<ImageGroundTruth> gt;
    for (const auto& s : part) {
      ImageDetections d{s.image_id, {}};
      for (const auto& ob : s.objects) d.detections.push_back({ob.box, ob.label, 1.0});
      dets.push_back(std::move(d));
      gt.push_back({s.image_id, s.objects});
    }
    map = evaluate_map(dets, gt, c.detector.num_classes, 0.5);
  } else {
    const auto det = load_detector(*ckpt, c.detector);
    auto ev = evaluate_detector(det, part, c.eval);
    dets = std::move(ev.detections);
    map = ev.map;
    const auto modules = load_dsems(*ckpt, c, det);
    if (!modules.empty()) {
      // Fraction of locations the stored domain classifiers assign to the
      // split's own domain, and the foreground branch's mIoU on its boxes.
      SegConfusion cm;
      double acc = 0.0;
      for (const auto& m : modules) {
        double correct = 0.0, total = 0.0;
        for (std::size_t start = 0; start < part.size(); start += 16) {
          const std::size_t end = std::min(part.size(), start + 16);
          std::vector<const Image*> imgs;
          std::vector<std::vector<Box>> boxes;
          for (std::size_t i = start; i < end; ++i) {
            imgs.push_back(&part[i].image);
            std::vector<Box> b;
            for (const auto& ob : part[i].objects) b.push_back(ob.box);
            boxes.push_back(std::move(b));
          }
          const Tensor feats = det.backbone_forward(make_batch(imgs)).at(m->stride());
          const Tensor x = m->config().foreground_enhance
                               ? elementwise_mul(m->seg_branch_forward(feats).mask, feats)
                               : feats;
          const Tensor logit = m->classifier().logits(m->encode(x));
          const bool want_source = split_domain(split) == Domain::source;
          for (float z : logit.data()) correct += ((z >= 0.0f) == want_source) ? 1.0 : 0.0;
          total += logit.numel();
          if (m->config().foreground_enhance) {
            const auto fg = m->seg_branch_forward(feats);
            const Shape s = fg.seg_logits.shape();
            std::vector<unsigned char> grid;
            for (const auto& b : boxes) {
              const auto g = rasterize_boxes(b, s.h, s.w);
              grid.insert(grid.end(), g.begin(), g.end());
            }
            cm.add(fg.seg_logits.data(), s, grid);
          }
        }
        acc += correct / total;
      }
      report["domain_acc"] = acc / modules.size();
      if (const auto mi = cm.miou()) report["seg_miou"] = *mi;
    }
  }
  const std::string dump = "detections/" + split + ".jsonl";
  write_detection_dump(run / dump, dets);
  report.update(map_json(map));
  report["detections"] = dump;
  write_json(run / "report.json", report);
  std::cout << "mAP " << map.map << "\n";
  return 0;
}

int cmd_probe(const RunOptions& o, const std::string& checkpoint) {
  const RunConfig c = resolve_config(o, json::object());
  c.adapt.validate(true);
  const Checkpoint ckpt = load_checkpoint(resolve_checkpoint(checkpoint));
  const fs::path run(o.run_dir);
  prepare_dir(run, o.force, "run directory");
  write_run_header(run, c, "probe", o);
  const auto samples = load_all(o.data, c.detector.num_classes);
  const double acc = probe_domain_accuracy(ckpt, select_domain(samples, Domain::source),
                                           select_domain(samples, Domain::target), c.detector, c.dsem, c.adapt);
  json report = report_base("probe");
  report["mAP"] = nullptr;
  report["per_class_ap"] = nullptr;
  report["seg_miou"] = nullptr;
  report["domain_acc"] = acc;
  report["probe_stride"] = c.adapt.dsem_strides.front();
  write_json(run / "report.json", report);
  std::cout << "domain_acc " << acc << "\n";
  return 0;
}

// Grid axes: any subset of fe, da, depth, bins, strides, lambda. Cells are
// the cartesian product in that axis order.
std::vector<AblationCell> build_grid(const RunConfig& base, const json& grid) {
  static const std::vector<std::string> axes{"fe", "da", "depth", "bins", "strides", "lambda"};
  for (const auto& [key, v] : grid.items()) {
    if (std::find(axes.begin(), axes.end(), key) == axes.end()) {
      throw ConfigError("unknown ablation axis \"" + key + "\"");
    }
    if (!v.is_array() || v.empty()) throw ConfigError("ablation axis \"" + key + "\" needs a non-empty list");
  }
  std::vector<AblationCell> cells{{"", base.dsem, base.adapt}};
  for (const auto& axis : axes) {
    if (!grid.contains(axis)) continue;
    std::vector<AblationCell> next;
    for (const auto& cell : cells) {
      for (const auto& v : grid[axis]) {
        AblationCell c = cell;
        std::string label;
        if (axis == "fe") {
          c.dsem.foreground_enhance = v.get<bool>();
          label = std::string("fe=") + (c.dsem.foreground_enhance ? "on" : "off");
        } else if (axis == "da") {
          c.dsem.seg_domain_adapt = v.get<bool>();
          label = std::string("da=") + (c.dsem.seg_domain_adapt ? "on" : "off");
        } else if (axis == "depth") {
          c.dsem.dense_depth = v.get<int>();
          label = "l=" + std::to_string(c.dsem.dense_depth);
        } else if (axis == "bins") {
          c.dsem.pool_bins = v.get<std::vector<int>>();
          label = "bins=" + v.dump();
        } else if (axis == "strides") {
          c.adapt.dsem_strides = v.get<std::vector<int>>();
          label = "strides=" + v.dump();
        } else {
          c.adapt.lambda = v.get<double>();
          std::ostringstream os;
          os << "lambda=" << c.adapt.lambda;
          label = os.str();
        }
        c.name = c.name.empty() ? label : c.name + " " + label;
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  for (auto& c : cells) {
    if (c.name.empty()) c.name = "base";
    std::replace(c.name.begin(), c.name.end(), ',', ';');
    c.dsem.validate();
    c.adapt.validate(true);
  }
  return cells;
}

json preset_grid(const std::string& name) {
  if (name == "lambda") return {{"lambda", {0.0, 0.1, 0.5, 1.0, 2.0}}};
  if (name == "fe") return json::parse(R"({"fe": [true, false], "da": [true, false]})");
  if (name == "depth") return {{"depth", {0, 1, 2, 3, 4}}};
  if (name == "bins") return json::parse(R"({"bins": [[1, 2, 4], [1, 2, 4, 8]]})");
  if (name == "strides") return json::parse(R"({"strides": [[8], [32], [8, 32]]})");
  throw ConfigError("unknown ablation preset \"" + name + "\"");
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const auto v = std::stoull(item, &pos);
    if (pos != item.size()) throw std::invalid_argument("bad seed \"" + item + "\"");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("--seeds needs at least one seed");
  return out;
}

int run_child(const std::function<void()>& fn) {
  std::cout.flush();
  std::cerr.flush();
  const pid_t pid = fork();
  if (pid < 0) throw std::runtime_error("fork failed");
  if (pid == 0) {
    int code = 0;
    try {
      fn();
    } catch (const std::exception& ex) {
      std::cerr << "dsem_lab: child error: " << ex.what() << "\n";
      code = 1;
    }
    std::cout.flush();
    std::cerr.flush();
    _exit(code);
  }
  return pid;
}

void wait_children(std::set<pid_t>& running, std::size_t limit) {
  while (running.size() > limit) {
    int status = 0;
    const pid_t pid = waitpid(-1, &status, 0);
    if (pid < 0) throw std::runtime_error("waitpid failed");
    running.erase(pid);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) throw std::runtime_error("an ablation child run failed");
  }
}

int cmd_ablate(const RunOptions& o, const std::vector<std::string>& eval_data, const std::string& preset,
               const std::string& grid_text, const std::string& seeds_text, int jobs,
               std::optional<double> lambda) {
  json overrides = json::object();
  if (lambda) overrides["adapt"]["lambda"] = *lambda;
  const RunConfig c = resolve_config(o, overrides);
  if (preset.empty() == grid_text.empty()) throw std::invalid_argument("give exactly one of --preset and --grid");
  const json grid = preset.empty() ? json::parse(grid_text) : preset_grid(preset);
  const auto cells = build_grid(c, grid);
  const auto seeds = parse_seeds(seeds_text);
  if (jobs < 1) throw std::invalid_argument("--jobs must be >= 1");

  const fs::path run(o.run_dir);
  prepare_dir(run, o.force, "run directory");
  write_run_header(run, c, "ablate", o);
  write_json(run / "grid.json", grid);
  const auto samples = load_all(o.data, c.detector.num_classes);
  const auto test = load_all(eval_data, c.detector.num_classes);
  const auto source = select_domain(samples, Domain::source);
  const auto target = strip_annotations(select_domain(samples, Domain::target));
  const auto source_test = select_domain(test, Domain::source);
  const auto target_test = select_domain(test, Domain::target);
  const AblationData data{source, target, source_test, target_test};

  // Source-only checkpoints, one per seed, shared by every cell.
  std::set<pid_t> running;
  for (std::uint64_t seed : seeds) {
    const fs::path dir = run / "pretrain" / ("seed" + std::to_string(seed));
    wait_children(running, static_cast<std::size_t>(jobs - 1));
    running.insert(run_child([&, seed, dir] {
      PretrainCache cache;
      save_checkpoint(pretrained_for_seed(cache, seed, source, c.detector, c.adapt), dir);
    }));
  }
  wait_children(running, 0);

  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::uint64_t seed : seeds) {
      const fs::path out = run / "cells" / ("cell" + std::to_string(i) + "_seed" + std::to_string(seed) + ".json");
      wait_children(running, static_cast<std::size_t>(jobs - 1));
      running.insert(run_child([&, i, seed, out] {
        PretrainCache cache;
        cache.emplace(seed, load_checkpoint(run / "pretrain" / ("seed" + std::to_string(seed))));
        const auto row = run_ablation_cell(cells[i], seed, data, c.detector, cache);
        write_json(out, {{"cell", row.cell},
                         {"seed", row.seed},
                         {"target_map", row.target_map},
                         {"source_map", row.source_map}});
      }));
    }
  }
  wait_children(running, 0);

  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::uint64_t seed : seeds) {
      std::ifstream is(run / "cells" / ("cell" + std::to_string(i) + "_seed" + std::to_string(seed) + ".json"));
      const json j = json::parse(is);
      rows.push_back({j.at("cell").get<std::string>(), j.at("seed").get<std::uint64_t>(),
                      j.at("target_map").get<double>(), j.at("source_map").get<double>()});
    }
  }
  const auto summary = summarize_ablation(rows);
  write_ablation_runs_csv(run / "runs.csv", rows);
  write_ablation_summary_csv(run / "summary.csv", summary);
  json report = report_base("ablate");
  report["runs"] = "runs.csv";
  report["summary"] = "summary.csv";
  report["cells"] = json::array();
  for (const auto& s : summary) {
    report["cells"].push_back({{"cell", s.cell},
                               {"runs", s.runs},
                               {"target_map_mean", s.target_mean},
                               {"target_map_sd", s.target_sd},
                               {"source_map_mean", s.source_mean},
                               {"source_map_sd", s.source_sd}});
    std::cout << s.cell << ": target mAP " << s.target_mean << " +- " << s.target_sd << "\n";
  }
  write_json(run / "report.json", report);
  return 0;
}

int cmd_export_saliency(const RunOptions& o, const std::string& checkpoint, const std::string& split, int count) {
  const RunConfig c = resolve_config(o, json::object());
  const Checkpoint ckpt = load_checkpoint(resolve_checkpoint(checkpoint));
  const fs::path run(o.run_dir);
  prepare_dir(run, o.force, "run directory");
  write_run_header(run, c, "export-saliency", o);
  const auto part = select_domain(load_all(o.data, c.detector.num_classes), split_domain(split));
  const auto det = load_detector(ckpt, c.detector);
  const auto modules = load_dsems(ckpt, c, det);
  if (modules.empty()) throw std::runtime_error("checkpoint has no DSEM parameters to explain");
  json report = report_base("export-saliency");
  report["heatmaps"] = json::array();
  const std::size_t n = std::min(part.size(), static_cast<std::size_t>(std::max(0, count)));
  for (std::size_t i = 0; i < n; ++i) {
    const Image* img = &part[i].image;
    const auto feats = det.backbone_forward(make_batch(std::span<const Image* const>(&img, 1)));
    for (const auto& m : modules) {
      const Tensor f = feats.at(m->stride());
      const Tensor x = m->config().foreground_enhance ? elementwise_mul(m->seg_branch_forward(f).mask, f) : f;
      const Heatmap map = export_domain_evidence(m->encode(x), m->classifier());
      const std::string stem = "heatmaps/" + part[i].image_id + "_s" + std::to_string(m->stride());
      fs::create_directories(run / "heatmaps");
      write_heatmap(map, (run / (stem + ".pgm")).string(), (run / (stem + ".json")).string());
      report["heatmaps"].push_back({{"image_id", part[i].image_id},
                                    {"stride", m->stride()},
                                    {"pgm", stem + ".pgm"},
                                    {"meta", stem + ".json"}});
    }
  }
  write_json(run / "report.json", report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adaptive region-free detection lab"};
  app.set_version_flag("--version", std::string(DSEM_LAB_VERSION));
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "only print warnings and errors");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic two-domain dataset");
  std::string gen_out, gen_shift = "default";
  int n_source = 200, n_target = 200;
  std::uint64_t gen_seed = 0;
  bool gen_force = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n-source", n_source, "source images")->capture_default_str();
  gen->add_option("--n-target", n_target, "target images")->capture_default_str();
  gen->add_option("--shift", gen_shift, "preset (null, default), JSON object or JSON file")->capture_default_str();
  gen->add_option("--seed", gen_seed, "seed")->capture_default_str();
  gen->add_flag("--force", gen_force, "replace a non-empty output directory");

  RunOptions pre_opts, adapt_opts, eval_opts, probe_opts, ablate_opts, sal_opts;
  auto* pre = app.add_subcommand("pretrain", "source-only detector training");
  add_run_options(pre, pre_opts);

  auto* ad = app.add_subcommand("adapt", "adversarial adaptation from a pretrained checkpoint");
  add_run_options(ad, adapt_opts);
  std::string from;
  std::optional<double> adapt_lambda;
  std::vector<std::string> adapt_eval;
  ad->add_option("--from", from, "pretrained checkpoint or run directory")->required();
  ad->add_option("--lambda", adapt_lambda, "adversarial weight (overrides adapt.lambda)");
  ad->add_option("--eval-data", adapt_eval, "test dataset(s) evaluated after training");

  auto* ev = app.add_subcommand("eval", "mAP@0.5 of a checkpoint on a test split");
  add_run_options(ev, eval_opts);
  std::string eval_ckpt, eval_split = "target-test";
  bool oracle = false;
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint or run directory");
  ev->add_option("--split", eval_split, "source-test or target-test")
      ->check(CLI::IsMember({"source-test", "target-test"}))
      ->capture_default_str();
  ev->add_flag("--oracle-detections", oracle, "testing aid: score the ground truth itself");

  auto* pr = app.add_subcommand("probe", "frozen-backbone domain probe accuracy");
  add_run_options(pr, probe_opts);
  std::string probe_ckpt;
  pr->add_option("--checkpoint", probe_ckpt, "checkpoint or run directory")->required();

  auto* ab = app.add_subcommand("ablate", "sweep DSEM variants over seeds");
  add_run_options(ab, ablate_opts);
  std::vector<std::string> ablate_eval;
  std::string preset, grid_text, seeds_text = "0,1,2";
  int jobs = 1;
  std::optional<double> ablate_lambda;
  ab->add_option("--eval-data", ablate_eval, "test dataset(s)")->required();
  ab->add_option("--preset", preset, "lambda, fe, depth, bins or strides");
  ab->add_option("--grid", grid_text, "JSON object of axis -> list of values");
  ab->add_option("--seeds", seeds_text, "comma-separated seeds")->capture_default_str();
  ab->add_option("--jobs", jobs, "concurrent child runs")->capture_default_str();
  ab->add_option("--lambda", ablate_lambda, "base adversarial weight");

  auto* sal = app.add_subcommand("export-saliency", "domain-evidence heatmaps");
  add_run_options(sal, sal_opts);
  std::string sal_ckpt, sal_split = "target-test";
  int sal_count = 4;
  sal->add_option("--checkpoint", sal_ckpt, "adapted checkpoint or run directory")->required();
  sal->add_option("--split", sal_split, "source-test or target-test")
      ->check(CLI::IsMember({"source-test", "target-test"}))
      ->capture_default_str();
  sal->add_option("--count", sal_count, "images to explain")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  if (quiet) set_log_level(LogLevel::warn);

  try {
    if (*gen) return cmd_gen_data(gen_out, n_source, n_target, gen_shift, gen_seed, gen_force);
    if (*pre) return cmd_pretrain(pre_opts);
    if (*ad) return cmd_adapt(adapt_opts, from, adapt_lambda, adapt_eval);
    if (*ev) {
      if (eval_ckpt.empty() && !oracle) throw std::runtime_error("missing checkpoint (--checkpoint)");
      return cmd_eval(eval_opts, eval_ckpt, eval_split, oracle);
    }
    if (*pr) return cmd_probe(probe_opts, probe_ckpt);
    if (*ab) return cmd_ablate(ablate_opts, ablate_eval, preset, grid_text, seeds_text, jobs, ablate_lambda);
    if (*sal) return cmd_export_saliency(sal_opts, sal_ckpt, sal_split, sal_count);
  } catch (const std::exception& ex) {
    std::cerr << "dsem_lab: error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}
