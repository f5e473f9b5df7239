#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsem/checkpoint.hpp"
#include "dsem/data.hpp"
#include "dsem/detector.hpp"
#include "dsem/dsem.hpp"
#include "dsem/eval.hpp"

namespace dsem {

struct AdaptConfig {
  double lambda = 1.0;
  std::vector<int> dsem_strides{8, 32};
  int pretrain_iters = 2000;
  int adapt_iters = 1000;
  int batch_size = 8;  // half source, half target during adaptation
  double pretrain_lr = 1e-2;
  double base_lr = 1e-3;
  double dsem_lr_multiplier = 10.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Fraction of adaptation iterations over which the GRL coefficient ramps
  // linearly from 0 to its configured value; 0 disables the ramp.
  double grl_warmup_fraction = 0.1;
  std::uint64_t seed = 0;
  std::optional<int> few_shot_target_per_class;
  int probe_iters = 200;
  double probe_lr = 1e-2;
  // Reference loop: false runs the identical schedule with every DSEM term
  // left out of the objective and only detector parameters stepped.
  bool dsem_losses = true;

  void validate(bool adapting) const;
};

// One row of metrics.csv. Absent terms are left empty in the file.
struct IterationRecord {
  int iteration = 0;
  double l_det = 0.0;
  std::optional<double> l_seg;
  std::optional<double> l_seg_adv;
  std::map<int, double> l_adv;  // by stride
  std::optional<double> domain_acc;
  std::optional<double> mask_miou;
};

struct RunMetrics {
  std::vector<IterationRecord> records;
  std::optional<MapResult> source_test;
  std::optional<MapResult> target_test;

  static const char* csv_header();
  void write_csv(const std::filesystem::path& path) const;
  bool all_finite() const;
};

// Called after every optimizer step.
using ProgressFn = std::function<void(const IterationRecord&)>;

// Detection targets for every sample, in order.
std::vector<MatchTargets> match_dataset(std::span<const Sample> samples, std::span<const Box> anchors);

// Source-only training from the seeded initialization.
Checkpoint pretrain_source(Detector<float>& detector, std::span<const Sample> source_train,
                           const AdaptConfig& config, RunMetrics* metrics = nullptr,
                           const ProgressFn& progress = {});

struct AdaptResult {
  Checkpoint checkpoint;  // detector plus every DSEM parameter
  RunMetrics metrics;
};

AdaptResult adapt(const Checkpoint& pretrained, std::span<const Sample> source_train,
                  std::span<const UnlabeledImage> target_train, const DetectorConfig& det_config,
                  const DsemConfig& dsem_config, const AdaptConfig& config,
                  const ProgressFn& progress = {});

// GRL coefficient at a given adaptation iteration.
double grl_schedule(int iteration, int total_iters, double warmup_fraction, double coeff);

// Detector inference only; entries under "dsem." in the checkpoint are ignored.
Detector<float> load_detector(const Checkpoint& ckpt, const DetectorConfig& config);

struct EvalResult {
  MapResult map;
  std::vector<ImageDetections> detections;
};

EvalResult evaluate_detector(const Detector<float>& detector, std::span<const Sample> samples,
                             const NmsConfig& nms = {}, int batch_size = 16);

// Frozen-backbone domain probe: a freshly initialized encoder and classifier
// (no foreground branch) at the first configured stride are trained on the
// even-indexed images of both sets and scored on the odd-indexed ones.
double probe_domain_accuracy(const Checkpoint& ckpt, std::span<const Sample> source_eval,
                             std::span<const Sample> target_eval, const DetectorConfig& det_config,
                             const DsemConfig& dsem_config, const AdaptConfig& config);

// Sweep over DSEM/adaptation variants. Each cell adapts from the seed's
// source-only checkpoint (pretrained once per seed and shared by all cells).
struct AblationCell {
  std::string name;
  DsemConfig dsem;
  AdaptConfig adapt;
};

struct AblationData {
  std::span<const Sample> source_train;
  std::span<const UnlabeledImage> target_train;
  std::span<const Sample> source_test;
  std::span<const Sample> target_test;
};

struct AblationRow {
  std::string cell;
  std::uint64_t seed = 0;
  double target_map = 0.0;
  double source_map = 0.0;
};

struct AblationSummary {
  std::string cell;
  int runs = 0;
  double target_mean = 0.0;
  double target_sd = 0.0;
  double source_mean = 0.0;
  double source_sd = 0.0;
};

// Pretrained checkpoints by seed; filled on demand.
using PretrainCache = std::map<std::uint64_t, Checkpoint>;

const Checkpoint& pretrained_for_seed(PretrainCache& cache, std::uint64_t seed,
                                      std::span<const Sample> source_train,
                                      const DetectorConfig& det_config, const AdaptConfig& config);

AblationRow run_ablation_cell(const AblationCell& cell, std::uint64_t seed, const AblationData& data,
                              const DetectorConfig& det_config, PretrainCache& cache);

std::vector<AblationRow> run_ablation_suite(std::span<const AblationCell> grid,
                                            std::span<const std::uint64_t> seeds,
                                            const AblationData& data, const DetectorConfig& det_config,
                                            PretrainCache* cache = nullptr);

// Per cell in grid order; sd is the sample standard deviation (0 for one run).
std::vector<AblationSummary> summarize_ablation(std::span<const AblationRow> rows);

void write_ablation_runs_csv(const std::filesystem::path& path, std::span<const AblationRow> rows);
void write_ablation_summary_csv(const std::filesystem::path& path,
                                std::span<const AblationSummary> summary);

}  // namespace dsem
