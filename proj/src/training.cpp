#include "dsem/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "dsem/log.hpp"
#include "dsem/ops.hpp"

namespace dsem {

namespace {

// Epoch-wise reshuffled index stream; batches wrap across epochs.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, Rng rng) : rng_(rng), order_(count), pos_(count) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::vector<std::size_t> next(int k) {
    std::vector<std::size_t> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
      if (pos_ == order_.size()) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

template <typename S>
Tensor gather_images(std::span<const S> items, std::span<const std::size_t> idx) {
  std::vector<const Image*> ptrs;
  ptrs.reserve(idx.size());
  for (std::size_t i : idx) ptrs.push_back(&items[i].image);
  return make_batch(ptrs);
}

std::vector<MatchTargets> gather_targets(std::span<const MatchTargets> all, std::span<const std::size_t> idx) {
  std::vector<MatchTargets> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::vector<const Parameter<float>*> as_const(const std::vector<Parameter<float>*>& params) {
  return {params.begin(), params.end()};
}

}  // namespace

void AdaptConfig::validate(bool adapting) const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("adapt.lambda must be >= 0");
  if (batch_size < 2 || batch_size % 2 != 0) throw std::invalid_argument("adapt.batch_size must be even and >= 2");
  if (pretrain_iters < 0 || adapt_iters < 0 || probe_iters < 0) {
    throw std::invalid_argument("iteration counts must be >= 0");
  }
  if (!(pretrain_lr > 0.0) || !(base_lr > 0.0) || !(probe_lr > 0.0) || !(dsem_lr_multiplier > 0.0)) {
    throw std::invalid_argument("learning rates must be > 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("adapt.momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("adapt.weight_decay must be >= 0");
  if (!(grl_warmup_fraction >= 0.0 && grl_warmup_fraction <= 1.0)) {
    throw std::invalid_argument("adapt.grl_warmup_fraction must lie in [0, 1]");
  }
  if (few_shot_target_per_class && *few_shot_target_per_class < 1) {
    throw std::invalid_argument("adapt.few_shot_target_per_class must be >= 1");
  }
  if (adapting && dsem_strides.empty()) throw std::invalid_argument("adapt.dsem_strides must not be empty");
  for (std::size_t i = 0; i < dsem_strides.size(); ++i)
    for (std::size_t j = i + 1; j < dsem_strides.size(); ++j)
      if (dsem_strides[i] == dsem_strides[j]) throw std::invalid_argument("adapt.dsem_strides has duplicates");
}

// ---------------------------------------------------------------------------
// metrics

const char* RunMetrics::csv_header() {
  return "iteration,l_det,l_seg,l_seg_adv,l_adv_8,l_adv_32,domain_acc,mask_miou";
}

void RunMetrics::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write metrics " + path.string());
  os << csv_header() << "\n";
  for (const auto& r : records) {
    auto adv = [&](int stride) {
      const auto it = r.l_adv.find(stride);
      return it == r.l_adv.end() ? std::string() : fmt(it->second);
    };
    os << r.iteration << "," << fmt(r.l_det) << "," << fmt(r.l_seg) << "," << fmt(r.l_seg_adv) << ","
       << adv(8) << "," << adv(32) << "," << fmt(r.domain_acc) << "," << fmt(r.mask_miou) << "\n";
  }
}

bool RunMetrics::all_finite() const {
  int last = -1;
  for (const auto& r : records) {
    if (r.iteration <= last) return false;
    last = r.iteration;
    auto ok = [](const std::optional<double>& v) { return !v || std::isfinite(*v); };
    if (!std::isfinite(r.l_det) || !ok(r.l_seg) || !ok(r.l_seg_adv) || !ok(r.domain_acc) || !ok(r.mask_miou)) {
      return false;
    }
    for (const auto& [stride, v] : r.l_adv)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// training

std::vector<MatchTargets> match_dataset(std::span<const Sample> samples, std::span<const Box> anchors) {
  std::vector<MatchTargets> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out[i] = match_anchors(anchors, samples[i].objects);
  return out;
}

Checkpoint pretrain_source(Detector<float>& detector, std::span<const Sample> source_train,
                           const AdaptConfig& config, RunMetrics* metrics, const ProgressFn& progress) {
  config.validate(false);
  if (source_train.empty()) throw std::invalid_argument("pretrain_source: empty source dataset");
  detector.init(config.seed);
  const auto targets = match_dataset(source_train, detector.flat_anchors());
  BatchSampler sampler(source_train.size(), derive_stream(config.seed, "train/pretrain_order"));
  const auto params = detector.params().all();
  for (int it = 0; it < config.pretrain_iters; ++it) {
    const auto idx = sampler.next(config.batch_size);
    const Tensor batch = gather_images(source_train, idx);
    const auto tgt = gather_targets(targets, idx);
    const auto loss = detection_loss(detector.forward(batch), tgt);
    const Tensor total = add(loss.cls, loss.loc);
    backward(total);
    sgd_step<float>(params, config.pretrain_lr, config.momentum, config.weight_decay);
    IterationRecord rec;
    rec.iteration = it + 1;
    rec.l_det = total.item();
    if (progress) progress(rec);
    if (metrics) metrics->records.push_back(std::move(rec));
  }
  return capture_checkpoint<float>(as_const(params));
}

double grl_schedule(int iteration, int total_iters, double warmup_fraction, double coeff) {
  const double ramp = warmup_fraction * total_iters;
  if (ramp <= 0.0) return coeff;
  return coeff * std::min(1.0, iteration / ramp);
}

AdaptResult adapt(const Checkpoint& pretrained, std::span<const Sample> source_train,
                  std::span<const UnlabeledImage> target_train, const DetectorConfig& det_config,
                  const DsemConfig& dsem_config, const AdaptConfig& config, const ProgressFn& progress) {
  config.validate(true);
  dsem_config.validate();
  if (source_train.empty()) throw std::invalid_argument("adapt: empty source dataset");
  if (target_train.empty()) throw std::invalid_argument("adapt: empty target dataset");

  Detector<float> det(det_config);
  const auto det_params = det.params().all();
  const std::vector<std::string> ignored{"dsem."};
  apply_checkpoint<float>(pretrained, det_params, ignored);

  std::vector<std::unique_ptr<Dsem<float>>> modules;
  std::vector<Parameter<float>*> dsem_params;
  for (int stride : config.dsem_strides) {
    if (std::find(det_config.head_strides.begin(), det_config.head_strides.end(), stride) ==
        det_config.head_strides.end()) {
      throw std::invalid_argument("adapt: no detector feature map at stride " + std::to_string(stride));
    }
    auto m = std::make_unique<Dsem<float>>(dsem_config, stride, det.feature_channels(stride),
                                           det_config.input_size / stride);
    m->init(config.seed);
    for (auto* p : m->params().all()) dsem_params.push_back(p);
    modules.push_back(std::move(m));
  }
  const std::vector<ParamGroup<float>> groups{{det_params, 1.0}, {dsem_params, config.dsem_lr_multiplier}};

  const auto targets = match_dataset(source_train, det.flat_anchors());
  BatchSampler src_sampler(source_train.size(), derive_stream(config.seed, "train/adapt_source_order"));
  BatchSampler tgt_sampler(target_train.size(), derive_stream(config.seed, "train/adapt_target_order"));
  const int half = config.batch_size / 2;

  AdaptResult result;
  for (int it = 0; it < config.adapt_iters; ++it) {
    const double coeff =
        grl_schedule(it, config.adapt_iters, config.grl_warmup_fraction, dsem_config.grl_coeff);
    const auto si = src_sampler.next(half);
    const auto ti = tgt_sampler.next(half);
    const Tensor src = gather_images(source_train, si);
    const auto tgt_targets = gather_targets(targets, si);
    const auto feats_s = det.backbone_forward(src);
    const auto det_loss = detection_loss(det.heads(feats_s), tgt_targets);
    Tensor total = add(det_loss.cls, det_loss.loc);

    IterationRecord rec;
    rec.iteration = it + 1;
    rec.l_det = total.item();

    if (config.dsem_losses) {
      std::vector<std::vector<Box>> boxes;
      for (std::size_t i : si) {
        std::vector<Box> b;
        for (const auto& o : source_train[i].objects) b.push_back(o.box);
        boxes.push_back(std::move(b));
      }
      const Tensor tgt = gather_images(target_train, ti);
      const auto feats_t = det.backbone_forward(tgt);
      double seg = 0.0, seg_adv = 0.0, acc = 0.0, miou = 0.0;
      int miou_count = 0;
      for (const auto& m : modules) {
        const auto ps = m->forward_domain(feats_s.at(m->stride()), Domain::source, &boxes, coeff);
        const auto pt = m->forward_domain(feats_t.at(m->stride()), Domain::target, nullptr, coeff);
        const auto l = m->losses(ps, pt);
        total = add(total, scale(l.adv, config.lambda));
        rec.l_adv[m->stride()] = l.adv.item();
        if (l.seg.defined()) {
          total = add(total, l.seg);
          seg += l.seg.item();
        }
        if (l.seg_adv.defined()) {
          total = add(total, l.seg_adv);
          seg_adv += l.seg_adv.item();
        }
        acc += l.domain_acc;
        if (l.seg_miou >= 0.0) {
          miou += l.seg_miou;
          ++miou_count;
        }
      }
      if (dsem_config.foreground_enhance) rec.l_seg = seg;
      if (dsem_config.foreground_enhance && dsem_config.seg_domain_adapt) rec.l_seg_adv = seg_adv;
      rec.domain_acc = acc / modules.size();
      if (miou_count > 0) rec.mask_miou = miou / miou_count;
      backward(total);
      sgd_step<float>(groups, config.base_lr, config.momentum, config.weight_decay);
    } else {
      backward(total);
      sgd_step<float>(det_params, config.base_lr, config.momentum, config.weight_decay);
    }
    if (progress) progress(rec);
    result.metrics.records.push_back(std::move(rec));
  }

  result.checkpoint = capture_checkpoint<float>(as_const(det_params));
  if (config.dsem_losses) {
    result.checkpoint =
        merge_checkpoints(result.checkpoint, capture_checkpoint<float>(as_const(dsem_params)));
  }
  return result;
}

// ---------------------------------------------------------------------------
// evaluation

Detector<float> load_detector(const Checkpoint& ckpt, const DetectorConfig& config) {
  Detector<float> det(config);
  const std::vector<std::string> ignored{"dsem."};
  apply_checkpoint<float>(ckpt, det.params().all(), ignored);
  return det;
}

EvalResult evaluate_detector(const Detector<float>& detector, std::span<const Sample> samples,
                             const NmsConfig& nms, int batch_size) {
  if (samples.empty()) throw std::invalid_argument("evaluate_detector: empty dataset");
  EvalResult result;
  std::vector<ImageGroundTruth> gt;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto dets = decode_and_nms(detector.forward(gather_images(samples, idx)), detector.flat_anchors(), nms);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Sample& s = samples[idx[k]];
      for (const auto& o : s.objects) {
        if (o.label >= detector.config().num_classes) {
          throw std::invalid_argument("image " + s.image_id + " has label " + std::to_string(o.label) +
                                      " but the detector has " +
                                      std::to_string(detector.config().num_classes) + " classes");
        }
      }
      result.detections.push_back({s.image_id, dets[k]});
      gt.push_back({s.image_id, s.objects});
    }
  }
  result.map = evaluate_map(result.detections, gt, detector.config().num_classes);
  return result;
}

double probe_domain_accuracy(const Checkpoint& ckpt, std::span<const Sample> source_eval,
                             std::span<const Sample> target_eval, const DetectorConfig& det_config,
                             const DsemConfig& dsem_config, const AdaptConfig& config) {
  config.validate(true);
  if (source_eval.size() < 2 || target_eval.size() < 2) {
    throw std::invalid_argument("probe: need at least two images per domain");
  }
  const Detector<float> det = load_detector(ckpt, det_config);
  const int stride = config.dsem_strides.front();
  const int size = det_config.input_size / stride;
  DsemConfig pc = dsem_config;
  pc.foreground_enhance = false;
  pc.seg_domain_adapt = false;
  Dsem<float> probe(pc, stride, det.feature_channels(stride), size);
  probe.init(derive_stream(config.seed, "probe/init").next_u64());

  // Frozen features, one tensor per image.
  auto features = [&](std::span<const Sample> samples) {
    std::vector<std::vector<float>> out;
    for (std::size_t start = 0; start < samples.size(); start += 16) {
      const std::size_t end = std::min(samples.size(), start + 16);
      std::vector<std::size_t> idx(end - start);
      std::iota(idx.begin(), idx.end(), start);
      const Tensor f = det.backbone_forward(gather_images(samples, idx)).at(stride);
      const std::size_t per = f.numel() / idx.size();
      for (std::size_t k = 0; k < idx.size(); ++k)
        out.emplace_back(f.data().begin() + k * per, f.data().begin() + (k + 1) * per);
    }
    return out;
  };
  const auto fs = features(source_eval);
  const auto ft = features(target_eval);
  const int channels = det.feature_channels(stride);
  auto stack = [&](const std::vector<std::vector<float>>& all, const std::vector<std::size_t>& idx) {
    std::vector<float> data;
    for (std::size_t i : idx) data.insert(data.end(), all[i].begin(), all[i].end());
    return Tensor::from_data({static_cast<int>(idx.size()), channels, size, size}, std::move(data));
  };
  auto split = [](std::size_t n, std::size_t parity) {
    std::vector<std::size_t> idx;
    for (std::size_t i = parity; i < n; i += 2) idx.push_back(i);
    return idx;
  };
  const auto train_s = split(fs.size(), 0), eval_s = split(fs.size(), 1);
  const auto train_t = split(ft.size(), 0), eval_t = split(ft.size(), 1);
  auto logit = [&](const Tensor& x) { return probe.classifier().logits(probe.encode(x)); };

  const auto params = probe.params().all();
  BatchSampler src_sampler(train_s.size(), derive_stream(config.seed, "probe/source_order"));
  BatchSampler tgt_sampler(train_t.size(), derive_stream(config.seed, "probe/target_order"));
  const int half = config.batch_size / 2;
  for (int it = 0; it < config.probe_iters; ++it) {
    std::vector<std::size_t> bs, bt;
    for (std::size_t k : src_sampler.next(half)) bs.push_back(train_s[k]);
    for (std::size_t k : tgt_sampler.next(half)) bt.push_back(train_t[k]);
    backward(domain_adv_loss(logit(stack(fs, bs)), logit(stack(ft, bt))));
    sgd_step<float>(params, config.probe_lr, config.momentum, config.weight_decay);
  }
  return domain_accuracy(logit(stack(fs, eval_s)), logit(stack(ft, eval_t)));
}

// ---------------------------------------------------------------------------
// ablation harness

const Checkpoint& pretrained_for_seed(PretrainCache& cache, std::uint64_t seed,
                                      std::span<const Sample> source_train,
                                      const DetectorConfig& det_config, const AdaptConfig& config) {
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  AdaptConfig c = config;
  c.seed = seed;
  Detector<float> det(det_config);
  return cache.emplace(seed, pretrain_source(det, source_train, c)).first->second;
}

AblationRow run_ablation_cell(const AblationCell& cell, std::uint64_t seed, const AblationData& data,
                              const DetectorConfig& det_config, PretrainCache& cache) {
  const Checkpoint& pre = pretrained_for_seed(cache, seed, data.source_train, det_config, cell.adapt);
  AdaptConfig c = cell.adapt;
  c.seed = seed;
  const auto result = adapt(pre, data.source_train, data.target_train, det_config, cell.dsem, c);
  const auto det = load_detector(result.checkpoint, det_config);
  AblationRow row;
  row.cell = cell.name;
  row.seed = seed;
  row.target_map = evaluate_detector(det, data.target_test).map.map;
  if (!data.source_test.empty()) row.source_map = evaluate_detector(det, data.source_test).map.map;
  log_info("ablation " + cell.name + " seed " + std::to_string(seed) + ": target mAP " + fmt(row.target_map) +
           ", source mAP " + fmt(row.source_map));
  return row;
}

std::vector<AblationRow> run_ablation_suite(std::span<const AblationCell> grid,
                                            std::span<const std::uint64_t> seeds, const AblationData& data,
                                            const DetectorConfig& det_config, PretrainCache* cache) {
  PretrainCache local;
  PretrainCache& c = cache ? *cache : local;
  std::vector<AblationRow> rows;
  for (const auto& cell : grid)
    for (std::uint64_t seed : seeds) rows.push_back(run_ablation_cell(cell, seed, data, det_config, c));
  return rows;
}

std::vector<AblationSummary> summarize_ablation(std::span<const AblationRow> rows) {
  std::vector<AblationSummary> out;
  std::vector<std::vector<const AblationRow*>> members;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const AblationSummary& s) { return s.cell == r.cell; });
    if (it == out.end()) {
      out.push_back({r.cell});
      members.emplace_back();
      it = out.end() - 1;
    }
    members[it - out.begin()].push_back(&r);
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / (v.size() - 1)) : 0.0;
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::vector<double> t, s;
    for (const auto* r : members[i]) {
      t.push_back(r->target_map);
      s.push_back(r->source_map);
    }
    out[i].runs = static_cast<int>(t.size());
    stats(t, out[i].target_mean, out[i].target_sd);
    stats(s, out[i].source_mean, out[i].source_sd);
  }
  return out;
}

void write_ablation_runs_csv(const std::filesystem::path& path, std::span<const AblationRow> rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "cell,seed,target_map,source_map\n";
  for (const auto& r : rows) os << r.cell << "," << r.seed << "," << fmt(r.target_map) << "," << fmt(r.source_map) << "\n";
}

void write_ablation_summary_csv(const std::filesystem::path& path, std::span<const AblationSummary> summary) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "cell,runs,target_map_mean,target_map_sd,source_map_mean,source_map_sd\n";
  for (const auto& s : summary) {
    os << s.cell << "," << s.runs << "," << fmt(s.target_mean) << "," << fmt(s.target_sd) << ","
       << fmt(s.source_mean) << "," << fmt(s.source_sd) << "\n";
  }
}

}  // namespace dsem
