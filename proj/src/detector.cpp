#include "dsem/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dsem/ops.hpp"

namespace dsem {

namespace {

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_int(int v) {
  int r = 0;
  while ((1 << r) < v) ++r;
  return r;
}

Box clip_unit(Box b) {
  b.xmin = std::clamp(b.xmin, 0.0, 1.0);
  b.ymin = std::clamp(b.ymin, 0.0, 1.0);
  b.xmax = std::clamp(b.xmax, 0.0, 1.0);
  b.ymax = std::clamp(b.ymax, 0.0, 1.0);
  return b;
}

// Largest offset magnitude for the log-size terms before exp().
constexpr double kMaxLogScale = 4.0;

}  // namespace

void DetectorConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  if (head_strides.empty()) throw std::invalid_argument("head_strides must not be empty");
  if (!std::is_sorted(head_strides.begin(), head_strides.end()) ||
      std::adjacent_find(head_strides.begin(), head_strides.end()) != head_strides.end()) {
    throw std::invalid_argument("head_strides must be strictly increasing");
  }
  for (int s : head_strides) {
    if (s != 8 && s != 32) {
      throw std::invalid_argument("head stride " + std::to_string(s) + " not in {8, 32}");
    }
    if (input_size % s != 0) {
      throw std::invalid_argument("input_size " + std::to_string(input_size) +
                                  " not divisible by stride " + std::to_string(s));
    }
  }
  const int stages = log2_int(head_strides.back());
  if (static_cast<int>(backbone_channels.size()) < stages) {
    throw std::invalid_argument("backbone_channels needs " + std::to_string(stages) +
                                " stages for stride " + std::to_string(head_strides.back()));
  }
  for (int c : backbone_channels)
    if (c < 1) throw std::invalid_argument("backbone channel counts must be >= 1");
  if (anchors_per_cell < 1) throw std::invalid_argument("anchors_per_cell must be >= 1");
  if (anchor_scales.size() != static_cast<std::size_t>(anchors_per_cell) * head_strides.size()) {
    throw std::invalid_argument("anchor_scales needs anchors_per_cell x heads = " +
                                std::to_string(anchors_per_cell * head_strides.size()) +
                                " entries, got " + std::to_string(anchor_scales.size()));
  }
  for (std::size_t i = 0; i < anchor_scales.size(); ++i) {
    if (!(anchor_scales[i] > 0.0 && anchor_scales[i] <= 1.0)) {
      throw std::invalid_argument("anchor scales must lie in (0, 1]");
    }
    if (i > 0 && !(anchor_scales[i] > anchor_scales[i - 1])) {
      throw std::invalid_argument("anchor scales must be strictly increasing");
    }
  }
}

std::vector<double> DetectorConfig::scales_for_layer(std::size_t layer) const {
  const auto first = anchor_scales.begin() + static_cast<std::ptrdiff_t>(layer * anchors_per_cell);
  return {first, first + anchors_per_cell};
}

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double iy = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::size_t AnchorSet::total() const {
  std::size_t n = 0;
  for (const auto& l : per_layer) n += l.size();
  return n;
}

std::vector<Box> AnchorSet::flat() const {
  std::vector<Box> out;
  out.reserve(total());
  for (const auto& l : per_layer) out.insert(out.end(), l.begin(), l.end());
  return out;
}

AnchorSet generate_anchors(const DetectorConfig& config) {
  config.validate();
  AnchorSet set;
  for (std::size_t layer = 0; layer < config.head_strides.size(); ++layer) {
    const int stride = config.head_strides[layer];
    const int cells = config.input_size / stride;
    const auto scales = config.scales_for_layer(layer);
    std::vector<Box> boxes;
    boxes.reserve(static_cast<std::size_t>(cells) * cells * scales.size());
    for (int y = 0; y < cells; ++y) {
      for (int x = 0; x < cells; ++x) {
        const double cx = (x + 0.5) / cells;
        const double cy = (y + 0.5) / cells;
        for (double s : scales) {
          boxes.push_back(clip_unit(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2}));
        }
      }
    }
    set.strides.push_back(stride);
    set.per_layer.push_back(std::move(boxes));
  }
  return set;
}

std::array<double, 4> encode_box(const Box& box, const Box& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = 0.5 * (anchor.xmin + anchor.xmax);
  const double acy = 0.5 * (anchor.ymin + anchor.ymax);
  const double cx = 0.5 * (box.xmin + box.xmax);
  const double cy = 0.5 * (box.ymin + box.ymax);
  return {(cx - acx) / aw, (cy - acy) / ah, std::log(box.width() / aw),
          std::log(box.height() / ah)};
}

Box decode_box(const std::array<double, 4>& d, const Box& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  const double acx = 0.5 * (anchor.xmin + anchor.xmax);
  const double acy = 0.5 * (anchor.ymin + anchor.ymax);
  const double cx = acx + d[0] * aw;
  const double cy = acy + d[1] * ah;
  const double w = aw * std::exp(std::clamp(d[2], -kMaxLogScale, kMaxLogScale));
  const double h = ah * std::exp(std::clamp(d[3], -kMaxLogScale, kMaxLogScale));
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

MatchTargets match_anchors(std::span<const Box> anchors, std::span<const GroundTruth> gt,
                           double pos_iou) {
  if (anchors.empty()) throw std::invalid_argument("match_anchors: empty anchor set");
  if (!(pos_iou > 0.0 && pos_iou < 1.0)) {
    throw std::invalid_argument("match_anchors: pos_iou must lie in (0, 1)");
  }
  const std::size_t na = anchors.size();
  MatchTargets t;
  t.labels.assign(na, 0);
  t.offsets.assign(na, {0, 0, 0, 0});
  t.positive.assign(na, 0);
  t.matched_gt.assign(na, -1);

  std::vector<double> overlaps(na * gt.size());
  for (std::size_t a = 0; a < na; ++a)
    for (std::size_t g = 0; g < gt.size(); ++g)
      overlaps[a * gt.size() + g] = iou(anchors[a], gt[g].box);

  // Threshold matches: best ground truth per anchor.
  for (std::size_t a = 0; a < na; ++a) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (overlaps[a * gt.size() + g] > best_iou) {
        best_iou = overlaps[a * gt.size() + g];
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= pos_iou) t.matched_gt[a] = best;
  }
  // Forced matches: each ground truth claims its best anchor not already
  // claimed by an earlier ground truth.
  std::vector<unsigned char> claimed(na, 0);
  for (std::size_t g = 0; g < gt.size(); ++g) {
    std::size_t best = na;
    double best_iou = -1.0;
    for (std::size_t a = 0; a < na; ++a) {
      if (claimed[a]) continue;
      if (overlaps[a * gt.size() + g] > best_iou) {
        best_iou = overlaps[a * gt.size() + g];
        best = a;
      }
    }
    if (best == na) break;
    claimed[best] = 1;
    t.matched_gt[best] = static_cast<int>(g);
  }
  for (std::size_t a = 0; a < na; ++a) {
    const int g = t.matched_gt[a];
    if (g < 0) continue;
    t.positive[a] = 1;
    t.labels[a] = gt[g].label + 1;
    t.offsets[a] = encode_box(gt[g].box, anchors[a]);
    ++t.num_positive;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Detector

template <typename T>
Detector<T>::Detector(DetectorConfig config) : config_(std::move(config)) {
  config_.validate();
  anchors_ = generate_anchors(config_);
  flat_anchors_ = anchors_.flat();
  const int stages = log2_int(config_.head_strides.back());
  int cin = 3;
  for (int s = 0; s < stages; ++s) {
    const int cout = config_.backbone_channels[s];
    const std::string name = "detector.backbone.stage" + std::to_string(s + 1);
    down_.push_back(Conv2d<T>::create(store_, name + ".down", cin, cout, 3, 2, 1, 1));
    if (s > 0) refine_.push_back(Conv2d<T>::create(store_, name + ".refine", cout, cout, 3, 1, 1, 1));
    cin = cout;
  }
  const int per_anchor_cls = config_.num_classes + 1;
  for (int stride : config_.head_strides) {
    const int c = feature_channels(stride);
    const std::string name = "detector.head.s" + std::to_string(stride);
    cls_heads_.push_back(Conv2d<T>::create(store_, name + ".cls", c,
                                           config_.anchors_per_cell * per_anchor_cls, 3, 1, 1, 1));
    loc_heads_.push_back(
        Conv2d<T>::create(store_, name + ".loc", c, config_.anchors_per_cell * 4, 3, 1, 1, 1));
  }
}

template <typename T>
int Detector<T>::feature_channels(int stride) const {
  if (!is_power_of_two(stride)) throw std::invalid_argument("stride must be a power of two");
  return config_.backbone_channels[log2_int(stride) - 1];
}

template <typename T>
void Detector<T>::init(std::uint64_t seed) {
  Rng rng = derive_stream(seed, "init/detector");
  for (auto& c : down_) init_conv(c, rng);
  for (auto& c : refine_) init_conv(c, rng);
  for (auto& c : cls_heads_) init_conv(c, rng);
  for (auto& c : loc_heads_) init_conv(c, rng);
}

template <typename T>
std::vector<Parameter<T>*> Detector<T>::backbone_params() {
  std::vector<Parameter<T>*> out;
  for (auto* convs : {&down_, &refine_})
    for (auto& c : *convs) {
      out.push_back(c.weight);
      out.push_back(c.bias);
    }
  return out;
}

template <typename T>
FeatureMaps<T> Detector<T>::backbone_forward(const BasicTensor<T>& image) const {
  const Shape s = image.shape();
  if (s.c != 3 || s.h != config_.input_size || s.w != config_.input_size) {
    throw ShapeError("detector expects N x 3 x " + std::to_string(config_.input_size) + " x " +
                     std::to_string(config_.input_size) + " images, got " + s.str());
  }
  FeatureMaps<T> maps;
  BasicTensor<T> x = image;
  std::size_t refine_idx = 0;
  for (std::size_t stage = 0; stage < down_.size(); ++stage) {
    x = relu(down_[stage](x));
    if (stage > 0) x = relu(refine_[refine_idx++](x));
    const int stride = 1 << (stage + 1);
    if (std::find(config_.head_strides.begin(), config_.head_strides.end(), stride) !=
        config_.head_strides.end()) {
      maps.emplace(stride, x);
    }
  }
  return maps;
}

template <typename T>
HeadOutputs<T> Detector<T>::heads(const FeatureMaps<T>& features) const {
  std::vector<BasicTensor<T>> cls, loc;
  for (std::size_t layer = 0; layer < config_.head_strides.size(); ++layer) {
    const auto it = features.find(config_.head_strides[layer]);
    if (it == features.end()) {
      throw std::invalid_argument("missing feature map for stride " +
                                  std::to_string(config_.head_strides[layer]));
    }
    cls.push_back(anchor_major(cls_heads_[layer](it->second), config_.anchors_per_cell));
    loc.push_back(anchor_major(loc_heads_[layer](it->second), config_.anchors_per_cell));
  }
  return {concat_rows<T>(cls), concat_rows<T>(loc)};
}

// ---------------------------------------------------------------------------
// loss

template <typename T>
DetectionLoss<T> detection_loss(const HeadOutputs<T>& outputs,
                                std::span<const MatchTargets> targets, double neg_ratio) {
  const Shape cs = outputs.cls.shape();
  const int n_img = cs.n;
  const std::size_t na = static_cast<std::size_t>(cs.h);
  if (targets.size() != static_cast<std::size_t>(n_img)) {
    throw std::invalid_argument("detection_loss: " + std::to_string(targets.size()) +
                                " target sets for batch of " + std::to_string(n_img));
  }
  std::vector<int> labels(static_cast<std::size_t>(n_img) * na);
  std::vector<T> weights(labels.size(), T(0));
  std::vector<T> loc_target(outputs.loc.numel(), T(0));
  std::vector<unsigned char> pos_mask(labels.size(), 0);
  int total_pos = 0;
  const auto logits = outputs.cls.data();
  std::vector<double> bg_loss(na);
  std::vector<std::size_t> order(na);

  for (int n = 0; n < n_img; ++n) {
    const MatchTargets& t = targets[n];
    if (t.labels.size() != na) {
      throw std::invalid_argument("detection_loss: targets cover " + std::to_string(t.labels.size()) +
                                  " anchors, outputs have " + std::to_string(na));
    }
    for (std::size_t a = 0; a < na; ++a) {
      const std::size_t l = n * na + a;
      labels[l] = t.labels[a];
      if (t.positive[a]) {
        weights[l] = T(1);
        pos_mask[l] = 1;
        for (int d = 0; d < 4; ++d)
          loc_target[(static_cast<std::size_t>(n) * 4 + d) * na + a] = static_cast<T>(t.offsets[a][d]);
      }
      // Background loss -log softmax_0 for mining.
      double m = -1e300;
      for (int c = 0; c < cs.c; ++c) m = std::max(m, double(logits[(n * cs.c + c) * na + a]));
      double z = 0.0;
      for (int c = 0; c < cs.c; ++c) z += std::exp(double(logits[(n * cs.c + c) * na + a]) - m);
      bg_loss[a] = -(double(logits[(n * cs.c + 0) * na + a]) - m - std::log(z));
    }
    total_pos += t.num_positive;
    std::size_t n_neg = 0;
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::size_t> negs;
    for (std::size_t a : order)
      if (!t.positive[a]) negs.push_back(a);
    std::stable_sort(negs.begin(), negs.end(),
                     [&](std::size_t a, std::size_t b) { return bg_loss[a] > bg_loss[b]; });
    const auto want = static_cast<std::size_t>(neg_ratio * std::max(1, t.num_positive));
    n_neg = std::min(want, negs.size());
    for (std::size_t i = 0; i < n_neg; ++i) weights[n * na + negs[i]] = T(1);
  }
  const double norm = std::max(1, total_pos);
  DetectionLoss<T> loss;
  loss.num_positive = total_pos;
  loss.cls = softmax_cross_entropy(outputs.cls, std::span<const int>(labels),
                                   std::span<const T>(weights), norm);
  loss.loc = smooth_l1(outputs.loc, std::span<const T>(loc_target),
                       std::span<const unsigned char>(pos_mask), norm);
  return loss;
}

// ---------------------------------------------------------------------------
// decoding

std::vector<std::size_t> greedy_nms(std::span<const ScoredBox> boxes, double iou_thresh) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (boxes[a].score != boxes[b].score) return boxes[a].score > boxes[b].score;
    return boxes[a].index < boxes[b].index;
  });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (std::size_t k : kept) {
      if (iou(boxes[i].box, boxes[k].box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

template <typename T>
std::vector<std::vector<Detection>> decode_and_nms(const HeadOutputs<T>& outputs,
                                                   std::span<const Box> anchors,
                                                   const NmsConfig& config) {
  const Shape cs = outputs.cls.shape();
  const std::size_t na = static_cast<std::size_t>(cs.h);
  if (anchors.size() != na) {
    throw std::invalid_argument("decode_and_nms: " + std::to_string(anchors.size()) +
                                " anchors for " + std::to_string(na) + " predictions");
  }
  const int k = cs.c - 1;
  const auto logits = outputs.cls.data();
  const auto loc = outputs.loc.data();
  std::vector<std::vector<Detection>> result(cs.n);
  std::vector<double> probs(static_cast<std::size_t>(cs.c) * na);
  for (int n = 0; n < cs.n; ++n) {
    for (std::size_t a = 0; a < na; ++a) {
      double m = -1e300;
      for (int c = 0; c < cs.c; ++c) m = std::max(m, double(logits[(n * cs.c + c) * na + a]));
      double z = 0.0;
      for (int c = 0; c < cs.c; ++c) {
        probs[c * na + a] = std::exp(double(logits[(n * cs.c + c) * na + a]) - m);
        z += probs[c * na + a];
      }
      for (int c = 0; c < cs.c; ++c) probs[c * na + a] /= z;
    }
    struct Ranked {
      Detection det;
      std::size_t anchor;
    };
    std::vector<Ranked> all;
    for (int cls = 0; cls < k; ++cls) {
      std::vector<ScoredBox> cand;
      for (std::size_t a = 0; a < na; ++a) {
        const double p = probs[(cls + 1) * na + a];
        if (p <= config.score_thresh) continue;
        std::array<double, 4> d;
        for (int j = 0; j < 4; ++j) d[j] = loc[(static_cast<std::size_t>(n) * 4 + j) * na + a];
        cand.push_back({clip_unit(decode_box(d, anchors[a])), p, a});
      }
      for (std::size_t i : greedy_nms(cand, config.nms_iou)) {
        if (!cand[i].box.valid()) continue;
        all.push_back({Detection{cand[i].box, cls, cand[i].score}, cand[i].index});
      }
    }
    std::stable_sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) {
      if (a.det.score != b.det.score) return a.det.score > b.det.score;
      if (a.det.class_id != b.det.class_id) return a.det.class_id < b.det.class_id;
      return a.anchor < b.anchor;
    });
    if (all.size() > static_cast<std::size_t>(config.max_dets)) all.resize(config.max_dets);
    for (auto& r : all) result[n].push_back(r.det);
  }
  return result;
}

#define DSEM_INSTANTIATE_DET(T)                                                        \
  template class Detector<T>;                                                          \
  template DetectionLoss<T> detection_loss(const HeadOutputs<T>&,                      \
                                           std::span<const MatchTargets>, double);     \
  template std::vector<std::vector<Detection>> decode_and_nms(                         \
      const HeadOutputs<T>&, std::span<const Box>, const NmsConfig&);

DSEM_INSTANTIATE_DET(float)
DSEM_INSTANTIATE_DET(double)
#undef DSEM_INSTANTIATE_DET

}  // namespace dsem
