#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dsem/nn.hpp"
#include "dsem/tensor.hpp"

namespace dsem {

struct DetectorConfig {
  int num_classes = 3;  // foreground classes; logits carry one extra background
  int input_size = 64;
  std::vector<int> backbone_channels{16, 32, 64, 64, 64};
  std::vector<int> head_strides{8, 32};
  int anchors_per_cell = 2;
  // anchors_per_cell scales per head, smallest stride first.
  std::vector<double> anchor_scales{0.2, 0.35, 0.5, 0.7};

  void validate() const;
  // Scales used by the head at head_strides[layer].
  std::vector<double> scales_for_layer(std::size_t layer) const;
};

// Normalized to the image, [0, 1].
struct Box {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  bool valid() const { return xmin < xmax && ymin < ymax; }
  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return valid() ? width() * height() : 0.0; }
  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

struct GroundTruth {
  Box box;
  int label = 0;  // foreground class in [0, num_classes)
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0;
};

struct AnchorSet {
  std::vector<int> strides;
  // Per head: boxes in row-major (cell, scale) order.
  std::vector<std::vector<Box>> per_layer;

  std::size_t total() const;
  std::vector<Box> flat() const;
};

AnchorSet generate_anchors(const DetectorConfig& config);

// Center/size offsets (dcx/w_a, dcy/h_a, log w/w_a, log h/h_a).
std::array<double, 4> encode_box(const Box& box, const Box& anchor);
Box decode_box(const std::array<double, 4>& offsets, const Box& anchor);

struct MatchTargets {
  std::vector<int> labels;  // per anchor: 0 background, c + 1 foreground
  std::vector<std::array<double, 4>> offsets;
  std::vector<unsigned char> positive;
  std::vector<int> matched_gt;  // -1 for negatives
  int num_positive = 0;
};

// Each ground truth is forced onto its best still-unclaimed anchor; any other
// anchor with IoU >= pos_iou against some ground truth is positive too.
MatchTargets match_anchors(std::span<const Box> anchors,
                           std::span<const GroundTruth> gt,
                           double pos_iou = 0.5);

// Concatenated over heads in anchor order.
template <typename T>
struct HeadOutputs {
  BasicTensor<T> cls;  // N x (K+1) x A_total x 1
  BasicTensor<T> loc;  // N x 4 x A_total x 1
};

template <typename T>
using FeatureMaps = std::map<int, BasicTensor<T>>;

template <typename T>
class Detector {
 public:
  // Parameters are created zeroed; call init() for the seeded initialization.
  explicit Detector(DetectorConfig config);

  void init(std::uint64_t seed);

  // image: N x 3 x S x S. Returns one map per configured stride.
  FeatureMaps<T> backbone_forward(const BasicTensor<T>& image) const;
  HeadOutputs<T> heads(const FeatureMaps<T>& features) const;
  HeadOutputs<T> forward(const BasicTensor<T>& image) const {
    return heads(backbone_forward(image));
  }

  const DetectorConfig& config() const { return config_; }
  const AnchorSet& anchors() const { return anchors_; }
  const std::vector<Box>& flat_anchors() const { return flat_anchors_; }
  int feature_channels(int stride) const;

  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  std::vector<Parameter<T>*> backbone_params();

 private:
  DetectorConfig config_;
  AnchorSet anchors_;
  std::vector<Box> flat_anchors_;
  ParamStore<T> store_;
  // stage s: downsampling conv, then (for s > 0) a stride-1 refinement conv.
  std::vector<Conv2d<T>> down_;
  std::vector<Conv2d<T>> refine_;
  std::vector<Conv2d<T>> cls_heads_;
  std::vector<Conv2d<T>> loc_heads_;
};

template <typename T>
struct DetectionLoss {
  BasicTensor<T> cls;
  BasicTensor<T> loc;
  int num_positive = 0;
};

// Softmax cross-entropy with hard-negative mining (neg_ratio negatives per
// positive per image, at least neg_ratio when an image has no positives)
// plus smooth-L1 over positives; both divided by max(1, total positives).
template <typename T>
DetectionLoss<T> detection_loss(const HeadOutputs<T>& outputs,
                                std::span<const MatchTargets> targets,
                                double neg_ratio = 3.0);

struct NmsConfig {
  double score_thresh = 0.01;
  double nms_iou = 0.45;
  int max_dets = 100;
};

struct ScoredBox {
  Box box;
  double score = 0;
  std::size_t index = 0;  // tie-break: lower index wins
};

// Greedy suppression: visit by descending score (then index), drop any box
// whose IoU with an already kept box exceeds iou_thresh. Returns positions
// into `boxes` in keep order.
std::vector<std::size_t> greedy_nms(std::span<const ScoredBox> boxes,
                                    double iou_thresh);

// Per image: class probabilities -> per-class NMS -> top max_dets by score.
template <typename T>
std::vector<std::vector<Detection>> decode_and_nms(const HeadOutputs<T>& outputs,
                                                   std::span<const Box> anchors,
                                                   const NmsConfig& config = {});

}  // namespace dsem
