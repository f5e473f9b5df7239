#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsem/detector.hpp"
#include "dsem/nn.hpp"

namespace dsem {

enum class Domain : int { target = 0, source = 1 };

struct DsemConfig {
  int dense_depth = 3;      // l: number of dilated levels after y0
  int inner_channels = 64;
  std::vector<int> pool_bins{1, 2, 4, 8};
  double grl_coeff = 1.0;
  bool foreground_enhance = true;  // mask branch + M (.) F before encoding
  bool seg_domain_adapt = true;    // D_seg adversary on the mask

  void validate() const;
  // 1 for y0, then 2^level for level = 1..dense_depth.
  std::vector<int> dilations() const;
};

// Binary grid: cell (u, v) is 1 when its center lies inside any box.
std::vector<unsigned char> rasterize_boxes(std::span<const Box> boxes, int grid_h, int grid_w);

// Per-cell two-class softmax cross-entropy averaged over all cells.
// target holds N*H*W cells (1 = foreground).
template <typename T>
BasicTensor<T> seg_loss(const BasicTensor<T>& seg_logits, std::span<const unsigned char> target);

// Mean IoU over {background, foreground} of argmax predictions; classes
// with an empty union are left out. Logits are N x 2 x H x W, channel 1 is
// foreground. Returns nullopt when no class is defined.
struct SegConfusion {
  double tp[2] = {0, 0};
  double fp[2] = {0, 0};
  double fn[2] = {0, 0};
  void add(std::span<const float> logits, const Shape& shape, std::span<const unsigned char> target);
  void add(std::span<const double> logits, const Shape& shape, std::span<const unsigned char> target);
  std::optional<double> miou() const;
};
template <typename T>
std::optional<double> compute_seg_miou(std::span<const BasicTensor<T>> seg_logits,
                                       std::span<const std::vector<unsigned char>> targets);

template <typename T>
struct ForegroundMask {
  BasicTensor<T> mask;        // N x C x U x V in (0, 1)
  BasicTensor<T> seg_logits;  // N x 2 x U x V
};

// Everything the module produces for one domain batch.
template <typename T>
struct DomainPass {
  std::optional<ForegroundMask<T>> fg;
  BasicTensor<T> seg_disc_logit;  // D_seg pre-sigmoid, defined when DA is on
  BasicTensor<T> encoded;        // H_j output, N x inner x U x V
  BasicTensor<T> domain_logit;   // D_j pre-sigmoid, N x 1 x U x V
  BasicTensor<T> domain_prob;
  BasicTensor<T> seg_loss;       // source batches with boxes only
  double seg_miou = -1.0;        // -1 when undefined
};

template <typename T>
struct DsemLosses {
  BasicTensor<T> adv;       // L_j^adv
  BasicTensor<T> seg;       // L_seg (undefined without FE)
  BasicTensor<T> seg_adv;   // L_seg^adv (undefined without FE + DA)
  double domain_acc = 0.0;  // per-location accuracy averaged over domains
  double mask_mean = 0.0;   // mean mask value over both batches, 1 without FE
  double seg_miou = -1.0;
};

// Per-location two-layer classifier made of 1x1 convs: in -> in/2 -> 1.
template <typename T>
struct DomainClassifier {
  Conv2d<T> hidden;
  Conv2d<T> out;

  static DomainClassifier create(ParamStore<T>& store, const std::string& name, int channels);
  BasicTensor<T> logits(const BasicTensor<T>& x) const;
  void init(Rng& rng);
};

// Adversarial BCE with p = sigmoid(logit): mean over source locations of
// -log p plus mean over target locations of -log(1 - p).
template <typename T>
BasicTensor<T> domain_adv_loss(const BasicTensor<T>& logit_source, const BasicTensor<T>& logit_target);

// Fraction of per-location predictions on the correct side of p = 0.5
// (source wins ties), averaged over the two domains.
template <typename T>
double domain_accuracy(const BasicTensor<T>& logit_source, const BasicTensor<T>& logit_target);

template <typename T>
class Dsem {
 public:
  // One module aligned at `stride`, consuming `feature_channels` channels on
  // a feature_size x feature_size map. Pool bins larger than the map are
  // skipped (with a warning). Parameter names are prefixed "dsem.s<stride>.".
  Dsem(DsemConfig config, int stride, int feature_channels, int feature_size);

  void init(std::uint64_t seed);

  ForegroundMask<T> seg_branch_forward(const BasicTensor<T>& features) const;
  BasicTensor<T> dense_dilated_encode(const BasicTensor<T>& x) const;
  BasicTensor<T> pyramid_encode(const BasicTensor<T>& y) const;
  // dense_dilated_encode then pyramid_encode.
  BasicTensor<T> encode(const BasicTensor<T>& x) const;

  // boxes must be given for source batches (one list per image) and must be
  // absent for target batches. grl_coeff scales both reversal sites.
  DomainPass<T> forward_domain(const BasicTensor<T>& features, Domain domain,
                               const std::vector<std::vector<Box>>* boxes, double grl_coeff) const;

  DsemLosses<T> losses(const DomainPass<T>& source, const DomainPass<T>& target) const;

  // Convenience: both passes plus losses.
  DsemLosses<T> forward(const BasicTensor<T>& source_features,
                        const std::vector<std::vector<Box>>& source_boxes,
                        const BasicTensor<T>& target_features, double grl_coeff) const;

  // Configured bins that fit the feature map.
  const std::vector<int>& active_bins() const { return active_bins_; }
  int feature_size() const { return feature_size_; }
  // Input channel count of each dense level 1..l.
  std::vector<int> dense_level_in_channels() const;

  const DsemConfig& config() const { return config_; }
  int stride() const { return stride_; }
  const DomainClassifier<T>& classifier() const { return disc_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

 private:
  DsemConfig config_;
  int stride_;
  int feature_channels_;
  int feature_size_;
  std::vector<int> active_bins_;
  ParamStore<T> store_;
  // F_seg
  Conv2d<T> seg_conv1_, seg_conv2_, mask_proj_, seg_head_;
  DomainClassifier<T> seg_disc_;
  // H_j
  Conv2d<T> y0_;
  std::vector<Conv2d<T>> dense_;
  Conv2d<T> dense_fuse_;
  std::vector<Conv2d<T>> pyramid_;
  Conv2d<T> pyramid_fuse_;
  // D_j
  DomainClassifier<T> disc_;
};

struct Heatmap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // min-max normalized to [0, 1]
  double raw_min = 0.0;
  double raw_max = 0.0;
};

// Grad-CAM style evidence: gradient of the mean domain logit with respect to
// the encoded features, channel weights by spatial averaging, weighted sum
// over channels, relu, min-max normalization (all zeros when flat).
// `encoded` is one image, 1 x C x U x V.
template <typename T>
Heatmap export_domain_evidence(const BasicTensor<T>& encoded, const DomainClassifier<T>& classifier);

// Binary P5 PGM at heatmap resolution plus JSON sidecar with raw min/max.
void write_heatmap(const Heatmap& map, const std::string& pgm_path, const std::string& json_path);

}  // namespace dsem
