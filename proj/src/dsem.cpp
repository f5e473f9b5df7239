#include "dsem/dsem.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "dsem/log.hpp"
#include "dsem/ops.hpp"
#include "json.hpp"

namespace dsem {

void DsemConfig::validate() const {
  if (dense_depth < 0) throw std::invalid_argument("dense_depth must be >= 0");
  if (inner_channels < 2) throw std::invalid_argument("inner_channels must be >= 2");
  if (pool_bins.empty()) throw std::invalid_argument("pool_bins must not be empty");
  for (std::size_t i = 0; i < pool_bins.size(); ++i) {
    if (pool_bins[i] < 1) throw std::invalid_argument("pool bins must be >= 1");
    if (i > 0 && pool_bins[i] <= pool_bins[i - 1]) {
      throw std::invalid_argument("pool_bins must be strictly increasing");
    }
  }
  if (!(grl_coeff >= 0.0)) throw std::invalid_argument("grl_coeff must be >= 0");
}

std::vector<int> DsemConfig::dilations() const {
  std::vector<int> d{1};
  for (int level = 1; level <= dense_depth; ++level) d.push_back(1 << level);
  return d;
}

std::vector<unsigned char> rasterize_boxes(std::span<const Box> boxes, int grid_h, int grid_w) {
  std::vector<unsigned char> grid(static_cast<std::size_t>(grid_h) * grid_w, 0);
  for (int v = 0; v < grid_h; ++v) {
    const double cy = (v + 0.5) / grid_h;
    for (int u = 0; u < grid_w; ++u) {
      const double cx = (u + 0.5) / grid_w;
      for (const Box& b : boxes) {
        if (cx >= b.xmin && cx <= b.xmax && cy >= b.ymin && cy <= b.ymax) {
          grid[static_cast<std::size_t>(v) * grid_w + u] = 1;
          break;
        }
      }
    }
  }
  return grid;
}

template <typename T>
BasicTensor<T> seg_loss(const BasicTensor<T>& seg_logits, std::span<const unsigned char> target) {
  const Shape s = seg_logits.shape();
  const std::size_t cells = static_cast<std::size_t>(s.n) * s.spatial();
  if (s.c != 2 || target.size() != cells) {
    throw ShapeError("seg_loss: logits " + s.str() + " do not match a grid of " +
                     std::to_string(target.size()) + " cells");
  }
  std::vector<int> labels(target.begin(), target.end());
  return softmax_cross_entropy(seg_logits, std::span<const int>(labels), std::span<const T>(),
                               static_cast<double>(cells));
}

namespace {

template <typename V>
void confusion_add(SegConfusion& cm, std::span<const V> logits, const Shape& shape,
                   std::span<const unsigned char> target) {
  const std::size_t sp = shape.spatial();
  if (shape.c != 2 || target.size() != static_cast<std::size_t>(shape.n) * sp) {
    throw ShapeError("seg confusion: logits " + shape.str() + " do not match target of " +
                     std::to_string(target.size()) + " cells");
  }
  for (int n = 0; n < shape.n; ++n) {
    for (std::size_t p = 0; p < sp; ++p) {
      const V bg = logits[(static_cast<std::size_t>(n) * 2 + 0) * sp + p];
      const V fg = logits[(static_cast<std::size_t>(n) * 2 + 1) * sp + p];
      const int pred = fg > bg ? 1 : 0;
      const int truth = target[n * sp + p] ? 1 : 0;
      if (pred == truth) {
        cm.tp[truth] += 1;
      } else {
        cm.fp[pred] += 1;
        cm.fn[truth] += 1;
      }
    }
  }
}

}  // namespace

void SegConfusion::add(std::span<const float> logits, const Shape& shape,
                       std::span<const unsigned char> target) {
  confusion_add(*this, logits, shape, target);
}

void SegConfusion::add(std::span<const double> logits, const Shape& shape,
                       std::span<const unsigned char> target) {
  confusion_add(*this, logits, shape, target);
}

std::optional<double> SegConfusion::miou() const {
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < 2; ++c) {
    const double uni = tp[c] + fp[c] + fn[c];
    if (uni == 0.0) continue;
    sum += tp[c] / uni;
    ++defined;
  }
  if (defined == 0) return std::nullopt;
  return sum / defined;
}

template <typename T>
std::optional<double> compute_seg_miou(std::span<const BasicTensor<T>> seg_logits,
                                       std::span<const std::vector<unsigned char>> targets) {
  if (seg_logits.size() != targets.size()) {
    throw std::invalid_argument("compute_seg_miou: batch count mismatch");
  }
  SegConfusion cm;
  for (std::size_t i = 0; i < seg_logits.size(); ++i)
    cm.add(seg_logits[i].data(), seg_logits[i].shape(), targets[i]);
  return cm.miou();
}

// ---------------------------------------------------------------------------

template <typename T>
DomainClassifier<T> DomainClassifier<T>::create(ParamStore<T>& store, const std::string& name,
                                                int channels) {
  DomainClassifier c;
  const int hidden = std::max(1, channels / 2);
  c.hidden = Conv2d<T>::create(store, name + ".hidden", channels, hidden, 1);
  c.out = Conv2d<T>::create(store, name + ".out", hidden, 1, 1);
  return c;
}

template <typename T>
BasicTensor<T> DomainClassifier<T>::logits(const BasicTensor<T>& x) const {
  return out(relu(hidden(x)));
}

template <typename T>
void DomainClassifier<T>::init(Rng& rng) {
  init_conv(hidden, rng);
  init_conv(out, rng);
}

template <typename T>
BasicTensor<T> domain_adv_loss(const BasicTensor<T>& logit_source, const BasicTensor<T>& logit_target) {
  return add(binary_cross_entropy_with_logits(logit_source, 1.0),
             binary_cross_entropy_with_logits(logit_target, 0.0));
}

template <typename T>
double domain_accuracy(const BasicTensor<T>& logit_source, const BasicTensor<T>& logit_target) {
  double src = 0.0, tgt = 0.0;
  for (T z : logit_source.data()) src += z >= T(0) ? 1.0 : 0.0;
  for (T z : logit_target.data()) tgt += z < T(0) ? 1.0 : 0.0;
  return 0.5 * (src / logit_source.numel() + tgt / logit_target.numel());
}

// ---------------------------------------------------------------------------

template <typename T>
Dsem<T>::Dsem(DsemConfig config, int stride, int feature_channels, int feature_size)
    : config_(std::move(config)),
      stride_(stride),
      feature_channels_(feature_channels),
      feature_size_(feature_size) {
  config_.validate();
  if (feature_channels < 2 || feature_size < 1) {
    throw std::invalid_argument("Dsem: invalid feature geometry");
  }
  const std::string p = "dsem.s" + std::to_string(stride) + ".";
  const int c = feature_channels;
  const int inner = config_.inner_channels;
  if (config_.foreground_enhance) {
    seg_conv1_ = Conv2d<T>::create(store_, p + "fseg.conv1", c, c, 3, 1, 1, 1);
    seg_conv2_ = Conv2d<T>::create(store_, p + "fseg.conv2", c, c, 3, 1, 1, 1);
    mask_proj_ = Conv2d<T>::create(store_, p + "fseg.mask", c, c, 1);
    seg_head_ = Conv2d<T>::create(store_, p + "fseg.seg", c, 2, 1);
    if (config_.seg_domain_adapt) seg_disc_ = DomainClassifier<T>::create(store_, p + "dseg", c);
  }
  y0_ = Conv2d<T>::create(store_, p + "enc.y0", c, inner, 3, 1, 1, 1);
  for (int level = 1; level <= config_.dense_depth; ++level) {
    const int d = 1 << level;
    dense_.push_back(Conv2d<T>::create(store_, p + "enc.dense" + std::to_string(level),
                                       level * inner, inner, 3, 1, d, d));
  }
  dense_fuse_ = Conv2d<T>::create(store_, p + "enc.dense_fuse", (config_.dense_depth + 1) * inner,
                                  inner, 1);
  const int branch = std::max(1, inner / static_cast<int>(config_.pool_bins.size()));
  for (int b : config_.pool_bins) {
    if (b > feature_size) {
      log_info("dsem.s" + std::to_string(stride) + ": skipping pool bin " + std::to_string(b) +
               " larger than the " + std::to_string(feature_size) + "x" +
               std::to_string(feature_size) + " feature map");
      continue;
    }
    active_bins_.push_back(b);
    pyramid_.push_back(
        Conv2d<T>::create(store_, p + "enc.pool" + std::to_string(b), inner, branch, 1));
  }
  pyramid_fuse_ = Conv2d<T>::create(
      store_, p + "enc.pool_fuse", inner + branch * static_cast<int>(active_bins_.size()), inner, 1);
  disc_ = DomainClassifier<T>::create(store_, p + "disc", inner);
}

template <typename T>
void Dsem<T>::init(std::uint64_t seed) {
  Rng rng = derive_stream(seed, "init/dsem", static_cast<std::uint64_t>(stride_));
  if (config_.foreground_enhance) {
    init_conv(seg_conv1_, rng);
    init_conv(seg_conv2_, rng);
    init_conv(mask_proj_, rng);
    init_conv(seg_head_, rng);
    if (config_.seg_domain_adapt) seg_disc_.init(rng);
  }
  init_conv(y0_, rng);
  for (auto& c : dense_) init_conv(c, rng);
  init_conv(dense_fuse_, rng);
  for (auto& c : pyramid_) init_conv(c, rng);
  init_conv(pyramid_fuse_, rng);
  disc_.init(rng);
}

template <typename T>
std::vector<int> Dsem<T>::dense_level_in_channels() const {
  std::vector<int> out;
  for (const auto& c : dense_) out.push_back(c.in_channels());
  return out;
}

template <typename T>
ForegroundMask<T> Dsem<T>::seg_branch_forward(const BasicTensor<T>& features) const {
  if (!config_.foreground_enhance) {
    throw std::logic_error("seg_branch_forward: foreground enhancement is disabled");
  }
  const BasicTensor<T> inter = relu(seg_conv2_(relu(seg_conv1_(features))));
  BasicTensor<T> mask = sigmoid(mask_proj_(inter));
  BasicTensor<T> logits = seg_head_(mask);
  return {std::move(mask), std::move(logits)};
}

template <typename T>
BasicTensor<T> Dsem<T>::dense_dilated_encode(const BasicTensor<T>& x) const {
  // Newest output first: [y_{m-1}, ..., y_0].
  std::vector<BasicTensor<T>> outputs{relu(y0_(x))};
  for (const auto& level : dense_) {
    const BasicTensor<T> in = concat_channels<T>(outputs);
    outputs.insert(outputs.begin(), relu(level(in)));
  }
  return dense_fuse_(concat_channels<T>(outputs));
}

template <typename T>
BasicTensor<T> Dsem<T>::pyramid_encode(const BasicTensor<T>& y) const {
  const Shape s = y.shape();
  std::vector<BasicTensor<T>> parts{y};
  for (std::size_t i = 0; i < active_bins_.size(); ++i) {
    const int b = active_bins_[i];
    if (b > std::min(s.h, s.w)) {
      throw ShapeError("pyramid_encode: map " + s.str() + " smaller than bin " + std::to_string(b));
    }
    parts.push_back(upsample_nearest(relu(pyramid_[i](adaptive_avg_pool(y, b))), s.h, s.w));
  }
  return pyramid_fuse_(concat_channels<T>(parts));
}

template <typename T>
BasicTensor<T> Dsem<T>::encode(const BasicTensor<T>& x) const {
  return pyramid_encode(dense_dilated_encode(x));
}

template <typename T>
DomainPass<T> Dsem<T>::forward_domain(const BasicTensor<T>& features, Domain domain,
                                      const std::vector<std::vector<Box>>* boxes,
                                      double grl_coeff) const {
  const Shape s = features.shape();
  if (s.c != feature_channels_ || s.h != feature_size_ || s.w != feature_size_) {
    throw ShapeError("dsem.s" + std::to_string(stride_) + ": unexpected feature map " + s.str());
  }
  if (domain == Domain::source && boxes == nullptr) {
    throw std::invalid_argument("dsem: source batch without ground-truth boxes");
  }
  if (domain == Domain::target && boxes != nullptr) {
    throw std::invalid_argument("dsem: target batch must not carry annotations");
  }
  if (boxes != nullptr && boxes->size() != static_cast<std::size_t>(s.n)) {
    throw std::invalid_argument("dsem: box lists do not match the batch size");
  }
  DomainPass<T> pass;
  BasicTensor<T> x = features;
  if (config_.foreground_enhance) {
    // The mask branch sees the features without a path back into the
    // backbone; only the reversed alignment gradient through M (.) F does.
    ForegroundMask<T> fg = seg_branch_forward(features.detach());
    if (boxes != nullptr) {
      std::vector<unsigned char> grid;
      grid.reserve(static_cast<std::size_t>(s.n) * s.spatial());
      for (const auto& img_boxes : *boxes) {
        const auto g = rasterize_boxes(img_boxes, s.h, s.w);
        grid.insert(grid.end(), g.begin(), g.end());
      }
      pass.seg_loss = seg_loss(fg.seg_logits, grid);
      SegConfusion cm;
      cm.add(fg.seg_logits.data(), fg.seg_logits.shape(), grid);
      pass.seg_miou = cm.miou().value_or(-1.0);
    }
    if (config_.seg_domain_adapt) {
      pass.seg_disc_logit = seg_disc_.logits(grl(fg.mask, grl_coeff));
    }
    x = elementwise_mul(fg.mask, features);
    pass.fg = std::move(fg);
  }
  pass.encoded = encode(grl(x, grl_coeff));
  pass.domain_logit = disc_.logits(pass.encoded);
  pass.domain_prob = sigmoid(pass.domain_logit);
  return pass;
}

template <typename T>
DsemLosses<T> Dsem<T>::losses(const DomainPass<T>& source, const DomainPass<T>& target) const {
  DsemLosses<T> out;
  out.adv = domain_adv_loss(source.domain_logit, target.domain_logit);
  out.domain_acc = domain_accuracy(source.domain_logit, target.domain_logit);
  out.seg_miou = source.seg_miou;
  if (config_.foreground_enhance) {
    out.seg = source.seg_loss;
    if (config_.seg_domain_adapt) out.seg_adv = domain_adv_loss(source.seg_disc_logit, target.seg_disc_logit);
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto* pass : {&source, &target}) {
      for (T v : pass->fg->mask.data()) sum += v;
      count += pass->fg->mask.numel();
    }
    out.mask_mean = sum / static_cast<double>(count);
  } else {
    out.mask_mean = 1.0;
  }
  return out;
}

template <typename T>
DsemLosses<T> Dsem<T>::forward(const BasicTensor<T>& source_features,
                               const std::vector<std::vector<Box>>& source_boxes,
                               const BasicTensor<T>& target_features, double grl_coeff) const {
  const auto src = forward_domain(source_features, Domain::source, &source_boxes, grl_coeff);
  const auto tgt = forward_domain(target_features, Domain::target, nullptr, grl_coeff);
  return losses(src, tgt);
}

// ---------------------------------------------------------------------------

template <typename T>
Heatmap export_domain_evidence(const BasicTensor<T>& encoded, const DomainClassifier<T>& classifier) {
  const Shape s = encoded.shape();
  if (s.n != 1) throw ShapeError("export_domain_evidence expects one image, got " + s.str());
  const BasicTensor<T> leaf =
      BasicTensor<T>::from_data(s, std::vector<T>(encoded.data().begin(), encoded.data().end()), true);
  const BasicTensor<T> score = mean_all(classifier.logits(leaf));
  backward(score);
  const auto grad = leaf.grad();
  const auto act = leaf.data();
  const std::size_t sp = s.spatial();
  Heatmap map;
  map.height = s.h;
  map.width = s.w;
  std::vector<double> cam(sp, 0.0);
  for (int c = 0; c < s.c; ++c) {
    double alpha = 0.0;
    for (std::size_t p = 0; p < sp; ++p) alpha += grad.empty() ? 0.0 : double(grad[c * sp + p]);
    alpha /= static_cast<double>(sp);
    for (std::size_t p = 0; p < sp; ++p) cam[p] += alpha * double(act[c * sp + p]);
  }
  for (double& v : cam) v = std::max(0.0, v);
  map.raw_min = *std::min_element(cam.begin(), cam.end());
  map.raw_max = *std::max_element(cam.begin(), cam.end());
  map.values.assign(sp, 0.0);
  if (map.raw_max > map.raw_min) {
    for (std::size_t p = 0; p < sp; ++p)
      map.values[p] = (cam[p] - map.raw_min) / (map.raw_max - map.raw_min);
  }
  return map;
}

void write_heatmap(const Heatmap& map, const std::string& pgm_path, const std::string& json_path) {
  std::ofstream os(pgm_path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write heatmap " + pgm_path);
  os << "P5\n" << map.width << " " << map.height << "\n255\n";
  for (double v : map.values) {
    const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    os.put(static_cast<char>(byte));
  }
  std::ofstream js(json_path, std::ios::trunc);
  if (!js) throw std::runtime_error("cannot write heatmap sidecar " + json_path);
  nlohmann::json meta{{"width", map.width},
                      {"height", map.height},
                      {"raw_min", map.raw_min},
                      {"raw_max", map.raw_max}};
  js << meta.dump(2) << "\n";
}

#define DSEM_INSTANTIATE_DSEM(T)                                                          \
  template BasicTensor<T> seg_loss(const BasicTensor<T>&, std::span<const unsigned char>); \
  template std::optional<double> compute_seg_miou(std::span<const BasicTensor<T>>,         \
                                                  std::span<const std::vector<unsigned char>>); \
  template struct DomainClassifier<T>;                                                    \
  template BasicTensor<T> domain_adv_loss(const BasicTensor<T>&, const BasicTensor<T>&);  \
  template double domain_accuracy(const BasicTensor<T>&, const BasicTensor<T>&);          \
  template class Dsem<T>;                                                                 \
  template Heatmap export_domain_evidence(const BasicTensor<T>&, const DomainClassifier<T>&);

DSEM_INSTANTIATE_DSEM(float)
DSEM_INSTANTIATE_DSEM(double)
#undef DSEM_INSTANTIATE_DSEM

}  // namespace dsem
