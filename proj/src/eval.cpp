#include "dsem/eval.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>
#include <tuple>

#include "json.hpp"

namespace dsem {

double average_precision(std::span<const unsigned char> ranked_tp, int num_gt) {
  if (num_gt <= 0) throw std::invalid_argument("average_precision: no ground truth");
  const std::size_t n = ranked_tp.size();
  std::vector<double> recall(n + 2), precision(n + 2);
  recall[0] = 0.0;
  precision[0] = 0.0;
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (ranked_tp[i] ? tp : fp) += 1.0;
    recall[i + 1] = tp / num_gt;
    precision[i + 1] = tp / (tp + fp);
  }
  recall[n + 1] = 1.0;
  precision[n + 1] = 0.0;
  // Precision envelope, right to left.
  for (std::size_t i = n + 1; i-- > 0;) precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 0; i + 1 < recall.size(); ++i)
    if (recall[i + 1] != recall[i]) ap += (recall[i + 1] - recall[i]) * precision[i + 1];
  return ap;
}

MapResult evaluate_map(std::span<const ImageDetections> detections,
                       std::span<const ImageGroundTruth> ground_truth, int num_classes,
                       double iou_thresh) {
  MapResult result;
  result.per_class_ap.assign(num_classes, std::nullopt);
  result.gt_counts.assign(num_classes, 0);

  std::map<std::string, const ImageGroundTruth*> gt_by_image;
  for (const auto& g : ground_truth) {
    if (!gt_by_image.emplace(g.image_id, &g).second) {
      throw std::invalid_argument("evaluate_map: duplicate ground-truth image '" + g.image_id + "'");
    }
    for (const auto& o : g.objects) {
      if (o.label < 0 || o.label >= num_classes) {
        throw std::invalid_argument("evaluate_map: label " + std::to_string(o.label) +
                                    " out of range in image '" + g.image_id + "'");
      }
      ++result.gt_counts[o.label];
    }
  }
  int total_gt = 0;
  for (int c : result.gt_counts) total_gt += c;
  if (total_gt == 0) throw std::invalid_argument("evaluate_map: no ground truth at all");

  struct Ranked {
    double score;
    const std::string* image;
    Box box;
  };
  double ap_sum = 0.0;
  int classes_with_gt = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    if (result.gt_counts[cls] == 0) continue;
    std::vector<Ranked> ranked;
    for (const auto& img : detections)
      for (const auto& d : img.detections)
        if (d.class_id == cls) ranked.push_back({d.score, &img.image_id, d.box});
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      return std::make_tuple(-a.score, *a.image, a.box.xmin, a.box.ymin, a.box.xmax, a.box.ymax) <
             std::make_tuple(-b.score, *b.image, b.box.xmin, b.box.ymin, b.box.xmax, b.box.ymax);
    });
    std::map<std::string, std::vector<unsigned char>> used;
    std::vector<unsigned char> tp(ranked.size(), 0);
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      const auto it = gt_by_image.find(*ranked[i].image);
      if (it == gt_by_image.end()) continue;
      const auto& objs = it->second->objects;
      auto& taken = used[*ranked[i].image];
      taken.resize(objs.size(), 0);
      int best = -1;
      double best_iou = iou_thresh;
      for (std::size_t g = 0; g < objs.size(); ++g) {
        if (objs[g].label != cls || taken[g]) continue;
        const double o = iou(ranked[i].box, objs[g].box);
        if (o >= best_iou && (best < 0 || o > best_iou)) {
          best_iou = o;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        taken[best] = 1;
        tp[i] = 1;
      }
    }
    const double ap = average_precision(tp, result.gt_counts[cls]);
    result.per_class_ap[cls] = ap;
    ap_sum += ap;
    ++classes_with_gt;
  }
  result.map = ap_sum / classes_with_gt;
  return result;
}

void write_detection_dump(const std::filesystem::path& path,
                          std::span<const ImageDetections> detections) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write detection dump " + path.string());
  for (const auto& img : detections) {
    nlohmann::json rec;
    rec["image_id"] = img.image_id;
    rec["detections"] = nlohmann::json::array();
    for (const auto& d : img.detections) {
      rec["detections"].push_back({{"class", d.class_id},
                                   {"score", d.score},
                                   {"box", {d.box.xmin, d.box.ymin, d.box.xmax, d.box.ymax}}});
    }
    os << rec.dump() << "\n";
  }
}

std::vector<ImageDetections> read_detection_dump(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open detection dump " + path.string());
  std::vector<ImageDetections> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      ImageDetections img;
      img.image_id = rec.at("image_id").get<std::string>();
      for (const auto& d : rec.at("detections")) {
        const auto b = d.at("box").get<std::vector<double>>();
        if (b.size() != 4) throw std::runtime_error("box must have 4 coordinates");
        img.detections.push_back(
            {Box{b[0], b[1], b[2], b[3]}, d.at("class").get<int>(), d.at("score").get<double>()});
      }
      out.push_back(std::move(img));
    } catch (const std::exception& ex) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace dsem
