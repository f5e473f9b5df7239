#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsem/detector.hpp"

namespace dsem {

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

struct ImageGroundTruth {
  std::string image_id;
  std::vector<GroundTruth> objects;
};

struct MapResult {
  // Empty optional for classes without ground truth; they do not enter mAP.
  std::vector<std::optional<double>> per_class_ap;
  std::vector<int> gt_counts;
  double map = 0.0;
};

// All-point interpolated AP from a score-ranked TP/FP sequence.
double average_precision(std::span<const unsigned char> ranked_tp, int num_gt);

// VOC-style evaluation at an IoU threshold. Detections of one class are
// ranked over the whole set by score (ties broken by image id, then box
// coordinates, so the result does not depend on input order); each is a true
// positive when it overlaps an unmatched ground truth of its class by at
// least iou_thresh (the best such one is consumed).
MapResult evaluate_map(std::span<const ImageDetections> detections,
                       std::span<const ImageGroundTruth> ground_truth,
                       int num_classes, double iou_thresh = 0.5);

// JSON-lines: {"image_id": ..., "detections": [{"class", "score", "box"}]}.
void write_detection_dump(const std::filesystem::path& path,
                          std::span<const ImageDetections> detections);
std::vector<ImageDetections> read_detection_dump(const std::filesystem::path& path);

}  // namespace dsem
