#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "dsem/eval.hpp"
#include "dsem/rng.hpp"
#include "test_util.hpp"

using namespace dsem;
using namespace dsem::testing;

namespace {

double ap_of(std::vector<unsigned char> tp, int num_gt) {
  return average_precision(std::span<const unsigned char>(tp), num_gt);
}

}  // namespace

TEST_CASE("average precision against hand-drawn envelopes") {
  // TP FP TP over 2 gts: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
  // Envelope 1 on (0, 1/2], 2/3 on (1/2, 1].
  CHECK(std::abs(ap_of({1, 0, 1}, 2) - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)) <= 1e-12);
  // FP TP TP over 2 gts: the envelope is 2/3 everywhere.
  CHECK(std::abs(ap_of({0, 1, 1}, 2) - 2.0 / 3.0) <= 1e-12);
  // TP FP FP TP over 3 gts: recall stops at 2/3.
  CHECK(std::abs(ap_of({1, 0, 0, 1}, 3) - (1.0 / 3.0 * 1.0 + 1.0 / 3.0 * 0.5)) <= 1e-12);
  CHECK(ap_of({}, 2) == 0.0);
  CHECK(ap_of({1, 1}, 2) == 1.0);
}

TEST_CASE("evaluate_map") {
  const std::vector<ImageGroundTruth> gt{
      {"a", {{{0.1, 0.1, 0.4, 0.4}, 0}, {{0.5, 0.5, 0.9, 0.9}, 1}}},
      {"b", {{{0.2, 0.2, 0.6, 0.6}, 0}}},
  };

  SUBCASE("detections equal to ground truth") {
    std::vector<ImageDetections> dets;
    for (const auto& g : gt) {
      ImageDetections d{g.image_id, {}};
      for (const auto& o : g.objects) d.detections.push_back({o.box, o.label, 0.9});
      dets.push_back(d);
    }
    const auto r = evaluate_map(dets, gt, 3);
    CHECK(r.map == 1.0);
    CHECK(r.per_class_ap[0].value() == 1.0);
    CHECK(r.per_class_ap[1].value() == 1.0);
    CHECK(!r.per_class_ap[2].has_value());
    CHECK(r.gt_counts == std::vector<int>{2, 1, 0});
  }
  SUBCASE("no detections") {
    const auto r = evaluate_map(std::span<const ImageDetections>{}, gt, 3);
    CHECK(r.map == 0.0);
  }
  SUBCASE("three detections on two class-0 objects") {
    // Ranked: hit on a (0.9), duplicate on a (0.8, false positive), hit on b (0.7).
    const std::vector<ImageDetections> dets{
        {"a", {{{0.1, 0.1, 0.4, 0.4}, 0, 0.9}, {{0.12, 0.1, 0.42, 0.4}, 0, 0.8}}},
        {"b", {{{0.2, 0.22, 0.6, 0.6}, 0, 0.7}}},
    };
    const std::vector<ImageGroundTruth> class0{{"a", {gt[0].objects[0]}}, gt[1]};
    const auto r = evaluate_map(dets, class0, 1);
    CHECK(std::abs(r.per_class_ap[0].value() - (0.5 + 0.5 * 2.0 / 3.0)) <= 1e-12);
  }
  SUBCASE("input order does not matter") {
    std::vector<ImageDetections> dets{
        {"a", {{{0.1, 0.1, 0.4, 0.4}, 0, 0.5}, {{0.5, 0.5, 0.8, 0.9}, 1, 0.5}, {{0.0, 0.0, 0.3, 0.3}, 0, 0.5}}},
        {"b", {{{0.2, 0.2, 0.6, 0.6}, 0, 0.5}, {{0.6, 0.6, 0.9, 0.9}, 1, 0.7}}},
    };
    const double ref = evaluate_map(dets, gt, 3).map;
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
      rng.shuffle(dets);
      for (auto& d : dets) rng.shuffle(d.detections);
      CHECK(evaluate_map(dets, gt, 3).map == ref);
    }
  }
  SUBCASE("no ground truth at all is an error") {
    const std::vector<ImageGroundTruth> empty{{"a", {}}};
    CHECK_THROWS(evaluate_map(std::span<const ImageDetections>{}, empty, 3));
  }
}

TEST_CASE("detection dump round trip") {
  const auto dir = scratch_dir("eval_dump");
  const std::vector<ImageDetections> dets{
      {"src_00001", {{{0.1, 0.2, 0.3, 0.4}, 2, 0.123456789012345}}},
      {"src_00002", {}},
  };
  write_detection_dump(dir / "d.jsonl", dets);
  const auto back = read_detection_dump(dir / "d.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].image_id == "src_00001");
  REQUIRE(back[0].detections.size() == 1);
  CHECK(back[0].detections[0].box == dets[0].detections[0].box);
  CHECK(back[0].detections[0].class_id == 2);
  CHECK(back[0].detections[0].score == dets[0].detections[0].score);
  CHECK(back[1].detections.empty());
}
