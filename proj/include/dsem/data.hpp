#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dsem/detector.hpp"
#include "dsem/dsem.hpp"
#include "json.hpp"

namespace dsem {

inline constexpr int kImageSize = 64;
inline const std::vector<std::string> kClassNames{"circle", "square", "triangle"};

// Planar RGB, values k/255 in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // 3 x height x width

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

struct Sample {
  std::string image_id;
  Domain domain = Domain::source;
  Image image;
  std::vector<GroundTruth> objects;
};

// What the adaptation loop sees of a target image. There is deliberately no
// annotation field.
struct UnlabeledImage {
  std::string image_id;
  Image image;
};

enum class BackgroundTexture { plain, stripes, speckle };

struct ShiftSpec {
  bool palette_swap = false;
  double noise_sigma = 0.0;
  BackgroundTexture background_texture = BackgroundTexture::plain;
  double brightness_shift = 0.0;  // in [-0.5, 0.5]

  void validate() const;
  bool operator==(const ShiftSpec&) const = default;
};

// "null" (no shift) or "default" (palette swap, speckle, sigma 0.05).
ShiftSpec shift_preset(const std::string& name);
// A preset name, or a JSON object / file path with ShiftSpec fields.
ShiftSpec parse_shift(const std::string& text);
nlohmann::json shift_to_json(const ShiftSpec& shift);
ShiftSpec shift_from_json(const nlohmann::json& j);

struct DomainPair {
  std::vector<Sample> source;
  std::vector<Sample> target;
};

// Sample i of a domain draws from its own stream (seed, domain, i).
DomainPair gen_domain_pair(int n_source, int n_target, const ShiftSpec& shift, std::uint64_t seed);
Sample generate_sample(Domain domain, int index, const ShiftSpec& shift, std::uint64_t seed);

// P6 writes; P5 or P6 reads (gray is replicated to three channels).
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_pnm(const std::filesystem::path& path);

// Writes images/<id>.ppm, manifest.json and, when given, genspec.json.
void save_dataset(const std::filesystem::path& dir, std::span<const Sample> samples,
                  const nlohmann::json& genspec = nullptr);
std::vector<Sample> load_dataset(const std::filesystem::path& dir);

std::vector<Sample> select_domain(std::span<const Sample> samples, Domain domain);
// Drops annotations; warns once if any target sample carried some.
std::vector<UnlabeledImage> strip_annotations(std::span<const Sample> samples);

// Deterministic subset with at least per_class images containing each class.
std::vector<Sample> few_shot_subset(std::span<const Sample> target, int per_class, int num_classes,
                                    std::uint64_t seed);

// Per-class object counts.
std::vector<int> class_counts(std::span<const Sample> samples, int num_classes);

// N x 3 x S x S batch from the given images.
Tensor make_batch(std::span<const Image* const> images);

}  // namespace dsem
