#include "dsem/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dsem/log.hpp"
#include "dsem/parallel.hpp"
#include "dsem/rng.hpp"

namespace fs = std::filesystem;

namespace dsem {

namespace {

constexpr int kMaxObjects = 3;
constexpr int kPlacementAttempts = 100;
constexpr double kMinSize = 0.2;
constexpr double kMaxSize = 0.5;
constexpr double kMaxOverlap = 0.3;

// Dark, close hues: objects stand out from the gray background in every
// channel, so the palette swap (an RGB channel rotation) keeps them visible
// while moving their color off the source palette.
constexpr std::array<std::array<double, 3>, 3> kPalette{{
    {0.30, 0.10, 0.05},
    {0.25, 0.15, 0.05},
    {0.35, 0.20, 0.10},
}};

float quantize(double v) {
  const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<float>(q) / 255.0f;
}

bool inside_shape(int label, const Box& b, double px, double py) {
  if (px < b.xmin || px > b.xmax || py < b.ymin || py > b.ymax) return false;
  const double cx = 0.5 * (b.xmin + b.xmax);
  const double cy = 0.5 * (b.ymin + b.ymax);
  switch (label) {
    case 0: {
      const double r = 0.5 * b.width();
      return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    }
    case 1:
      return true;
    default: {
      // Apex at the top center, base along the bottom edge.
      const double t = (py - b.ymin) / b.height();
      return std::abs(px - cx) <= 0.5 * b.width() * t;
    }
  }
}

const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::runtime_error("unknown domain \"" + s + "\"");
}

const char* texture_name(BackgroundTexture t) {
  switch (t) {
    case BackgroundTexture::plain: return "plain";
    case BackgroundTexture::stripes: return "stripes";
    case BackgroundTexture::speckle: return "speckle";
  }
  return "plain";
}

}  // namespace

void ShiftSpec::validate() const {
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("shift: noise_sigma must be >= 0");
  if (!(brightness_shift >= -0.5 && brightness_shift <= 0.5)) {
    throw std::invalid_argument("shift: brightness_shift must lie in [-0.5, 0.5]");
  }
}

ShiftSpec shift_preset(const std::string& name) {
  if (name == "null" || name == "none") return ShiftSpec{};
  if (name == "default") {
    ShiftSpec s;
    s.palette_swap = true;
    s.background_texture = BackgroundTexture::speckle;
    s.noise_sigma = 0.05;
    return s;
  }
  throw std::invalid_argument("unknown shift preset \"" + name + "\"");
}

nlohmann::json shift_to_json(const ShiftSpec& shift) {
  return {{"palette_swap", shift.palette_swap},
          {"noise_sigma", shift.noise_sigma},
          {"background_texture", texture_name(shift.background_texture)},
          {"brightness_shift", shift.brightness_shift}};
}

ShiftSpec shift_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("shift: expected a JSON object");
  ShiftSpec s;
  for (const auto& [key, value] : j.items()) {
    if (key == "palette_swap") {
      s.palette_swap = value.get<bool>();
    } else if (key == "noise_sigma") {
      s.noise_sigma = value.get<double>();
    } else if (key == "brightness_shift") {
      s.brightness_shift = value.get<double>();
    } else if (key == "background_texture") {
      const auto t = value.get<std::string>();
      if (t == "plain") s.background_texture = BackgroundTexture::plain;
      else if (t == "stripes") s.background_texture = BackgroundTexture::stripes;
      else if (t == "speckle") s.background_texture = BackgroundTexture::speckle;
      else throw std::invalid_argument("shift: unknown background_texture \"" + t + "\"");
    } else {
      throw std::invalid_argument("shift: unknown key \"" + key + "\"");
    }
  }
  s.validate();
  return s;
}

ShiftSpec parse_shift(const std::string& text) {
  if (text.empty()) throw std::invalid_argument("shift: empty specification");
  if (text.front() == '{') return shift_from_json(nlohmann::json::parse(text));
  if (fs::is_regular_file(text)) {
    std::ifstream is(text);
    return shift_from_json(nlohmann::json::parse(is));
  }
  return shift_preset(text);
}

Sample generate_sample(Domain domain, int index, const ShiftSpec& shift, std::uint64_t seed) {
  const std::string prefix = std::string("data/") + domain_name(domain);
  Rng layout = derive_stream(seed, prefix + "/layout", static_cast<std::uint64_t>(index));
  Rng texture = derive_stream(seed, prefix + "/texture", static_cast<std::uint64_t>(index));
  const bool shifted = domain == Domain::target;

  Sample s;
  s.domain = domain;
  s.image_id = std::string(domain == Domain::source ? "src_" : "tgt_") +
               (std::ostringstream() << std::setw(5) << std::setfill('0') << index).str();

  // Layout: identical process in both domains.
  const int wanted = 1 + static_cast<int>(layout.below(kMaxObjects));
  struct Placed {
    GroundTruth gt;
    std::array<double, 3> color;
  };
  std::vector<Placed> placed;
  for (int k = 0; k < wanted; ++k) {
    const int label = static_cast<int>(layout.below(kClassNames.size()));
    bool ok = false;
    Box box;
    for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      const double size = layout.uniform(kMinSize, kMaxSize);
      const double cx = layout.uniform(0.5 * size, 1.0 - 0.5 * size);
      const double cy = layout.uniform(0.5 * size, 1.0 - 0.5 * size);
      box = {cx - 0.5 * size, cy - 0.5 * size, cx + 0.5 * size, cy + 0.5 * size};
      ok = std::all_of(placed.begin(), placed.end(),
                       [&](const Placed& p) { return iou(p.gt.box, box) <= kMaxOverlap; });
    }
    if (!ok) break;
    std::array<double, 3> color = kPalette[label];
    for (double& ch : color) ch = std::clamp(ch + layout.uniform(-0.05, 0.05), 0.0, 1.0);
    placed.push_back({{box, label}, color});
  }

  // Appearance.
  const int n = kImageSize;
  std::vector<double> pix(3 * static_cast<std::size_t>(n) * n);
  auto px = [&](int c, int y, int x) -> double& { return pix[(static_cast<std::size_t>(c) * n + y) * n + x]; };
  const double base = texture.uniform(0.4, 0.5);
  const BackgroundTexture bg = shifted ? shift.background_texture : BackgroundTexture::plain;
  const double angle = texture.uniform(0.0, std::numbers::pi);
  const double period = texture.uniform(6.0, 12.0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double v = base;
      if (bg == BackgroundTexture::stripes) {
        const double t = (x * std::cos(angle) + y * std::sin(angle)) / period;
        v += 0.15 * std::sin(2.0 * std::numbers::pi * t);
      } else if (bg == BackgroundTexture::speckle) {
        const double u = texture.uniform();
        const double g = texture.uniform(0.1, 0.9);
        if (u < 0.2) v = g;
      }
      for (int c = 0; c < 3; ++c) px(c, y, x) = v;
    }
  }
  for (const Placed& p : placed) {
    std::array<double, 3> color = p.color;
    if (shifted && shift.palette_swap) color = {color[1], color[2], color[0]};
    for (int y = 0; y < n; ++y) {
      const double cy = (y + 0.5) / n;
      for (int x = 0; x < n; ++x) {
        if (!inside_shape(p.gt.label, p.gt.box, (x + 0.5) / n, cy)) continue;
        for (int c = 0; c < 3; ++c) px(c, y, x) = color[c];
      }
    }
    s.objects.push_back(p.gt);
  }
  const double bright = shifted ? shift.brightness_shift : 0.0;
  const double sigma = shifted ? shift.noise_sigma : 0.0;
  s.image.height = n;
  s.image.width = n;
  s.image.data.resize(pix.size());
  for (std::size_t i = 0; i < pix.size(); ++i) {
    double v = pix[i] + bright;
    if (sigma > 0.0) v += sigma * texture.normal();
    s.image.data[i] = quantize(v);
  }
  return s;
}

DomainPair gen_domain_pair(int n_source, int n_target, const ShiftSpec& shift, std::uint64_t seed) {
  if (n_source < 0 || n_target < 0) throw std::invalid_argument("sample counts must be >= 0");
  shift.validate();
  DomainPair pair;
  pair.source.resize(n_source);
  pair.target.resize(n_target);
  parallel_for(n_source, [&](int i) { pair.source[i] = generate_sample(Domain::source, i, shift, seed); });
  parallel_for(n_target, [&](int i) { pair.target[i] = generate_sample(Domain::target, i, shift, seed); });
  return pair;
}

// ---------------------------------------------------------------------------

void write_ppm(const fs::path& path, const Image& image) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write image " + path.string());
  os << "P6\n" << image.width << " " << image.height << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  std::vector<char> bytes(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c)
      bytes[p * 3 + c] = static_cast<char>(std::lround(std::clamp(image.data[c * plane + p], 0.0f, 1.0f) * 255.0f));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("short write on " + path.string());
}

Image read_pnm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  const std::string magic = token();
  if (magic != "P6" && magic != "P5") throw std::runtime_error(path.string() + ": not a binary PPM/PGM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": malformed header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error(path.string() + ": unsupported dimensions or maxval");
  }
  const int channels = magic == "P6" ? 3 : 1;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> bytes(plane * channels);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size()) {
    throw std::runtime_error(path.string() + ": truncated pixel data");
  }
  Image img;
  img.height = h;
  img.width = w;
  img.data.resize(plane * 3);
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      const unsigned char b = bytes[p * channels + (channels == 3 ? c : 0)];
      img.data[c * plane + p] = maxval == 255 ? static_cast<float>(b) / 255.0f
                                              : static_cast<float>(static_cast<double>(b) / maxval);
    }
  }
  return img;
}

void save_dataset(const fs::path& dir, std::span<const Sample> samples, const nlohmann::json& genspec) {
  fs::create_directories(dir / "images");
  nlohmann::json manifest = nlohmann::json::array();
  for (const Sample& s : samples) {
    const std::string file = "images/" + s.image_id + ".ppm";
    write_ppm(dir / file, s.image);
    nlohmann::json boxes = nlohmann::json::array();
    nlohmann::json labels = nlohmann::json::array();
    for (const auto& o : s.objects) {
      boxes.push_back({o.box.xmin, o.box.ymin, o.box.xmax, o.box.ymax});
      labels.push_back(o.label);
    }
    manifest.push_back({{"file", file}, {"boxes", boxes}, {"labels", labels}, {"domain", domain_name(s.domain)}});
  }
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(1) << "\n";
  if (!genspec.is_null()) {
    std::ofstream gs(dir / "genspec.json", std::ios::trunc);
    gs << genspec.dump(2) << "\n";
  }
}

std::vector<Sample> load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("cannot open " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const std::exception& ex) {
    throw std::runtime_error(manifest_path.string() + ": " + ex.what());
  }
  if (!manifest.is_array()) throw std::runtime_error(manifest_path.string() + ": expected a JSON array");
  std::vector<Sample> out;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& rec = manifest[i];
    const std::string where = manifest_path.string() + " record " + std::to_string(i);
    try {
      Sample s;
      const std::string file = rec.at("file").get<std::string>();
      s.image_id = fs::path(file).stem().string();
      if (!ids.insert(s.image_id).second) throw std::runtime_error("duplicate image id " + s.image_id);
      s.domain = parse_domain(rec.at("domain").get<std::string>());
      const auto boxes = rec.contains("boxes") ? rec.at("boxes") : nlohmann::json::array();
      const auto labels = rec.contains("labels") ? rec.at("labels") : nlohmann::json::array();
      if (boxes.size() != labels.size()) throw std::runtime_error("boxes and labels differ in length");
      for (std::size_t k = 0; k < boxes.size(); ++k) {
        const auto b = boxes[k].get<std::vector<double>>();
        if (b.size() != 4) throw std::runtime_error("box " + std::to_string(k) + " needs 4 coordinates");
        const Box box{b[0], b[1], b[2], b[3]};
        if (!box.valid() || box.xmin < 0 || box.ymin < 0 || box.xmax > 1 || box.ymax > 1) {
          throw std::runtime_error("box " + std::to_string(k) + " out of range or empty");
        }
        const int label = labels[k].get<int>();
        if (label < 0) throw std::runtime_error("negative label at box " + std::to_string(k));
        s.objects.push_back({box, label});
      }
      s.image = read_pnm(dir / file);
      out.push_back(std::move(s));
    } catch (const std::exception& ex) {
      throw std::runtime_error(where + ": " + ex.what());
    }
  }
  return out;
}

std::vector<Sample> select_domain(std::span<const Sample> samples, Domain domain) {
  std::vector<Sample> out;
  for (const auto& s : samples)
    if (s.domain == domain) out.push_back(s);
  return out;
}

std::vector<UnlabeledImage> strip_annotations(std::span<const Sample> samples) {
  std::vector<UnlabeledImage> out;
  std::size_t annotated = 0;
  for (const auto& s : samples) {
    if (!s.objects.empty()) ++annotated;
    out.push_back({s.image_id, s.image});
  }
  if (annotated > 0) {
    log_warn("ignoring annotations on " + std::to_string(annotated) + " target image(s)");
  }
  return out;
}

std::vector<Sample> few_shot_subset(std::span<const Sample> target, int per_class, int num_classes,
                                    std::uint64_t seed) {
  if (per_class < 1) throw std::invalid_argument("few_shot_subset: per_class must be >= 1");
  std::vector<std::size_t> order(target.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = derive_stream(seed, "data/few_shot");
  rng.shuffle(order);
  std::vector<int> have(num_classes, 0);
  std::vector<std::size_t> chosen;
  for (std::size_t idx : order) {
    std::set<int> present;
    for (const auto& o : target[idx].objects) present.insert(o.label);
    const bool useful = std::any_of(present.begin(), present.end(), [&](int c) {
      return c >= 0 && c < num_classes && have[c] < per_class;
    });
    if (!useful) continue;
    for (int c : present)
      if (c >= 0 && c < num_classes) ++have[c];
    chosen.push_back(idx);
  }
  for (int c = 0; c < num_classes; ++c) {
    if (have[c] < per_class) {
      throw std::invalid_argument("few_shot_subset: class " + std::to_string(c) + " has only " +
                                  std::to_string(have[c]) + " image(s), need " + std::to_string(per_class));
    }
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<Sample> out;
  for (std::size_t idx : chosen) out.push_back(target[idx]);
  return out;
}

std::vector<int> class_counts(std::span<const Sample> samples, int num_classes) {
  std::vector<int> counts(num_classes, 0);
  for (const auto& s : samples)
    for (const auto& o : s.objects)
      if (o.label >= 0 && o.label < num_classes) ++counts[o.label];
  return counts;
}

Tensor make_batch(std::span<const Image* const> images) {
  if (images.empty()) throw std::invalid_argument("make_batch: empty batch");
  const int h = images.front()->height;
  const int w = images.front()->width;
  std::vector<float> data;
  data.reserve(images.size() * 3 * static_cast<std::size_t>(h) * w);
  for (const Image* img : images) {
    if (img->height != h || img->width != w) throw ShapeError("make_batch: mixed image sizes");
    data.insert(data.end(), img->data.begin(), img->data.end());
  }
  return Tensor::from_data({static_cast<int>(images.size()), 3, h, w}, std::move(data));
}

}  // namespace dsem
