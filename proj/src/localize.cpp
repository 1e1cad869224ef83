#include "pimap/localize.hpp"

#include "pimap/hashing.hpp"
#include "pimap/synthetic_world.hpp"

#include "binary_io.hpp"
#include "process.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

namespace pimap {
namespace {

// Skips whitespace and `#` comments in a PPM header.
void skip_space(std::string_view s, std::size_t& pos) {
  while (pos < s.size()) {
    if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
}

long read_int(std::string_view s, std::size_t& pos) {
  skip_space(s, pos);
  const std::size_t start = pos;
  long v = 0;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
    v = v * 10 + (s[pos] - '0');
    if (v > 1'000'000) throw DecodeError("ppm: header value too large");
    ++pos;
  }
  if (pos == start) throw DecodeError("ppm: malformed header");
  return v;
}

double robust_length(double v0, double v1) {
  const double m = std::max(std::abs(v0), std::abs(v1));
  if (m == 0.0) return 0.0;
  return m * std::sqrt((v0 / m) * (v0 / m) + (v1 / m) * (v1 / m));
}

// Root of (r0 z0 / (s + r0))^2 + (z1 / (s + 1))^2 - 1 by bisection.
double ellipse_root(double r0, double z0, double z1, double g) {
  const double n0 = r0 * z0;
  double s0 = z1 - 1.0;
  double s1 = g < 0.0 ? 0.0 : robust_length(n0, z1) - 1.0;
  double s = 0.0;
  for (int i = 0; i < 1100; ++i) {
    s = 0.5 * (s0 + s1);
    if (s == s0 || s == s1) break;
    const double ratio0 = n0 / (s + r0);
    const double ratio1 = z1 / (s + 1.0);
    g = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
    if (g > 0.0) {
      s0 = s;
    } else if (g < 0.0) {
      s1 = s;
    } else {
      break;
    }
  }
  return s;
}

// Distance from (y0, y1), both >= 0, to the axis-aligned ellipse with
// semi-axes e0 >= e1 > 0.
double distance_first_quadrant(double e0, double e1, double y0, double y1) {
  if (y1 > 0.0) {
    if (y0 > 0.0) {
      const double z0 = y0 / e0;
      const double z1 = y1 / e1;
      const double g = z0 * z0 + z1 * z1 - 1.0;
      if (g == 0.0) return 0.0;
      const double r0 = (e0 / e1) * (e0 / e1);
      const double sbar = ellipse_root(r0, z0, z1, g);
      const double x0 = r0 * y0 / (sbar + r0);
      const double x1 = y1 / (sbar + 1.0);
      return std::hypot(x0 - y0, x1 - y1);
    }
    return std::abs(y1 - e1);
  }
  const double numer0 = e0 * y0;
  const double denom0 = e0 * e0 - e1 * e1;
  if (numer0 < denom0) {
    const double xde0 = numer0 / denom0;
    const double x0 = e0 * xde0;
    const double x1 = e1 * std::sqrt(1.0 - xde0 * xde0);
    return std::hypot(x0 - y0, x1);
  }
  return std::abs(y0 - e0);
}

}  // namespace

RgbImage::RgbImage(int w, int h, std::array<std::uint8_t, 3> fill) : width(w), height(h) {
  if (w < 0 || h < 0) throw ShapeError("image dimensions must be >= 0");
  pixels.resize(3 * static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  for (std::size_t i = 0; i < pixels.size(); i += 3) std::copy(fill.begin(), fill.end(), pixels.begin() + i);
}

RgbImage decode_ppm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '3')) {
    throw DecodeError("unsupported image format (only PPM P6/P3 is decoded)");
  }
  const bool binary = bytes[1] == '6';
  std::size_t pos = 2;
  const long w = read_int(bytes, pos);
  const long h = read_int(bytes, pos);
  const long maxval = read_int(bytes, pos);
  if (maxval != 255) throw DecodeError("ppm: only maxval 255 is supported");
  RgbImage img(static_cast<int>(w), static_cast<int>(h));
  if (binary) {
    ++pos;  // single whitespace byte after maxval
    if (bytes.size() < pos + img.pixels.size()) throw DecodeError("ppm: truncated pixel data");
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.pixels.size(), img.pixels.begin());
  } else {
    for (auto& p : img.pixels) {
      const long v = read_int(bytes, pos);
      if (v > 255) throw DecodeError("ppm: sample exceeds maxval");
      p = static_cast<std::uint8_t>(v);
    }
  }
  return img;
}

std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = detail::read_file(path.string());
  } catch (const Error&) {
    throw DecodeError("cannot read image " + path.string());
  }
  return decode_ppm(bytes);
}

void write_ppm(const RgbImage& img, const std::filesystem::path& path) {
  detail::write_file_atomic(path.string(), encode_ppm(img));
}

// ---------------------------------------------------------------------------

std::vector<Detection> GroundTruthDetector::detect(const RgbImage&, const MediaDescriptor& media,
                                                   const std::string&) const {
  if (!media.box) return {};
  return {Detection{*media.box, 1.0, "ground-truth"}};
}

std::vector<Detection> ScriptedDetector::detect(const RgbImage&, const MediaDescriptor& media,
                                                const std::string&) const {
  auto it = script_.find(media.media_id);
  return it == script_.end() ? fallback_ : it->second;
}

ExternalDetector::ExternalDetector(std::string command, std::filesystem::path work_dir)
    : command_(std::move(command)), work_dir_(std::move(work_dir)) {
  std::filesystem::create_directories(work_dir_);
}

std::vector<Detection> ExternalDetector::detect(const RgbImage& image, const MediaDescriptor& media,
                                                const std::string& category) const {
  const auto stem = work_dir_ / ("detect-" + hash_hex(media.media_id));
  const auto img_path = stem.string() + ".ppm";
  const auto out_path = stem.string() + ".json";
  write_ppm(image, img_path);
  std::filesystem::remove(out_path);
  const int rc = detail::run_command(command_, {img_path, category, out_path});
  if (rc != 0) throw ExternalToolError("detector exited with status " + std::to_string(rc));
  std::vector<Detection> out;
  try {
    const auto j = nlohmann::json::parse(detail::read_file(out_path));
    for (const auto& d : j) {
      const auto& b = d.at("box");
      out.push_back({BoundingBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                 b.at(3).get<double>()},
                     d.value("confidence", 1.0), d.value("label", category)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ExternalToolError(std::string("detector output is malformed: ") + e.what());
  }
  return out;
}

BoundingBox clamp_box(const BoundingBox& b, int width, int height) {
  const double w = std::max(0, width);
  const double h = std::max(0, height);
  return {std::clamp(b.x0, 0.0, w), std::clamp(b.y0, 0.0, h), std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h)};
}

BoundingBox detect_box(const RgbImage& image, const MediaDescriptor& media, const std::string& category,
                       const Detector& detector) {
  const auto dets = detector.detect(image, media, category);
  const Detection* best = nullptr;
  for (const auto& d : dets) {
    if (!best || d.confidence > best->confidence) best = &d;
  }
  if (!best) throw NoBoxFound(media.media_id + ": no `" + category + "` detected");
  const auto box = clamp_box(best->box, image.width, image.height);
  if (!box.valid()) throw NoBoxFound(media.media_id + ": detected box lies outside the image");
  return box;
}

BoxChoice detect_box_or_full(const RgbImage& image, const MediaDescriptor& media, const std::string& category,
                             const Detector& detector) {
  try {
    return {detect_box(image, media, category, detector), false};
  } catch (const NoBoxFound&) {
    return {BoundingBox{0.0, 0.0, static_cast<double>(image.width), static_cast<double>(image.height)}, true};
  }
}

// ---------------------------------------------------------------------------

std::pair<double, double> EllipseSpec::point_at(double t) const {
  // Snap the rounding residue of cos/sin at quarter turns so the side
  // midpoints come out exact.
  double c = std::cos(t), s = std::sin(t);
  if (std::abs(c) < 1e-15) c = 0.0;
  if (std::abs(s) < 1e-15) s = 0.0;
  return {cx + a * c, cy + b * s};
}

EllipseSpec ellipse_from_box(const BoundingBox& box, double stroke_width) {
  if (!box.valid()) throw DomainError("ellipse_from_box: box must satisfy x0 < x1 and y0 < y1");
  EllipseSpec e;
  e.cx = (box.x0 + box.x1) / 2.0;
  e.cy = (box.y0 + box.y1) / 2.0;
  e.a = (box.x1 - box.x0) / 2.0;
  e.b = (box.y1 - box.y0) / 2.0;
  e.stroke_width = stroke_width;
  return e;
}

double distance_to_ellipse(const EllipseSpec& e, double px, double py) {
  if (!(e.a > 0.0 && e.b > 0.0)) throw DomainError("ellipse semi-axes must be > 0");
  const double y0 = std::abs(px - e.cx);
  const double y1 = std::abs(py - e.cy);
  if (e.a >= e.b) return distance_first_quadrant(e.a, e.b, y0, y1);
  return distance_first_quadrant(e.b, e.a, y1, y0);
}

void draw_ellipse(RgbImage& image, const EllipseSpec& e) {
  if (image.empty()) return;
  const double half = e.stroke_width / 2.0;
  const int x_lo = std::max(0, static_cast<int>(std::floor(e.cx - e.a - half)));
  const int x_hi = std::min(image.width - 1, static_cast<int>(std::ceil(e.cx + e.a + half)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(e.cy - e.b - half)));
  const int y_hi = std::min(image.height - 1, static_cast<int>(std::ceil(e.cy + e.b + half)));
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      if (distance_to_ellipse(e, x, y) <= half) std::copy(e.color.begin(), e.color.end(), image.at(x, y));
    }
  }
}

// ---------------------------------------------------------------------------

MediaDescriptor SyntheticLocalizer::localize(const MediaDescriptor& media, const std::string&) const {
  if (!media.synthetic) throw DecodeError(media.media_id + ": synthetic localizer needs a synthetic descriptor");
  MediaDescriptor out = media;
  out.synthetic = localize_descriptor(*media.synthetic, factor_);
  return out;
}

ImageLocalizer::ImageLocalizer(std::shared_ptr<const Detector> detector, std::filesystem::path out_dir,
                               double stroke_width)
    : detector_(std::move(detector)), out_dir_(std::move(out_dir)), stroke_(stroke_width) {
  std::filesystem::create_directories(out_dir_);
}

MediaDescriptor ImageLocalizer::localize(const MediaDescriptor& media, const std::string& category) const {
  if (media.frame_paths.empty()) throw DecodeError(media.media_id + ": no image files to localize");
  MediaDescriptor out = media;
  out.frame_paths.clear();
  bool fell_back = false;
  for (std::size_t k = 0; k < media.frame_paths.size(); ++k) {
    RgbImage img = read_ppm(media.frame_paths[k]);
    const auto choice = detect_box_or_full(img, media, category, *detector_);
    fell_back = fell_back || choice.fallback;
    if (choice.box.valid()) draw_ellipse(img, ellipse_from_box(choice.box, stroke_));
    const auto path = out_dir_ / (hash_hex(media.media_id) + "-" + std::to_string(k) + "-loc.ppm");
    write_ppm(img, path);
    out.frame_paths.push_back(path.string());
  }
  if (fell_back) {
    std::lock_guard lock(mutex_);
    fallbacks_.push_back(media.media_id);
  }
  return out;
}

std::vector<std::string> ImageLocalizer::fallbacks() const {
  std::lock_guard lock(mutex_);
  return fallbacks_;
}

}  // namespace pimap
