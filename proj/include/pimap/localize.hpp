#pragma once

#include "pimap/encoder.hpp"
#include "pimap/errors.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace pimap {

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h, std::array<std::uint8_t, 3> fill = {0, 0, 0});

  bool empty() const { return width == 0 || height == 0; }
  std::uint8_t* at(int x, int y) { return &pixels[3 * (static_cast<std::size_t>(y) * width + x)]; }
  const std::uint8_t* at(int x, int y) const {
    return &pixels[3 * (static_cast<std::size_t>(y) * width + x)];
  }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// Binary (P6) and ASCII (P3) PPM with maxval 255. Other formats throw
// DecodeError.
RgbImage decode_ppm(std::string_view bytes);
std::string encode_ppm(const RgbImage& img);
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const RgbImage& img, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Detection

class NoBoxFound : public Error {
 public:
  using Error::Error;
};

struct Detection {
  BoundingBox box;
  double confidence = 1.0;
  std::string label;
};

// Language-guided detector: boxes for `category` in `image`.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::vector<Detection> detect(const RgbImage& image, const MediaDescriptor& media,
                                        const std::string& category) const = 0;
};

// Returns the box stored on the media descriptor (from the manifest).
class GroundTruthDetector final : public Detector {
 public:
  std::vector<Detection> detect(const RgbImage&, const MediaDescriptor& media,
                                const std::string&) const override;
};

// Fixed answers per media_id, with a default for everything else.
class ScriptedDetector final : public Detector {
 public:
  explicit ScriptedDetector(std::vector<Detection> fallback = {}) : fallback_(std::move(fallback)) {}
  void set(const std::string& media_id, std::vector<Detection> detections) {
    script_[media_id] = std::move(detections);
  }
  std::vector<Detection> detect(const RgbImage&, const MediaDescriptor& media,
                                const std::string&) const override;

 private:
  std::map<std::string, std::vector<Detection>> script_;
  std::vector<Detection> fallback_;
};

// Runs `command <image.ppm> <category> <out.json>`; the tool writes a JSON
// array of {"box": [x0, y0, x1, y1], "confidence": c, "label": s}.
class ExternalDetector final : public Detector {
 public:
  ExternalDetector(std::string command, std::filesystem::path work_dir);
  std::vector<Detection> detect(const RgbImage& image, const MediaDescriptor& media,
                                const std::string& category) const override;

 private:
  std::string command_;
  std::filesystem::path work_dir_;
};

BoundingBox clamp_box(const BoundingBox& b, int width, int height);

// Highest-confidence detection, clamped to the image. Throws NoBoxFound when
// there is none (or the clamped box is empty).
BoundingBox detect_box(const RgbImage& image, const MediaDescriptor& media, const std::string& category,
                       const Detector& detector);

struct BoxChoice {
  BoundingBox box;
  bool fallback = false;  // the detector found nothing; whole image used
};
// detect_box, falling back to the full image.
BoxChoice detect_box_or_full(const RgbImage& image, const MediaDescriptor& media,
                             const std::string& category, const Detector& detector);

// ---------------------------------------------------------------------------
// Ellipse

struct EllipseSpec {
  double cx = 0.0, cy = 0.0;
  double a = 0.0, b = 0.0;  // semi-axes along x and y
  std::array<std::uint8_t, 3> color{255, 0, 0};
  double stroke_width = 3.0;

  // Point on the curve at parameter angle t: (cx + a cos t, cy + b sin t).
  std::pair<double, double> point_at(double t) const;
};

// Centered on the box, passing through the midpoint of each side.
EllipseSpec ellipse_from_box(const BoundingBox& b, double stroke_width = 3.0);

// Euclidean distance from (px, py) to the ellipse curve.
double distance_to_ellipse(const EllipseSpec& e, double px, double py);

// Paints every pixel (coordinates at pixel centers x, y) whose distance to
// the curve is at most stroke_width / 2. Nothing else changes.
void draw_ellipse(RgbImage& image, const EllipseSpec& e);

// ---------------------------------------------------------------------------

// Produces x^loc for a template.
class Localizer {
 public:
  virtual ~Localizer() = default;
  virtual MediaDescriptor localize(const MediaDescriptor& media, const std::string& category) const = 0;
};

// Synthetic media: scales the background weight by `factor`.
class SyntheticLocalizer final : public Localizer {
 public:
  explicit SyntheticLocalizer(double factor = 0.2) : factor_(factor) {}
  MediaDescriptor localize(const MediaDescriptor& media, const std::string& category) const override;

 private:
  double factor_;
};

// Image files: detect, draw the ellipse on every frame independently, write
// the results under out_dir and return a descriptor pointing at them.
class ImageLocalizer final : public Localizer {
 public:
  ImageLocalizer(std::shared_ptr<const Detector> detector, std::filesystem::path out_dir,
                 double stroke_width = 3.0);
  MediaDescriptor localize(const MediaDescriptor& media, const std::string& category) const override;

  // Media ids whose detection fell back to the whole image.
  std::vector<std::string> fallbacks() const;

 private:
  std::shared_ptr<const Detector> detector_;
  std::filesystem::path out_dir_;
  double stroke_;
  mutable std::vector<std::string> fallbacks_;
  mutable std::mutex mutex_;
};

}  // namespace pimap
