#pragma once

// Datasets: a synthetic generator, binary PPM images, a COCO annotation
// subset, and train-time augmentation.

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdiffdet/geometry.hpp"
#include "cdiffdet/tensor.hpp"

namespace cdiffdet {

struct ImageRGB {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // HWC, 3 bytes per pixel

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
};

std::string encode_ppm(const ImageRGB& img);
ImageRGB decode_ppm(const std::string& bytes);
void write_ppm(const std::filesystem::path& path, const ImageRGB& img);
ImageRGB read_ppm(const std::filesystem::path& path);

// [1,3,H,W] with values (v/255 - 0.5) / 0.25.
Tensor image_to_tensor(const ImageRGB& img);

struct Category {
  int id = 0;
  std::string name;
};

struct ImageRecord {
  std::int64_t id = 0;
  std::string file_name;  // relative to the annotation file's directory
  std::size_t width = 0, height = 0;
};

struct Annotation {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  int category_id = 0;
  BoxXYXY box;  // pixels
};

struct Dataset {
  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
  std::vector<Category> categories;  // ascending id
  std::filesystem::path root;        // directory holding the images

  // Contiguous 0-based class index for a category id (position in categories).
  int class_index(int category_id) const;
  std::vector<const Annotation*> annotations_for(std::int64_t image_id) const;
  ImageRGB load_image(const ImageRecord& rec) const;
};

// Parses a COCO document. Missing arrays or malformed records raise
// ParseError naming the record; unknown fields are ignored. Boxes are clamped
// to the image.
Dataset dataset_from_coco(const nlohmann::json& doc, const std::filesystem::path& root);
Dataset load_coco_subset(const std::filesystem::path& annotation_file);
nlohmann::json dataset_to_coco(const Dataset& ds);

struct SynthConfig {
  std::size_t image_size = 64;
  std::size_t num_classes = 3;
  std::size_t min_instances = 1;
  std::size_t max_instances = 3;
  std::size_t min_box = 12;
  std::size_t max_box = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthSample {
  ImageRGB image;
  std::vector<Annotation> annotations;  // ids assigned by the generator
};

inline const char* const kSynthClassNames[] = {"solid", "striped", "gradient", "checker", "ring", "dots"};

// Class 0 solid fill, 1 horizontal stripes, 2 diagonal gradient (further
// classes use further textures) on a noise background. Boxes do not overlap.
std::vector<SynthSample> generate_synthetic(const SynthConfig& cfg, std::size_t n_images,
                                            std::int64_t first_image_id = 1);

// Writes images/<id>.ppm plus annotations.json under dir and returns the
// dataset.
Dataset write_synthetic(const SynthConfig& cfg, std::size_t n_images, const std::filesystem::path& dir,
                        std::int64_t first_image_id = 1);

// Horizontal flip with probability hflip_prob, then isotropic rescale by
// s ~ U(1 - jitter, 1 + jitter) with nearest sampling, cropped or padded
// (zero) back to the original size. Boxes are transformed and clipped; boxes
// that shrink below one pixel are dropped along with their classes.
struct AugmentResult {
  ImageRGB image;
  std::vector<BoxXYXY> boxes;
  std::vector<int> classes;
};
AugmentResult augment(const ImageRGB& img, const std::vector<BoxXYXY>& boxes, const std::vector<int>& classes,
                      double hflip_prob, double scale_jitter, std::mt19937_64& rng);

}  // namespace cdiffdet
