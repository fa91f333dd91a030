#include "cdiffdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

std::string encode_ppm(const ImageRGB& img) {
  if (img.pixels.size() != img.width * img.height * 3) throw ContractError("image buffer size mismatch");
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

ImageRGB decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P6") throw ParseError("not a binary PPM (P6)");
  ImageRGB img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw ParseError("only maxval 255 PPMs are supported");
  } catch (const std::logic_error&) {
    throw ParseError("malformed PPM header");
  }
  ++pos;  // single whitespace after maxval
  const std::size_t n = img.width * img.height * 3;
  if (bytes.size() < pos + n) throw ParseError("PPM pixel data truncated");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

void write_ppm(const std::filesystem::path& path, const ImageRGB& img) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  const std::string b = encode_ppm(img);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!f) throw Error("cannot write " + path.string());
}

ImageRGB read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot read image " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode_ppm(ss.str());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

Tensor image_to_tensor(const ImageRGB& img) {
  const std::size_t H = img.height, W = img.width;
  std::vector<double> v(3 * H * W);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        v[(c * H + y) * W + x] = (static_cast<double>(img.at(y, x, c)) / 255.0 - 0.5) / 0.25;
      }
    }
  }
  return Tensor({1, 3, H, W}, std::move(v));
}

int Dataset::class_index(int category_id) const {
  for (std::size_t i = 0; i < categories.size(); ++i) {
    if (categories[i].id == category_id) return static_cast<int>(i);
  }
  throw IndexError("unknown category id " + std::to_string(category_id));
}

std::vector<const Annotation*> Dataset::annotations_for(std::int64_t image_id) const {
  std::vector<const Annotation*> out;
  for (const auto& a : annotations) {
    if (a.image_id == image_id) out.push_back(&a);
  }
  return out;
}

ImageRGB Dataset::load_image(const ImageRecord& rec) const {
  ImageRGB img = read_ppm(root / rec.file_name);
  if (img.width != rec.width || img.height != rec.height) {
    throw ParseError("image " + rec.file_name + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                     ", annotation says " + std::to_string(rec.width) + "x" + std::to_string(rec.height));
  }
  return img;
}

Dataset dataset_from_coco(const nlohmann::json& doc, const std::filesystem::path& root) {
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!doc.is_object() || !doc.contains(key) || !doc[key].is_array()) {
      throw ParseError(std::string("COCO document lacks a '") + key + "' array");
    }
  }
  Dataset ds;
  ds.root = root;
  std::map<std::int64_t, std::size_t> image_index;
  std::size_t k = 0;
  try {
    for (const auto& im : doc["images"]) {
      ImageRecord r;
      r.id = im.at("id").get<std::int64_t>();
      r.file_name = im.at("file_name").get<std::string>();
      r.width = im.at("width").get<std::size_t>();
      r.height = im.at("height").get<std::size_t>();
      if (!image_index.emplace(r.id, ds.images.size()).second) throw ParseError("duplicate image id");
      ds.images.push_back(r);
      ++k;
    }
  } catch (const std::exception& e) {
    throw ParseError("images[" + std::to_string(k) + "]: " + e.what());
  }
  k = 0;
  try {
    for (const auto& c : doc["categories"]) {
      ds.categories.push_back({c.at("id").get<int>(), c.value("name", std::string())});
      ++k;
    }
  } catch (const std::exception& e) {
    throw ParseError("categories[" + std::to_string(k) + "]: " + e.what());
  }
  std::sort(ds.categories.begin(), ds.categories.end(), [](const Category& a, const Category& b) { return a.id < b.id; });
  k = 0;
  try {
    for (const auto& a : doc["annotations"]) {
      Annotation r;
      r.id = a.at("id").get<std::int64_t>();
      r.image_id = a.at("image_id").get<std::int64_t>();
      r.category_id = a.at("category_id").get<int>();
      const auto& b = a.at("bbox");
      if (!b.is_array() || b.size() != 4) throw ParseError("bbox must be [x, y, w, h]");
      const double x = b[0].get<double>(), y = b[1].get<double>(), w = b[2].get<double>(), h = b[3].get<double>();
      if (!(w > 0) || !(h > 0)) throw ParseError("bbox width and height must be positive");
      auto it = image_index.find(r.image_id);
      if (it == image_index.end()) throw ParseError("unknown image_id " + std::to_string(r.image_id));
      ds.class_index(r.category_id);
      const auto& im = ds.images[it->second];
      const double W = static_cast<double>(im.width), H = static_cast<double>(im.height);
      r.box = {std::clamp(x, 0.0, W), std::clamp(y, 0.0, H), std::clamp(x + w, 0.0, W), std::clamp(y + h, 0.0, H)};
      ds.annotations.push_back(r);
      ++k;
    }
  } catch (const std::exception& e) {
    throw ParseError("annotations[" + std::to_string(k) + "]: " + e.what());
  }
  return ds;
}

Dataset load_coco_subset(const std::filesystem::path& annotation_file) {
  std::ifstream f(annotation_file);
  if (!f) throw ParseError("cannot read " + annotation_file.string());
  nlohmann::json doc;
  try {
    f >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(annotation_file.string() + ": " + e.what());
  }
  return dataset_from_coco(doc, annotation_file.parent_path());
}

nlohmann::json dataset_to_coco(const Dataset& ds) {
  nlohmann::json images = nlohmann::json::array(), anns = nlohmann::json::array(), cats = nlohmann::json::array();
  for (const auto& im : ds.images) {
    images.push_back({{"id", im.id}, {"file_name", im.file_name}, {"width", im.width}, {"height", im.height}});
  }
  for (const auto& a : ds.annotations) {
    anns.push_back({{"id", a.id},
                    {"image_id", a.image_id},
                    {"category_id", a.category_id},
                    {"bbox", {a.box.x1, a.box.y1, a.box.width(), a.box.height()}},
                    {"area", a.box.area()},
                    {"iscrowd", 0}});
  }
  for (const auto& c : ds.categories) cats.push_back({{"id", c.id}, {"name", c.name}});
  return {{"images", images}, {"annotations", anns}, {"categories", cats}};
}

void SynthConfig::validate() const {
  if (image_size == 0 || image_size % 32 != 0) throw ConfigError("synthetic image size must be a positive multiple of 32");
  if (num_classes == 0 || num_classes > std::size(kSynthClassNames)) {
    throw ConfigError("synthetic num_classes must lie in [1, " + std::to_string(std::size(kSynthClassNames)) + "]");
  }
  if (min_instances == 0 || max_instances < min_instances) throw ConfigError("bad instance count range");
  if (min_box < 2 || max_box < min_box || max_box > image_size) throw ConfigError("bad box size range");
}

namespace {

void paint(ImageRGB& img, const BoxXYXY& b, int cls, const std::uint8_t color[3]) {
  const auto x1 = static_cast<std::size_t>(b.x1), y1 = static_cast<std::size_t>(b.y1);
  const auto x2 = static_cast<std::size_t>(b.x2), y2 = static_cast<std::size_t>(b.y2);
  for (std::size_t y = y1; y < y2; ++y) {
    for (std::size_t x = x1; x < x2; ++x) {
      const std::size_t dx = x - x1, dy = y - y1;
      double f = 1.0;
      switch (cls) {
        case 0: f = 1.0; break;
        case 1: f = (dy / 2) % 2 == 0 ? 1.0 : 0.15; break;
        case 2: f = 0.15 + 0.85 * static_cast<double>(dx + dy) / static_cast<double>((x2 - x1) + (y2 - y1)); break;
        case 3: f = ((dx / 3) + (dy / 3)) % 2 == 0 ? 1.0 : 0.15; break;
        case 4: f = (dx < 2 || dy < 2 || x + 2 >= x2 || y + 2 >= y2) ? 1.0 : 0.15; break;
        default: f = (dx % 4 < 2 && dy % 4 < 2) ? 1.0 : 0.15; break;
      }
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(color[c] * f));
    }
  }
}

}  // namespace

std::vector<SynthSample> generate_synthetic(const SynthConfig& cfg, std::size_t n_images, std::int64_t first_image_id) {
  cfg.validate();
  if (n_images == 0) throw ConfigError("n_images must be >= 1");
  std::mt19937_64 rng(cfg.seed);
  const std::size_t S = cfg.image_size;
  std::vector<SynthSample> out;
  std::int64_t ann_id = 1;
  std::uniform_int_distribution<int> noise(30, 90);
  std::uniform_int_distribution<std::size_t> count(cfg.min_instances, cfg.max_instances);
  std::uniform_int_distribution<std::size_t> size(cfg.min_box, cfg.max_box);
  std::uniform_int_distribution<int> cls_pick(0, static_cast<int>(cfg.num_classes) - 1);
  std::uniform_int_distribution<int> bright(170, 255);
  for (std::size_t n = 0; n < n_images; ++n) {
    SynthSample s;
    s.image.width = s.image.height = S;
    s.image.pixels.resize(S * S * 3);
    for (auto& p : s.image.pixels) p = static_cast<std::uint8_t>(noise(rng));
    const std::size_t want = count(rng);
    std::vector<BoxXYXY> placed;
    for (std::size_t tries = 0; placed.size() < want && tries < 200; ++tries) {
      const std::size_t w = size(rng), h = size(rng);
      const std::size_t x = std::uniform_int_distribution<std::size_t>(0, S - w)(rng);
      const std::size_t y = std::uniform_int_distribution<std::size_t>(0, S - h)(rng);
      const BoxXYXY b{static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + w),
                      static_cast<double>(y + h)};
      bool overlaps = false;
      for (const auto& p : placed) {
        if (b.x1 < p.x2 && p.x1 < b.x2 && b.y1 < p.y2 && p.y1 < b.y2) overlaps = true;
      }
      if (overlaps) continue;
      const int cls = cls_pick(rng);
      const std::uint8_t color[3] = {static_cast<std::uint8_t>(bright(rng)), static_cast<std::uint8_t>(bright(rng)),
                                     static_cast<std::uint8_t>(bright(rng))};
      paint(s.image, b, cls, color);
      placed.push_back(b);
      s.annotations.push_back({ann_id++, first_image_id + static_cast<std::int64_t>(n), cls + 1, b});
    }
    out.push_back(std::move(s));
  }
  return out;
}

Dataset write_synthetic(const SynthConfig& cfg, std::size_t n_images, const std::filesystem::path& dir,
                        std::int64_t first_image_id) {
  const auto samples = generate_synthetic(cfg, n_images, first_image_id);
  std::filesystem::create_directories(dir / "images");
  Dataset ds;
  ds.root = dir;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) ds.categories.push_back({static_cast<int>(c) + 1, kSynthClassNames[c]});
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const std::int64_t id = first_image_id + static_cast<std::int64_t>(n);
    const std::string file = "images/" + std::to_string(id) + ".ppm";
    write_ppm(dir / file, samples[n].image);
    ds.images.push_back({id, file, cfg.image_size, cfg.image_size});
    ds.annotations.insert(ds.annotations.end(), samples[n].annotations.begin(), samples[n].annotations.end());
  }
  std::ofstream f(dir / "annotations.json", std::ios::trunc);
  f << dataset_to_coco(ds).dump() << "\n";
  if (!f) throw Error("cannot write " + (dir / "annotations.json").string());
  return ds;
}

AugmentResult augment(const ImageRGB& img, const std::vector<BoxXYXY>& boxes, const std::vector<int>& classes,
                      double hflip_prob, double scale_jitter, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const bool flip = u01(rng) < hflip_prob;
  const double s = 1.0 + scale_jitter * (2.0 * u01(rng) - 1.0);
  const std::size_t W = img.width, H = img.height;
  const double Wd = static_cast<double>(W), Hd = static_cast<double>(H);
  // Scaled content is anchored at the top-left corner; output pixel (x, y)
  // samples source pixel floor(x / s) (mirrored when flipping).
  AugmentResult r;
  r.image.width = W;
  r.image.height = H;
  r.image.pixels.assign(W * H * 3, 0);
  for (std::size_t y = 0; y < H; ++y) {
    const auto sy = static_cast<std::size_t>(std::floor((static_cast<double>(y) + 0.5) / s));
    if (sy >= H) continue;
    for (std::size_t x = 0; x < W; ++x) {
      auto sx = static_cast<std::size_t>(std::floor((static_cast<double>(x) + 0.5) / s));
      if (sx >= W) continue;
      if (flip) sx = W - 1 - sx;
      for (std::size_t c = 0; c < 3; ++c) r.image.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    BoxXYXY b = boxes[i];
    if (flip) b = {Wd - b.x2, b.y1, Wd - b.x1, b.y2};
    b = {std::clamp(b.x1 * s, 0.0, Wd), std::clamp(b.y1 * s, 0.0, Hd), std::clamp(b.x2 * s, 0.0, Wd),
         std::clamp(b.y2 * s, 0.0, Hd)};
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    r.boxes.push_back(b);
    r.classes.push_back(classes[i]);
  }
  return r;
}

}  // namespace cdiffdet
