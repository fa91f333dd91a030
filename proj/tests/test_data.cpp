#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "cdiffdet/data.hpp"
#include "cdiffdet/errors.hpp"

using namespace cdiffdet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cdiffdet_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

nlohmann::json minimal_doc() {
  return {{"images", {{{"id", 1}, {"file_name", "a.ppm"}, {"width", 64}, {"height", 64}}}},
          {"annotations", {{{"id", 1}, {"image_id", 1}, {"bbox", {10, 20, 30, 40}}, {"category_id", 2}}}},
          {"categories", {{{"id", 2}, {"name", "dent"}}}}};
}

}  // namespace

TEST_CASE("synthetic generation is seed determined and in bounds") {
  SynthConfig cfg;
  cfg.seed = 5;
  const auto a = generate_synthetic(cfg, 20);
  const auto b = generate_synthetic(cfg, 20);
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.pixels == b[i].image.pixels);
    REQUIRE(a[i].annotations.size() == b[i].annotations.size());
    CHECK(!a[i].annotations.empty());
    for (std::size_t k = 0; k < a[i].annotations.size(); ++k) {
      const BoxXYXY& box = a[i].annotations[k].box;
      CHECK(box == b[i].annotations[k].box);
      CHECK(box.x1 >= 0);
      CHECK(box.y1 >= 0);
      CHECK(box.x2 <= 64);
      CHECK(box.y2 <= 64);
      CHECK(box.x2 > box.x1);
      CHECK(box.y2 > box.y1);
    }
  }
  cfg.seed = 6;
  CHECK(generate_synthetic(cfg, 1)[0].image.pixels != a[0].image.pixels);

  SynthConfig bad;
  bad.image_size = 50;
  CHECK_THROWS_AS(generate_synthetic(bad, 1), ConfigError);
  CHECK_THROWS_AS(generate_synthetic(SynthConfig{}, 0), ConfigError);
}

TEST_CASE("synthetic classes are balanced") {
  SynthConfig cfg;
  cfg.seed = 9;
  std::map<int, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& s : generate_synthetic(cfg, 1000)) {
    for (const auto& a : s.annotations) {
      ++counts[a.category_id];
      ++total;
    }
  }
  REQUIRE(counts.size() == 3);
  for (const auto& [id, n] : counts) {
    const double share = static_cast<double>(n) / static_cast<double>(total);
    CHECK(std::abs(share - 1.0 / 3.0) < 0.1 / 3.0);
  }
}

TEST_CASE("coco parsing") {
  const Dataset ds = dataset_from_coco(minimal_doc(), ".");
  REQUIRE(ds.images.size() == 1);
  REQUIRE(ds.annotations.size() == 1);
  CHECK(ds.annotations[0].box == BoxXYXY{10, 20, 40, 60});
  CHECK(ds.class_index(2) == 0);
  CHECK_THROWS_AS(ds.class_index(7), IndexError);

  nlohmann::json cardd = minimal_doc();
  cardd["categories"] = nlohmann::json::array();
  const char* names[] = {"dent", "scratch", "crack", "glass shatter", "lamp broken", "tire flat"};
  for (int k = 0; k < 6; ++k) cardd["categories"].push_back({{"id", k + 1}, {"name", names[k]}});
  CHECK(dataset_from_coco(cardd, ".").categories.size() == 6);

  for (const char* key : {"images", "annotations", "categories"}) {
    nlohmann::json d = minimal_doc();
    d.erase(key);
    CHECK_THROWS_AS(dataset_from_coco(d, "."), ParseError);
  }

  nlohmann::json bad = minimal_doc();
  bad["annotations"].push_back({{"id", 2}, {"image_id", 1}, {"bbox", {1, 2, 3}}, {"category_id", 2}});
  try {
    dataset_from_coco(bad, ".");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("annotations[1]") != std::string::npos);
  }
  bad["annotations"][1]["bbox"] = {1, 2, 0, 3};
  CHECK_THROWS_AS(dataset_from_coco(bad, "."), ParseError);

  const Dataset once = dataset_from_coco(dataset_to_coco(ds), ".");
  CHECK(dataset_to_coco(once) == dataset_to_coco(ds));
}

TEST_CASE("ppm round trip and written datasets load back") {
  ImageRGB img;
  img.width = 3;
  img.height = 2;
  for (int k = 0; k < 18; ++k) img.pixels.push_back(static_cast<std::uint8_t>(k * 14));
  const ImageRGB back = decode_ppm(encode_ppm(img));
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.pixels == img.pixels);
  CHECK_THROWS_AS(decode_ppm("P3\n1 1\n255\n"), ParseError);
  CHECK_THROWS_AS(decode_ppm(encode_ppm(img).substr(0, 20)), ParseError);

  const fs::path dir = scratch("written");
  SynthConfig cfg;
  cfg.seed = 2;
  const Dataset ds = write_synthetic(cfg, 4, dir, 100);
  const Dataset loaded = load_coco_subset(dir / "annotations.json");
  CHECK(dataset_to_coco(loaded) == dataset_to_coco(ds));
  CHECK(loaded.images[0].id == 100);
  CHECK(loaded.load_image(loaded.images[0]).pixels == generate_synthetic(cfg, 1, 100)[0].image.pixels);
  fs::remove_all(dir);
}

TEST_CASE("augmentation") {
  SynthConfig cfg;
  cfg.seed = 4;
  const auto s = generate_synthetic(cfg, 1)[0];
  std::vector<BoxXYXY> boxes;
  std::vector<int> classes;
  for (const auto& a : s.annotations) {
    boxes.push_back(a.box);
    classes.push_back(a.category_id - 1);
  }
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    std::mt19937_64 r1(seed), r2(seed);
    const auto a = augment(s.image, boxes, classes, 0.5, 0.125, r1);
    const auto b = augment(s.image, boxes, classes, 0.5, 0.125, r2);
    CHECK(a.image.pixels == b.image.pixels);
    CHECK(a.boxes == b.boxes);
    CHECK(a.boxes.size() == a.classes.size());
    CHECK(a.image.width == 64);
    for (const auto& box : a.boxes) {
      CHECK(box.x1 >= 0);
      CHECK(box.y1 >= 0);
      CHECK(box.x2 <= 64);
      CHECK(box.y2 <= 64);
    }
  }
  // A certain flip without rescaling mirrors the boxes exactly.
  std::mt19937_64 rng(1);
  const auto flipped = augment(s.image, boxes, classes, 1.0, 0.0, rng);
  REQUIRE(flipped.boxes.size() == boxes.size());
  CHECK(flipped.boxes[0] == BoxXYXY{64 - boxes[0].x2, boxes[0].y1, 64 - boxes[0].x1, boxes[0].y2});
  CHECK(flipped.image.at(0, 0, 0) == s.image.at(0, 63, 0));
}
