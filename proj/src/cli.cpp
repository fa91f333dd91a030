#include "cdiffdet/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdiffdet/blocks.hpp"
#include "cdiffdet/checkpoint.hpp"
#include "cdiffdet/data.hpp"
#include "cdiffdet/detector.hpp"
#include "cdiffdet/errors.hpp"
#include "cdiffdet/eval.hpp"
#include "cdiffdet/parallel.hpp"

#ifndef CDIFFDET_BUILD_ID
#define CDIFFDET_BUILD_ID "unknown"
#endif

namespace cdiffdet {

const char* build_id() { return CDIFFDET_BUILD_ID; }

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out = ".";
};

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw ParseError("cannot read " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  f << text;
  if (!f) throw ContractError("cannot write " + p.string());
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

json load_config(const Common& c) {
  if (c.config_path.empty()) return json::object();
  json j = read_json(c.config_path);
  if (!j.is_object()) throw ParseError(c.config_path + ": config must be a JSON object");
  return j;
}

template <class T>
T section(const json& cfg, const char* key) {
  T v;
  if (cfg.contains(key)) {
    if (!cfg[key].is_object()) throw ParseError(std::string("config section '") + key + "' must be an object");
    from_json(cfg[key], v);
  }
  return v;
}

SynthConfig synth_section(const json& cfg) {
  SynthConfig s;
  if (!cfg.contains("synth")) return s;
  const json& j = cfg["synth"];
  try {
    s.image_size = j.value("image_size", s.image_size);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.min_instances = j.value("min_instances", s.min_instances);
    s.max_instances = j.value("max_instances", s.max_instances);
    s.min_box = j.value("min_box", s.min_box);
    s.max_box = j.value("max_box", s.max_box);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config section 'synth': ") + e.what());
  }
  return s;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t w[2];
  seq.generate(w, w + 2);
  return (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

class Manifest {
 public:
  Manifest(std::string command, const Common& c) : command_(std::move(command)), common_(c), start_(Clock::now()) {}

  void config(json j) { config_ = std::move(j); }
  void output(const fs::path& p) { outputs_.push_back(p.generic_string()); }
  void timing(const std::string& k, double seconds) { timings_[k] = seconds; }

  void write() {
    timings_["total_s"] = std::chrono::duration<double>(Clock::now() - start_).count();
    const fs::path p = fs::path(common_.out) / "manifest.json";
    outputs_.push_back(p.generic_string());
    write_json(p, {{"command", command_},
                   {"config", config_},
                   {"seed", common_.seed},
                   {"build_id", build_id()},
                   {"threads", worker_count()},
                   {"timings", timings_},
                   {"outputs", outputs_}});
  }

 private:
  std::string command_;
  Common common_;
  Clock::time_point start_;
  json config_ = json::object();
  json timings_ = json::object();
  std::vector<std::string> outputs_;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---- synth ----

struct SynthArgs {
  std::size_t n = 200;
  std::optional<std::size_t> size, classes;
  std::int64_t first_id = 1;
};

void cmd_synth(const Common& c, const SynthArgs& a, std::ostream& out) {
  const json cfg = load_config(c);
  SynthConfig s = synth_section(cfg);
  if (a.size) s.image_size = *a.size;
  if (a.classes) s.num_classes = *a.classes;
  s.seed = c.seed;
  s.validate();
  Manifest m("synth", c);
  m.config({{"synth",
             {{"image_size", s.image_size},
              {"num_classes", s.num_classes},
              {"min_instances", s.min_instances},
              {"max_instances", s.max_instances},
              {"min_box", s.min_box},
              {"max_box", s.max_box}}},
            {"n", a.n},
            {"first_image_id", a.first_id}});
  const Dataset ds = write_synthetic(s, a.n, c.out, a.first_id);
  m.output(fs::path(c.out) / "annotations.json");
  m.output(fs::path(c.out) / "images");
  m.write();
  out << "wrote " << ds.images.size() << " images, " << ds.annotations.size() << " boxes to " << c.out << "\n";
}

// ---- train ----

struct TrainArgs {
  std::string data;
  std::optional<std::size_t> steps;
  std::string resume;
};

struct LoadedImage {
  ImageRGB image;
  std::vector<BoxXYXY> boxes;  // pixels
  std::vector<int> classes;
};

std::vector<LoadedImage> load_training_images(const Dataset& ds) {
  std::vector<LoadedImage> out(ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    out[i].image = ds.load_image(ds.images[i]);
    for (const Annotation* a : ds.annotations_for(ds.images[i].id)) {
      out[i].boxes.push_back(a->box);
      out[i].classes.push_back(ds.class_index(a->category_id));
    }
  }
  return out;
}

json categories_json(const std::vector<Category>& cats) {
  json arr = json::array();
  for (const auto& c : cats) arr.push_back({{"id", c.id}, {"name", c.name}});
  return arr;
}

std::vector<Category> categories_from_json(const json& arr) {
  std::vector<Category> out;
  try {
    for (const auto& c : arr) out.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint categories: ") + e.what());
  }
  return out;
}

// Image order for one pass over the data.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5eed0000ULL + epoch));
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

TrainSample make_sample(const LoadedImage& li, const TrainConfig& tc, std::mt19937_64& rng) {
  AugmentResult a{li.image, li.boxes, li.classes};
  if (tc.augment) a = augment(li.image, li.boxes, li.classes, tc.hflip_prob, tc.scale_jitter, rng);
  TrainSample s;
  s.image = image_to_tensor(a.image);
  const double W = static_cast<double>(a.image.width), H = static_cast<double>(a.image.height);
  for (std::size_t k = 0; k < a.boxes.size(); ++k) {
    const BoxXYXY& b = a.boxes[k];
    s.gt.boxes.push_back({b.x1 / W, b.y1 / H, b.x2 / W, b.y2 / H});
    s.gt.classes.push_back(a.classes[k]);
  }
  return s;
}

void cmd_train(const Common& c, const TrainArgs& a, std::ostream& out) {
  const auto t0 = Clock::now();
  const Dataset ds = load_coco_subset(a.data);
  if (ds.images.empty()) throw ConfigError("dataset has no images");
  if (ds.categories.empty()) throw ConfigError("dataset has no categories");

  DetectorConfig dc;
  TrainConfig tc;
  ParamStore params;
  OptimizerState opt;
  std::uint64_t seed = c.seed;
  if (!a.resume.empty()) {
    Checkpoint ck = read_checkpoint(a.resume);
    if (!ck.optimizer) throw ParseError(a.resume + ": checkpoint has no optimizer state");
    dc = section<DetectorConfig>(ck.config, "detector");
    tc = section<TrainConfig>(ck.config, "train");
    seed = ck.config.value("train_state", json::object()).value("seed", seed);
    params = std::move(ck.params);
    opt = std::move(*ck.optimizer);
    if (categories_json(ds.categories) != ck.config.value("categories", json::array())) {
      throw ConfigError("dataset categories differ from the checkpoint's");
    }
  } else {
    const json cfg = load_config(c);
    dc = section<DetectorConfig>(cfg, "detector");
    tc = section<TrainConfig>(cfg, "train");
    dc.model.num_classes = ds.categories.size();
  }
  if (a.steps) tc.steps = *a.steps;
  dc.validate();
  tc.validate();
  if (dc.model.num_classes != ds.categories.size()) throw ConfigError("class count differs from the dataset's");
  if (a.resume.empty()) params = init_params(dc.model, seed);

  const auto images = load_training_images(ds);
  const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
  Common run = c;
  run.seed = seed;
  Manifest m("train", run);
  const json base = {{"detector", dc}, {"train", tc}, {"categories", categories_json(ds.categories)}};
  m.config(base);
  fs::create_directories(c.out);

  auto save = [&](const fs::path& p) {
    Checkpoint ck;
    ck.config = base;
    ck.config["train_state"] = {{"step", opt.step}, {"seed", seed}};
    ck.params = params;
    ck.optimizer = opt;
    write_checkpoint(p, ck);
    m.output(p);
  };

  std::ostringstream csv;
  csv << "step,total,cls,l1,giou\n";
  StepStats acc;
  std::size_t in_window = 0;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order;
  const std::size_t n = images.size(), B = tc.batch_size;
  const auto t_loop = Clock::now();
  while (opt.step < tc.steps) {
    const std::size_t step = opt.step;
    std::vector<TrainSample> batch;
    for (std::size_t j = 0; j < B; ++j) {
      const std::size_t k = step * B + j;
      if (k / n != cached_epoch) {
        cached_epoch = k / n;
        order = epoch_order(n, seed, cached_epoch);
      }
      std::mt19937_64 aug_rng(derive_seed(seed, step, j));
      batch.push_back(make_sample(images[order[k % n]], tc, aug_rng));
    }
    const StepStats s = train_step(batch, params, opt, dc, tc, sched, seed);
    acc.total += s.total;
    acc.cls += s.cls;
    acc.l1 += s.l1;
    acc.giou += s.giou;
    ++in_window;
    const std::size_t done = opt.step;
    if (done % tc.log_every == 0 || done == tc.steps) {
      const double k = static_cast<double>(in_window);
      csv << done << "," << fmt(acc.total / k) << "," << fmt(acc.cls / k) << "," << fmt(acc.l1 / k) << ","
          << fmt(acc.giou / k) << "\n";
      out << "step " << done << " loss " << acc.total / k << " (cls " << acc.cls / k << ", l1 " << acc.l1 / k
          << ", giou " << acc.giou / k << ") lr " << s.lr << "\n";
      acc = StepStats{};
      in_window = 0;
    }
    if (tc.checkpoint_every && done % tc.checkpoint_every == 0 && done != tc.steps) {
      save(fs::path(c.out) / ("checkpoint_" + std::to_string(done) + ".cdfd"));
    }
  }
  m.timing("train_s", seconds_since(t_loop));
  write_text(fs::path(c.out) / "loss.csv", csv.str());
  m.output(fs::path(c.out) / "loss.csv");
  save(fs::path(c.out) / "checkpoint.cdfd");
  m.timing("setup_s", seconds_since(t0) - seconds_since(t_loop));
  m.write();
}

// ---- infer ----

struct InferArgs {
  std::string ckpt, data, image;
  std::optional<std::size_t> ddim_steps;
  bool trace = false;
};

void cmd_infer(const Common& c, const InferArgs& a, std::ostream& out) {
  if (a.data.empty() == a.image.empty()) throw ConfigError("infer needs exactly one of --data or --image");
  const Checkpoint ck = read_checkpoint(a.ckpt);
  DetectorConfig dc = section<DetectorConfig>(ck.config, "detector");
  if (c.config_path.size()) {
    const json cfg = load_config(c);
    if (cfg.contains("detector")) from_json(cfg["detector"], dc);
  }
  if (a.ddim_steps) dc.ddim_steps = *a.ddim_steps;
  dc.validate();
  std::vector<Category> cats = categories_from_json(ck.config.value("categories", json::array()));
  if (cats.empty()) {
    for (std::size_t k = 0; k < dc.model.num_classes; ++k) cats.push_back({static_cast<int>(k + 1), ""});
  }
  if (cats.size() != dc.model.num_classes) throw ParseError("checkpoint categories do not match num_classes");

  struct Job {
    std::int64_t id;
    ImageRGB image;
  };
  std::vector<Job> jobs;
  if (!a.data.empty()) {
    const Dataset ds = load_coco_subset(a.data);
    for (const auto& rec : ds.images) jobs.push_back({rec.id, ds.load_image(rec)});
  } else {
    jobs.push_back({1, read_ppm(a.image)});
  }

  const NoiseSchedule sched = build_cosine_schedule(dc.timesteps);
  std::vector<DetectionResult> results(jobs.size());
  const auto t0 = Clock::now();
  parallel_for(jobs.size(), [&](std::size_t i) {
    results[i] = infer(image_to_tensor(jobs[i].image), ck.params, dc, sched,
                       derive_seed(c.seed, static_cast<std::uint64_t>(jobs[i].id)), a.trace);
  });
  Manifest m("infer", c);
  m.timing("infer_s", seconds_since(t0));
  m.config({{"detector", dc}, {"checkpoint", a.ckpt}});

  std::vector<EvalDetection> dets;
  std::ostringstream trace;
  trace << "image_id,step,t,proposal,cx,cy,w,h\n";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& r = results[i];
    for (std::size_t k = 0; k < r.boxes.size(); ++k) {
      dets.push_back({jobs[i].id, cats[static_cast<std::size_t>(r.labels[k])].id, r.boxes[k], r.scores[k]});
    }
    for (const auto& row : r.trace) {
      trace << jobs[i].id << "," << row.step << "," << row.t << "," << row.proposal << "," << fmt(row.box.cx) << ","
            << fmt(row.box.cy) << "," << fmt(row.box.w) << "," << fmt(row.box.h) << "\n";
    }
  }
  const fs::path det_path = fs::path(c.out) / "detections.json";
  write_json(det_path, detections_to_json(dets));
  m.output(det_path);
  if (a.trace) {
    write_text(fs::path(c.out) / "trace.csv", trace.str());
    m.output(fs::path(c.out) / "trace.csv");
  }
  m.write();
  out << "wrote " << dets.size() << " detections for " << jobs.size() << " images\n";
}

// ---- eval ----

struct EvalArgs {
  std::string gt, pred;
};

void cmd_eval(const Common& c, const EvalArgs& a, std::ostream& out) {
  const Dataset ds = load_coco_subset(a.gt);
  const auto preds = detections_from_json(read_json(a.pred));
  std::vector<EvalGroundTruth> gts;
  for (const auto& an : ds.annotations) gts.push_back({an.image_id, an.category_id, an.box});
  const EvalReport r = coco_summary(preds, gts);
  Manifest m("eval", c);
  m.config({{"gt", a.gt}, {"pred", a.pred}});
  write_json(fs::path(c.out) / "report.json", report_to_json(r));
  write_text(fs::path(c.out) / "report.csv", report_to_csv(r));
  m.output(fs::path(c.out) / "report.json");
  m.output(fs::path(c.out) / "report.csv");
  m.write();
  out << "AP " << r.ap << "  AP50 " << r.ap50 << "  AP75 " << r.ap75 << "  APs " << r.ap_small << "  APm "
      << r.ap_medium << "  APl " << r.ap_large << "\n";
}

// ---- gradcheck ----

struct GradArgs {
  std::string block;
  bool inject_fault = false;
  std::optional<std::size_t> coords;
  double tolerance = 1e-4;
};

bool cmd_gradcheck(const Common& c, const GradArgs& a, std::ostream& out) {
  const auto blocks = gradcheck_blocks(c.seed);
  if (!a.block.empty() && std::none_of(blocks.begin(), blocks.end(), [&](const GradBlock& b) { return b.name == a.block; })) {
    std::string known;
    for (const auto& b : blocks) known += " " + b.name;
    throw ConfigError("unknown block '" + a.block + "'; known:" + known);
  }
  Manifest m("gradcheck", c);
  m.config({{"block", a.block}, {"inject_fault", a.inject_fault}, {"tolerance", a.tolerance}});
  json rows = json::array();
  bool ok = true;
  out << std::left << std::setw(16) << "block" << std::setw(14) << "max_rel_err" << std::setw(9) << "checked"
      << std::setw(9) << "skipped" << "result\n";
  for (const auto& b : blocks) {
    if (!a.block.empty() && b.name != a.block) continue;
    GradCheckOptions opts;
    opts.seed = c.seed;
    opts.max_coords_per_param = a.coords.value_or(b.default_coords);
    const auto t0 = Clock::now();
    const GradCheckResult r = b.run(opts, a.inject_fault);
    const bool pass = r.max_rel_error < a.tolerance;
    ok = ok && pass;
    out << std::setw(16) << b.name << std::setw(14) << std::setprecision(3) << std::scientific << r.max_rel_error
        << std::defaultfloat << std::setw(9) << r.checked << std::setw(9) << r.skipped_kinks
        << (pass ? "pass" : "FAIL") << "\n";
    m.timing(b.name + "_s", seconds_since(t0));
    rows.push_back({{"block", b.name},
                    {"max_rel_error", r.max_rel_error},
                    {"checked", r.checked},
                    {"skipped_kinks", r.skipped_kinks},
                    {"worst", r.worst},
                    {"pass", pass}});
  }
  write_json(fs::path(c.out) / "gradcheck.json", {{"blocks", rows}, {"pass", ok}});
  m.output(fs::path(c.out) / "gradcheck.json");
  m.write();
  return ok;
}

// ---- schedule-dump ----

void cmd_schedule(const Common& c, std::size_t T, double s, std::ostream& out) {
  const NoiseSchedule sched = build_cosine_schedule(T, s);
  std::ostringstream csv;
  csv << "t,beta,alpha_bar\n";
  for (std::size_t t = 0; t <= T; ++t) csv << t << "," << fmt(sched.beta[t]) << "," << fmt(sched.alpha_bar[t]) << "\n";
  Manifest m("schedule-dump", c);
  m.config({{"T", T}, {"s", s}});
  write_text(fs::path(c.out) / "schedule.csv", csv.str());
  m.output(fs::path(c.out) / "schedule.csv");
  m.write();
  out << "alpha_bar[T] = " << sched.alpha_bar[T] << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Context-aware diffusion object detector"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON config with detector/train/synth sections");
    sub->add_option("--seed", common.seed, "Random seed");
    sub->add_option("--out", common.out, "Output directory");
  };

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  add_common(s_synth);
  s_synth->add_option("--n", synth.n, "Number of images");
  s_synth->add_option("--size", synth.size, "Image side in pixels (multiple of 32)");
  s_synth->add_option("--classes", synth.classes, "Number of classes");
  s_synth->add_option("--first-id", synth.first_id, "Id of the first image");

  TrainArgs train;
  auto* s_train = app.add_subcommand("train", "Train a detector");
  add_common(s_train);
  s_train->add_option("--data", train.data, "COCO annotations.json")->required();
  s_train->add_option("--steps", train.steps, "Total optimizer steps");
  s_train->add_option("--resume", train.resume, "Checkpoint to continue from");

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "COCO-style AP of a detections file");
  add_common(s_eval);
  s_eval->add_option("--gt", ev.gt, "COCO annotations.json")->required();
  s_eval->add_option("--pred", ev.pred, "detections.json")->required();

  InferArgs inf;
  auto* s_infer = app.add_subcommand("infer", "Run the sampler on images");
  add_common(s_infer);
  s_infer->add_option("--ckpt", inf.ckpt, "Checkpoint")->required();
  s_infer->add_option("--data", inf.data, "COCO annotations.json listing the images");
  s_infer->add_option("--image", inf.image, "Single binary PPM image");
  s_infer->add_option("--ddim-steps", inf.ddim_steps, "Sampling steps");
  s_infer->add_flag("--trace", inf.trace, "Write per-step predicted boxes to trace.csv");

  GradArgs grad;
  auto* s_grad = app.add_subcommand("gradcheck", "Finite-difference check of every learned block");
  add_common(s_grad);
  s_grad->add_option("--block", grad.block, "Run a single block");
  s_grad->add_flag("--inject-fault", grad.inject_fault, "Corrupt the backward pass of the loss");
  s_grad->add_option("--coords", grad.coords, "Sampled coordinates per tensor (0 = all)");
  s_grad->add_option("--tolerance", grad.tolerance, "Maximum relative error");

  std::size_t T = 1000;
  double s_off = 0.008;
  auto* s_sched = app.add_subcommand("schedule-dump", "Write the noise schedule as CSV");
  add_common(s_sched);
  s_sched->add_option("--T", T, "Number of diffusion steps");
  s_sched->add_option("--s", s_off, "Cosine schedule offset");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    fs::create_directories(common.out);
    if (s_synth->parsed()) cmd_synth(common, synth, out);
    if (s_train->parsed()) cmd_train(common, train, out);
    if (s_eval->parsed()) cmd_eval(common, ev, out);
    if (s_infer->parsed()) cmd_infer(common, inf, out);
    if (s_sched->parsed()) {
      if (T == 0) throw ConfigError("--T must be >= 1");
      cmd_schedule(common, T, s_off, out);
    }
    if (s_grad->parsed() && !cmd_gradcheck(common, grad, out)) {
      err << "gradient check failed\n";
      return kExitRuntime;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace cdiffdet
