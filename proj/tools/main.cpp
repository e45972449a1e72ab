// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0
//
// Batch command-line front end: simulate, reconstruct, fit, train,
// render, gradcheck, metrics. Every run writes a resolved-config
// snapshot next to its outputs and is deterministic given (config, seed).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "nlos/nlos.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nlos;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDiverged = 4;
constexpr int kExitGradcheck = 5;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json cfg = json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    cfg = json::parse(is, nullptr, false);
    if (cfg.is_discarded()) throw ConfigError("malformed config JSON: " + path);
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + kv);
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;  // plain string
    json* node = &cfg;
    std::size_t at = 0;
    while (true) {
      const auto dot = key.find('.', at);
      const std::string part = key.substr(at, dot == std::string::npos ? dot : dot - at);
      if (part.empty()) throw ConfigError("bad --set key: " + key);
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      at = dot + 1;
    }
  }
  return cfg;
}

template <typename T>
T require(const json& cfg, const std::string& key) {
  if (!cfg.contains(key)) throw ConfigError("missing config key: " + key);
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for config key: " + key);
  }
}

template <typename T>
T get_or(const json& cfg, const std::string& key, T fallback) {
  if (!cfg.contains(key)) return fallback;
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for config key: " + key);
  }
}

fs::path make_out_dir(const json& cfg) {
  const auto out = fs::path(require<std::string>(cfg, "out_dir"));
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory: " + out.string());
  return out;
}

void write_snapshot(const fs::path& out, const json& cfg) {
  std::ofstream os(out / "config.resolved.json");
  if (!os) throw IoError("cannot write config snapshot in " + out.string());
  os << cfg.dump(2) << "\n";
}

Scene load_scene_checked(const std::string& path) {
  if (!fs::exists(path)) throw IoError("scene file does not exist: " + path);
  try {
    return load_scene(path);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid scene: ") + e.what());
  }
}

TransientMeasurement load_measurement_checked(const std::string& path) {
  if (!fs::exists(path)) throw IoError("measurement file does not exist: " + path);
  return load_measurement(path);
}

ScanPattern pattern_from_config(const json& cfg) {
  const auto& pj = cfg.contains("pattern") ? cfg.at("pattern") : json::object();
  const auto kind = scan_kind_from_string(get_or<std::string>(pj, "kind", "nonconfocal"));
  WallFrame wall;  // canonical frame: wall plane z = 0, normal +z
  return make_scan_pattern(kind, wall, get_or<double>(pj, "extent", 1.0),
                           get_or<std::size_t>(pj, "rows", 32), get_or<std::size_t>(pj, "cols", 32),
                           get_or<std::size_t>(pj, "bins", 768),
                           get_or<double>(pj, "bin_width", 32e-12));
}

Aabb bbox_from_config(const json& cfg, const char* key) {
  if (!cfg.contains(key)) throw ConfigError(std::string("missing config key: ") + key);
  const auto& bj = cfg.at(key);
  const auto mn = require<std::vector<double>>(bj, "min");
  const auto mx = require<std::vector<double>>(bj, "max");
  if (mn.size() != 3 || mx.size() != 3) throw ConfigError("bbox min/max must be 3-vectors");
  const Aabb box{{mn[0], mn[1], mn[2]}, {mx[0], mx[1], mx[2]}};
  if (!box.valid()) throw ConfigError("bbox is degenerate");
  return box;
}

std::vector<double> depth_planes_from_config(const json& cfg) {
  const auto& dj = cfg.contains("depth_planes") ? cfg.at("depth_planes") : json::object();
  const auto count = get_or<std::size_t>(dj, "count", 32);
  const double lo = get_or<double>(dj, "min", 0.4);
  const double hi = get_or<double>(dj, "max", 1.2);
  if (count == 0 || !(hi > lo)) throw ConfigError("bad depth_planes config");
  std::vector<double> planes(count);
  for (std::size_t d = 0; d < count; ++d)
    planes[d] = lo + (static_cast<double>(d) + 0.5) * (hi - lo) / static_cast<double>(count);
  return planes;
}

learn::LossWeights weights_from_config(const json& cfg) {
  learn::LossWeights w;
  if (!cfg.contains("weights")) return w;
  const auto& wj = cfg.at("weights");
  w.mse = get_or<double>(wj, "mse", w.mse);
  w.beta = get_or<double>(wj, "beta", w.beta);
  w.tv = get_or<double>(wj, "tv", w.tv);
  w.poisson = get_or<double>(wj, "poisson", w.poisson);
  return w;
}

void write_trace_csv(const fs::path& path, const std::vector<learn::TraceRow>& trace,
                     learn::TrainMode mode) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write trace: " + path.string());
  const bool sup = mode != learn::TrainMode::kUnsup;
  const bool unsup = mode != learn::TrainMode::kSup;
  os << "step";
  if (sup) os << ",mse";
  if (unsup) os << ",poisson";
  os << ",beta,tv,total\n";
  os.precision(17);
  for (const auto& row : trace) {
    os << row.step;
    if (sup) os << "," << row.mse;
    if (unsup) os << "," << row.poisson;
    os << "," << row.beta << "," << row.tv << "," << row.total << "\n";
  }
}

Tensor rsd_frontal_image(const Tensor& intensity) {
  // (rows, cols, depth) -> frontal max projection with +y up.
  const std::size_t rows = intensity.dim(0), cols = intensity.dim(1), nd = intensity.dim(2);
  Tensor image({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double best = 0.0;
      for (std::size_t d = 0; d < nd; ++d) best = std::max(best, intensity(i, j, d));
      image(rows - 1 - i, j) = best;
    }
  return image;
}

void print_metrics(const std::string& label, const Tensor& got, const Tensor& want) {
  const Tensor a = learn::normalize_max(got);
  const Tensor b = learn::normalize_max(want);
  const double rmse = learn::metric_rmse(a, b);
  std::cout << label << " rmse " << rmse << " psnr " << learn::metric_psnr(rmse) << " ssim "
            << learn::metric_ssim(a, b) << "\n";
}

// ---------------------------------------------------------------- simulate

int cmd_simulate(const json& cfg) {
  const auto out = make_out_dir(cfg);
  const Scene scene = load_scene_checked(require<std::string>(cfg, "scene"));
  const ScanPattern pattern = pattern_from_config(cfg);

  sim::SensorConfig sensor;
  sensor.bin_width = pattern.bin_width;
  sensor.bins = pattern.bins;
  const auto& sj = cfg.contains("sensor") ? cfg.at("sensor") : json::object();
  sensor.photon_scale = get_or<double>(sj, "photon_scale", 1.0);
  sensor.jitter_fwhm = get_or<double>(sj, "jitter_fwhm", 0.0);
  sensor.seed = get_or<std::uint64_t>(cfg, "seed", 0);
  try {
    sensor.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  sim::SimStats stats;
  const auto rates = sim::simulate_measurement(scene, pattern, sensor, &stats);
  save_measurement(out / "rates.nltens", rates);
  std::cout << "simulate: wrote rates (" << pattern.rows << "x" << pattern.cols << "x"
            << pattern.bins << "), dropped paths " << stats.dropped_paths << "\n";

  TransientMeasurement counts;
  const bool sample_counts = get_or<bool>(cfg, "sample_counts", true);
  if (sample_counts) {
    counts = sim::spad_sample(rates, sensor.seed);
    save_measurement(out / "counts.nltens", counts);
  }

  if (cfg.contains("remap")) {
    const auto& rj = cfg.at("remap");
    sim::RemapConfig rc;
    rc.block_height = get_or<std::size_t>(rj, "block", 1);
    rc.max_shift_bins = get_or<std::size_t>(rj, "shift", 0);
    rc.seed = sensor.seed;
    const auto& src = sample_counts ? counts : rates;
    save_measurement(out / "remapped.nltens", sim::apply_pixel_remapping(src, rc));
  }

  // Optional toy-dataset emission: measurement plus rendered target views.
  if (cfg.contains("views")) {
    const auto& vj = cfg.at("views");
    const auto n_views = get_or<std::size_t>(vj, "count", 1);
    const auto size = get_or<std::size_t>(vj, "size", 16);
    const auto grid = get_or<std::size_t>(vj, "gt_grid", 16);
    auto gt = field::voxelize_scene(scene, grid, grid, grid);
    field::FieldRef gt_ref(gt);
    const render::StepRule rule{64, true};

    save_measurement(out / "measurement.nltens", sample_counts ? counts : rates);
    json views = json::array();
    for (std::size_t v = 0; v < n_views; ++v) {
      Camera cam;
      if (v == 0) {
        cam = make_frontal_camera(scene.bbox, size, size);
      } else {
        auto rng = CounterRng::keyed(sensor.seed, 0x76696577, v);
        const Vec3 c = scene.bbox.center();
        const Vec3 pos{c.x + rng.next_range(-0.4, 0.4), c.y + rng.next_range(-0.4, 0.4),
                       scene.bbox.min.z - rng.next_range(0.3, 0.6)};
        cam = make_look_at_camera(pos, c, size, size, 0.9);
      }
      const auto img = render_image(gt_ref, cam, rule);
      const std::string file = "view_" + std::to_string(v) + ".nltens";
      write_tensor(out / file, img.intensity);
      views.push_back({{"camera", camera_to_json(cam)}, {"image", file}});
    }
    std::ofstream os(out / "views.json");
    os << views.dump(2) << "\n";
  }

  write_snapshot(out, cfg);
  return 0;
}

// ------------------------------------------------------------- reconstruct

int cmd_reconstruct(const json& cfg, bool png) {
  const auto out = make_out_dir(cfg);
  const auto m = load_measurement_checked(require<std::string>(cfg, "measurement"));
  const auto method = get_or<std::string>(cfg, "method", "rsd");

  Tensor frontal;
  if (method == "rsd") {
    const auto& wj = cfg.contains("wave") ? cfg.at("wave") : json::object();
    const auto wavelet = wave::make_illumination_wave(
        get_or<double>(wj, "wavelength", wave::kDefaultWavelength),
        get_or<double>(wj, "cycles", wave::kDefaultCycles), m.pattern.bin_width, m.pattern.bins);
    const auto planes = depth_planes_from_config(cfg);
    const auto rec = wave::reconstruct_rsd(m, wavelet, planes);
    write_tensor(out / "volume.nltens", rec.intensity,
                 {{"kind", "rsd_intensity"},
                  {"depth_min", std::to_string(planes.front())},
                  {"depth_max", std::to_string(planes.back())}});
    frontal = rsd_frontal_image(rec.intensity);
  } else if (method == "backproject") {
    wave::VolumeGrid grid;
    grid.bounds = bbox_from_config(cfg, "grid");
    const auto& gj = cfg.at("grid");
    grid.nx = get_or<std::size_t>(gj, "nx", 32);
    grid.ny = get_or<std::size_t>(gj, "ny", 32);
    grid.nz = get_or<std::size_t>(gj, "nz", 32);
    const auto vol = wave::backproject(m, grid);
    write_tensor(out / "volume.nltens", vol, {{"kind", "backprojection"}});
    frontal = img::frontal_max_projection(vol);
  } else {
    throw ConfigError("unknown reconstruction method: " + method);
  }

  write_tensor(out / "frontal.nltens", frontal);
  if (png) img::write_png_gray(out / "frontal.png", frontal);

  if (cfg.contains("ground_truth")) {
    const auto [gt, meta] = read_tensor(require<std::string>(cfg, "ground_truth"));
    (void)meta;
    if (gt.dims() != frontal.dims()) throw ConfigError("ground truth dims mismatch");
    print_metrics("reconstruct:", frontal, gt);
  }
  write_snapshot(out, cfg);
  std::cout << "reconstruct: method " << method << " peak " << frontal.max_abs() << "\n";
  return 0;
}

// -------------------------------------------------------------------- fit

int cmd_fit(const json& cfg, bool png, bool no_transmittance) {
  const auto out = make_out_dir(cfg);
  const auto m = load_measurement_checked(require<std::string>(cfg, "measurement"));
  const Aabb box = bbox_from_config(cfg, "bbox");

  learn::FitConfig fc;
  fc.steps = get_or<std::size_t>(cfg, "steps", 2000);
  fc.rays_per_step = get_or<std::size_t>(cfg, "rays_per_step", 4096);
  fc.weights = weights_from_config(cfg);
  fc.rng_key = get_or<std::uint64_t>(cfg, "seed", 0);
  fc.lr = get_or<double>(cfg, "lr", 1e-2);
  fc.guard_bins = get_or<std::size_t>(cfg, "guard_bins", 8);
  fc.march.steps = get_or<std::size_t>(cfg, "march_steps", 64);
  fc.march.use_transmittance = !no_transmittance && get_or<bool>(cfg, "transmittance", true);

  const auto& fj = cfg.contains("field") ? cfg.at("field") : json::object();
  const auto backend = get_or<std::string>(fj, "backend", "voxel");
  if (backend != "voxel" && backend != "mlp")
    throw ConfigError("unknown field backend: " + backend);

  const auto run = [&](field::FieldRef ref) {
    const auto res = learn::fit_scene(m, ref, fc);
    write_trace_csv(out / "trace.csv", res.trace, learn::TrainMode::kUnsup);
    if (res.diverged) throw DivergedError("fit diverged; trace preserved in trace.csv");

    const auto size = get_or<std::size_t>(cfg, "image_size", 32);
    const Camera cam = make_frontal_camera(box, size, size);
    const render::StepRule view_rule{get_or<std::size_t>(cfg, "render_steps", std::size_t{128}),
                                     true};
    const auto images = render_image(ref, cam, view_rule);
    write_tensor(out / "intensity.nltens", images.intensity);
    write_tensor(out / "depth.nltens", images.depth);
    if (png) {
      img::write_png_gray(out / "intensity.png", images.intensity);
      img::write_png_gray(out / "depth.png", images.depth);
    }

    if (cfg.contains("novel_views")) {
      std::size_t idx = 0;
      for (const auto& cj : cfg.at("novel_views")) {
        const Camera novel = camera_from_json(cj);
        const auto nv = render_image(ref, novel, view_rule);
        write_tensor(out / ("novel_" + std::to_string(idx) + ".nltens"), nv.intensity);
        if (png) img::write_png_gray(out / ("novel_" + std::to_string(idx) + ".png"), nv.intensity);
        ++idx;
      }
    }
    ref.params().save(out / "checkpoint", {{"backend", backend}});
    std::cout << "fit: " << res.trace.size() << " steps, final loss " << res.trace.back().total
              << "\n";
  };

  if (backend == "voxel") {
    const auto dims = get_or<std::size_t>(fj, "dims", 16);
    field::VoxelField f(dims, dims, dims, box);
    f.fill_raw(get_or<double>(fj, "init_sigma", -2.0), get_or<double>(fj, "init_color", 0.0));
    run(field::FieldRef(f));
  } else {
    field::MlpConfig mc;
    mc.width = get_or<std::size_t>(fj, "width", 64);
    mc.depth = get_or<std::size_t>(fj, "depth", 4);
    mc.pos_orders = get_or<std::size_t>(fj, "pos_orders", 6);
    mc.dir_orders = get_or<std::size_t>(fj, "dir_orders", 2);
    field::MlpField f(mc, box, fc.rng_key + 1);
    run(field::FieldRef(f));
  }
  write_snapshot(out, cfg);
  return 0;
}

// ------------------------------------------------------------------ train

int cmd_train(const json& cfg) {
  const auto out = make_out_dir(cfg);
  const fs::path dataset_dir = require<std::string>(cfg, "dataset");
  if (!fs::is_directory(dataset_dir))
    throw IoError("dataset directory missing: " + dataset_dir.string());

  std::vector<learn::ToySample> dataset;
  std::vector<fs::path> sample_dirs;
  for (const auto& entry : fs::directory_iterator(dataset_dir))
    if (entry.is_directory()) sample_dirs.push_back(entry.path());
  std::sort(sample_dirs.begin(), sample_dirs.end());
  for (const auto& dir : sample_dirs) {
    learn::ToySample sample;
    sample.measurement = load_measurement_checked((dir / "measurement.nltens").string());
    const auto views_path = dir / "views.json";
    if (fs::exists(views_path)) {
      std::ifstream is(views_path);
      json views;
      is >> views;
      for (const auto& vj : views) {
        learn::ViewSample view;
        view.camera = camera_from_json(vj.at("camera"));
        auto [img_t, meta] = read_tensor(dir / vj.at("image").get<std::string>());
        (void)meta;
        view.image = std::move(img_t);
        sample.views.push_back(std::move(view));
      }
    }
    dataset.push_back(std::move(sample));
  }
  if (dataset.empty()) throw IoError("no samples found in " + dataset_dir.string());

  learn::TrainConfig tc;
  try {
    tc.mode = learn::train_mode_from_string(get_or<std::string>(cfg, "mode", "joint"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  tc.steps = get_or<std::size_t>(cfg, "steps", 1000);
  tc.rays_per_step = get_or<std::size_t>(cfg, "rays_per_step", 1024);
  tc.transient_rays = get_or<std::size_t>(cfg, "transient_rays", 1024);
  tc.weights = weights_from_config(cfg);
  tc.rng_key = get_or<std::uint64_t>(cfg, "seed", 0);
  tc.lr = get_or<double>(cfg, "lr", 1e-3);
  tc.march.steps = get_or<std::size_t>(cfg, "march_steps", 32);
  tc.checkpoint_every = get_or<std::size_t>(cfg, "checkpoint_every", 0);
  tc.checkpoint_dir = out / "checkpoints";

  const Aabb box = bbox_from_config(cfg, "bbox");
  const auto& fj = cfg.contains("field") ? cfg.at("field") : json::object();
  field::MlpConfig mc;
  mc.width = get_or<std::size_t>(fj, "width", 32);
  mc.depth = get_or<std::size_t>(fj, "depth", 3);
  mc.pos_orders = get_or<std::size_t>(fj, "pos_orders", 4);
  mc.dir_orders = get_or<std::size_t>(fj, "dir_orders", 1);
  mc.color_hidden = get_or<std::size_t>(fj, "color_hidden", 16);
  field::MlpField mlp(mc, box, tc.rng_key + 1);

  const auto& ej = cfg.contains("encoder") ? cfg.at("encoder") : json::object();
  enc::EncoderConfig ec;
  ec.channels = get_or<std::size_t>(ej, "channels", 8);
  ec.depth_planes = get_or<std::size_t>(ej, "depth_planes", 16);
  ec.depth_min = get_or<double>(ej, "depth_min", box.min.z);
  ec.depth_max = get_or<double>(ej, "depth_max", box.max.z);
  ec.wavelength = get_or<double>(ej, "wavelength", 0.5);
  ec.cycles = get_or<double>(ej, "cycles", 1.0);
  ec.film_hidden = get_or<std::size_t>(ej, "film_hidden", 32);
  ec.seed = tc.rng_key + 2;
  enc::Encoder encoder(ec, dataset.front().measurement.pattern, mc.depth, mc.width);

  learn::TrainResult res;
  try {
    res = learn::train_toy(dataset, encoder, mlp, tc);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());  // e.g. sup mode without target views
  }
  write_trace_csv(out / "trace.csv", res.trace, tc.mode);
  if (res.diverged) throw DivergedError("training diverged; trace preserved");
  mlp.params().save(out / "field", {{"backend", "mlp"}});
  encoder.params().save(out / "encoder", {{"backend", "encoder"}});
  write_snapshot(out, cfg);
  std::cout << "train: mode " << to_string(tc.mode) << ", " << res.trace.size()
            << " steps, final loss " << res.trace.back().total << "\n";
  return 0;
}

// ----------------------------------------------------------------- render

int cmd_render(const json& cfg, bool png) {
  const auto out = make_out_dir(cfg);
  const Aabb box = bbox_from_config(cfg, "bbox");
  const fs::path ckpt = require<std::string>(cfg, "checkpoint");
  if (!fs::exists(ckpt / "manifest.json")) throw IoError("no checkpoint at " + ckpt.string());

  const auto& fj = cfg.contains("field") ? cfg.at("field") : json::object();
  const auto backend = get_or<std::string>(fj, "backend", "voxel");
  const render::StepRule rule{get_or<std::size_t>(cfg, "render_steps", std::size_t{128}), true};

  auto render_all = [&](field::FieldRef ref) {
    const auto size = get_or<std::size_t>(cfg, "image_size", 32);
    std::vector<Camera> cameras;
    if (cfg.contains("cameras"))
      for (const auto& cj : cfg.at("cameras")) cameras.push_back(camera_from_json(cj));
    else
      cameras.push_back(make_frontal_camera(box, size, size));
    for (std::size_t i = 0; i < cameras.size(); ++i) {
      const auto images = render_image(ref, cameras[i], rule);
      const std::string stem = "render_" + std::to_string(i);
      write_tensor(out / (stem + ".nltens"), images.intensity);
      write_tensor(out / (stem + "_depth.nltens"), images.depth);
      if (png) img::write_png_gray(out / (stem + ".png"), images.intensity);
    }
    std::cout << "render: " << cameras.size() << " view(s)\n";
  };

  if (backend == "voxel") {
    const auto dims = get_or<std::size_t>(fj, "dims", 16);
    field::VoxelField f(dims, dims, dims, box);
    f.params().load(ckpt);
    render_all(field::FieldRef(f));
  } else if (backend == "mlp") {
    field::MlpConfig mc;
    mc.width = get_or<std::size_t>(fj, "width", 64);
    mc.depth = get_or<std::size_t>(fj, "depth", 4);
    mc.pos_orders = get_or<std::size_t>(fj, "pos_orders", 6);
    mc.dir_orders = get_or<std::size_t>(fj, "dir_orders", 2);
    field::MlpField f(mc, box, 1);
    f.params().load(ckpt);
    render_all(field::FieldRef(f));
  } else {
    throw ConfigError("unknown field backend: " + backend);
  }
  write_snapshot(out, cfg);
  return 0;
}

// -------------------------------------------------------------- gradcheck

int cmd_gradcheck() {
  const auto results = gradcheck::run_all();
  bool all_ok = true;
  std::cout << "registered checks: " << results.size() << "\n";
  for (const auto& r : results) {
    const bool ok = r.passed();
    all_ok = all_ok && ok;
    std::cout << (ok ? "PASS " : "FAIL ") << r.name << ": worst rel err " << r.worst_rel_err
              << " (tolerance " << r.tolerance << ")\n";
  }
  return all_ok ? 0 : kExitGradcheck;
}

// ---------------------------------------------------------------- metrics

int cmd_metrics(const std::string& path_a, const std::string& path_b) {
  if (!fs::exists(path_a) || !fs::exists(path_b)) throw IoError("metrics input file missing");
  auto [a, meta_a] = read_tensor(path_a);
  auto [b, meta_b] = read_tensor(path_b);
  (void)meta_a;
  (void)meta_b;
  if (a.dims() != b.dims()) throw ConfigError("metrics images must share dims");

  auto image_at = [](const Tensor& t, std::size_t n) {
    Tensor img({t.dim(1), t.dim(2)});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = t[n * img.size() + i];
    return img;
  };

  if (a.rank() == 2) {
    const Tensor na = learn::normalize_max(a);
    const Tensor nb = learn::normalize_max(b);
    const double rmse = learn::metric_rmse(na, nb);
    std::cout << "rmse " << rmse << "\npsnr " << learn::metric_psnr(rmse) << "\nssim "
              << learn::metric_ssim(na, nb) << "\n";
    return 0;
  }
  if (a.rank() != 3) throw ConfigError("metrics expects 2d images or a 3d batch");

  // Batch: report both aggregation orders, which differ whenever the
  // per-image errors differ.
  const std::size_t n = a.dim(0);
  double sq_sum = 0.0, psnr_sum = 0.0, rmse_sum = 0.0, ssim_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor na = learn::normalize_max(image_at(a, i));
    const Tensor nb = learn::normalize_max(image_at(b, i));
    const double rmse = learn::metric_rmse(na, nb);
    sq_sum += rmse * rmse;
    rmse_sum += rmse;
    psnr_sum += learn::metric_psnr(rmse);
    ssim_sum += learn::metric_ssim(na, nb);
  }
  const double pooled_rmse = std::sqrt(sq_sum / static_cast<double>(n));
  std::cout << "rmse_pooled " << pooled_rmse << "\nrmse_mean " << rmse_sum / static_cast<double>(n)
            << "\npsnr_of_pooled_rmse " << learn::metric_psnr(pooled_rmse) << "\npsnr_mean "
            << psnr_sum / static_cast<double>(n) << "\nssim_mean "
            << ssim_sum / static_cast<double>(n) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale non-line-of-sight imaging toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  int threads = 0;
  bool png = false;

  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--set", overrides, "config overrides as key=value (dots nest)");
  app.add_option("--threads", threads, "worker thread cap (default: NLOS_THREADS or hardware)");
  app.add_flag("--png", png, "also export 8-bit PNG previews");

  auto* simulate = app.add_subcommand("simulate", "forward-simulate transient measurements");
  auto* reconstruct = app.add_subcommand("reconstruct", "rsd or back-projection reconstruction");
  bool no_transmittance = false;
  auto* fit = app.add_subcommand("fit", "per-scene iterative reconstruction");
  fit->add_flag("--no-transmittance", no_transmittance,
                "ablation: drop the transmittance term in the transient renderer");
  auto* train = app.add_subcommand("train", "toy-scale feed-forward training");
  auto* render_cmd = app.add_subcommand("render", "render images from a field checkpoint");
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "run all finite-difference checks");
  std::string metrics_a, metrics_b;
  auto* metrics = app.add_subcommand("metrics", "compare two image tensors");
  metrics->add_option("image_a", metrics_a, "first image (nltens)")->required();
  metrics->add_option("image_b", metrics_b, "second image (nltens)")->required();

  std::uint64_t seed_override = 0;
  auto* seed_opt = app.add_option("--seed", seed_override, "override the config seed");

  CLI11_PARSE(app, argc, argv);
  if (threads > 0) set_thread_count(threads);

  try {
    json cfg = load_config(config_path, overrides);
    if (seed_opt->count() > 0) cfg["seed"] = seed_override;

    if (simulate->parsed()) return cmd_simulate(cfg);
    if (reconstruct->parsed()) return cmd_reconstruct(cfg, png);
    if (fit->parsed()) return cmd_fit(cfg, png, no_transmittance);
    if (train->parsed()) return cmd_train(cfg);
    if (render_cmd->parsed()) return cmd_render(cfg, png);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck();
    if (metrics->parsed()) return cmd_metrics(metrics_a, metrics_b);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergedError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return 0;
}
