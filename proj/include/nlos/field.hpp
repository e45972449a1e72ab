// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlos/io.hpp"
#include "nlos/rng.hpp"
#include "nlos/scene.hpp"
#include "nlos/tensor.hpp"
#include "nlos/vec3.hpp"

namespace nlos::field {

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double softplus_grad(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double sigmoid_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s);
}

/// Named blocks over one flat parameter vector, so the optimizer and
/// checkpoints treat every backend uniformly.
class ParamStore {
 public:
  struct Block {
    std::string name;
    std::size_t offset;
    std::vector<std::size_t> dims;
    std::size_t size;
  };

  std::size_t add_block(const std::string& name, std::vector<std::size_t> dims) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    const std::size_t offset = values_.size();
    blocks_.push_back({name, offset, std::move(dims), n});
    values_.resize(offset + n, 0.0);
    return blocks_.size() - 1;
  }

  std::span<double> block(std::size_t idx) {
    const Block& b = blocks_[idx];
    return {values_.data() + b.offset, b.size};
  }
  std::span<const double> block(std::size_t idx) const {
    const Block& b = blocks_[idx];
    return {values_.data() + b.offset, b.size};
  }

  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  const Block& find(const std::string& name) const {
    for (const Block& b : blocks_)
      if (b.name == name) return b;
    throw std::out_of_range("no parameter block named " + name);
  }

  void save(const std::filesystem::path& dir, const MetaMap& extra = {}) const {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["blocks"] = nlohmann::json::array();
    for (const Block& b : blocks_) {
      Tensor t(b.dims);
      std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size, t.begin());
      const std::string file = b.name + ".nltens";
      write_tensor(dir / file, t);
      manifest["blocks"].push_back({{"name", b.name}, {"dims", b.dims}, {"file", file}});
    }
    for (const auto& [k, v] : extra) manifest["meta"][k] = v;
    std::ofstream os(dir / "manifest.json");
    if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
    os << manifest.dump(2) << "\n";
  }

  /// Load values for already-registered blocks from a checkpoint dir.
  void load(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("cannot read manifest in " + dir.string());
    nlohmann::json manifest;
    is >> manifest;
    for (const auto& jb : manifest.at("blocks")) {
      const Block& b = find(jb.at("name").get<std::string>());
      auto [t, meta] = read_tensor(dir / jb.at("file").get<std::string>());
      (void)meta;
      if (t.size() != b.size) throw std::runtime_error("checkpoint block size mismatch: " + b.name);
      std::copy_n(t.begin(), b.size, values_.begin() + static_cast<std::ptrdiff_t>(b.offset));
    }
  }

 private:
  std::vector<Block> blocks_;
  std::vector<double> values_;
};

/// Per-layer affine modulation of MLP activations.
struct FilmParams {
  std::vector<std::vector<double>> gamma;  // one vector per conditioned layer
  std::vector<std::vector<double>> beta;

  static FilmParams identity(std::size_t layers, std::size_t width) {
    FilmParams f;
    f.gamma.assign(layers, std::vector<double>(width, 1.0));
    f.beta.assign(layers, std::vector<double>(width, 0.0));
    return f;
  }
};

/// Gradient accumulator matching FilmParams.
struct FilmGrad {
  std::vector<std::vector<double>> gamma;
  std::vector<std::vector<double>> beta;

  static FilmGrad zeros(std::size_t layers, std::size_t width) {
    FilmGrad g;
    g.gamma.assign(layers, std::vector<double>(width, 0.0));
    g.beta.assign(layers, std::vector<double>(width, 0.0));
    return g;
  }
};

/// h' = gamma (.) h + beta, elementwise.
inline std::vector<double> film_modulate(std::span<const double> h, std::span<const double> gamma,
                                         std::span<const double> beta) {
  if (h.size() != gamma.size() || h.size() != beta.size())
    throw std::invalid_argument("film vectors must share one length");
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = gamma[i] * h[i] + beta[i];
  return out;
}

/// [v, sin(2^k pi v), cos(2^k pi v)] for k = 0..L-1, componentwise.
inline std::vector<double> positional_encode(std::span<const double> v, std::size_t orders) {
  std::vector<double> out;
  out.reserve(v.size() * (1 + 2 * orders));
  for (double x : v) out.push_back(x);
  for (std::size_t k = 0; k < orders; ++k) {
    const double f = std::pow(2.0, static_cast<double>(k)) * std::numbers::pi;
    for (double x : v) out.push_back(std::sin(f * x));
    for (double x : v) out.push_back(std::cos(f * x));
  }
  return out;
}

/// Derivative of the encoding w.r.t. the inputs, as a (out, in) Jacobian
/// applied to an upstream vector.
inline void positional_encode_backprop(std::span<const double> v, std::size_t orders,
                                       std::span<const double> upstream,
                                       std::span<double> grad_v) {
  const std::size_t n = v.size();
  for (std::size_t i = 0; i < n; ++i) grad_v[i] += upstream[i];
  std::size_t at = n;
  for (std::size_t k = 0; k < orders; ++k) {
    const double f = std::pow(2.0, static_cast<double>(k)) * std::numbers::pi;
    for (std::size_t i = 0; i < n; ++i) grad_v[i] += upstream[at + i] * f * std::cos(f * v[i]);
    for (std::size_t i = 0; i < n; ++i) grad_v[i] -= upstream[at + n + i] * f * std::sin(f * v[i]);
    at += 2 * n;
  }
}

struct QueryResult {
  double color = 0.0;
  double density = 0.0;
};

struct Upstream {
  double d_color = 0.0;
  double d_density = 0.0;
};

/// Explicit voxel-grid radiance field: trilinear interpolation of raw
/// values followed by softplus (density) and sigmoid (color). Direction
/// independent, which suits diffuse desk scenes.
class VoxelField {
 public:
  VoxelField(std::size_t nx, std::size_t ny, std::size_t nz, Aabb bbox)
      : nx_(nx), ny_(ny), nz_(nz), bbox_(bbox) {
    if (nx < 2 || ny < 2 || nz < 2) throw std::invalid_argument("voxel dims must be >= 2 per axis");
    if (!bbox.valid()) throw std::invalid_argument("voxel bbox is degenerate");
    sigma_block_ = params_.add_block("raw_sigma", {nx, ny, nz});
    color_block_ = params_.add_block("raw_color", {nx, ny, nz});
  }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const Aabb& bbox() const { return bbox_; }
  std::size_t nx() const { return nx_; }
  std::size_t ny() const { return ny_; }
  std::size_t nz() const { return nz_; }

  void fill_raw(double raw_sigma, double raw_color) {
    for (double& v : params_.block(sigma_block_)) v = raw_sigma;
    for (double& v : params_.block(color_block_)) v = raw_color;
  }

  void randomize(std::uint64_t seed, double scale) {
    auto rng = CounterRng::keyed(seed, 0x766f78);
    for (double& v : params_.values()) v = scale * (2.0 * rng.next_double() - 1.0);
  }

  QueryResult query(const Vec3& x, const Vec3& /*d*/) const {
    Corners c;
    if (!gather(x, c)) return {0.0, 0.0};
    const auto raw_sig = params_.block(sigma_block_);
    const auto raw_col = params_.block(color_block_);
    double s = 0.0, col = 0.0;
    for (int i = 0; i < 8; ++i) {
      s += c.w[i] * raw_sig[c.idx[i]];
      col += c.w[i] * raw_col[c.idx[i]];
    }
    return {sigmoid(col), softplus(s)};
  }

  void query_grad(const Vec3& x, const Vec3& /*d*/, const Upstream& up,
                  std::span<double> grad) const {
    Corners c;
    if (!gather(x, c)) return;
    const auto raw_sig = params_.block(sigma_block_);
    const auto raw_col = params_.block(color_block_);
    double s = 0.0, col = 0.0;
    for (int i = 0; i < 8; ++i) {
      s += c.w[i] * raw_sig[c.idx[i]];
      col += c.w[i] * raw_col[c.idx[i]];
    }
    const double dsig = up.d_density * softplus_grad(s);
    const double dcol = up.d_color * sigmoid_grad(col);
    const std::size_t sig_off = params_.blocks()[sigma_block_].offset;
    const std::size_t col_off = params_.blocks()[color_block_].offset;
    for (int i = 0; i < 8; ++i) {
      grad[sig_off + c.idx[i]] += dsig * c.w[i];
      grad[col_off + c.idx[i]] += dcol * c.w[i];
    }
  }

 private:
  struct Corners {
    std::size_t idx[8];
    double w[8];
  };

  // Vertex-centered trilinear cell lookup; false when x is outside.
  bool gather(const Vec3& x, Corners& c) const {
    if (!bbox_.contains(x, 0.0)) return false;
    const Vec3 e = bbox_.extent();
    const double fx = (x.x - bbox_.min.x) / e.x * (static_cast<double>(nx_) - 1.0);
    const double fy = (x.y - bbox_.min.y) / e.y * (static_cast<double>(ny_) - 1.0);
    const double fz = (x.z - bbox_.min.z) / e.z * (static_cast<double>(nz_) - 1.0);
    const auto ix = std::min(static_cast<std::size_t>(fx), nx_ - 2);
    const auto iy = std::min(static_cast<std::size_t>(fy), ny_ - 2);
    const auto iz = std::min(static_cast<std::size_t>(fz), nz_ - 2);
    const double tx = fx - static_cast<double>(ix);
    const double ty = fy - static_cast<double>(iy);
    const double tz = fz - static_cast<double>(iz);
    int at = 0;
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz) {
          c.idx[at] = ((ix + static_cast<std::size_t>(dx)) * ny_ + iy + static_cast<std::size_t>(dy)) * nz_ +
                      iz + static_cast<std::size_t>(dz);
          c.w[at] = (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) * (dz ? tz : 1.0 - tz);
          ++at;
        }
    return true;
  }

  std::size_t nx_, ny_, nz_;
  Aabb bbox_;
  ParamStore params_;
  std::size_t sigma_block_ = 0;
  std::size_t color_block_ = 0;
};

/// Splat scene surfels into an explicit field: near-opaque density in
/// the cell holding each surfel, color from its albedo. Serves as the
/// representable ground truth for toy datasets.
inline VoxelField voxelize_scene(const Scene& scene, std::size_t nx, std::size_t ny,
                                 std::size_t nz) {
  VoxelField f(nx, ny, nz, scene.bbox);
  f.fill_raw(-20.0, 0.0);
  auto sig = f.params().block(0);
  auto col = f.params().block(1);
  const Vec3 e = scene.bbox.extent();
  const double cell_z = e.z / static_cast<double>(nz - 1);
  const double opaque = 20.0 / cell_z;  // optical depth ~20 across one cell
  for (const Surfel& s : scene.samples) {
    const auto ix = static_cast<std::size_t>(std::clamp(
        std::lround((s.position.x - scene.bbox.min.x) / e.x * static_cast<double>(nx - 1)),
        long{0}, static_cast<long>(nx - 1)));
    const auto iy = static_cast<std::size_t>(std::clamp(
        std::lround((s.position.y - scene.bbox.min.y) / e.y * static_cast<double>(ny - 1)),
        long{0}, static_cast<long>(ny - 1)));
    const auto iz = static_cast<std::size_t>(std::clamp(
        std::lround((s.position.z - scene.bbox.min.z) / e.z * static_cast<double>(nz - 1)),
        long{0}, static_cast<long>(nz - 1)));
    const std::size_t at = (ix * ny + iy) * nz + iz;
    sig[at] = opaque;
    const double c = std::clamp(s.albedo, 0.02, 0.98);
    col[at] = std::log(c / (1.0 - c));
  }
  return f;
}

struct MlpConfig {
  std::size_t width = 64;
  std::size_t depth = 4;  // trunk layers
  std::size_t pos_orders = 6;
  std::size_t dir_orders = 2;
  std::size_t color_hidden = 32;
};

/// MLP radiance field with optional per-layer FiLM conditioning:
/// enc(x) -> trunk (FiLM before each ReLU) -> density head; trunk
/// feature + enc(d) -> color head.
class MlpField {
 public:
  MlpField(MlpConfig cfg, Aabb bbox, std::uint64_t seed = 1) : cfg_(cfg), bbox_(bbox) {
    in_dim_ = 3 * (1 + 2 * cfg.pos_orders);
    dir_dim_ = 3 * (1 + 2 * cfg.dir_orders);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::size_t fan_in = l == 0 ? in_dim_ : cfg.width;
      trunk_w_.push_back(params_.add_block("trunk_w" + std::to_string(l), {cfg.width, fan_in}));
      trunk_b_.push_back(params_.add_block("trunk_b" + std::to_string(l), {cfg.width}));
    }
    sigma_w_ = params_.add_block("sigma_w", {1, cfg.width});
    sigma_b_ = params_.add_block("sigma_b", {1});
    color_w1_ = params_.add_block("color_w1", {cfg.color_hidden, cfg.width + dir_dim_});
    color_b1_ = params_.add_block("color_b1", {cfg.color_hidden});
    color_w2_ = params_.add_block("color_w2", {1, cfg.color_hidden});
    color_b2_ = params_.add_block("color_b2", {1});
    init_weights(seed);
  }

  const MlpConfig& config() const { return cfg_; }
  const Aabb& bbox() const { return bbox_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t conditioned_layers() const { return cfg_.depth; }

  QueryResult query(const Vec3& x, const Vec3& d, const FilmParams* film = nullptr) const {
    if (!x.is_finite() || !d.is_finite()) throw std::invalid_argument("non-finite query input");
    if (!bbox_.contains(x, 0.0)) return {0.0, 0.0};
    Trace t;
    forward(x, d, film, t);
    return {sigmoid(t.color_out), softplus(t.sigma_out)};
  }

  /// Accumulates d(loss)/d(params) into grad; when film is given, also
  /// accumulates d(loss)/d(gamma, beta) into film_grad.
  void query_grad(const Vec3& x, const Vec3& d, const FilmParams* film, const Upstream& up,
                  std::span<double> grad, FilmGrad* film_grad = nullptr) const {
    if (!bbox_.contains(x, 0.0)) return;
    Trace t;
    forward(x, d, film, t);
    backward(d, film, t, up, grad, film_grad);
  }

 private:
  struct Trace {
    std::vector<double> enc_x;
    std::vector<double> enc_d;
    std::vector<std::vector<double>> pre;    // pre-FiLM linear outputs
    std::vector<std::vector<double>> mod;    // post-FiLM, pre-ReLU
    std::vector<std::vector<double>> act;    // post-ReLU
    std::vector<double> color_in;            // trunk feature ++ enc_d
    std::vector<double> color_hidden_pre;
    std::vector<double> color_hidden;
    double sigma_out = 0.0;
    double color_out = 0.0;
  };

  void init_weights(std::uint64_t seed) {
    auto rng = CounterRng::keyed(seed, 0x6d6c70);
    auto init_block = [&](std::size_t idx) {
      auto b = params_.block(idx);
      const auto& dims = params_.blocks()[idx].dims;
      if (dims.size() == 2) {
        const double scale = std::sqrt(2.0 / static_cast<double>(dims[1]));
        for (double& v : b) v = scale * rng.next_gauss();
      } else {
        for (double& v : b) v = 0.0;
      }
    };
    for (std::size_t i = 0; i < params_.blocks().size(); ++i) init_block(i);
  }

  static void linear(std::span<const double> w, std::span<const double> b,
                     std::span<const double> in, std::vector<double>& out) {
    const std::size_t rows = b.size();
    const std::size_t cols = in.size();
    out.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = b[r];
      const double* wr = w.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * in[c];
      out[r] = acc;
    }
  }

  void forward(const Vec3& x, const Vec3& d, const FilmParams* film, Trace& t) const {
    const double xin[3] = {x.x, x.y, x.z};
    const double din[3] = {d.x, d.y, d.z};
    t.enc_x = positional_encode({xin, 3}, cfg_.pos_orders);
    t.enc_d = positional_encode({din, 3}, cfg_.dir_orders);
    if (film &&
        (film->gamma.size() != cfg_.depth || film->beta.size() != cfg_.depth))
      throw std::invalid_argument("film params do not match trunk depth");

    const std::vector<double>* input = &t.enc_x;
    t.pre.resize(cfg_.depth);
    t.mod.resize(cfg_.depth);
    t.act.resize(cfg_.depth);
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      linear(params_.block(trunk_w_[l]), params_.block(trunk_b_[l]), *input, t.pre[l]);
      if (film) {
        if (film->gamma[l].size() != cfg_.width)
          throw std::invalid_argument("film vector width mismatch");
        t.mod[l].resize(cfg_.width);
        for (std::size_t i = 0; i < cfg_.width; ++i)
          t.mod[l][i] = film->gamma[l][i] * t.pre[l][i] + film->beta[l][i];
      } else {
        t.mod[l] = t.pre[l];
      }
      t.act[l].resize(cfg_.width);
      for (std::size_t i = 0; i < cfg_.width; ++i) t.act[l][i] = std::max(0.0, t.mod[l][i]);
      input = &t.act[l];
    }

    std::vector<double> sig;
    linear(params_.block(sigma_w_), params_.block(sigma_b_), t.act.back(), sig);
    t.sigma_out = sig[0];

    t.color_in = t.act.back();
    t.color_in.insert(t.color_in.end(), t.enc_d.begin(), t.enc_d.end());
    linear(params_.block(color_w1_), params_.block(color_b1_), t.color_in, t.color_hidden_pre);
    t.color_hidden.resize(cfg_.color_hidden);
    for (std::size_t i = 0; i < cfg_.color_hidden; ++i)
      t.color_hidden[i] = std::max(0.0, t.color_hidden_pre[i]);
    std::vector<double> col;
    linear(params_.block(color_w2_), params_.block(color_b2_), t.color_hidden, col);
    t.color_out = col[0];
  }

  void accum_linear_grad(std::size_t w_idx, std::size_t b_idx, std::span<const double> in,
                         std::span<const double> d_out, std::span<double> grad,
                         std::vector<double>* d_in) const {
    const auto& wb = params_.blocks()[w_idx];
    const auto& bb = params_.blocks()[b_idx];
    const std::size_t rows = bb.size;
    const std::size_t cols = in.size();
    const auto w = params_.block(w_idx);
    for (std::size_t r = 0; r < rows; ++r) {
      grad[bb.offset + r] += d_out[r];
      double* gw = grad.data() + wb.offset + r * cols;
      for (std::size_t c = 0; c < cols; ++c) gw[c] += d_out[r] * in[c];
    }
    if (d_in) {
      d_in->assign(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* wr = w.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) (*d_in)[c] += d_out[r] * wr[c];
      }
    }
  }

  void backward(const Vec3& /*d*/, const FilmParams* film, const Trace& t, const Upstream& up,
                std::span<double> grad, FilmGrad* film_grad) const {
    // Heads.
    const double d_sigma_out = up.d_density * softplus_grad(t.sigma_out);
    const double d_color_out = up.d_color * sigmoid_grad(t.color_out);

    std::vector<double> d_color_hidden;
    accum_linear_grad(color_w2_, color_b2_, t.color_hidden, {&d_color_out, 1}, grad,
                      &d_color_hidden);
    for (std::size_t i = 0; i < cfg_.color_hidden; ++i)
      if (t.color_hidden_pre[i] <= 0.0) d_color_hidden[i] = 0.0;
    std::vector<double> d_color_in;
    accum_linear_grad(color_w1_, color_b1_, t.color_in, d_color_hidden, grad, &d_color_in);

    std::vector<double> d_feat;
    accum_linear_grad(sigma_w_, sigma_b_, t.act.back(), {&d_sigma_out, 1}, grad, &d_feat);
    for (std::size_t i = 0; i < cfg_.width; ++i) d_feat[i] += d_color_in[i];

    // Trunk, last layer to first.
    std::vector<double> d_act = std::move(d_feat);
    for (std::size_t l = cfg_.depth; l-- > 0;) {
      std::vector<double> d_mod(cfg_.width);
      for (std::size_t i = 0; i < cfg_.width; ++i)
        d_mod[i] = t.mod[l][i] > 0.0 ? d_act[i] : 0.0;

      std::vector<double> d_pre(cfg_.width);
      if (film) {
        for (std::size_t i = 0; i < cfg_.width; ++i) {
          d_pre[i] = d_mod[i] * film->gamma[l][i];
          if (film_grad) {
            film_grad->gamma[l][i] += d_mod[i] * t.pre[l][i];
            film_grad->beta[l][i] += d_mod[i];
          }
        }
      } else {
        d_pre = d_mod;
      }

      const std::vector<double>& input = l == 0 ? t.enc_x : t.act[l - 1];
      std::vector<double> d_in;
      accum_linear_grad(trunk_w_[l], trunk_b_[l], input, d_pre, grad, l == 0 ? nullptr : &d_in);
      if (l > 0) d_act = std::move(d_in);
    }
  }

  MlpConfig cfg_;
  Aabb bbox_;
  std::size_t in_dim_ = 0;
  std::size_t dir_dim_ = 0;
  ParamStore params_;
  std::vector<std::size_t> trunk_w_, trunk_b_;
  std::size_t sigma_w_ = 0, sigma_b_ = 0;
  std::size_t color_w1_ = 0, color_b1_ = 0, color_w2_ = 0, color_b2_ = 0;
};

/// Number of work chunks used by every parallel gradient loop. Chunk
/// boundaries depend only on the item count, so per-chunk accumulators
/// merge in a fixed order whatever the worker count.
inline constexpr std::size_t kGradChunks = 64;

/// Supplies per-position FiLM parameters for a conditioned MLP and
/// absorbs their gradients. The chunk index routes scratch state and
/// gradient buffers; one chunk is always driven by a single thread.
class Conditioner {
 public:
  virtual ~Conditioner() = default;
  /// FiLM parameters at x; the reference stays valid until the next
  /// call on the same chunk.
  virtual const FilmParams& film_at(std::size_t chunk, const Vec3& x) = 0;
  /// Push d(loss)/d(gamma, beta) at x into the chunk's gradient buffer.
  virtual void film_backprop(std::size_t chunk, const Vec3& x, const FilmGrad& g) = 0;
};

/// Backend-agnostic handle used by the renderer: either an explicit
/// voxel grid or the (optionally conditioned) MLP. Parallel loops copy
/// the ref per chunk and call set_chunk.
class FieldRef {
 public:
  explicit FieldRef(VoxelField& f) : voxel_(&f) {}
  explicit FieldRef(MlpField& f, Conditioner* cond = nullptr) : mlp_(&f), cond_(cond) {
    if (cond_) film_grad_scratch_ = FilmGrad::zeros(f.conditioned_layers(), f.config().width);
  }

  void set_chunk(std::size_t chunk) { chunk_ = chunk; }
  const Aabb& bbox() const { return voxel_ ? voxel_->bbox() : mlp_->bbox(); }

  QueryResult query(const Vec3& x, const Vec3& d) {
    if (voxel_) return voxel_->query(x, d);
    return mlp_->query(x, d, cond_ ? &cond_->film_at(chunk_, x) : nullptr);
  }

  void query_grad(const Vec3& x, const Vec3& d, const Upstream& up, std::span<double> grad) {
    if (voxel_) {
      voxel_->query_grad(x, d, up, grad);
      return;
    }
    if (!cond_) {
      mlp_->query_grad(x, d, nullptr, up, grad, nullptr);
      return;
    }
    const FilmParams& fp = cond_->film_at(chunk_, x);
    for (auto& g : film_grad_scratch_.gamma) std::fill(g.begin(), g.end(), 0.0);
    for (auto& b : film_grad_scratch_.beta) std::fill(b.begin(), b.end(), 0.0);
    mlp_->query_grad(x, d, &fp, up, grad, &film_grad_scratch_);
    cond_->film_backprop(chunk_, x, film_grad_scratch_);
  }

  ParamStore& params() { return voxel_ ? voxel_->params() : mlp_->params(); }
  const ParamStore& params() const { return voxel_ ? voxel_->params() : mlp_->params(); }
  bool is_voxel() const { return voxel_ != nullptr; }

 private:
  VoxelField* voxel_ = nullptr;
  MlpField* mlp_ = nullptr;
  Conditioner* cond_ = nullptr;
  std::size_t chunk_ = 0;
  FilmGrad film_grad_scratch_;
};

}  // namespace nlos::field
