#pragma once

// Difference-of-Gaussians keypoints with a 4x4x8 gradient-orientation
// histogram descriptor (a simplified SIFT).

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include <nlohmann/json.hpp>

#include "d2r/error.hpp"
#include "d2r/image.hpp"
#include "d2r/tensor.hpp"

namespace d2r {

inline constexpr std::size_t kLocalDescriptorDim = 128;

struct Keypoint {
  double x = 0, y = 0;  // pixels in the input image
  double scale = 0;
  double orientation = 0;  // radians, image axes (y down)
  double response = 0;
};

struct LocalFeature {
  Keypoint kp;
  std::array<double, kLocalDescriptorDim> descriptor{};
};

struct DetectorParams {
  std::size_t max_features = 500;
  std::size_t scales_per_octave = 3;
  std::size_t max_octaves = 4;
  double sigma = 1.6;
  double input_blur = 0.5;
  double contrast_threshold = 0.01;
  double edge_ratio = 10.0;
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(std::size_t(2 * r + 1));
  double s = 0;
  for (int i = -r; i <= r; ++i) s += k[std::size_t(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

/// Separable Gaussian blur with replicated borders.
inline Tensor gaussian_blur(const Tensor& img, double sigma) {
  if (sigma <= 0) return img;
  const auto k = gaussian_kernel(sigma);
  const int r = int(k.size() / 2);
  const int H = int(img.extent(0)), W = int(img.extent(1));
  Tensor tmp(img.shape()), out(img.shape());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[std::size_t(i + r)] * img(std::size_t(y), std::size_t(std::clamp(x + i, 0, W - 1)));
      tmp(std::size_t(y), std::size_t(x)) = s;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[std::size_t(i + r)] * tmp(std::size_t(std::clamp(y + i, 0, H - 1)), std::size_t(x));
      out(std::size_t(y), std::size_t(x)) = s;
    }
  return out;
}

/// Keeps every second pixel starting at 0.
inline Tensor decimate2(const Tensor& img) {
  const std::size_t H = (img.extent(0) + 1) / 2, W = (img.extent(1) + 1) / 2;
  Tensor out({H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out(y, x) = img(2 * y, 2 * x);
  return out;
}

inline double wrap_angle(double a) {
  const double two_pi = 2 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  return a < 0 ? a + two_pi : a;
}

inline double dominant_orientation(const Tensor& g, int r, int c, double sigma) {
  constexpr int kBins = 36;
  std::array<double, kBins> hist{};
  const double ws = 1.5 * sigma;
  const int rad = int(std::lround(3.0 * ws));
  const int H = int(g.extent(0)), W = int(g.extent(1));
  for (int dy = -rad; dy <= rad; ++dy)
    for (int dx = -rad; dx <= rad; ++dx) {
      const int y = r + dy, x = c + dx;
      if (y < 1 || y >= H - 1 || x < 1 || x >= W - 1) continue;
      const double gx = g(std::size_t(y), std::size_t(x + 1)) - g(std::size_t(y), std::size_t(x - 1));
      const double gy = g(std::size_t(y + 1), std::size_t(x)) - g(std::size_t(y - 1), std::size_t(x));
      const double w = std::exp(-0.5 * (dx * dx + dy * dy) / (ws * ws));
      const double a = wrap_angle(std::atan2(gy, gx));
      hist[std::size_t(int(a / (2 * std::numbers::pi) * kBins) % kBins)] += w * std::hypot(gx, gy);
    }
  std::size_t best = 0;
  for (std::size_t b = 1; b < kBins; ++b)
    if (hist[b] > hist[best]) best = b;
  const double l = hist[(best + kBins - 1) % kBins], m = hist[best], rr = hist[(best + 1) % kBins];
  const double denom = l - 2 * m + rr;
  const double off = denom != 0 ? 0.5 * (l - rr) / denom : 0.0;
  return wrap_angle((double(best) + 0.5 + off) * 2 * std::numbers::pi / kBins);
}

/// 4x4 spatial cells x 8 orientation bins, trilinear voting, SIFT-style
/// normalize / clamp at 0.2 / renormalize. Returns false for a flat patch.
inline bool describe(const Tensor& g, double r0, double c0, double sigma, double theta,
                     std::array<double, kLocalDescriptorDim>& out) {
  out.fill(0.0);
  const double cell = 3.0 * sigma;
  const double ct = std::cos(theta), st = std::sin(theta);
  const int rad = int(std::ceil(cell * std::sqrt(2.0) * 2.5));
  const int H = int(g.extent(0)), W = int(g.extent(1));
  for (int dy = -rad; dy <= rad; ++dy)
    for (int dx = -rad; dx <= rad; ++dx) {
      const int y = int(r0) + dy, x = int(c0) + dx;
      if (y < 1 || y >= H - 1 || x < 1 || x >= W - 1) continue;
      // Rotate into the keypoint frame, in cell units, so bins span [-2, 2).
      const double u = (ct * dx + st * dy) / cell, v = (-st * dx + ct * dy) / cell;
      const double bu = u + 2 - 0.5, bv = v + 2 - 0.5;
      if (bu <= -1 || bu >= 4 || bv <= -1 || bv >= 4) continue;
      const double gx = g(std::size_t(y), std::size_t(x + 1)) - g(std::size_t(y), std::size_t(x - 1));
      const double gy = g(std::size_t(y + 1), std::size_t(x)) - g(std::size_t(y - 1), std::size_t(x));
      const double mag = std::hypot(gx, gy) * std::exp(-0.5 * (u * u + v * v) / 4.0);
      const double bo = wrap_angle(std::atan2(gy, gx) - theta) / (2 * std::numbers::pi) * 8.0;
      const int iu = int(std::floor(bu)), iv = int(std::floor(bv)), io = int(std::floor(bo));
      const double fu = bu - iu, fv = bv - iv, fo = bo - io;
      for (int a = 0; a < 2; ++a) {
        const int cu = iu + a;
        if (cu < 0 || cu >= 4) continue;
        for (int b = 0; b < 2; ++b) {
          const int cv = iv + b;
          if (cv < 0 || cv >= 4) continue;
          for (int o = 0; o < 2; ++o) {
            const int co = (io + o) % 8;
            const double w = (a ? fu : 1 - fu) * (b ? fv : 1 - fv) * (o ? fo : 1 - fo);
            out[std::size_t((cv * 4 + cu) * 8 + co)] += w * mag;
          }
        }
      }
    }
  auto normalize = [&] {
    double n = 0;
    for (double v : out) n += v * v;
    n = std::sqrt(n);
    if (n <= 1e-12) return false;
    for (auto& v : out) v /= n;
    return true;
  };
  if (!normalize()) return false;
  for (auto& v : out) v = std::min(v, 0.2);
  return normalize();
}

}  // namespace detail

/// Keypoints sorted by response (strongest first), capped at max_features.
inline std::vector<LocalFeature> detect_features(const Tensor& image, const DetectorParams& p = {}) {
  Tensor gray = to_grayscale(image);
  const std::size_t S = p.scales_per_octave;
  const double k = std::pow(2.0, 1.0 / double(S));
  Tensor base = detail::gaussian_blur(gray, std::sqrt(std::max(0.0, p.sigma * p.sigma - p.input_blur * p.input_blur)));
  const double edge = (p.edge_ratio + 1) * (p.edge_ratio + 1) / p.edge_ratio;

  std::vector<LocalFeature> feats;
  for (std::size_t o = 0; o < p.max_octaves && std::min(base.extent(0), base.extent(1)) >= 16; ++o) {
    std::vector<Tensor> gauss{base};
    for (std::size_t i = 1; i < S + 3; ++i) {
      const double prev = p.sigma * std::pow(k, double(i - 1)), cur = prev * k;
      gauss.push_back(detail::gaussian_blur(gauss.back(), std::sqrt(cur * cur - prev * prev)));
    }
    std::vector<Tensor> dog;
    for (std::size_t i = 0; i + 1 < gauss.size(); ++i) dog.push_back(sub(gauss[i + 1], gauss[i]));
    const int H = int(base.extent(0)), W = int(base.extent(1));
    const double step = std::pow(2.0, double(o));
    for (std::size_t s = 1; s <= S; ++s) {
      const Tensor &d0 = dog[s - 1], &d1 = dog[s], &d2 = dog[s + 1];
      for (int y = 1; y < H - 1; ++y)
        for (int x = 1; x < W - 1; ++x) {
          const double v = d1(std::size_t(y), std::size_t(x));
          if (std::abs(v) < p.contrast_threshold) continue;
          bool is_max = true, is_min = true;
          for (const Tensor* d : {&d0, &d1, &d2})
            for (int dy = -1; dy <= 1 && (is_max || is_min); ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                if (d == &d1 && dy == 0 && dx == 0) continue;
                const double w = (*d)(std::size_t(y + dy), std::size_t(x + dx));
                if (w >= v) is_max = false;
                if (w <= v) is_min = false;
              }
          if (!is_max && !is_min) continue;
          const auto at = [&](int yy, int xx) { return d1(std::size_t(yy), std::size_t(xx)); };
          const double dxx = at(y, x + 1) + at(y, x - 1) - 2 * v;
          const double dyy = at(y + 1, x) + at(y - 1, x) - 2 * v;
          const double dxy = 0.25 * (at(y + 1, x + 1) - at(y + 1, x - 1) - at(y - 1, x + 1) + at(y - 1, x - 1));
          const double det = dxx * dyy - dxy * dxy, tr = dxx + dyy;
          if (det <= 0 || tr * tr / det >= edge) continue;

          const double sigma_oct = p.sigma * std::pow(k, double(s));
          LocalFeature f;
          f.kp.x = double(x) * step;
          f.kp.y = double(y) * step;
          f.kp.scale = sigma_oct * step;
          f.kp.response = std::abs(v);
          f.kp.orientation = detail::dominant_orientation(gauss[s], y, x, sigma_oct);
          if (!detail::describe(gauss[s], y, x, sigma_oct, f.kp.orientation, f.descriptor)) continue;
          feats.push_back(f);
        }
    }
    base = detail::decimate2(gauss[S]);
  }
  std::sort(feats.begin(), feats.end(), [](const LocalFeature& a, const LocalFeature& b) {
    if (a.kp.response != b.kp.response) return a.kp.response > b.kp.response;
    if (a.kp.y != b.kp.y) return a.kp.y < b.kp.y;
    if (a.kp.x != b.kp.x) return a.kp.x < b.kp.x;
    return a.kp.scale < b.kp.scale;
  });
  if (feats.size() > p.max_features) feats.resize(p.max_features);
  return feats;
}

// Precomputed feature files: {"features": [{"x", "y", "scale", "orientation", "response", "descriptor": [128]}]}.

inline void save_features(const std::filesystem::path& path, const std::vector<LocalFeature>& feats) {
  nlohmann::json j{{"features", nlohmann::json::array()}};
  for (const auto& f : feats)
    j["features"].push_back({{"x", f.kp.x},
                             {"y", f.kp.y},
                             {"scale", f.kp.scale},
                             {"orientation", f.kp.orientation},
                             {"response", f.kp.response},
                             {"descriptor", f.descriptor}});
  std::ofstream os(path);
  if (!os) throw DataError("features: cannot write " + path.string());
  os << j.dump() << '\n';
}

inline std::vector<LocalFeature> load_features(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("features: cannot open " + path.string());
  std::vector<LocalFeature> out;
  try {
    nlohmann::json j;
    is >> j;
    for (const auto& o : j.at("features")) {
      LocalFeature f;
      f.kp = {o.at("x").get<double>(), o.at("y").get<double>(), o.value("scale", 1.0), o.value("orientation", 0.0),
              o.value("response", 0.0)};
      const auto d = o.at("descriptor").get<std::vector<double>>();
      if (d.size() != kLocalDescriptorDim) throw DataError("features: descriptor must have 128 entries in " + path.string());
      double n = 0;
      for (double v : d) n += v * v;
      n = std::sqrt(n);
      if (n <= 0) throw DataError("features: zero descriptor in " + path.string());
      for (std::size_t i = 0; i < kLocalDescriptorDim; ++i) f.descriptor[i] = d[i] / n;
      out.push_back(f);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("features: malformed " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace d2r
