#pragma once

// Tentative correspondences (kd-tree 2-NN, ratio test, mutual check) and
// RANSAC affine verification.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "d2r/local_features.hpp"
#include "d2r/random.hpp"

namespace d2r {

// ---------------------------------------------------------------------------
// kd-tree over fixed-dimension points (exact nearest neighbours)

class KdTree {
 public:
  struct Neighbor {
    std::size_t index;
    double dist2;
  };

  KdTree() = default;

  /// `points` is n rows of `dim` values each, stored contiguously; copied.
  KdTree(std::vector<double> points, std::size_t dim) : pts_(std::move(points)), dim_(dim) {
    if (dim_ == 0 || pts_.size() % dim_) throw ShapeError("kdtree: point buffer is not a multiple of dim");
    order_.resize(pts_.size() / dim_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!order_.empty()) root_ = build(0, order_.size());
  }

  std::size_t size() const { return order_.size(); }
  std::size_t dim() const { return dim_; }

  /// The `k` nearest points, closest first; ties broken by lower index.
  std::vector<Neighbor> nearest(std::span<const double> q, std::size_t k) const {
    if (q.size() != dim_) throw ShapeError("kdtree: query dim mismatch");
    std::vector<Neighbor> best;
    k = std::min(k, size());
    if (k && root_ >= 0) search(root_, q, k, best);
    return best;
  }

 private:
  struct Node {
    std::size_t begin, end;  // leaf range in order_
    std::size_t axis = 0;
    double split = 0;
    int left = -1, right = -1;
  };
  static constexpr std::size_t kLeaf = 8;

  std::vector<double> pts_;
  std::size_t dim_ = 0;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
  int root_ = -1;

  double coord(std::size_t i, std::size_t a) const { return pts_[i * dim_ + a]; }

  int build(std::size_t b, std::size_t e) {
    Node n{b, e};
    const int id = int(nodes_.size());
    nodes_.push_back(n);
    if (e - b <= kLeaf) return id;
    // Split on the widest axis at the median.
    std::size_t axis = 0;
    double widest = -1;
    for (std::size_t a = 0; a < dim_; ++a) {
      double lo = coord(order_[b], a), hi = lo;
      for (std::size_t i = b + 1; i < e; ++i) lo = std::min(lo, coord(order_[i], a)), hi = std::max(hi, coord(order_[i], a));
      if (hi - lo > widest) widest = hi - lo, axis = a;
    }
    if (widest <= 0) return id;
    const std::size_t mid = b + (e - b) / 2;
    std::nth_element(order_.begin() + std::ptrdiff_t(b), order_.begin() + std::ptrdiff_t(mid), order_.begin() + std::ptrdiff_t(e),
                     [&](std::size_t x, std::size_t y) { return coord(x, axis) < coord(y, axis); });
    nodes_[std::size_t(id)].axis = axis;
    nodes_[std::size_t(id)].split = coord(order_[mid], axis);
    const int l = build(b, mid);
    const int r = build(mid, e);
    nodes_[std::size_t(id)].left = l;
    nodes_[std::size_t(id)].right = r;
    return id;
  }

  static bool better(const Neighbor& a, const Neighbor& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
  }

  void offer(std::vector<Neighbor>& best, std::size_t k, Neighbor n) const {
    if (best.size() == k && !better(n, best.back())) return;
    best.insert(std::upper_bound(best.begin(), best.end(), n, better), n);
    if (best.size() > k) best.pop_back();
  }

  void search(int id, std::span<const double> q, std::size_t k, std::vector<Neighbor>& best) const {
    const Node& n = nodes_[std::size_t(id)];
    if (n.left < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t p = order_[i];
        double d = 0;
        for (std::size_t a = 0; a < dim_; ++a) {
          const double t = q[a] - coord(p, a);
          d += t * t;
        }
        offer(best, k, {p, d});
      }
      return;
    }
    const double diff = q[n.axis] - n.split;
    const int near = diff < 0 ? n.left : n.right, far = diff < 0 ? n.right : n.left;
    search(near, q, k, best);
    // Equality keeps the far side in play so index tie-breaks stay exact.
    if (best.size() < k || diff * diff <= best.back().dist2) search(far, q, k, best);
  }
};

// ---------------------------------------------------------------------------
// Tentative matching

struct MatchPair {
  std::size_t a, b;
  bool operator==(const MatchPair&) const = default;
};

namespace detail {

inline KdTree descriptor_tree(const std::vector<LocalFeature>& f) {
  std::vector<double> buf;
  buf.reserve(f.size() * kLocalDescriptorDim);
  for (const auto& x : f) buf.insert(buf.end(), x.descriptor.begin(), x.descriptor.end());
  return KdTree(std::move(buf), kLocalDescriptorDim);
}

}  // namespace detail

/// For each A-descriptor: nearest B by kd-tree, kept if d1/d2 < ratio (skipped
/// when |B| < 2) and if that B-descriptor's nearest A is the same feature.
inline std::vector<MatchPair> match_tentative(const std::vector<LocalFeature>& A, const std::vector<LocalFeature>& B,
                                              double ratio = 0.8) {
  std::vector<MatchPair> out;
  if (A.empty() || B.empty()) return out;
  const KdTree tb = detail::descriptor_tree(B), ta = detail::descriptor_tree(A);
  for (std::size_t i = 0; i < A.size(); ++i) {
    const auto nn = tb.nearest(A[i].descriptor, 2);
    if (nn.size() >= 2 && !(std::sqrt(nn[0].dist2) < ratio * std::sqrt(nn[1].dist2))) continue;
    const auto back = ta.nearest(B[nn[0].index].descriptor, 1);
    if (back.empty() || back[0].index != i) continue;
    out.push_back({i, nn[0].index});
  }
  return out;
}

// ---------------------------------------------------------------------------
// RANSAC affine verification

struct Correspondence {
  double x1, y1, x2, y2;
  bool operator==(const Correspondence&) const = default;
};

/// (x, y) -> (a x + b y + tx, c x + d y + ty); stored as {a, b, tx, c, d, ty}.
struct Affine {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};
  std::pair<double, double> apply(double x, double y) const {
    return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
  }
  double error(const Correspondence& c) const {
    const auto [u, v] = apply(c.x1, c.y1);
    return std::hypot(u - c.x2, v - c.y2);
  }
};

/// Least-squares affine fit; nullopt when the points are (near) collinear.
inline std::optional<Affine> fit_affine(std::span<const Correspondence> cs) {
  if (cs.size() < 3) return std::nullopt;
  Eigen::MatrixXd X(cs.size(), 3);
  Eigen::VectorXd u(cs.size()), v(cs.size());
  for (std::size_t i = 0; i < cs.size(); ++i) {
    X(Eigen::Index(i), 0) = cs[i].x1;
    X(Eigen::Index(i), 1) = cs[i].y1;
    X(Eigen::Index(i), 2) = 1.0;
    u(Eigen::Index(i)) = cs[i].x2;
    v(Eigen::Index(i)) = cs[i].y2;
  }
  const Eigen::Matrix3d XtX = X.transpose() * X;
  // Collinearity check on the centred design, scale-free.
  double mx = 0, my = 0;
  for (const auto& c : cs) mx += c.x1, my += c.y1;
  mx /= double(cs.size()), my /= double(cs.size());
  double sxx = 0, syy = 0, sxy = 0;
  for (const auto& c : cs) {
    sxx += (c.x1 - mx) * (c.x1 - mx), syy += (c.y1 - my) * (c.y1 - my), sxy += (c.x1 - mx) * (c.y1 - my);
  }
  if (sxx * syy - sxy * sxy <= 1e-9 * std::max(1.0, (sxx + syy) * (sxx + syy))) return std::nullopt;
  const auto solver = XtX.ldlt();
  const Eigen::Vector3d p = solver.solve(X.transpose() * u), q = solver.solve(X.transpose() * v);
  Affine a;
  a.m = {p(0), p(1), p(2), q(0), q(1), q(2)};
  for (double x : a.m)
    if (!std::isfinite(x)) return std::nullopt;
  return a;
}

struct RansacParams {
  std::size_t iterations = 1000;
  double inlier_px = 3.0;
  std::uint64_t seed = 0;
};

struct RansacResult {
  std::vector<std::size_t> inliers;  // indices into the input, ascending
  std::optional<Affine> transform;
};

/// Best affine over random minimal samples, then a least-squares refit on its
/// inliers. Pairs are put in a canonical order before sampling, so the result
/// does not depend on the order they were passed in.
inline RansacResult ransac_verify(std::span<const Correspondence> pairs, const RansacParams& p = {}) {
  RansacResult res;
  const std::size_t n = pairs.size();
  if (n < 3) return res;
  std::vector<std::size_t> canon(n);
  std::iota(canon.begin(), canon.end(), std::size_t{0});
  const auto key = [&](std::size_t i) { return std::tie(pairs[i].x1, pairs[i].y1, pairs[i].x2, pairs[i].y2); };
  std::stable_sort(canon.begin(), canon.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });

  const auto inliers_of = [&](const Affine& a) {
    std::vector<std::size_t> in;
    for (std::size_t i = 0; i < n; ++i)
      if (a.error(pairs[i]) <= p.inlier_px) in.push_back(i);
    return in;
  };

  Rng rng(derive_seed(p.seed, "ransac"));
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> best;
  for (std::size_t it = 0; it < p.iterations; ++it) {
    std::size_t s[3] = {pick(rng), pick(rng), pick(rng)};
    if (s[0] == s[1] || s[0] == s[2] || s[1] == s[2]) continue;
    const Correspondence sample[3] = {pairs[canon[s[0]]], pairs[canon[s[1]]], pairs[canon[s[2]]]};
    const auto model = fit_affine(sample);
    if (!model) continue;
    auto in = inliers_of(*model);
    if (in.size() > best.size()) best = std::move(in);
    if (best.size() == n) break;
  }
  if (best.size() < 3) return res;

  std::vector<Correspondence> sel;
  for (auto i : best) sel.push_back(pairs[i]);
  auto refit = fit_affine(sel);
  if (!refit) return res;
  // One refinement pass: keep the refit inlier set when it is at least as large.
  auto in2 = inliers_of(*refit);
  if (in2.size() >= best.size() && in2 != best) {
    sel.clear();
    for (auto i : in2) sel.push_back(pairs[i]);
    if (auto r2 = fit_affine(sel)) {
      best = std::move(in2);
      refit = r2;
    }
  }
  res.inliers = std::move(best);
  res.transform = refit;
  return res;
}

/// Correspondences for matched keypoints.
inline std::vector<Correspondence> correspondences(const std::vector<LocalFeature>& A, const std::vector<LocalFeature>& B,
                                                   const std::vector<MatchPair>& pairs) {
  std::vector<Correspondence> out;
  out.reserve(pairs.size());
  for (const auto& m : pairs) out.push_back({A[m.a].kp.x, A[m.a].kp.y, B[m.b].kp.x, B[m.b].kp.y});
  return out;
}

}  // namespace d2r
