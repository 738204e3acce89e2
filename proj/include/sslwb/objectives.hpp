#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sslwb/augmentation.hpp"
#include "sslwb/rng.hpp"
#include "sslwb/tensor.hpp"

namespace sslwb {

// The five pretraining losses plus the K-Means pseudolabeler. Each
// differentiable loss returns its value together with the analytic gradient
// with respect to its inputs; the test suite checks those gradients against
// central finite differences.

struct Temperature {
  double value;
  explicit Temperature(double v) : value(v) {
    require(v > 0.0, "temperature must be positive");
  }
};

// ---------------------------------------------------------------------------
// Contrastive loss (normalized temperature-scaled cross entropy).

/// 2B projection rows; the two augmented views of image i sit at rows 2i and
/// 2i+1, which also defines the positive pairing.
template <class T>
struct SimCLRBatchRepr {
  Tensor<T> projections;  // [2B, D]

  std::size_t batch_size() const { return projections.dim(0) / 2; }

  void validate() const {
    require(projections.ndim() == 2, "projections must be a 2-d array");
    require(projections.dim(0) % 2 == 0, "projection row count must be even");
    require(projections.is_finite(), "projections contain non-finite values");
  }
};

template <class T>
struct LossGrad {
  T loss = T(0);
  Tensor<T> grad;
};

/// Per-anchor term of the contrastive objective with cosine similarity,
/// averaged over all 2B anchors (both views of every image act as anchors).
template <class T>
inline LossGrad<T> nt_xent_with_grad(const SimCLRBatchRepr<T>& repr,
                                     const Temperature& tau) {
  repr.validate();
  const std::size_t n = repr.projections.dim(0);
  const std::size_t d = repr.projections.dim(1);
  require(n >= 4, "contrastive batch needs B >= 2 images (at least one negative)");
  const T inv_tau = T(1) / static_cast<T>(tau.value);

  // Row-normalize.
  Tensor<T> unit({n, d});
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) s += repr.projections.at(i, j) * repr.projections.at(i, j);
    T r = std::sqrt(s);
    require(r > T(0), "zero-norm projection row: cosine similarity undefined");
    norms[i] = r;
    for (std::size_t j = 0; j < d; ++j) unit.at(i, j) = repr.projections.at(i, j) / r;
  }

  // Cosine similarity matrix.
  Tensor<T> sim({n, n});
  sim.mat(n, n).noalias() = unit.mat(n, d) * unit.mat(n, d).transpose();

  // Per-anchor softmax over non-self entries; accumulate loss and dL/dS.
  Tensor<T> dsim({n, n});
  T loss = T(0);
  const T anchor_w = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pos = i ^ 1;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, sim.at(i, k) * inv_tau);
    T denom = T(0);
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) denom += std::exp(sim.at(i, k) * inv_tau - mx);
    loss += anchor_w * (std::log(denom) + mx - sim.at(i, pos) * inv_tau);
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      T soft = std::exp(sim.at(i, k) * inv_tau - mx) / denom;
      dsim.at(i, k) = anchor_w * inv_tau * (soft - (k == pos ? T(1) : T(0)));
    }
  }

  // Chain through S = U U^T and the row normalization.
  Tensor<T> dunit({n, d});
  {
    auto D = dsim.mat(n, n);
    dunit.mat(n, d).noalias() = (D + D.transpose()).eval() * unit.mat(n, d);
  }
  LossGrad<T> out;
  out.loss = loss;
  out.grad = Tensor<T>({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    T dot = T(0);
    for (std::size_t j = 0; j < d; ++j) dot += unit.at(i, j) * dunit.at(i, j);
    for (std::size_t j = 0; j < d; ++j)
      out.grad.at(i, j) = (dunit.at(i, j) - dot * unit.at(i, j)) / norms[i];
  }
  return out;
}

template <class T>
inline T nt_xent(const SimCLRBatchRepr<T>& repr, const Temperature& tau) {
  return nt_xent_with_grad(repr, tau).loss;
}

// ---------------------------------------------------------------------------
// Self-distillation loss.

/// Teacher distributions for the two global views; student distributions for
/// all k+2 views, with the globals first and in teacher order.
template <class T>
struct DinoOutputs {
  Tensor<T> teacher_dists;  // [2, C]
  Tensor<T> student_dists;  // [k+2, C]

  std::size_t k() const { return student_dists.dim(0) - 2; }

  void validate() const {
    require(teacher_dists.ndim() == 2 && teacher_dists.dim(0) == 2,
            "teacher must provide exactly two global-view distributions");
    require(student_dists.ndim() == 2 && student_dists.dim(0) >= 2,
            "student must provide at least the two global views");
    require(teacher_dists.dim(1) == student_dists.dim(1),
            "teacher/student output dimensions differ");
    auto check_rows = [](const Tensor<T>& t, const char* who) {
      // 1e-6 at double precision; wider when the scalar type cannot represent
      // a unit row sum that tightly
      const double tol = std::max(
          1e-6, 4.0 * static_cast<double>(t.dim(1)) *
                    static_cast<double>(std::numeric_limits<T>::epsilon()));
      for (std::size_t i = 0; i < t.dim(0); ++i) {
        T s = T(0);
        for (std::size_t c = 0; c < t.dim(1); ++c) {
          T v = t.at(i, c);
          require(std::isfinite(static_cast<double>(v)) && v >= T(0),
                  std::string(who) + " distribution has a negative or non-finite entry");
          s += v;
        }
        require(std::fabs(static_cast<double>(s) - 1.0) <= tol,
                std::string(who) + " distribution does not sum to 1");
      }
    };
    check_rows(teacher_dists, "teacher");
    check_rows(student_dists, "student");
  }
};

/// Sum of cross-entropy terms CE(t_i, s_j) over both teacher global views i
/// and every student view j other than the same view: exactly 2(k+1) terms.
/// The gradient flows only into the student distributions; teacher outputs
/// are constants.
template <class T>
inline LossGrad<T> dino_loss_with_grad(const DinoOutputs<T>& out) {
  out.validate();
  const std::size_t nv = out.student_dists.dim(0);
  const std::size_t c = out.student_dists.dim(1);
  LossGrad<T> r;
  r.grad = Tensor<T>({nv, c});
  const T tiny = std::numeric_limits<T>::min();
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < nv; ++j) {
      if (j == i) continue;
      for (std::size_t cc = 0; cc < c; ++cc) {
        T t = out.teacher_dists.at(i, cc);
        T s = std::max(out.student_dists.at(j, cc), tiny);
        r.loss -= t * std::log(s);
        r.grad.at(j, cc) -= t / s;
      }
    }
  }
  return r;
}

template <class T>
inline T dino_loss(const DinoOutputs<T>& out) {
  return dino_loss_with_grad(out).loss;
}

inline std::size_t dino_term_count(std::size_t k) { return 2 * (k + 1); }

/// Same objective taken at the student logits: s_j = softmax(z_j / tau_s).
/// Returns the gradient with respect to the logits.
template <class T>
inline LossGrad<T> dino_loss_from_logits(const Tensor<T>& teacher_dists,
                                         const Tensor<T>& student_logits, T tau_s) {
  require(tau_s > T(0), "student temperature must be positive");
  const std::size_t nv = student_logits.dim(0);
  const std::size_t c = student_logits.dim(1);
  Tensor<T> student_dists({nv, c});
  for (std::size_t j = 0; j < nv; ++j) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t cc = 0; cc < c; ++cc)
      mx = std::max(mx, student_logits.at(j, cc) / tau_s);
    T denom = T(0);
    for (std::size_t cc = 0; cc < c; ++cc)
      denom += std::exp(student_logits.at(j, cc) / tau_s - mx);
    for (std::size_t cc = 0; cc < c; ++cc)
      student_dists.at(j, cc) = std::exp(student_logits.at(j, cc) / tau_s - mx) / denom;
  }
  DinoOutputs<T> out;
  out.teacher_dists = teacher_dists;
  out.student_dists = student_dists;
  out.validate();

  LossGrad<T> r;
  r.grad = Tensor<T>({nv, c});
  const T tiny = std::numeric_limits<T>::min();
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < nv; ++j) {
      if (j == i) continue;
      for (std::size_t cc = 0; cc < c; ++cc) {
        T t = teacher_dists.at(i, cc);
        T s = std::max(student_dists.at(j, cc), tiny);
        r.loss -= t * std::log(s);
        // d/dz of -sum_c t_c log softmax(z/tau)_c  =  (softmax - t)/tau
        r.grad.at(j, cc) += (student_dists.at(j, cc) - t) / tau_s;
      }
    }
  }
  return r;
}

/// Collapse prevention for the teacher side: probabilities are
/// softmax((logits - center) / temperature) per row.
template <class T>
inline Tensor<T> sharpen_and_center(const Tensor<T>& teacher_logits,
                                    const Tensor<T>& center, T temperature) {
  require(temperature > T(0), "teacher temperature must be positive");
  require(teacher_logits.is_finite(), "teacher logits contain non-finite values");
  const std::size_t r = teacher_logits.dim(0), c = teacher_logits.dim(1);
  require(center.numel() == c, "center dimension mismatch");
  Tensor<T> dists({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      mx = std::max(mx, (teacher_logits.at(i, j) - center[j]) / temperature);
    T denom = T(0);
    for (std::size_t j = 0; j < c; ++j)
      denom += std::exp((teacher_logits.at(i, j) - center[j]) / temperature - mx);
    for (std::size_t j = 0; j < c; ++j)
      dists.at(i, j) = std::exp((teacher_logits.at(i, j) - center[j]) / temperature - mx) / denom;
  }
  return dists;
}

/// EMA of batch-mean teacher logits: c' = momentum * c + (1-momentum) * mean.
template <class T>
inline Tensor<T> update_center(const Tensor<T>& center, const Tensor<T>& batch_logits,
                               T momentum) {
  require(momentum >= T(0) && momentum <= T(1), "center momentum must lie in [0,1]");
  require(batch_logits.is_finite(), "teacher logits contain non-finite values");
  const std::size_t r = batch_logits.dim(0), c = batch_logits.dim(1);
  require(center.numel() == c, "center dimension mismatch");
  Tensor<T> out({c});
  for (std::size_t j = 0; j < c; ++j) {
    T mean = T(0);
    for (std::size_t i = 0; i < r; ++i) mean += batch_logits.at(i, j);
    mean /= static_cast<T>(r);
    out[j] = momentum * center[j] + (T(1) - momentum) * mean;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masked-reconstruction loss.

/// Reconstruction P, original Y and the patch mask mapped to pixel space.
/// Only masked pixels enter the loss.
template <class T>
struct MaeTarget {
  Tensor<T> reconstruction;        // [H,W,3]
  Tensor<T> original;              // [H,W,3]
  std::vector<std::size_t> masked_pixels;  // flat pixel indices (row*W+col)

  static MaeTarget from_patch_mask(Tensor<T> reconstruction, Tensor<T> original,
                                   const MaskSpec& mask, std::size_t patch_size) {
    MaeTarget t;
    t.reconstruction = std::move(reconstruction);
    t.original = std::move(original);
    const std::size_t w = t.original.dim(1);
    for (std::size_t pi : mask.masked_indices) {
      const std::size_t py = pi / mask.grid_w, px = pi % mask.grid_w;
      for (std::size_t dy = 0; dy < patch_size; ++dy)
        for (std::size_t dx = 0; dx < patch_size; ++dx)
          t.masked_pixels.push_back((py * patch_size + dy) * w + (px * patch_size + dx));
    }
    return t;
  }

  void validate() const {
    require(reconstruction.same_shape(original),
            "reconstruction/original shape mismatch");
    require(reconstruction.ndim() == 3 && reconstruction.dim(2) == 3,
            "expected [H,W,3] images");
    require(!masked_pixels.empty(), "masked pixel set is empty");
  }
};

/// Mean squared error over the masked pixel-channel entries only
/// (L = 3 * |masked pixels|). Unmasked entries contribute exactly zero: they
/// are never read.
template <class T>
inline LossGrad<T> mae_loss_with_grad(const MaeTarget<T>& target) {
  target.validate();
  const std::size_t L = 3 * target.masked_pixels.size();
  LossGrad<T> r;
  r.grad = Tensor<T>(target.reconstruction.shape);
  const T invL = T(1) / static_cast<T>(L);
  for (std::size_t px : target.masked_pixels) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t off = px * 3 + c;
      T diff = target.reconstruction[off] - target.original[off];
      r.loss += diff * diff * invL;
      r.grad[off] = T(2) * diff * invL;
    }
  }
  return r;
}

template <class T>
inline T mae_loss(const MaeTarget<T>& target) {
  return mae_loss_with_grad(target).loss;
}

// ---------------------------------------------------------------------------
// K-Means pseudolabeler.

struct PseudoLabels {
  std::vector<int> assignments;  // per-sample cluster id in 0..K-1
  int k = 0;
  int epoch_id = 0;
};

template <class T>
struct KMeansResult {
  PseudoLabels labels;
  Tensor<T> centroids;  // [K, D]
  T wcss = T(0);
  int iterations = 0;
};

namespace detail {

template <class T>
inline T sq_dist(const T* a, const T* b, std::size_t d) {
  T s = T(0);
  for (std::size_t j = 0; j < d; ++j) {
    T diff = a[j] - b[j];
    s += diff * diff;
  }
  return s;
}

}  // namespace detail

/// Lloyd's algorithm with distance-weighted seeding, deterministic under
/// `seed`. Empty clusters are re-seeded from the point farthest from its
/// centroid. After Lloyd converges, single-point moves that still lower the
/// within-cluster sum of squares are applied (and Lloyd re-run) until none
/// remain, so the result is locally optimal under both centroid reassignment
/// and individual reassignment.
template <class T>
inline KMeansResult<T> kmeans(const Tensor<T>& features, int k, int max_iters,
                              std::uint64_t seed, int epoch_id = 0) {
  require(features.ndim() == 2, "features must be [N, D]");
  const std::size_t n = features.dim(0), d = features.dim(1);
  require(k >= 1, "cluster count must be >= 1");
  require(n >= static_cast<std::size_t>(k), "need at least K samples");
  require(features.is_finite(), "features contain non-finite values");

  RngStream rng = RngStream::derived(seed, "kmeans", epoch_id);
  Tensor<T> centroids({static_cast<std::size_t>(k), d});

  // Distance-weighted (k-means++-style) seeding.
  std::vector<T> d2(n, std::numeric_limits<T>::max());
  std::size_t first = static_cast<std::size_t>(rng.uniform_index(n));
  for (std::size_t j = 0; j < d; ++j) centroids.at(0, j) = features.at(first, j);
  for (int c = 1; c < k; ++c) {
    T total = T(0);
    for (std::size_t i = 0; i < n; ++i) {
      T dd = detail::sq_dist(&features.data[i * d], &centroids.data[(c - 1) * d], d);
      d2[i] = std::min(d2[i], dd);
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > T(0)) {
      T u = static_cast<T>(rng.uniform()) * total;
      T acc = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= u) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(rng.uniform_index(n));
    }
    for (std::size_t j = 0; j < d; ++j) centroids.at(c, j) = features.at(pick, j);
  }

  std::vector<int> assign(n, -1);
  std::vector<std::size_t> sizes(k, 0);
  auto assign_all = [&]() {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      T bd = detail::sq_dist(&features.data[i * d], &centroids.data[0], d);
      for (int c = 1; c < k; ++c) {
        T dd = detail::sq_dist(&features.data[i * d], &centroids.data[c * d], d);
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    return changed;
  };
  auto update_centroids = [&]() {
    centroids.set_zero();
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++sizes[assign[i]];
      for (std::size_t j = 0; j < d; ++j) centroids.at(assign[i], j) += features.at(i, j);
    }
    for (int c = 0; c < k; ++c)
      if (sizes[c] > 0)
        for (std::size_t j = 0; j < d; ++j)
          centroids.at(c, j) /= static_cast<T>(sizes[c]);
    // Re-seed empty clusters from the farthest point in a cluster of size >= 2.
    for (int c = 0; c < k; ++c) {
      if (sizes[c] > 0) continue;
      std::size_t far = SIZE_MAX;
      T far_d = T(-1);
      for (std::size_t i = 0; i < n; ++i) {
        if (sizes[assign[i]] < 2) continue;
        T dd = detail::sq_dist(&features.data[i * d], &centroids.data[assign[i] * d], d);
        if (dd > far_d) {
          far_d = dd;
          far = i;
        }
      }
      if (far == SIZE_MAX) continue;
      --sizes[assign[far]];
      assign[far] = c;
      sizes[c] = 1;
      for (std::size_t j = 0; j < d; ++j) centroids.at(c, j) = features.at(far, j);
    }
  };

  KMeansResult<T> res;
  int iter = 0;
  for (; iter < max_iters; ++iter) {
    bool changed = assign_all();
    update_centroids();
    if (!changed && iter > 0) break;
  }

  // Single-point polishing: Lloyd fixed points are not necessarily stable
  // under one-point moves once centroid recomputation is taken into account.
  bool moved = true;
  int guard = 0;
  while (moved && guard++ < 16 * max_iters) {
    moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      int a = assign[i];
      if (sizes[a] <= 1) continue;
      T da = detail::sq_dist(&features.data[i * d], &centroids.data[a * d], d);
      T na = static_cast<T>(sizes[a]);
      T removal_gain = da * na / (na - T(1));
      int best_b = -1;
      T best_delta = T(-1e-12);
      for (int b = 0; b < k; ++b) {
        if (b == a) continue;
        T db = detail::sq_dist(&features.data[i * d], &centroids.data[b * d], d);
        T nb = static_cast<T>(sizes[b]);
        T delta = db * nb / (nb + T(1)) - removal_gain;
        if (delta < best_delta) {
          best_delta = delta;
          best_b = b;
        }
      }
      if (best_b >= 0) {
        assign[i] = best_b;
        update_centroids();
        moved = true;
      }
    }
    if (moved) {
      // Restore Lloyd stability before scanning again.
      for (int it2 = 0; it2 < max_iters; ++it2) {
        if (!assign_all()) break;
        update_centroids();
      }
    }
  }

  res.centroids = centroids;
  res.labels.assignments = assign;
  res.labels.k = k;
  res.labels.epoch_id = epoch_id;
  res.iterations = iter;
  for (std::size_t i = 0; i < n; ++i)
    res.wcss += detail::sq_dist(&features.data[i * d], &centroids.data[assign[i] * d], d);
  return res;
}

// ---------------------------------------------------------------------------
// Pseudolabel classification loss (softmax cross entropy).

/// -log softmax(logits)[assigned cluster], averaged over the batch.
/// `onehot` rows must contain exactly one 1 and zeros elsewhere.
template <class T>
inline LossGrad<T> deepcluster_loss_with_grad(const Tensor<T>& onehot,
                                              const Tensor<T>& logits) {
  require(onehot.ndim() == 2 && logits.ndim() == 2, "expected [N, K] arrays");
  require(onehot.same_shape(logits), "pseudolabel/logit shape mismatch");
  require(logits.is_finite(), "logits contain non-finite values");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  LossGrad<T> r;
  r.grad = Tensor<T>({n, k});
  const T invn = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t target = k;
    for (std::size_t j = 0; j < k; ++j) {
      T y = onehot.at(i, j);
      require(y == T(0) || y == T(1), "pseudolabel vector is not one-hot");
      if (y == T(1)) {
        require(target == k, "pseudolabel vector has multiple ones");
        target = j;
      }
    }
    require(target < k, "pseudolabel vector has no assigned cluster");
    T mx = logits.at(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits.at(i, j));
    T denom = T(0);
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(logits.at(i, j) - mx);
    r.loss += (std::log(denom) + mx - logits.at(i, target)) * invn;
    for (std::size_t j = 0; j < k; ++j) {
      T soft = std::exp(logits.at(i, j) - mx) / denom;
      r.grad.at(i, j) = (soft - (j == target ? T(1) : T(0))) * invn;
    }
  }
  return r;
}

template <class T>
inline T deepcluster_loss(const Tensor<T>& onehot, const Tensor<T>& logits) {
  return deepcluster_loss_with_grad(onehot, logits).loss;
}

template <class T>
inline Tensor<T> onehot_from_labels(const std::vector<int>& labels, std::size_t k) {
  Tensor<T> out({labels.size(), k});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < k,
            "label out of range");
    out.at(i, static_cast<std::size_t>(labels[i])) = T(1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mixed multitask combination.

struct MixedWeights {
  double w_supervised = 0.45;
  double w_ssl = 0.55;

  void validate() const {
    require(w_supervised >= 0.0 && w_ssl >= 0.0, "mixed weights must be non-negative");
    require(w_supervised + w_ssl > 0.0, "mixed weights must not both be zero");
  }
};

/// Exact weighted sum of the two loss terms; the combined gradient is the
/// identically weighted sum of the component gradients.
template <class T>
inline T mixed_loss(T l_supervised, T l_ssl, const MixedWeights& w) {
  w.validate();
  require(std::isfinite(static_cast<double>(l_supervised)) &&
              std::isfinite(static_cast<double>(l_ssl)),
          "mixed loss inputs must be finite");
  return static_cast<T>(w.w_supervised) * l_supervised + static_cast<T>(w.w_ssl) * l_ssl;
}

}  // namespace sslwb
