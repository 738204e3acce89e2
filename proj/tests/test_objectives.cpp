#include "sslwb/objectives.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace sslwb;
using sslwb::test::finite_difference_grad;
using sslwb::test::max_rel_error;
using sslwb::test::random_tensor;

namespace {

SimCLRBatchRepr<double> two_image_geometry() {
  // rows 0,1 = views of image 0 at (1,0); rows 2,3 = views of image 1 at (0,1).
  // Anchor-positive cosine 1, anchor-negative cosines 0.
  SimCLRBatchRepr<double> r;
  r.projections = Tensor<double>({4, 2});
  r.projections.at(0, 0) = 1.0;
  r.projections.at(1, 0) = 1.0;
  r.projections.at(2, 1) = 1.0;
  r.projections.at(3, 1) = 1.0;
  return r;
}

}  // namespace

TEST(NtXent, ClosedFormTwoImageCase) {
  // Direct evaluation of the per-anchor term: -log(e / (e + 2)).
  const double expected = std::log((std::exp(1.0) + 2.0) / std::exp(1.0));
  EXPECT_NEAR(expected, 0.55144, 1e-5);
  double loss = nt_xent(two_image_geometry(), Temperature(1.0));
  EXPECT_NEAR(loss, expected, 1e-6);
}

TEST(NtXent, AllEqualCosinesGiveLogThree) {
  // Every row identical: every pairwise cosine is 1, softmax over the 2B-1
  // non-self entries is uniform, so the loss is log(2B-1).
  SimCLRBatchRepr<double> r;
  r.projections = Tensor<double>({4, 3});
  for (std::size_t i = 0; i < 4; ++i) {
    r.projections.at(i, 0) = 0.3;
    r.projections.at(i, 1) = -1.2;
    r.projections.at(i, 2) = 0.5;
  }
  EXPECT_NEAR(nt_xent(r, Temperature(1.0)), std::log(3.0), 1e-6);
  EXPECT_NEAR(std::log(3.0), 1.09861, 1e-5);
}

TEST(NtXent, SharperTemperature) {
  // Direct evaluation of -log(e^2/(e^2+2)); equals 0.2395448 to 7 digits.
  const double expected = std::log1p(2.0 * std::exp(-2.0));
  EXPECT_NEAR(expected, 0.2395, 1e-4);
  EXPECT_NEAR(nt_xent(two_image_geometry(), Temperature(0.5)), expected, 1e-6);
}

TEST(NtXent, ScaleInvariance) {
  RngStream rng(11);
  SimCLRBatchRepr<double> r;
  r.projections = random_tensor({6, 5}, rng);
  double base = nt_xent(r, Temperature(0.2));
  for (double s : {0.12, 3.0, 250.0}) {
    SimCLRBatchRepr<double> scaled = r;
    for (auto& v : scaled.projections.data) v *= s;
    EXPECT_NEAR(nt_xent(scaled, Temperature(0.2)), base, 1e-10);
  }
}

TEST(NtXent, PermutationEquivariance) {
  RngStream rng(12);
  SimCLRBatchRepr<double> r;
  r.projections = random_tensor({8, 4}, rng);
  double base = nt_xent(r, Temperature(0.3));
  // swap image 0 and image 2 (keeping each view pair adjacent)
  SimCLRBatchRepr<double> p = r;
  for (std::size_t j = 0; j < 4; ++j) {
    std::swap(p.projections.at(0, j), p.projections.at(4, j));
    std::swap(p.projections.at(1, j), p.projections.at(5, j));
  }
  EXPECT_NEAR(nt_xent(p, Temperature(0.3)), base, 1e-12);
}

TEST(NtXent, RejectsDegenerateInputs) {
  SimCLRBatchRepr<double> tiny;
  tiny.projections = Tensor<double>({2, 3}, 1.0);
  EXPECT_THROW(nt_xent(tiny, Temperature(1.0)), ValidationError);

  SimCLRBatchRepr<double> zero_row = two_image_geometry();
  zero_row.projections.at(3, 1) = 0.0;
  EXPECT_THROW(nt_xent(zero_row, Temperature(1.0)), ValidationError);

  EXPECT_THROW(Temperature(0.0), ValidationError);
  EXPECT_THROW(Temperature(-1.0), ValidationError);
}

TEST(NtXent, GradientMatchesFiniteDifferences) {
  RngStream rng(101);
  for (int trial = 0; trial < 24; ++trial) {
    std::size_t b = 2 + trial % 3;
    std::size_t d = 3 + trial % 5;
    double tau = 0.1 + 0.45 * (trial % 4);
    Tensor<double> z = random_tensor({2 * b, d}, rng);
    auto lg = nt_xent_with_grad(SimCLRBatchRepr<double>{z}, Temperature(tau));
    auto fd = finite_difference_grad(
        [tau](Tensor<double>& x) {
          return nt_xent(SimCLRBatchRepr<double>{x}, Temperature(tau));
        },
        z);
    EXPECT_LT(max_rel_error(lg.grad, fd), 1e-4) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------

TEST(DinoLoss, PerfectAgreementIsZero) {
  DinoOutputs<double> out;
  out.teacher_dists = Tensor<double>({2, 4});
  out.student_dists = Tensor<double>({4, 4});
  out.teacher_dists.at(0, 2) = 1.0;
  out.teacher_dists.at(1, 2) = 1.0;
  for (std::size_t j = 0; j < 4; ++j) out.student_dists.at(j, 2) = 1.0;
  EXPECT_NEAR(dino_loss(out), 0.0, 1e-12);
}

TEST(DinoLoss, UniformGlobalsOnly) {
  // k = 0: exactly 2(k+1) = 2 cross-entropy terms of log 4 each.
  DinoOutputs<double> out;
  out.teacher_dists = Tensor<double>({2, 4}, 0.25);
  out.student_dists = Tensor<double>({2, 4}, 0.25);
  const double expected = 2.0 * std::log(4.0);
  EXPECT_NEAR(expected, 2.77259, 1e-5);
  EXPECT_NEAR(dino_loss(out), expected, 1e-6);
}

TEST(DinoLoss, TermCountMatchesViewSet) {
  EXPECT_EQ(dino_term_count(0), 2u);
  EXPECT_EQ(dino_term_count(4), 10u);
  // uniform distributions make every term log C, so the count is observable
  for (std::size_t k : {0u, 1u, 4u}) {
    DinoOutputs<double> out;
    out.teacher_dists = Tensor<double>({2, 5}, 0.2);
    out.student_dists = Tensor<double>({2 + k, 5}, 0.2);
    EXPECT_NEAR(dino_loss(out), static_cast<double>(dino_term_count(k)) * std::log(5.0),
                1e-9);
  }
}

TEST(DinoLoss, IndependentOracleOnRandomDistributions) {
  RngStream rng(55);
  for (int trial = 0; trial < 10; ++trial) {
    std::size_t k = trial % 3, c = 3 + trial % 4;
    auto softmax_rows = [&rng](std::size_t rows, std::size_t cols) {
      Tensor<double> t({rows, cols});
      for (std::size_t i = 0; i < rows; ++i) {
        double denom = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          t.at(i, j) = std::exp(rng.normal());
          denom += t.at(i, j);
        }
        for (std::size_t j = 0; j < cols; ++j) t.at(i, j) /= denom;
      }
      return t;
    };
    DinoOutputs<double> out;
    out.teacher_dists = softmax_rows(2, c);
    out.student_dists = softmax_rows(2 + k, c);
    // straightforward sum over the paired views
    double expected = 0.0;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2 + k; ++j) {
        if (j == i) continue;
        for (std::size_t cc = 0; cc < c; ++cc)
          expected -= out.teacher_dists.at(i, cc) * std::log(out.student_dists.at(j, cc));
      }
    EXPECT_NEAR(dino_loss(out), expected, 1e-10);
  }
}

TEST(DinoLoss, GradientFlowsOnlyIntoStudent) {
  DinoOutputs<double> out;
  out.teacher_dists = Tensor<double>({2, 4}, 0.25);
  out.student_dists = Tensor<double>({3, 4}, 0.25);
  auto lg = dino_loss_with_grad(out);
  // the gradient container covers exactly the student distributions
  EXPECT_EQ(lg.grad.shape, out.student_dists.shape);
}

TEST(DinoLoss, LogitGradientMatchesFiniteDifferences) {
  RngStream rng(56);
  for (int trial = 0; trial < 22; ++trial) {
    std::size_t k = trial % 3, c = 3 + trial % 3;
    double tau_s = 0.2 + 0.2 * (trial % 3);
    Tensor<double> tdists({2, c});
    for (std::size_t i = 0; i < 2; ++i) {
      double denom = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        tdists.at(i, j) = std::exp(rng.normal());
        denom += tdists.at(i, j);
      }
      for (std::size_t j = 0; j < c; ++j) tdists.at(i, j) /= denom;
    }
    Tensor<double> logits = random_tensor({2 + k, c}, rng);
    auto lg = dino_loss_from_logits(tdists, logits, tau_s);
    auto fd = finite_difference_grad(
        [&tdists, tau_s](Tensor<double>& z) {
          return dino_loss_from_logits(tdists, z, tau_s).loss;
        },
        logits);
    EXPECT_LT(max_rel_error(lg.grad, fd), 1e-4) << "trial " << trial;
  }
}

TEST(DinoLoss, RejectsMalformedDistributions) {
  DinoOutputs<double> out;
  out.teacher_dists = Tensor<double>({2, 4}, 0.25);
  out.student_dists = Tensor<double>({2, 4}, 0.3);  // rows sum to 1.2
  EXPECT_THROW(dino_loss(out), ValidationError);
  out.student_dists = Tensor<double>({2, 4}, 0.25);
  out.student_dists.at(0, 0) = -0.25;
  out.student_dists.at(0, 1) = 0.75;
  EXPECT_THROW(dino_loss(out), ValidationError);
}

TEST(SharpenAndCenter, MeanCenteredSoftmax) {
  Tensor<double> logits({2, 3});
  logits.at(0, 0) = 1.0;
  logits.at(0, 1) = 2.0;
  logits.at(0, 2) = 3.0;
  logits.at(1, 0) = -1.0;
  logits.at(1, 1) = 0.0;
  logits.at(1, 2) = 1.0;
  Tensor<double> center({3});
  center[0] = 0.0;
  center[1] = 1.0;
  center[2] = 2.0;  // the column means
  Tensor<double> dists = sharpen_and_center(logits, center, 1.0);
  for (std::size_t i = 0; i < 2; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 3; ++j) sum += dists.at(i, j);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  // centered logits per row are (1,1,1) and (-1,-1,-1): uniform outputs
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(dists.at(i, j), 1.0 / 3.0, 1e-12);
}

TEST(SharpenAndCenter, SmallTemperatureApproachesOneHot) {
  Tensor<double> logits({1, 3});
  logits.at(0, 0) = 0.5;
  logits.at(0, 1) = 0.9;
  logits.at(0, 2) = 0.2;
  Tensor<double> center({3});
  Tensor<double> dists = sharpen_and_center(logits, center, 1e-3);
  EXPECT_GT(dists.at(0, 1), 0.999);
}

TEST(SharpenAndCenter, CenterMomentumOneFreezesCenter) {
  Tensor<double> center({3});
  center[0] = 0.4;
  center[1] = -0.2;
  center[2] = 1.0;
  Tensor<double> logits({5, 3}, 2.0);
  Tensor<double> updated = update_center(center, logits, 1.0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(updated[j], center[j]);
  // momentum 0 jumps straight to the batch mean
  Tensor<double> jump = update_center(center, logits, 0.0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(jump[j], 2.0, 1e-12);
}

// ---------------------------------------------------------------------------

TEST(MaeLoss, PerfectReconstructionIsZero) {
  RngStream rng(7);
  Tensor<double> y = random_tensor({4, 4, 3}, rng);
  MaskSpec mask = make_mask(2, 2, 0.5, RngStream(3));
  auto target = MaeTarget<double>::from_patch_mask(y, y, mask, 2);
  EXPECT_EQ(mae_loss(target), 0.0);
}

TEST(MaeLoss, UnitErrorFullyMasked) {
  // 2x2 image fully masked, P - Y = 1 everywhere: mean of twelve 1^2 terms.
  Tensor<double> y({2, 2, 3}, 0.25);
  Tensor<double> p({2, 2, 3}, 1.25);
  MaskSpec mask = make_mask(1, 1, 1.0, RngStream(0));
  auto target = MaeTarget<double>::from_patch_mask(p, y, mask, 2);
  EXPECT_EQ(target.masked_pixels.size(), 4u);
  EXPECT_NEAR(mae_loss(target), 1.0, 1e-12);
}

TEST(MaeLoss, UnmaskedEntriesNeverContribute) {
  RngStream rng(8);
  Tensor<double> y = random_tensor({8, 8, 3}, rng);
  Tensor<double> p = random_tensor({8, 8, 3}, rng);
  MaskSpec mask = make_mask(4, 4, 0.5, RngStream(9));
  auto target = MaeTarget<double>::from_patch_mask(p, y, mask, 2);
  const double base = mae_loss(target);
  std::vector<bool> masked_px(64, false);
  for (std::size_t px : target.masked_pixels) masked_px[px] = true;
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t px = static_cast<std::size_t>(rng.uniform_index(64));
    if (masked_px[px]) continue;
    auto fuzzed = target;
    fuzzed.reconstruction[px * 3 + rng.uniform_index(3)] += rng.normal() * 100.0;
    EXPECT_EQ(mae_loss(fuzzed), base);  // exact equality demanded
  }
}

TEST(MaeLoss, RejectsEmptyMaskAndShapeMismatch) {
  Tensor<double> y({4, 4, 3}, 0.0);
  MaeTarget<double> t;
  t.reconstruction = y;
  t.original = y;
  EXPECT_THROW(mae_loss(t), ValidationError);
  auto ok = MaeTarget<double>::from_patch_mask(y, y, make_mask(2, 2, 1.0, RngStream(1)), 2);
  ok.original = Tensor<double>({2, 2, 3}, 0.0);
  EXPECT_THROW(mae_loss(ok), ValidationError);
}

TEST(MaeLoss, GradientMatchesFiniteDifferences) {
  RngStream rng(81);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t g = 2 + trial % 2;
    Tensor<double> y = random_tensor({g * 2, g * 2, 3}, rng);
    Tensor<double> p = random_tensor({g * 2, g * 2, 3}, rng);
    MaskSpec mask = make_mask(g, g, 0.5 + 0.25 * (trial % 2),
                              RngStream(static_cast<std::uint64_t>(trial)));
    auto target = MaeTarget<double>::from_patch_mask(p, y, mask, 2);
    auto lg = mae_loss_with_grad(target);
    auto fd = finite_difference_grad(
        [&](Tensor<double>& x) {
          auto t2 = target;
          t2.reconstruction = x;
          return mae_loss(t2);
        },
        target.reconstruction);
    EXPECT_LT(max_rel_error(lg.grad, fd), 1e-4) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------

namespace {

double brute_force_wcss(const Tensor<double>& pts, const std::vector<int>& assign,
                        int k) {
  const std::size_t n = pts.dim(0), d = pts.dim(1);
  double total = 0.0;
  for (int c = 0; c < k; ++c) {
    std::vector<double> mean(d, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (assign[i] == c) {
        ++count;
        for (std::size_t j = 0; j < d; ++j) mean[j] += pts.at(i, j);
      }
    if (count == 0) continue;
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(count);
    for (std::size_t i = 0; i < n; ++i)
      if (assign[i] == c)
        for (std::size_t j = 0; j < d; ++j) {
          double diff = pts.at(i, j) - mean[j];
          total += diff * diff;
        }
  }
  return total;
}

double brute_force_best_wcss(const Tensor<double>& pts, int k) {
  const std::size_t n = pts.dim(0);
  double best = std::numeric_limits<double>::max();
  std::vector<int> assign(n, 0);
  std::size_t combos = 1;
  for (std::size_t i = 0; i < n; ++i) combos *= static_cast<std::size_t>(k);
  for (std::size_t code = 0; code < combos; ++code) {
    std::size_t c = code;
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = static_cast<int>(c % static_cast<std::size_t>(k));
      c /= static_cast<std::size_t>(k);
    }
    best = std::min(best, brute_force_wcss(pts, assign, k));
  }
  return best;
}

}  // namespace

TEST(KMeans, FourPointGlobalOptimum) {
  Tensor<double> pts({4, 1});
  pts.at(0, 0) = 0.0;
  pts.at(1, 0) = 0.1;
  pts.at(2, 0) = 10.0;
  pts.at(3, 0) = 10.1;
  auto res = kmeans(pts, 2, 50, 17);
  EXPECT_EQ(res.labels.assignments[0], res.labels.assignments[1]);
  EXPECT_EQ(res.labels.assignments[2], res.labels.assignments[3]);
  EXPECT_NE(res.labels.assignments[0], res.labels.assignments[2]);
  std::vector<double> cents{res.centroids.at(0, 0), res.centroids.at(1, 0)};
  std::sort(cents.begin(), cents.end());
  EXPECT_NEAR(cents[0], 0.05, 1e-12);
  EXPECT_NEAR(cents[1], 10.05, 1e-12);
  EXPECT_NEAR(res.wcss, brute_force_best_wcss(pts, 2), 1e-12);
}

TEST(KMeans, EachPointItsOwnClusterWhenKEqualsN) {
  RngStream rng(31);
  Tensor<double> pts = random_tensor({5, 2}, rng);
  auto res = kmeans(pts, 5, 50, 3);
  std::set<int> distinct(res.labels.assignments.begin(), res.labels.assignments.end());
  EXPECT_EQ(distinct.size(), 5u);
  EXPECT_NEAR(res.wcss, 0.0, 1e-18);
}

TEST(KMeans, SingleClusterIsGlobalMean) {
  RngStream rng(32);
  Tensor<double> pts = random_tensor({7, 3}, rng);
  auto res = kmeans(pts, 1, 10, 5);
  for (std::size_t j = 0; j < 3; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 7; ++i) mean += pts.at(i, j);
    mean /= 7.0;
    EXPECT_NEAR(res.centroids.at(0, j), mean, 1e-12);
  }
}

TEST(KMeans, RejectsBadInputs) {
  Tensor<double> pts({2, 2}, 1.0);
  EXPECT_THROW(kmeans(pts, 3, 10, 0), ValidationError);
  pts.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(kmeans(pts, 2, 10, 0), ValidationError);
}

TEST(KMeans, LocalOptimumCertificate) {
  // No single-point move (with centroids recomputed) may lower the WCSS.
  RngStream rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 4 + static_cast<std::size_t>(rng.uniform_index(7));  // 4..10
    std::size_t d = 1 + static_cast<std::size_t>(rng.uniform_index(2));
    int k = 2 + static_cast<int>(rng.uniform_index(2));
    if (n < static_cast<std::size_t>(k)) continue;
    Tensor<double> pts = random_tensor({n, d}, rng);
    auto res = kmeans(pts, k, 100, static_cast<std::uint64_t>(trial));
    const double base = brute_force_wcss(pts, res.labels.assignments, k);
    EXPECT_NEAR(base, static_cast<double>(res.wcss), 1e-9);
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < k; ++c) {
        if (c == res.labels.assignments[i]) continue;
        std::vector<int> moved = res.labels.assignments;
        // skip moves that would empty a cluster (not a valid K-clustering)
        int from = moved[i];
        if (std::count(moved.begin(), moved.end(), from) <= 1) continue;
        moved[i] = c;
        EXPECT_GE(brute_force_wcss(pts, moved, k), base - 1e-9)
            << "trial " << trial << " point " << i << " -> " << c;
      }
    }
  }
}

// ---------------------------------------------------------------------------

TEST(DeepClusterLoss, UniformLogitsGiveLogK) {
  Tensor<double> onehot({1, 3});
  onehot.at(0, 1) = 1.0;
  Tensor<double> logits({1, 3}, 0.77);
  EXPECT_NEAR(deepcluster_loss(onehot, logits), std::log(3.0), 1e-12);
}

TEST(DeepClusterLoss, TwoClassClosedForm) {
  Tensor<double> onehot({1, 2});
  onehot.at(0, 0) = 1.0;
  Tensor<double> logits({1, 2});
  logits.at(0, 0) = 2.0;
  logits.at(0, 1) = 0.0;
  const double expected = std::log1p(std::exp(-2.0));  // -log(e^2/(e^2+1))
  EXPECT_NEAR(expected, 0.12693, 1e-5);
  EXPECT_NEAR(deepcluster_loss(onehot, logits), expected, 1e-6);
}

TEST(DeepClusterLoss, LargeMarginDrivesLossToZero) {
  Tensor<double> onehot({1, 4});
  onehot.at(0, 2) = 1.0;
  Tensor<double> logits({1, 4}, 0.0);
  logits.at(0, 2) = 60.0;
  EXPECT_LT(deepcluster_loss(onehot, logits), 1e-12);
}

TEST(DeepClusterLoss, MatchesLogSumExpReference) {
  RngStream rng(44);
  for (int trial = 0; trial < 30; ++trial) {
    std::size_t n = 1 + trial % 4, k = 2 + trial % 5;
    Tensor<double> logits = random_tensor({n, k}, rng, 3.0);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i)
      labels[i] = static_cast<int>(rng.uniform_index(k));
    Tensor<double> onehot = onehot_from_labels<double>(labels, k);
    // independent evaluation in extended precision, no max-shift
    long double expected = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
      long double denom = 0.0L;
      for (std::size_t j = 0; j < k; ++j) denom += expl(static_cast<long double>(logits.at(i, j)));
      expected -= logl(expl(static_cast<long double>(logits.at(i, labels[i]))) / denom);
    }
    expected /= static_cast<long double>(n);
    EXPECT_NEAR(deepcluster_loss(onehot, logits), static_cast<double>(expected), 1e-10);
  }
}

TEST(DeepClusterLoss, RejectsNonOneHotLabels) {
  Tensor<double> logits({1, 3}, 0.0);
  Tensor<double> bad({1, 3}, 0.0);
  EXPECT_THROW(deepcluster_loss(bad, logits), ValidationError);  // no one
  bad.at(0, 0) = 1.0;
  bad.at(0, 1) = 1.0;
  EXPECT_THROW(deepcluster_loss(bad, logits), ValidationError);  // two ones
  bad.at(0, 1) = 0.5;
  EXPECT_THROW(deepcluster_loss(bad, logits), ValidationError);  // fractional
}

TEST(DeepClusterLoss, GradientMatchesFiniteDifferences) {
  RngStream rng(45);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t n = 1 + trial % 3, k = 2 + trial % 4;
    Tensor<double> logits = random_tensor({n, k}, rng, 2.0);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i)
      labels[i] = static_cast<int>(rng.uniform_index(k));
    Tensor<double> onehot = onehot_from_labels<double>(labels, k);
    auto lg = deepcluster_loss_with_grad(onehot, logits);
    auto fd = finite_difference_grad(
        [&onehot](Tensor<double>& z) { return deepcluster_loss(onehot, z); }, logits);
    EXPECT_LT(max_rel_error(lg.grad, fd), 1e-4) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------

TEST(MixedLoss, PaperWeights) {
  MixedWeights w{0.45, 0.55};
  EXPECT_NEAR(mixed_loss(1.0, 2.0, w), 1.55, 1e-6);
}

TEST(MixedLoss, ExactWeightedSum) {
  RngStream rng(66);
  for (int trial = 0; trial < 100; ++trial) {
    MixedWeights w{rng.uniform(), rng.uniform() + 1e-3};
    double ls = rng.normal() * 3.0, lssl = rng.normal() * 3.0;
    double expected = w.w_supervised * ls + w.w_ssl * lssl;
    EXPECT_EQ(mixed_loss(ls, lssl, w), expected);  // exact at double precision
  }
}

TEST(MixedLoss, DegenerateWeights) {
  MixedWeights off_ssl{1.0, 0.0};
  EXPECT_EQ(mixed_loss(3.25, 99.0, off_ssl), 3.25);
  MixedWeights half{0.5, 0.5};
  EXPECT_NEAR(mixed_loss(2.5, 2.5, half), 2.5, 1e-15);
}

TEST(MixedLoss, RejectsBadInputs) {
  EXPECT_THROW(mixed_loss(1.0, 1.0, MixedWeights{-0.1, 0.5}), ValidationError);
  EXPECT_THROW(mixed_loss(1.0, 1.0, MixedWeights{0.0, 0.0}), ValidationError);
  EXPECT_THROW(
      mixed_loss(std::numeric_limits<double>::infinity(), 1.0, MixedWeights{0.5, 0.5}),
      ValidationError);
}
