#include "sslwb/dataset.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "sslwb/synthetic.hpp"
#include "test_util.hpp"

using namespace sslwb;

namespace {

DatasetManifest manifest_with_counts(const std::vector<std::size_t>& counts) {
  DatasetManifest m;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    ClassSpec cs;
    cs.class_id = static_cast<int>(c + 1);
    cs.name = "class_" + std::to_string(c + 1);
    cs.expected_count = counts[c];
    m.classes.push_back(cs);
    for (std::size_t i = 0; i < counts[c]; ++i) {
      ImageRecord r;
      r.path = "images/c" + std::to_string(c + 1) + "/" + std::to_string(i) + ".ppm";
      r.class_id = static_cast<int>(c + 1);
      r.width = 32;
      r.height = 32;
      m.records.push_back(r);
    }
  }
  return m;
}

std::map<Split, std::size_t> split_totals(const DatasetManifest& m) {
  std::map<Split, std::size_t> totals;
  for (const auto& r : m.records) ++totals[r.split];
  return totals;
}

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("sslwb_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(SplitDataset, ReferenceProfileYieldsExactGlobalCounts) {
  // The 23-class reference profile totals 25000 records; 70/15/15 must come
  // out exactly 17500/3750/3750.
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  for (const auto& c : reference_class_profile()) {
    counts.push_back(c.expected_count);
    total += c.expected_count;
  }
  ASSERT_EQ(total, 25000u);
  DatasetManifest m = manifest_with_counts(counts);
  DatasetManifest out = split_dataset(m, SplitRatios{0.70, 0.15, 0.15}, 42);
  auto totals = split_totals(out);
  EXPECT_EQ(totals[Split::train], 17500u);
  EXPECT_EQ(totals[Split::val], 3750u);
  EXPECT_EQ(totals[Split::test], 3750u);
  EXPECT_EQ(totals[Split::unassigned], 0u);
}

TEST(SplitDataset, DegenerateAllTrain) {
  DatasetManifest m = manifest_with_counts({10});
  DatasetManifest out = split_dataset(m, SplitRatios{1.0, 0.0, 0.0}, 1);
  auto totals = split_totals(out);
  EXPECT_EQ(totals[Split::train], 10u);
  EXPECT_EQ(totals[Split::val], 0u);
  EXPECT_EQ(totals[Split::test], 0u);
}

TEST(SplitDataset, SevenRecordsFloorPlusRemainderToTrain) {
  DatasetManifest m = manifest_with_counts({7});
  DatasetManifest out = split_dataset(m, SplitRatios{0.70, 0.15, 0.15}, 5);
  auto totals = split_totals(out);
  EXPECT_EQ(totals[Split::train], 5u);
  EXPECT_EQ(totals[Split::val], 1u);
  EXPECT_EQ(totals[Split::test], 1u);
}

TEST(SplitDataset, PartitionAndStratificationProperties) {
  RngStream rng(2024);
  for (int trial = 0; trial < 12; ++trial) {
    std::vector<std::size_t> counts;
    std::size_t n_classes = 2 + rng.uniform_index(6);
    for (std::size_t c = 0; c < n_classes; ++c)
      counts.push_back(1 + rng.uniform_index(200));
    DatasetManifest m = manifest_with_counts(counts);
    SplitRatios ratios{0.7, 0.15, 0.15};
    DatasetManifest out = split_dataset(m, ratios, 1000 + trial);

    // partition: every record assigned exactly once, union is the input set
    ASSERT_EQ(out.records.size(), m.records.size());
    auto totals = split_totals(out);
    EXPECT_EQ(totals[Split::unassigned], 0u);
    EXPECT_EQ(totals[Split::train] + totals[Split::val] + totals[Split::test],
              m.records.size());

    // stratification: every class with >= 7 records stays within one record
    // of its exact share per split
    std::map<int, std::map<Split, std::size_t>> by_class;
    for (const auto& r : out.records) ++by_class[r.class_id][r.split];
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] < 7) continue;
      auto& bc = by_class[static_cast<int>(c + 1)];
      EXPECT_LE(std::fabs(static_cast<double>(bc[Split::val]) -
                          ratios.val * static_cast<double>(counts[c])),
                1.0);
      EXPECT_LE(std::fabs(static_cast<double>(bc[Split::test]) -
                          ratios.test * static_cast<double>(counts[c])),
                1.0);
      EXPECT_LE(std::fabs(static_cast<double>(bc[Split::train]) -
                          ratios.train * static_cast<double>(counts[c])),
                1.0 + 1.0);  // train absorbs both remainders
    }
  }
}

TEST(SplitDataset, DeterministicGivenSeed) {
  DatasetManifest m = manifest_with_counts({31, 17, 4});
  DatasetManifest a = split_dataset(m, SplitRatios{0.7, 0.15, 0.15}, 9);
  DatasetManifest b = split_dataset(m, SplitRatios{0.7, 0.15, 0.15}, 9);
  DatasetManifest c = split_dataset(m, SplitRatios{0.7, 0.15, 0.15}, 10);
  bool same = true, diff = false;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    same &= a.records[i].split == b.records[i].split;
    diff |= a.records[i].split != c.records[i].split;
  }
  EXPECT_TRUE(same);
  EXPECT_TRUE(diff);  // overwhelmingly likely for 52 records
}

TEST(SplitDataset, RejectsBadInputs) {
  DatasetManifest empty;
  EXPECT_THROW(split_dataset(empty, SplitRatios{0.7, 0.15, 0.15}, 0), ValidationError);
  DatasetManifest m = manifest_with_counts({5});
  EXPECT_THROW(split_dataset(m, SplitRatios{0.5, 0.2, 0.2}, 0), ValidationError);
  EXPECT_THROW(split_dataset(m, SplitRatios{1.2, -0.1, -0.1}, 0), ValidationError);
  DatasetManifest pre = split_dataset(m, SplitRatios{0.7, 0.15, 0.15}, 0);
  EXPECT_THROW(split_dataset(pre, SplitRatios{0.7, 0.15, 0.15}, 0), ValidationError);
  EXPECT_NO_THROW(split_dataset(pre, SplitRatios{0.7, 0.15, 0.15}, 0, true));
}

TEST(ClassStatistics, ReferenceProfileImbalance) {
  std::vector<std::size_t> counts;
  for (const auto& c : reference_class_profile()) counts.push_back(c.expected_count);
  DatasetManifest m = manifest_with_counts(counts);
  ClassStats stats = class_statistics(m);
  EXPECT_EQ(stats.total_records, 25000u);
  EXPECT_NEAR(stats.imbalance_ratio, 4381.0 / 69.0, 1e-12);
  EXPECT_NEAR(stats.imbalance_ratio, 63.49, 0.01);
}

TEST(ClassStatistics, UniformTwoClassRatioIsOne) {
  DatasetManifest m = manifest_with_counts({12, 12});
  ClassStats stats = class_statistics(m);
  EXPECT_EQ(stats.imbalance_ratio, 1.0);
}

TEST(ClassStatistics, CountsSumToRecordTotal) {
  RngStream rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> counts;
    for (int c = 0; c < 4; ++c) counts.push_back(1 + rng.uniform_index(40));
    DatasetManifest m = manifest_with_counts(counts);
    ClassStats stats = class_statistics(m);
    std::size_t sum = 0;
    for (const auto& cc : stats.per_class) sum += cc.total();
    EXPECT_EQ(sum, m.records.size());
    EXPECT_EQ(stats.total_records, m.records.size());
  }
  EXPECT_THROW(class_statistics(DatasetManifest{}), ValidationError);
}

TEST(ManifestIO, RoundTripsThroughText) {
  DatasetManifest m = manifest_with_counts({3, 2});
  m.seed = 77;
  m = split_dataset(m, SplitRatios{0.7, 0.15, 0.15}, 77, true);
  std::string text = manifest_to_text(m);
  DatasetManifest back = parse_manifest_text(text, "roundtrip");
  ASSERT_EQ(back.records.size(), m.records.size());
  EXPECT_EQ(back.seed, 77u);
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    EXPECT_EQ(back.records[i].path, m.records[i].path);
    EXPECT_EQ(back.records[i].class_id, m.records[i].class_id);
    EXPECT_EQ(back.records[i].split, m.records[i].split);
  }
}

TEST(ManifestIO, DiagnosesMalformedLines) {
  std::string text = "sslwb-manifest\t1\nimg.ppm\t1\ttrain\t32\n";  // 4 fields
  try {
    parse_manifest_text(text, "bad.tsv");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.tsv:2"), std::string::npos);
  }
  EXPECT_THROW(parse_manifest_text("nonsense\n", "x"), ValidationError);
  EXPECT_THROW(parse_manifest_text("sslwb-manifest\t1\nimg\tq\ttrain\t32\t32\n", "x"),
               ValidationError);
  EXPECT_THROW(parse_manifest_text("sslwb-manifest\t1\nimg\t1\tmaybe\t32\t32\n", "x"),
               ValidationError);
}

TEST(ManifestValidation, CatchesContractViolations) {
  DatasetManifest m = manifest_with_counts({2});
  m.records[1].path = m.records[0].path;  // duplicate path
  EXPECT_THROW(m.validate(), ValidationError);
  m = manifest_with_counts({2});
  m.records[0].class_id = 9;  // unknown class
  EXPECT_THROW(m.validate(), ValidationError);
  m = manifest_with_counts({2});
  m.records[0].width = 4;  // below the 8px floor
  EXPECT_THROW(m.validate(), ValidationError);
}

TEST(SyntheticCorpus, ScaledProfileCounts) {
  std::vector<std::size_t> counts = scaled_profile_counts(50.0);
  ASSERT_EQ(counts.size(), 23u);
  EXPECT_EQ(counts[4], 88u);  // class 5: round(4381 / 50)
  EXPECT_EQ(counts[1], 40u);  // class 2: round(2005 / 50)
  EXPECT_EQ(counts[13], 1u);  // class 14: round(69 / 50)
}

TEST(SyntheticCorpus, TinySpecProducesManifest) {
  fs::path dir = temp_dir("synth_tiny");
  SyntheticCorpusSpec spec;
  spec.num_classes = 2;
  spec.per_class_counts = {1, 1};
  spec.image_size = 16;
  spec.seed = 3;
  DatasetManifest m = generate_synthetic_corpus(spec, dir);
  EXPECT_EQ(m.records.size(), 2u);
  EXPECT_EQ(m.classes.size(), 2u);
  for (const auto& r : m.records) EXPECT_TRUE(fs::exists(dir / r.path));
  fs::remove_all(dir);
}

TEST(SyntheticCorpus, DeterministicBytesForIdenticalSpec) {
  SyntheticCorpusSpec spec;
  spec.num_classes = 3;
  spec.per_class = 4;
  spec.image_size = 24;
  spec.seed = 99;
  fs::path d1 = temp_dir("synth_a"), d2 = temp_dir("synth_b");
  DatasetManifest m1 = generate_synthetic_corpus(spec, d1);
  DatasetManifest m2 = generate_synthetic_corpus(spec, d2);
  EXPECT_EQ(manifest_to_text(m1), manifest_to_text(m2));
  for (const auto& r : m1.records)
    EXPECT_EQ(read_text_file(d1 / r.path), read_text_file(d2 / r.path)) << r.path;
  // different seed, different pixels
  spec.seed = 100;
  fs::path d3 = temp_dir("synth_c");
  DatasetManifest m3 = generate_synthetic_corpus(spec, d3);
  bool any_diff = false;
  for (std::size_t i = 0; i < m1.records.size(); ++i)
    any_diff |= read_text_file(d1 / m1.records[i].path) !=
                read_text_file(d3 / m3.records[i].path);
  EXPECT_TRUE(any_diff);
  fs::remove_all(d1);
  fs::remove_all(d2);
  fs::remove_all(d3);
}

TEST(SyntheticCorpus, ValidatesSpec) {
  SyntheticCorpusSpec spec;
  spec.num_classes = 1;
  EXPECT_THROW(spec.validate(), ValidationError);
  spec.num_classes = 2;
  spec.image_size = 8;
  EXPECT_THROW(spec.validate(), ValidationError);
  spec.image_size = 16;
  spec.per_class_counts = {1, 2, 3};
  EXPECT_THROW(spec.validate(), ValidationError);
}

TEST(SyntheticCorpus, IntraclassVarianceAndInterclassSeparation) {
  // Images of one class differ from each other (nuisance variation) and class
  // means differ across classes (signal).
  SyntheticCorpusSpec spec;
  spec.num_classes = 2;
  spec.per_class = 6;
  spec.image_size = 24;
  spec.seed = 5;
  fs::path dir = temp_dir("synth_var");
  DatasetManifest m = generate_synthetic_corpus(spec, dir);
  std::vector<Image> imgs;
  for (const auto& r : m.records) imgs.push_back(read_ppm(dir / r.path));
  auto l2 = [](const Image& a, const Image& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
      double d = a[i] - b[i];
      s += d * d;
    }
    return std::sqrt(s / a.numel());
  };
  EXPECT_GT(l2(imgs[0], imgs[1]), 0.01);   // same class, different image
  EXPECT_GT(l2(imgs[0], imgs[6]), 0.01);   // across classes
  fs::remove_all(dir);
}
