#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sslwb/common.hpp"
#include "sslwb/rng.hpp"

namespace sslwb {

enum class Split { unassigned, train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "unassigned";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unassigned" || s == "-") return Split::unassigned;
  throw ValidationError("unknown split name: '" + s + "'");
}

struct ClassSpec {
  int class_id = 0;  // 1..C
  std::string name;
  std::size_t expected_count = 0;
  std::string description;
};

struct ImageRecord {
  std::string path;
  int class_id = 0;  // 0 = unlabeled
  Split split = Split::unassigned;
  int width = 0;
  int height = 0;
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;

  void validate() const {
    auto in01 = [](double x) { return x >= 0.0 && x <= 1.0; };
    require(in01(train) && in01(val) && in01(test),
            "split ratios must each lie in [0,1]");
    require(std::fabs(train + val + test - 1.0) <= 1e-9,
            "split ratios must sum to 1");
  }
};

struct DatasetManifest {
  std::vector<ClassSpec> classes;
  std::vector<ImageRecord> records;
  std::uint64_t seed = 0;

  bool labeled() const {
    if (records.empty()) return false;
    for (const auto& r : records)
      if (r.class_id <= 0) return false;
    return true;
  }

  const ClassSpec* find_class(int id) const {
    for (const auto& c : classes)
      if (c.class_id == id) return &c;
    return nullptr;
  }

  void validate() const {
    std::set<int> ids;
    for (const auto& c : classes) {
      require(ids.insert(c.class_id).second,
              "duplicate class_id " + std::to_string(c.class_id));
    }
    std::set<std::string> paths;
    for (const auto& r : records) {
      require(paths.insert(r.path).second, "duplicate record path: " + r.path);
      require(r.class_id == 0 || ids.count(r.class_id) > 0,
              "record refers to unknown class_id " + std::to_string(r.class_id) +
                  ": " + r.path);
      require(r.width >= 8 && r.height >= 8,
              "record dimensions below 8px: " + r.path);
    }
  }
};

// ---------------------------------------------------------------------------
// Splitting

namespace detail {
// floor with a small guard so exact rational targets (e.g. 0.15 * 25000) do
// not fall one short from representation error.
inline std::size_t floor_quota(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}
}  // namespace detail

/// Stratified random split. Per class: val/test quotas start at the floored
/// per-class share; the global deficits against the floored global quotas are
/// then settled by largest fractional remainder (so each class stays within
/// one record of its exact share while global counts hit the apportioned
/// targets exactly). Leftovers go to train. Deterministic given (manifest
/// order, ratios, seed).
inline DatasetManifest split_dataset(const DatasetManifest& manifest,
                                     const SplitRatios& ratios, std::uint64_t seed,
                                     bool allow_overwrite = false) {
  ratios.validate();
  require(!manifest.records.empty(), "cannot split an empty manifest");
  if (!allow_overwrite) {
    for (const auto& r : manifest.records)
      require(r.split == Split::unassigned,
              "manifest already has split assignments (pass overwrite to redo)");
  }

  // Group record indices per class, manifest order. Unlabeled records form
  // their own stratum keyed by class 0.
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    by_class[manifest.records[i].class_id].push_back(i);

  const std::size_t n = manifest.records.size();
  const std::size_t val_target = detail::floor_quota(ratios.val, n);
  const std::size_t test_target = detail::floor_quota(ratios.test, n);

  struct Stratum {
    int class_id;
    std::size_t count;
    std::size_t val_quota, test_quota;
    double val_frac, test_frac;  // fractional remainders
  };
  std::vector<Stratum> strata;
  for (const auto& [cid, idxs] : by_class) {
    Stratum s;
    s.class_id = cid;
    s.count = idxs.size();
    double ev = ratios.val * static_cast<double>(s.count);
    double et = ratios.test * static_cast<double>(s.count);
    s.val_quota = detail::floor_quota(ratios.val, s.count);
    s.test_quota = detail::floor_quota(ratios.test, s.count);
    s.val_frac = ev - static_cast<double>(s.val_quota);
    s.test_frac = et - static_cast<double>(s.test_quota);
    strata.push_back(s);
  }

  auto settle = [&strata](std::size_t target, bool val_side) {
    std::size_t have = 0;
    for (const auto& s : strata) have += val_side ? s.val_quota : s.test_quota;
    while (have < target) {
      // Pick the stratum with the largest remainder that still has spare
      // records; ties broken toward the larger class, then lower class id.
      std::size_t best = strata.size();
      for (std::size_t i = 0; i < strata.size(); ++i) {
        auto& s = strata[i];
        if (s.val_quota + s.test_quota >= s.count) continue;
        if (best == strata.size()) {
          best = i;
          continue;
        }
        auto& b = strata[best];
        double fi = val_side ? s.val_frac : s.test_frac;
        double fb = val_side ? b.val_frac : b.test_frac;
        if (fi > fb || (fi == fb && (s.count > b.count ||
                                     (s.count == b.count && s.class_id < b.class_id))))
          best = i;
      }
      if (best == strata.size()) break;  // nothing left to give
      auto& s = strata[best];
      if (val_side) {
        ++s.val_quota;
        s.val_frac -= 1.0;
      } else {
        ++s.test_quota;
        s.test_frac -= 1.0;
      }
      ++have;
    }
  };
  settle(val_target, true);
  settle(test_target, false);

  DatasetManifest out = manifest;
  out.seed = seed;
  for (const auto& s : strata) {
    std::vector<std::size_t> idxs = by_class[s.class_id];
    RngStream rng = RngStream::derived(seed, "split", s.class_id);
    rng.shuffle(idxs);
    for (std::size_t i = 0; i < idxs.size(); ++i) {
      Split sp = Split::train;
      if (i < s.val_quota)
        sp = Split::val;
      else if (i < s.val_quota + s.test_quota)
        sp = Split::test;
      out.records[idxs[i]].split = sp;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct ClassCounts {
  int class_id = 0;
  std::string name;
  std::size_t train = 0, val = 0, test = 0, unassigned = 0;
  std::size_t total() const { return train + val + test + unassigned; }
};

struct ClassStats {
  std::vector<ClassCounts> per_class;  // ordered by class_id
  std::size_t total_records = 0;
  double imbalance_ratio = 1.0;  // max class total / min class total
};

inline ClassStats class_statistics(const DatasetManifest& manifest) {
  require(!manifest.records.empty(), "cannot compute statistics of an empty manifest");
  std::map<int, ClassCounts> acc;
  for (const auto& c : manifest.classes) {
    acc[c.class_id].class_id = c.class_id;
    acc[c.class_id].name = c.name;
  }
  for (const auto& r : manifest.records) {
    auto& cc = acc[r.class_id];
    cc.class_id = r.class_id;
    switch (r.split) {
      case Split::train: ++cc.train; break;
      case Split::val: ++cc.val; break;
      case Split::test: ++cc.test; break;
      default: ++cc.unassigned; break;
    }
  }
  ClassStats stats;
  std::size_t mx = 0, mn = SIZE_MAX;
  for (auto& [cid, cc] : acc) {
    if (cc.total() == 0) continue;  // declared class with no records
    stats.total_records += cc.total();
    mx = std::max(mx, cc.total());
    mn = std::min(mn, cc.total());
    stats.per_class.push_back(cc);
  }
  stats.imbalance_ratio = static_cast<double>(mx) / static_cast<double>(mn);
  return stats;
}

// ---------------------------------------------------------------------------
// File formats.
// Manifest: UTF-8 TSV, one record per line, header "sslwb-manifest\t1".
// Columns: path, class_id, split, width, height.
// Class table: TSV with columns class_id, name, description.

inline std::string manifest_to_text(const DatasetManifest& m) {
  std::string out = "sslwb-manifest\t1\tseed=" + std::to_string(m.seed) + "\n";
  for (const auto& r : m.records) {
    out += r.path + "\t" + std::to_string(r.class_id) + "\t" + split_name(r.split) +
           "\t" + std::to_string(r.width) + "\t" + std::to_string(r.height) + "\n";
  }
  return out;
}

inline std::string class_table_to_text(const DatasetManifest& m) {
  std::string out = "class_id\tname\tdescription\n";
  for (const auto& c : m.classes)
    out += std::to_string(c.class_id) + "\t" + c.name + "\t" + c.description + "\n";
  return out;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& manifest_path,
                          const fs::path& class_table_path) {
  write_file_atomic(manifest_path, manifest_to_text(m));
  write_file_atomic(class_table_path, class_table_to_text(m));
}

inline DatasetManifest parse_manifest_text(const std::string& text,
                                           const std::string& origin = "<string>") {
  DatasetManifest m;
  std::vector<std::string> lines = split(text, '\n');
  require(!lines.empty(), origin + ": empty manifest file");
  {
    std::vector<std::string> hdr = split(trim(lines[0]), '\t');
    require(hdr.size() >= 2 && hdr[0] == "sslwb-manifest" && hdr[1] == "1",
            origin + ":1: bad manifest header (expected 'sslwb-manifest<TAB>1')");
    if (hdr.size() >= 3 && hdr[2].rfind("seed=", 0) == 0)
      m.seed = std::stoull(hdr[2].substr(5));
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::string line = lines[i];
    if (trim(line).empty()) continue;
    std::vector<std::string> f = split(line, '\t');
    std::string where = origin + ":" + std::to_string(i + 1);
    require(f.size() == 5, where + ": expected 5 tab-separated fields, got " +
                               std::to_string(f.size()));
    ImageRecord r;
    r.path = f[0];
    try {
      r.class_id = std::stoi(f[1]);
      r.split = split_from_name(f[2]);
      r.width = std::stoi(f[3]);
      r.height = std::stoi(f[4]);
    } catch (const ValidationError&) {
      throw ValidationError(where + ": bad split value '" + f[2] + "'");
    } catch (const std::exception&) {
      throw ValidationError(where + ": non-numeric field in record");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline void parse_class_table_text(const std::string& text, DatasetManifest& m,
                                   const std::string& origin = "<string>") {
  std::vector<std::string> lines = split(text, '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string line = trim(lines[i]);
    if (line.empty() || (i == 0 && line.rfind("class_id", 0) == 0)) continue;
    std::vector<std::string> f = split(lines[i], '\t');
    std::string where = origin + ":" + std::to_string(i + 1);
    require(f.size() >= 2, where + ": expected at least class_id and name");
    ClassSpec c;
    try {
      c.class_id = std::stoi(f[0]);
    } catch (const std::exception&) {
      throw ValidationError(where + ": non-numeric class_id");
    }
    c.name = f[1];
    if (f.size() >= 3) c.description = f[2];
    m.classes.push_back(std::move(c));
  }
}

/// Loads manifest.tsv and, when present next to it, classes.tsv.
inline DatasetManifest load_manifest(const fs::path& manifest_path) {
  DatasetManifest m =
      parse_manifest_text(read_text_file(manifest_path), manifest_path.string());
  fs::path ct = manifest_path.parent_path() / "classes.tsv";
  if (fs::exists(ct)) parse_class_table_text(read_text_file(ct), m, ct.string());
  if (m.classes.empty()) {
    // Synthesize class entries from the ids present in the records.
    std::set<int> ids;
    for (const auto& r : m.records)
      if (r.class_id > 0) ids.insert(r.class_id);
    for (int id : ids) {
      ClassSpec c;
      c.class_id = id;
      c.name = "class_" + std::to_string(id);
      m.classes.push_back(c);
    }
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Reference class profile: the 23-class inventory of the CrawledFirearmsRGB
// web-crawl corpus (25000 images total, heavily imbalanced). The corpus itself
// is not redistributable; the profile shapes synthetic stand-in datasets so
// that class-count arithmetic and imbalance behave like the real thing.

inline std::vector<ClassSpec> reference_class_profile() {
  auto c = [](int id, const char* name, std::size_t count) {
    ClassSpec s;
    s.class_id = id;
    s.name = name;
    s.expected_count = count;
    return s;
  };
  return {
      c(1, "Bomb", 1245),          c(2, "Rifle", 2005),
      c(3, "Revolver", 1005),      c(4, "Rocket", 1073),
      c(5, "Shotgun", 4381),       c(6, "Knives", 1842),
      c(7, "PCP airguns", 1067),   c(8, "Pills (drugs)", 1061),
      c(9, "Pistols", 3349),       c(10, "Weeds", 683),
      c(11, "Seeds (drugs)", 837), c(12, "Bullet box", 2081),
      c(13, "Bullets", 1017),      c(14, "Bow and arrow", 69),
      c(15, "Injectable drugs", 155), c(16, "Powder (drugs)", 525),
      c(17, "Military clothing", 237), c(18, "Full-face hoods", 761),
      c(19, "Accessories", 207),   c(20, "Blades", 115),
      c(21, "Gun cases", 470),     c(22, "Gun storage", 460),
      c(23, "Weapon magazines", 355),
  };
}

/// Per-class counts of the reference profile divided by `divisor`, rounded to
/// nearest (at least 1 so no class vanishes).
inline std::vector<std::size_t> scaled_profile_counts(double divisor) {
  require(divisor > 0.0, "profile divisor must be positive");
  std::vector<std::size_t> out;
  for (const auto& c : reference_class_profile()) {
    double v = static_cast<double>(c.expected_count) / divisor;
    out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(v))));
  }
  return out;
}

}  // namespace sslwb
