#pragma once

#include <vector>

#include "sslwb/dataset.hpp"
#include "sslwb/image.hpp"

namespace sslwb {

/// Decoded images of one split, in manifest order, with labels remapped to
/// contiguous 0-based class indices (label -1 when the record is unlabeled).
struct SplitData {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<int> class_ids;  // sorted; index = 0-based label
  std::size_t num_classes = 0;

  std::size_t size() const { return images.size(); }
};

inline std::vector<int> sorted_class_ids(const DatasetManifest& m) {
  std::vector<int> ids;
  for (const auto& c : m.classes) ids.push_back(c.class_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Loads every record of `split`; when the manifest carries no assignments at
/// all and `fallback_all` is set, loads everything.
inline SplitData load_split_data(const DatasetManifest& manifest, const fs::path& data_dir,
                                 Split split, bool fallback_all = false) {
  bool any_assigned = false;
  for (const auto& r : manifest.records)
    if (r.split != Split::unassigned) {
      any_assigned = true;
      break;
    }
  const bool take_all = !any_assigned && fallback_all;

  SplitData out;
  out.class_ids = sorted_class_ids(manifest);
  out.num_classes = out.class_ids.size();
  std::vector<const ImageRecord*> records;
  for (const auto& r : manifest.records)
    if (take_all || r.split == split) records.push_back(&r);

  out.images.resize(records.size());
  out.labels.resize(records.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(records.size()); ++i) {
    const ImageRecord& r = *records[static_cast<std::size_t>(i)];
    out.images[static_cast<std::size_t>(i)] = read_ppm(data_dir / r.path);
    int label = -1;
    if (r.class_id > 0) {
      auto it = std::lower_bound(out.class_ids.begin(), out.class_ids.end(), r.class_id);
      label = static_cast<int>(it - out.class_ids.begin());
    }
    out.labels[static_cast<std::size_t>(i)] = label;
  }
  return out;
}

/// Stacks equally sized images into a [N,H,W,3] batch tensor.
inline Tensor<float> stack_images(const std::vector<Image>& views) {
  require(!views.empty(), "cannot stack an empty view list");
  const std::size_t h = views[0].dim(0), w = views[0].dim(1);
  Tensor<float> out({views.size(), h, w, 3});
  for (std::size_t i = 0; i < views.size(); ++i) {
    require(views[i].dim(0) == h && views[i].dim(1) == w,
            "views in a batch must share one shape");
    std::copy(views[i].data.begin(), views[i].data.end(),
              out.data.begin() + static_cast<long>(i * h * w * 3));
  }
  return out;
}

}  // namespace sslwb
