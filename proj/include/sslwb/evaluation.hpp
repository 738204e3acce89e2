#pragma once

#include <cstdio>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "sslwb/data.hpp"
#include "sslwb/models.hpp"

namespace sslwb {

// Test-set evaluation, confusion matrices, per-class metrics and the
// table/plot artifacts the experiment reports are assembled from.

struct ConfusionMatrix {
  std::vector<std::uint64_t> counts;  // C x C row-major; rows = true class
  std::vector<std::string> class_names;
  std::size_t num_classes = 0;

  explicit ConfusionMatrix(std::size_t c = 0)
      : counts(c * c, 0), num_classes(c) {}

  std::uint64_t& at(std::size_t truth, std::size_t pred) {
    return counts[truth * num_classes + pred];
  }
  std::uint64_t at(std::size_t truth, std::size_t pred) const {
    return counts[truth * num_classes + pred];
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : counts) t += v;
    return t;
  }
  std::uint64_t row_sum(std::size_t i) const {
    std::uint64_t t = 0;
    for (std::size_t j = 0; j < num_classes; ++j) t += at(i, j);
    return t;
  }
  std::uint64_t col_sum(std::size_t j) const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < num_classes; ++i) t += at(i, j);
    return t;
  }
};

struct EvalReport {
  double top1_accuracy = 0.0;  // fraction
  std::vector<double> precision, recall;  // per class; 0 when undefined
};

inline double accuracy_from_confusion(const ConfusionMatrix& m) {
  require(m.num_classes > 0 && m.total() > 0, "empty confusion matrix");
  std::uint64_t diag = 0;
  for (std::size_t i = 0; i < m.num_classes; ++i) diag += m.at(i, i);
  return static_cast<double>(diag) / static_cast<double>(m.total());
}

inline EvalReport report_from_confusion(const ConfusionMatrix& m) {
  EvalReport r;
  r.top1_accuracy = accuracy_from_confusion(m);
  r.precision.resize(m.num_classes, 0.0);
  r.recall.resize(m.num_classes, 0.0);
  for (std::size_t i = 0; i < m.num_classes; ++i) {
    std::uint64_t rs = m.row_sum(i), cs = m.col_sum(i);
    if (rs > 0) r.recall[i] = static_cast<double>(m.at(i, i)) / static_cast<double>(rs);
    if (cs > 0) r.precision[i] = static_cast<double>(m.at(i, i)) / static_cast<double>(cs);
  }
  return r;
}

/// Batched argmax predictions from a classification head, inference mode.
inline std::vector<int> predict_classes(const Network<float>& net,
                                        const std::string& head_name,
                                        const std::vector<Image>& images,
                                        const AugmentationPolicy& policy,
                                        std::size_t batch_size = 128) {
  std::vector<int> preds(images.size(), -1);
  const Head<float>& head = net.head(head_name);
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, images.size() - start);
    std::vector<Image> views(n);
#pragma omp parallel for schedule(static)
    for (long i = 0; i < static_cast<long>(n); ++i)
      views[static_cast<std::size_t>(i)] =
          make_eval_view(images[start + static_cast<std::size_t>(i)], policy);
    Tensor<float> batch = stack_images(views);
    Tensor<float> emb = net.embed(batch);
    typename Head<float>::Trace htr;
    Tensor<float> logits = head.forward(emb, htr);
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      for (std::size_t j = 1; j < logits.dim(1); ++j)
        if (logits.at(i, j) > logits.at(i, best)) best = static_cast<int>(j);
      preds[start + i] = best;
    }
  }
  return preds;
}

inline ConfusionMatrix confusion_from_predictions(const std::vector<int>& truth,
                                                  const std::vector<int>& pred,
                                                  std::vector<std::string> names) {
  require(truth.size() == pred.size(), "prediction/label count mismatch");
  ConfusionMatrix m(names.size());
  m.class_names = std::move(names);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(truth[i] >= 0 && static_cast<std::size_t>(truth[i]) < m.num_classes &&
                pred[i] >= 0 && static_cast<std::size_t>(pred[i]) < m.num_classes,
            "class index out of range in evaluation");
    ++m.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  }
  return m;
}

/// Runs the classifier over one split of the manifest; every sample is
/// counted exactly once.
inline std::pair<ConfusionMatrix, EvalReport> evaluate(
    const Network<float>& net, const std::string& head_name,
    const DatasetManifest& manifest, const fs::path& data_dir, Split split,
    const AugmentationPolicy& policy) {
  SplitData data = load_split_data(manifest, data_dir, split);
  require(!data.images.empty(), "evaluation split is empty");
  const Head<float>& head = net.head(head_name);
  require(head.config().output_dim == data.num_classes,
          "classification head dimension does not match the class count");
  std::vector<int> preds = predict_classes(net, head_name, data.images, policy);
  std::vector<std::string> names;
  for (int cid : data.class_ids) {
    const ClassSpec* cs = manifest.find_class(cid);
    names.push_back(cs ? cs->name : "class_" + std::to_string(cid));
  }
  ConfusionMatrix m = confusion_from_predictions(data.labels, preds, std::move(names));
  return {m, report_from_confusion(m)};
}

// ---------------------------------------------------------------------------
// Results tables (text/markup documents).

enum class EvalSetup { transfer, single_dataset };

inline const char* setup_name(EvalSetup s) {
  return s == EvalSetup::transfer ? "transfer" : "single_dataset";
}
inline EvalSetup setup_from_name(const std::string& s) {
  if (s == "transfer") return EvalSetup::transfer;
  if (s == "single_dataset") return EvalSetup::single_dataset;
  throw ValidationError("unknown setup: '" + s + "' (transfer|single_dataset)");
}

struct ResultsRow {
  std::string experiment;
  std::string pretraining_dataset;  // transfer setup only
  double accuracy_pct = 0.0;
};

/// Markdown table. Columns: Experiment | Pretraining Dataset (transfer only) |
/// Classification Accuracy (%). The best row is bold-marked; row order is the
/// input order. Accuracy printed with two decimals.
inline std::string render_results_table(const std::vector<ResultsRow>& rows,
                                        EvalSetup setup,
                                        const std::string& architecture) {
  std::ostringstream os;
  os << "Results (" << (setup == EvalSetup::transfer ? "transfer learning setup"
                                                     : "single-dataset setup")
     << ", " << architecture << ")\n\n";
  if (rows.empty()) return os.str();
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].accuracy_pct > rows[best].accuracy_pct) best = i;
  const bool with_ds = setup == EvalSetup::transfer;
  os << "| Experiment |";
  if (with_ds) os << " Pretraining Dataset |";
  os << " Classification Accuracy (%) |\n";
  os << "|---|";
  if (with_ds) os << "---|";
  os << "---|\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    char acc[32];
    std::snprintf(acc, sizeof(acc), "%.2f", rows[i].accuracy_pct);
    const bool bold = i == best;
    auto wrap = [bold](const std::string& s) { return bold ? "**" + s + "**" : s; };
    os << "| " << wrap(rows[i].experiment) << " |";
    if (with_ds) os << " " << rows[i].pretraining_dataset << " |";
    os << " " << wrap(acc) << " |\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Confusion-matrix artifacts.

inline std::string confusion_to_csv(const ConfusionMatrix& m) {
  std::ostringstream os;
  for (std::size_t j = 0; j < m.num_classes; ++j) {
    if (j) os << ",";
    std::string name = j < m.class_names.size() ? m.class_names[j]
                                                : "class_" + std::to_string(j + 1);
    for (char& c : name)
      if (c == ',') c = ';';
    os << name;
  }
  os << "\n";
  for (std::size_t i = 0; i < m.num_classes; ++i) {
    for (std::size_t j = 0; j < m.num_classes; ++j) {
      if (j) os << ",";
      os << m.at(i, j);
    }
    os << "\n";
  }
  return os.str();
}

/// Heatmap image (PPM) with row-normalized intensities plus a machine-readable
/// CSV sidecar (same stem, .csv) so tests never parse pixels. Deterministic
/// pixel output for fixed inputs.
inline void emit_confusion_plot(const ConfusionMatrix& m, const fs::path& path) {
  require(m.num_classes > 0, "cannot plot an empty confusion matrix");
  const std::size_t cell = 12, margin = 4;
  const std::size_t side = m.num_classes * cell + 2 * margin;
  Image img({side, side, 3});
  img.fill(0.96f);
  for (std::size_t i = 0; i < m.num_classes; ++i) {
    std::uint64_t rs = m.row_sum(i);
    for (std::size_t j = 0; j < m.num_classes; ++j) {
      float t = rs == 0 ? 0.0f
                        : static_cast<float>(m.at(i, j)) / static_cast<float>(rs);
      // white -> blue ramp, diagonal tinted green
      float r = 1.0f - 0.85f * t;
      float g = 1.0f - (i == j ? 0.35f : 0.75f) * t;
      float b = 1.0f - 0.15f * t;
      for (std::size_t dy = 0; dy < cell - 1; ++dy)
        for (std::size_t dx = 0; dx < cell - 1; ++dx) {
          std::size_t y = margin + i * cell + dy, x = margin + j * cell + dx;
          img.at(y, x, 0) = r;
          img.at(y, x, 1) = g;
          img.at(y, x, 2) = b;
        }
    }
  }
  write_ppm(path, img);
  fs::path csv = path;
  csv.replace_extension(".csv");
  write_file_atomic(csv, confusion_to_csv(m));
}

// ---------------------------------------------------------------------------
// Results records: one structured text document per experiment.

struct ResultsRecord {
  std::map<std::string, std::string> fields;

  void set(const std::string& k, const std::string& v) { fields[k] = v; }
  void set(const std::string& k, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    fields[k] = buf;
  }
  std::string get(const std::string& k, const std::string& fallback = "") const {
    auto it = fields.find(k);
    return it == fields.end() ? fallback : it->second;
  }
  double get_number(const std::string& k, double fallback = 0.0) const {
    auto it = fields.find(k);
    return it == fields.end() ? fallback : std::stod(it->second);
  }
};

inline std::string results_record_to_text(const ResultsRecord& r) {
  std::string out = "sslwb-results\t1\n";
  for (const auto& [k, v] : r.fields) out += k + "\t" + v + "\n";
  return out;
}

inline ResultsRecord parse_results_record(const std::string& text,
                                          const std::string& origin = "<string>") {
  std::vector<std::string> lines = split(text, '\n');
  require(!lines.empty() && trim(lines[0]) == "sslwb-results\t1",
          origin + ": bad results-record header");
  ResultsRecord r;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    std::vector<std::string> f = split(lines[i], '\t');
    require(f.size() == 2, origin + ":" + std::to_string(i + 1) +
                               ": expected key<TAB>value");
    r.fields[f[0]] = f[1];
  }
  return r;
}

}  // namespace sslwb
