#include "medvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

namespace medvit::metrics {

ConfusionMatrix ConfusionMatrix::from(std::span<const int> labels, std::span<const int> predictions,
                                      std::size_t classes) {
  if (labels.size() != predictions.size()) {
    throw MetricsError("confusion matrix: " + std::to_string(labels.size()) + " labels vs " +
                       std::to_string(predictions.size()) + " predictions");
  }
  ConfusionMatrix m;
  m.classes = classes;
  m.counts.assign(classes * classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= classes || static_cast<std::size_t>(p) >= classes) {
      throw MetricsError("confusion matrix: class index outside [0," + std::to_string(classes) + ")");
    }
    ++m.counts[static_cast<std::size_t>(t) * classes + static_cast<std::size_t>(p)];
  }
  return m;
}

std::uint64_t ConfusionMatrix::support(std::size_t c) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes; ++p) s += at(c, p);
  return s;
}

double ConfusionMatrix::recall(std::size_t c) const {
  const auto s = support(c);
  if (s == 0) throw MetricsError("recall: class " + std::to_string(c) + " has no samples");
  return static_cast<double>(at(c, c)) / static_cast<double>(s);
}

BalancedAccuracy balanced_accuracy_report(std::span<const int> labels, std::span<const int> predictions,
                                          std::size_t classes) {
  const auto m = ConfusionMatrix::from(labels, predictions, classes);
  BalancedAccuracy out;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (m.support(c) == 0) {
      out.excluded.push_back(c);
      continue;
    }
    sum += m.recall(c);
    ++used;
  }
  if (used == 0) throw MetricsError("balanced accuracy: no labelled samples");
  if (!out.excluded.empty()) {
    std::cerr << "warning: balanced accuracy excludes " << out.excluded.size()
              << " class(es) without samples\n";
  }
  out.value = sum / static_cast<double>(used);
  return out;
}

double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions, std::size_t classes) {
  return balanced_accuracy_report(labels, predictions, classes).value;
}

void BaselineErrorTable::set(const std::string& corruption, std::size_t severity, double error) {
  if (severity > kSeverities) {
    throw MetricsError("baseline: severity " + std::to_string(severity) + " outside 0..5");
  }
  if (!(error >= 0.0 && error <= 1.0)) throw MetricsError("baseline: balanced error outside [0,1]");
  table_[corruption][severity] = error;
}

bool BaselineErrorTable::contains(const std::string& corruption) const {
  auto it = table_.find(corruption);
  if (it == table_.end()) return false;
  for (std::size_t s = 1; s <= kSeverities; ++s) {
    if (!it->second[s]) return false;
  }
  return true;
}

std::array<double, kSeverities> BaselineErrorTable::errors(const std::string& corruption) const {
  auto it = table_.find(corruption);
  if (it == table_.end()) throw MetricsError("baseline: no entry for corruption '" + corruption + "'");
  std::array<double, kSeverities> out{};
  for (std::size_t s = 1; s <= kSeverities; ++s) {
    if (!it->second[s]) {
      throw MetricsError("baseline: corruption '" + corruption + "' lacks severity " + std::to_string(s));
    }
    out[s - 1] = *it->second[s];
  }
  return out;
}

double BaselineErrorTable::clean(const std::string& corruption) const {
  for (const auto& key : {corruption, std::string("clean")}) {
    auto it = table_.find(key);
    if (it != table_.end() && it->second[0]) return *it->second[0];
  }
  throw MetricsError("baseline: no clean error for corruption '" + corruption + "'");
}

std::vector<std::string> BaselineErrorTable::corruptions() const {
  std::vector<std::string> out;
  for (const auto& [name, row] : table_) {
    if (contains(name)) out.push_back(name);
  }
  return out;
}

BaselineErrorTable BaselineErrorTable::parse(std::istream& in) {
  BaselineErrorTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line.erase(std::remove_if(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }),
               line.end());
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string name, sev, err;
    if (!std::getline(ss, name, ',') || !std::getline(ss, sev, ',') || !std::getline(ss, err) || name.empty()) {
      throw MetricsError("baseline: malformed record on line " + std::to_string(lineno));
    }
    try {
      std::size_t used = 0;
      const long s = std::stol(sev, &used);
      if (used != sev.size() || s < 0) throw std::invalid_argument("severity");
      const double e = std::stod(err, &used);
      if (used != err.size()) throw std::invalid_argument("error");
      table.set(name, static_cast<std::size_t>(s), e);
    } catch (const std::logic_error&) {
      throw MetricsError("baseline: malformed number on line " + std::to_string(lineno));
    }
  }
  return table;
}

BaselineErrorTable BaselineErrorTable::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MetricsError("baseline: cannot open '" + path + "'");
  return parse(in);
}

void BaselineErrorTable::write(std::ostream& out) const {
  out << "# corruption,severity,balanced_error\n";
  out.precision(17);
  for (const auto& [name, row] : table_) {
    for (std::size_t s = 0; s <= kSeverities; ++s) {
      if (row[s]) out << name << "," << s << "," << *row[s] << "\n";
    }
  }
}

double be_c(const SeverityErrors& errors, const BaselineErrorTable& baseline) {
  const auto ref = baseline.errors(errors.corruption);
  double num = 0.0, den = 0.0;
  for (std::size_t s = 0; s < kSeverities; ++s) {
    num += errors.be[s];
    den += ref[s];
  }
  if (!(den > 0.0)) throw MetricsError("be_c: baseline errors for '" + errors.corruption + "' sum to zero");
  return num / den;
}

std::optional<double> rbe_c(const SeverityErrors& errors, const BaselineErrorTable& baseline) {
  const auto ref = baseline.errors(errors.corruption);
  const double ref_clean = baseline.clean(errors.corruption);
  double num = 0.0, den = 0.0;
  for (std::size_t s = 0; s < kSeverities; ++s) {
    num += errors.be[s] - errors.clean;
    den += ref[s] - ref_clean;
  }
  if (!(den > 0.0)) return std::nullopt;
  return num / den;
}

std::map<std::string, std::string> default_categories() {
  return {{"gaussian_noise", "Noise"},
          {"contrast_up", "Color"},
          {"contrast_down", "Color"},
          {"defocus_blur", "Blur"}};
}

RobustnessReport aggregate(const std::vector<SeverityErrors>& inputs, const BaselineErrorTable& baseline,
                           const std::map<std::string, std::string>& categories) {
  if (inputs.empty()) throw MetricsError("aggregate: no corruptions");
  RobustnessReport report;
  report.bacc_clean = 1.0 - inputs.front().clean;
  double be_sum = 0.0, rbe_sum = 0.0, bacc_sum = 0.0;
  std::size_t rbe_count = 0;
  std::map<std::string, std::pair<double, std::size_t>> cat_rbe;
  for (const auto& in : inputs) {
    CorruptionResult r;
    r.corruption = in.corruption;
    auto it = categories.find(in.corruption);
    r.category = it == categories.end() ? "Uncategorized" : it->second;
    r.be_c = be_c(in, baseline);
    r.rbe_c = rbe_c(in, baseline);
    double acc = 0.0;
    for (double e : in.be) acc += 1.0 - e;
    r.mean_bacc = acc / static_cast<double>(kSeverities);
    be_sum += r.be_c;
    bacc_sum += r.mean_bacc;
    auto& cat = report.categories[r.category];
    cat.be += r.be_c;
    ++cat.count;
    if (r.rbe_c) {
      rbe_sum += *r.rbe_c;
      ++rbe_count;
      cat_rbe[r.category].first += *r.rbe_c;
      ++cat_rbe[r.category].second;
    } else {
      report.excluded.push_back(in.corruption);
      std::cerr << "warning: rBE undefined for '" << in.corruption
                << "' (baseline shows no degradation); excluded from the mean\n";
    }
    report.corruptions.push_back(std::move(r));
  }
  const double n = static_cast<double>(inputs.size());
  report.be = be_sum / n;
  report.bacc = bacc_sum / n;
  if (rbe_count > 0) report.rbe = rbe_sum / static_cast<double>(rbe_count);
  for (auto& [name, cat] : report.categories) {
    cat.be /= static_cast<double>(cat.count);
    auto it = cat_rbe.find(name);
    if (it != cat_rbe.end()) cat.rbe = it->second.first / static_cast<double>(it->second.second);
  }
  return report;
}

namespace {

std::string fmt(const std::optional<double>& v) {
  if (!v) return "undefined";
  std::ostringstream os;
  os.precision(6);
  os << *v;
  return os.str();
}

}  // namespace

void write_report(std::ostream& os, const RobustnessReport& report) {
  os << "corruption,category,bacc,be_c,rbe_c\n";
  for (const auto& r : report.corruptions) {
    os << r.corruption << "," << r.category << "," << fmt(r.mean_bacc) << "," << fmt(r.be_c) << ","
       << fmt(r.rbe_c) << "\n";
  }
  os << "# summary\n";
  os << "bacc_clean," << fmt(report.bacc_clean) << "\n";
  os << "bacc," << fmt(report.bacc) << "\n";
  os << "be," << fmt(report.be) << "\n";
  os << "rbe," << fmt(report.rbe) << "\n";
  for (const auto& [name, cat] : report.categories) {
    os << "category," << name << "," << fmt(cat.be) << "," << fmt(cat.rbe) << "\n";
  }
}

Corruption parse_corruption(const std::string& name) {
  for (auto c : all_corruptions()) {
    if (corruption_name(c) == name) return c;
  }
  throw MetricsError("unknown corruption '" + name + "'");
}

std::string corruption_name(Corruption kind) {
  switch (kind) {
    case Corruption::GaussianNoise: return "gaussian_noise";
    case Corruption::ContrastUp: return "contrast_up";
    case Corruption::ContrastDown: return "contrast_down";
    case Corruption::DefocusBlur: return "defocus_blur";
  }
  return "unknown";
}

std::vector<Corruption> all_corruptions() {
  return {Corruption::GaussianNoise, Corruption::ContrastUp, Corruption::ContrastDown, Corruption::DefocusBlur};
}

double severity_parameter(Corruption kind, int severity) {
  if (severity < 1 || severity > static_cast<int>(kSeverities)) {
    throw MetricsError("corruption severity " + std::to_string(severity) + " outside 1..5");
  }
  static constexpr std::array<double, 5> noise{0.04, 0.08, 0.12, 0.18, 0.26};
  static constexpr std::array<double, 5> up{1.2, 1.4, 1.6, 1.8, 2.0};
  static constexpr std::array<double, 5> down{0.8, 0.675, 0.55, 0.425, 0.3};
  const auto i = static_cast<std::size_t>(severity - 1);
  switch (kind) {
    case Corruption::GaussianNoise: return noise[i];
    case Corruption::ContrastUp: return up[i];
    case Corruption::ContrastDown: return down[i];
    case Corruption::DefocusBlur: return static_cast<double>(severity);
  }
  return 0.0;
}

Tensor corrupt_image(const Tensor& img, Corruption kind, int severity, std::uint64_t seed) {
  if (img.rank() != 3) throw ShapeError("corrupt_image: expected [C,H,W], got " + to_string(img.shape()));
  const double param = severity_parameter(kind, severity);
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2), hw = H * W;
  Tensor out = img.detach();
  double* d = out.data();
  switch (kind) {
    case Corruption::GaussianNoise: {
      Rng rng(seed);
      std::normal_distribution<double> noise(0.0, param);
      for (std::size_t i = 0; i < out.numel(); ++i) d[i] += noise(rng);
      break;
    }
    case Corruption::ContrastUp:
    case Corruption::ContrastDown:
      for (std::size_t c = 0; c < C; ++c) {
        double mean = 0.0;
        for (std::size_t t = 0; t < hw; ++t) mean += d[c * hw + t];
        mean /= static_cast<double>(hw);
        for (std::size_t t = 0; t < hw; ++t) d[c * hw + t] = mean + param * (d[c * hw + t] - mean);
      }
      break;
    case Corruption::DefocusBlur: {
      const long r = severity;
      const double* src = img.data();
      for (std::size_t c = 0; c < C; ++c) {
        for (long y = 0; y < static_cast<long>(H); ++y) {
          for (long x = 0; x < static_cast<long>(W); ++x) {
            double s = 0.0;
            for (long dy = -r; dy <= r; ++dy) {
              const long yy = std::clamp(y + dy, 0L, static_cast<long>(H) - 1);
              for (long dx = -r; dx <= r; ++dx) {
                const long xx = std::clamp(x + dx, 0L, static_cast<long>(W) - 1);
                s += src[c * hw + yy * W + xx];
              }
            }
            d[c * hw + y * W + x] = s / static_cast<double>((2 * r + 1) * (2 * r + 1));
          }
        }
      }
      break;
    }
  }
  for (std::size_t i = 0; i < out.numel(); ++i) d[i] = std::clamp(d[i], 0.0, 1.0);
  return out;
}

}  // namespace medvit::metrics
