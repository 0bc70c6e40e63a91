#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "medvit/tensor.hpp"

namespace medvit::metrics {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// counts[t * n + p]: samples of true class t predicted as p.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  static ConfusionMatrix from(std::span<const int> labels, std::span<const int> predictions,
                              std::size_t classes);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
  std::uint64_t support(std::size_t c) const;
  /// Sensitivity of class c; undefined (throws) without support.
  double recall(std::size_t c) const;
};

struct BalancedAccuracy {
  double value = 0.0;
  /// Classes left out of the average because no sample carries them.
  std::vector<std::size_t> excluded;
};

/// Macro-averaged per-class recall; for two classes this is the mean of
/// sensitivity and specificity.
BalancedAccuracy balanced_accuracy_report(std::span<const int> labels, std::span<const int> predictions,
                                          std::size_t classes);
double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions, std::size_t classes);

constexpr std::size_t kSeverities = 5;

/// Balanced errors of one model under one corruption.
struct SeverityErrors {
  std::string corruption;
  std::array<double, kSeverities> be{};
  double clean = 0.0;
};

/// Reference-model balanced errors, keyed by corruption. Severity-0 records
/// hold clean errors; a record named "clean" applies to every corruption
/// without its own severity-0 entry.
class BaselineErrorTable {
 public:
  void set(const std::string& corruption, std::size_t severity, double error);
  /// Errors for severities 1..5; throws MetricsError if any is missing.
  std::array<double, kSeverities> errors(const std::string& corruption) const;
  double clean(const std::string& corruption) const;
  bool contains(const std::string& corruption) const;
  std::vector<std::string> corruptions() const;

  /// "corruption,severity,balanced_error" lines, '#' comments, blank lines
  /// ignored.
  static BaselineErrorTable parse(std::istream& in);
  static BaselineErrorTable load(const std::string& path);
  void write(std::ostream& out) const;

 private:
  std::map<std::string, std::array<std::optional<double>, kSeverities + 1>> table_;
};

/// Σ_s BE_{s,c} / Σ_s BE^{ref}_{s,c}
double be_c(const SeverityErrors& errors, const BaselineErrorTable& baseline);
/// Σ_s (BE_{s,c} - BE_clean) / Σ_s (BE^{ref}_{s,c} - BE^{ref}_clean); empty
/// when the reference drop sum is not positive.
std::optional<double> rbe_c(const SeverityErrors& errors, const BaselineErrorTable& baseline);

struct CorruptionResult {
  std::string corruption;
  std::string category;
  double be_c = 0.0;
  std::optional<double> rbe_c;
  double mean_bacc = 0.0;  // mean over severities of 1 - BE
};

struct CategoryMeans {
  double be = 0.0;
  std::optional<double> rbe;
  std::size_t count = 0;
};

struct RobustnessReport {
  double bacc_clean = 0.0;
  double bacc = 0.0;  // over all corruptions and severities
  double be = 0.0;
  std::optional<double> rbe;
  std::vector<CorruptionResult> corruptions;
  std::vector<std::string> excluded;  // rBE undefined for these
  std::map<std::string, CategoryMeans> categories;
};

/// The generator's corruptions mapped to their families.
std::map<std::string, std::string> default_categories();

/// Means over corruptions; corruptions missing from `categories` fall in
/// "Uncategorized". The clean error is taken from the first entry.
RobustnessReport aggregate(const std::vector<SeverityErrors>& inputs, const BaselineErrorTable& baseline,
                           const std::map<std::string, std::string>& categories = default_categories());

void write_report(std::ostream& os, const RobustnessReport& report);

enum class Corruption { GaussianNoise, ContrastUp, ContrastDown, DefocusBlur };

Corruption parse_corruption(const std::string& name);
std::string corruption_name(Corruption kind);
std::vector<Corruption> all_corruptions();
/// σ for noise, contrast factor, or blur radius at severity 1..5.
double severity_parameter(Corruption kind, int severity);

/// img: [C,H,W] in [0,1]. Output clipped to [0,1], deterministic in seed.
Tensor corrupt_image(const Tensor& img, Corruption kind, int severity, std::uint64_t seed);

}  // namespace medvit::metrics
