#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace nlran {

__extension__ typedef __int128 i128;

/// Exact fraction over 128-bit integers, always reduced with a positive
/// denominator.
class Rational {
 public:
  Rational(long long num = 0, long long den = 1);
  static Rational from_raw(i128 num, i128 den);

  Rational operator+(const Rational& o) const;
  Rational operator*(const Rational& o) const;
  Rational operator/(const Rational& o) const;
  bool operator==(const Rational& o) const { return num_ == o.num_ && den_ == o.den_; }
  bool is_zero() const { return num_ == 0; }

  double to_double() const;
  std::string to_string() const;

 private:
  struct Raw {};
  Rational(Raw, i128 num, i128 den) : num_(num), den_(den) {}
  i128 num_, den_;
};

/// K x K counts, rows = true class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 3);
  ConfusionMatrix(std::vector<std::vector<std::uint64_t>> counts);

  std::size_t classes() const noexcept { return k_; }
  std::uint64_t operator()(std::size_t truth, std::size_t predicted) const { return counts_[truth * k_ + predicted]; }
  void add(std::size_t truth, std::size_t predicted, std::uint64_t n = 1);

  std::uint64_t total() const;
  std::uint64_t support(std::size_t cls) const;          // row sum
  std::uint64_t predicted_count(std::size_t cls) const;  // column sum
  std::vector<std::vector<std::uint64_t>> rows() const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes = 3);

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0, auc = 0;
  bool precision_undefined = false;  // class never predicted
  bool recall_undefined = false;     // class has no support
};

/// Weighted-average report. Weights are class supports over the total.
struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  double auc = 0;  // support-weighted one-vs-rest AUC; 0 until filled
  Rational exact_accuracy, exact_precision, exact_recall, exact_f1;
  bool degenerate = false;
  ConfusionMatrix confusion;

  /// Canonical JSON with ACC, P, R, F1, AUC at top level.
  nlohmann::json to_json() const;
};

/// P_i = TP/(TP+FP), R_i = TP/(TP+FN); undefined ratios become 0 and set the
/// degenerate flag. Weighted P and R use W_i = support_i / total; weighted
/// F1 is the harmonic mean of weighted P and weighted R.
MetricsReport weighted_metrics(const ConfusionMatrix& cm);

struct CurvePoint {
  double threshold;  // +inf for the anchor point
  double x, y;
};

enum class CurveKind { ROC, PR };

struct CurveSeries {
  CurveKind kind = CurveKind::ROC;
  std::vector<CurvePoint> points;

  /// CSV with header "threshold,x,y".
  std::string to_csv() const;
};

/// (FPR, TPR) per distinct score, thresholds descending, from (0,0) to (1,1).
CurveSeries roc_curve(const std::vector<double>& scores, const std::vector<int>& truth);

/// Trapezoidal area under an ROC series.
double auc(const CurveSeries& curve);

/// (recall, precision) per distinct score, anchored at recall 0 with the
/// precision of the top-ranked group.
CurveSeries pr_curve(const std::vector<double>& scores, const std::vector<int>& truth);

/// K binary truth vectors, vector k is 1 where label == k.
std::vector<std::vector<int>> one_vs_rest(const std::vector<int>& labels, std::size_t classes);

/// Per-class one-vs-rest AUC from per-sample class scores ([n][K]); classes
/// lacking positives or negatives get NaN.
std::vector<double> per_class_auc(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels,
                                  std::size_t classes);

/// Report from labels and per-sample class scores: confusion of argmax,
/// weighted metrics, per-class and support-weighted AUC.
MetricsReport evaluate_scores(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels,
                              std::size_t classes);

}  // namespace nlran
