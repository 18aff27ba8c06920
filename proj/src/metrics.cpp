#include "nlran/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "nlran/errors.hpp"

namespace nlran {

using nlohmann::json;

namespace {

i128 gcd128(i128 a, i128 b) {
  if (a < 0) a = -a;
  if (b < 0) b = -b;
  while (b != 0) {
    const i128 t = a % b;
    a = b;
    b = t;
  }
  return a;
}

std::string int128_text(i128 v) {
  if (v == 0) return "0";
  const bool neg = v < 0;
  if (neg) v = -v;
  std::string s;
  while (v > 0) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  if (neg) s.push_back('-');
  return {s.rbegin(), s.rend()};
}

}  // namespace

Rational::Rational(long long num, long long den) : Rational(from_raw(num, den)) {}

Rational Rational::from_raw(i128 num, i128 den) {
  if (den == 0) throw InternalError("rational with zero denominator");
  if (den < 0) {
    num = -num;
    den = -den;
  }
  const i128 g = gcd128(num, den);
  if (g > 1) {
    num /= g;
    den /= g;
  }
  return Rational(Raw{}, num, den);
}

Rational Rational::operator+(const Rational& o) const {
  const i128 g = gcd128(den_, o.den_);
  const i128 a = o.den_ / g, b = den_ / g;
  return from_raw(num_ * a + o.num_ * b, den_ * a);
}

Rational Rational::operator*(const Rational& o) const {
  const i128 g1 = gcd128(num_, o.den_), g2 = gcd128(o.num_, den_);
  const i128 s1 = g1 ? g1 : 1, s2 = g2 ? g2 : 1;
  return from_raw((num_ / s1) * (o.num_ / s2), (den_ / s2) * (o.den_ / s1));
}

Rational Rational::operator/(const Rational& o) const {
  if (o.num_ == 0) throw InternalError("rational division by zero");
  return *this * from_raw(o.den_, o.num_);
}

double Rational::to_double() const {
  // Exact integer part plus a correctly scaled fraction keeps both terms
  // within double range for the magnitudes metrics produce.
  const i128 q = num_ / den_, r = num_ % den_;
  return static_cast<double>(q) + static_cast<double>(r) / static_cast<double>(den_);
}

std::string Rational::to_string() const { return int128_text(num_) + "/" + int128_text(den_); }

// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw ConfigError("confusion matrix needs at least one class");
}

ConfusionMatrix::ConfusionMatrix(std::vector<std::vector<std::uint64_t>> counts) : ConfusionMatrix(counts.size()) {
  for (std::size_t t = 0; t < k_; ++t) {
    if (counts[t].size() != k_) throw ShapeError("confusion matrix rows must be square");
    for (std::size_t p = 0; p < k_; ++p) counts_[t * k_ + p] = counts[t][p];
  }
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t n) {
  if (truth >= k_ || predicted >= k_) throw DataError("confusion: label outside [0," + std::to_string(k_) + ")");
  counts_[truth * k_ + predicted] += n;
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::support(std::size_t cls) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < k_; ++p) s += (*this)(cls, p);
  return s;
}

std::uint64_t ConfusionMatrix::predicted_count(std::size_t cls) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < k_; ++t) s += (*this)(t, cls);
  return s;
}

std::vector<std::vector<std::uint64_t>> ConfusionMatrix::rows() const {
  std::vector<std::vector<std::uint64_t>> out(k_, std::vector<std::uint64_t>(k_));
  for (std::size_t t = 0; t < k_; ++t) {
    for (std::size_t p = 0; p < k_; ++p) out[t][p] = (*this)(t, p);
  }
  return out;
}

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t classes) {
  if (truth.size() != predicted.size()) throw ShapeError("confusion: label vectors differ in length");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || predicted[i] < 0) throw DataError("confusion: negative label");
    cm.add(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(predicted[i]));
  }
  return cm;
}

MetricsReport weighted_metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw DataError("weighted_metrics: empty confusion matrix");
  const std::size_t k = cm.classes();
  MetricsReport report;
  report.confusion = cm;
  report.per_class.resize(k);
  const auto T = static_cast<long long>(total);

  Rational correct(0), wp(0), wr(0);
  for (std::size_t i = 0; i < k; ++i) {
    const auto tp = static_cast<long long>(cm(i, i));
    const auto support = static_cast<long long>(cm.support(i));
    const auto predicted = static_cast<long long>(cm.predicted_count(i));
    auto& c = report.per_class[i];
    Rational p(0), r(0);
    if (predicted > 0) p = Rational(tp, predicted);
    else c.precision_undefined = true;
    if (support > 0) r = Rational(tp, support);
    else c.recall_undefined = true;
    report.degenerate = report.degenerate || c.precision_undefined || c.recall_undefined;
    c.precision = p.to_double();
    c.recall = r.to_double();
    const Rational pr_sum = p + r;
    c.f1 = pr_sum.is_zero() ? 0.0 : (Rational(2) * p * r / pr_sum).to_double();

    const Rational weight(support, T);
    wp = wp + weight * p;
    wr = wr + weight * r;
    correct = correct + Rational(tp, T);
  }
  report.exact_accuracy = correct;
  report.exact_precision = wp;
  report.exact_recall = wr;
  const Rational sum = wp + wr;
  report.exact_f1 = sum.is_zero() ? Rational(0) : Rational(2) * wp * wr / sum;
  report.accuracy = correct.to_double();
  report.precision = wp.to_double();
  report.recall = wr.to_double();
  report.f1 = report.exact_f1.to_double();
  return report;
}

json MetricsReport::to_json() const {
  json classes = json::array();
  for (const auto& c : per_class) {
    classes.push_back({{"P", c.precision},
                       {"R", c.recall},
                       {"F1", c.f1},
                       {"AUC", std::isfinite(c.auc) ? json(c.auc) : json(nullptr)},
                       {"precision_undefined", c.precision_undefined},
                       {"recall_undefined", c.recall_undefined}});
  }
  return json{{"ACC", accuracy},
              {"P", precision},
              {"R", recall},
              {"F1", f1},
              {"AUC", auc},
              {"exact", {{"ACC", exact_accuracy.to_string()},
                         {"P", exact_precision.to_string()},
                         {"R", exact_recall.to_string()},
                         {"F1", exact_f1.to_string()}}},
              {"per_class", classes},
              {"confusion", confusion.rows()},
              {"degenerate", degenerate}};
}

// ---------------------------------------------------------------------------

namespace {

struct Tally {
  std::vector<double> thresholds;
  std::vector<std::uint64_t> tp, fp;  // cumulative at each distinct threshold, descending
  std::uint64_t positives = 0, negatives = 0;
};

Tally tally(const std::vector<double>& scores, const std::vector<int>& truth) {
  if (scores.size() != truth.size()) throw ShapeError("curve: scores and truth differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  Tally t;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t i = order[k];
    if (!std::isfinite(scores[i])) throw NumericError("curve: non-finite score");
    if (truth[i] != 0 && truth[i] != 1) throw DataError("curve: truth must be binary");
    (truth[i] ? tp : fp) += 1;
    if (k + 1 == order.size() || scores[order[k + 1]] != scores[i]) {
      t.thresholds.push_back(scores[i]);
      t.tp.push_back(tp);
      t.fp.push_back(fp);
    }
  }
  t.positives = tp;
  t.negatives = fp;
  return t;
}

}  // namespace

CurveSeries roc_curve(const std::vector<double>& scores, const std::vector<int>& truth) {
  const auto t = tally(scores, truth);
  if (t.positives == 0 || t.negatives == 0) {
    throw DataError("roc_curve: needs at least one positive and one negative sample");
  }
  CurveSeries c{CurveKind::ROC, {}};
  c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  for (std::size_t k = 0; k < t.thresholds.size(); ++k) {
    c.points.push_back({t.thresholds[k], double(t.fp[k]) / double(t.negatives), double(t.tp[k]) / double(t.positives)});
  }
  return c;
}

double auc(const CurveSeries& curve) {
  if (curve.kind != CurveKind::ROC) throw ConfigError("auc: expects an ROC curve");
  if (curve.points.size() < 2) throw DataError("auc: curve needs at least two points");
  double area = 0.0;
  for (std::size_t k = 1; k < curve.points.size(); ++k) {
    const auto& a = curve.points[k - 1];
    const auto& b = curve.points[k];
    area += (b.x - a.x) * (a.y + b.y) / 2.0;
  }
  return area;
}

CurveSeries pr_curve(const std::vector<double>& scores, const std::vector<int>& truth) {
  const auto t = tally(scores, truth);
  if (t.positives == 0) throw DataError("pr_curve: no positive samples");
  CurveSeries c{CurveKind::PR, {}};
  c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, double(t.tp[0]) / double(t.tp[0] + t.fp[0])});
  for (std::size_t k = 0; k < t.thresholds.size(); ++k) {
    c.points.push_back(
        {t.thresholds[k], double(t.tp[k]) / double(t.positives), double(t.tp[k]) / double(t.tp[k] + t.fp[k])});
  }
  return c;
}

std::string CurveSeries::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "threshold,x,y\n";
  for (const auto& p : points) {
    if (std::isinf(p.threshold)) os << "inf";
    else os << p.threshold;
    os << ',' << p.x << ',' << p.y << '\n';
  }
  return os.str();
}

std::vector<std::vector<int>> one_vs_rest(const std::vector<int>& labels, std::size_t classes) {
  std::vector<std::vector<int>> out(classes, std::vector<int>(labels.size(), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) throw DataError("one_vs_rest: label out of range");
    out[static_cast<std::size_t>(labels[i])][i] = 1;
  }
  return out;
}

std::vector<double> per_class_auc(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels,
                                  std::size_t classes) {
  const auto truth = one_vs_rest(labels, classes);
  std::vector<double> out(classes, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t k = 0; k < classes; ++k) {
    const auto pos = std::count(truth[k].begin(), truth[k].end(), 1);
    if (pos == 0 || pos == static_cast<long>(labels.size())) continue;
    std::vector<double> s(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) s[i] = scores[i].at(k);
    out[k] = auc(roc_curve(s, truth[k]));
  }
  return out;
}

MetricsReport evaluate_scores(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels,
                              std::size_t classes) {
  if (scores.size() != labels.size()) throw ShapeError("evaluate_scores: scores and labels differ in length");
  if (labels.empty()) throw DataError("evaluate_scores: nothing to evaluate");
  std::vector<int> predicted(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != classes) throw ShapeError("evaluate_scores: score row has wrong width");
    predicted[i] = static_cast<int>(std::max_element(scores[i].begin(), scores[i].end()) - scores[i].begin());
  }
  auto report = weighted_metrics(confusion(labels, predicted, classes));
  const auto aucs = per_class_auc(scores, labels, classes);
  double weighted = 0.0, weight = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    report.per_class[k].auc = aucs[k];
    if (std::isfinite(aucs[k])) {
      const double w = double(report.confusion.support(k));
      weighted += w * aucs[k];
      weight += w;
    }
  }
  report.auc = weight > 0 ? weighted / weight : std::numeric_limits<double>::quiet_NaN();
  return report;
}

}  // namespace nlran
