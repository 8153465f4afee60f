#include "metamer/analysis.hpp"

#include <gsl/gsl_cdf.h>
#include <gsl/gsl_multimin.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "csv.hpp"
#include "metamer/error.hpp"
#include "rng.hpp"

namespace metamer {
using detail::csv_field;
using detail::num;

void BootstrapOptions::validate() const {
  if (samples < 1) throw ConfigError("bootstrap samples must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap level must lie in (0, 1)");
}

namespace {

// Percentile interval of sorted resamples: the floor(a B)-th and
// ceil((1 - a) B)-th order statistics with a = (1 - level) / 2.
ConfidenceInterval percentile_interval(std::vector<double>& v, double level) {
  std::sort(v.begin(), v.end());
  const double a = (1.0 - level) / 2.0;
  const auto b = static_cast<double>(v.size());
  const auto lo = static_cast<std::size_t>(std::floor(a * b));
  auto hi = static_cast<std::size_t>(std::ceil((1.0 - a) * b));
  hi = hi == 0 ? 0 : hi - 1;
  return {v[std::min(lo, v.size() - 1)], v[std::min(hi, v.size() - 1)]};
}

void check_counts(int k, int n) {
  if (n < 1 || k < 0 || k > n)
    throw ConfigError("proportion counts must satisfy 0 <= k <= n, n >= 1 (got " + std::to_string(k) + "/" +
                      std::to_string(n) + ")");
}

}  // namespace

ConfidenceInterval bootstrap_ci(int k, int n, const BootstrapOptions& opts) {
  opts.validate();
  check_counts(k, n);
  std::mt19937_64 rng(opts.seed);
  std::binomial_distribution<int> draw(n, static_cast<double>(k) / n);
  std::vector<double> v(opts.samples);
  for (double& x : v) x = static_cast<double>(draw(rng)) / n;
  return percentile_interval(v, opts.level);
}

const char* pool_mode_name(PoolMode m) { return m == PoolMode::kPooledTrials ? "pooled_trials" : "mean_of_subjects"; }

PoolMode pool_mode_from_name(const std::string& s) {
  if (s == "pooled_trials" || s == "pooled") return PoolMode::kPooledTrials;
  if (s == "mean_of_subjects" || s == "mean") return PoolMode::kMeanOfSubjects;
  throw ConfigError("unknown pooling mode '" + s + "' (expected pooled_trials or mean_of_subjects)");
}

// ---------------------------------------------------------------------------

nlohmann::json PsychometricCurve::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points)
    pts.push_back({{"eccentricity_deg", p.eccentricity_deg},
                   {"k", p.k},
                   {"n", p.n},
                   {"proportion", p.proportion},
                   {"ci_low", p.low},
                   {"ci_high", p.high}});
  return {{"family", condition.family}, {"variant", condition.variant}, {"task", task_name(task)},
          {"chance", chance},           {"mode", pool_mode_name(mode)}, {"subjects", subjects},
          {"points", pts}};
}

std::string PsychometricCurve::to_csv() const {
  std::string out = "family,variant,task,mode,eccentricity_deg,k,n,proportion,ci_low,ci_high\n";
  for (const auto& p : points)
    out += csv_field(condition.family) + "," + condition.variant + "," + task_name(task) + "," +
           pool_mode_name(mode) + "," + num(p.eccentricity_deg) + "," + std::to_string(p.k) + "," +
           std::to_string(p.n) + "," + num(p.proportion) + "," + num(p.low) + "," + num(p.high) + "\n";
  return out;
}

PsychometricCurve curve_from_json(const nlohmann::json& j) {
  try {
    PsychometricCurve c;
    c.condition = {j.at("family").get<std::string>(), j.at("variant").get<std::string>()};
    c.task = task_from_name(j.at("task").get<std::string>());
    c.chance = j.at("chance").get<double>();
    c.mode = pool_mode_from_name(j.at("mode").get<std::string>());
    c.subjects = j.at("subjects").get<int>();
    for (const auto& p : j.at("points"))
      c.points.push_back({p.at("eccentricity_deg").get<double>(), p.at("k").get<int>(), p.at("n").get<int>(),
                          p.at("proportion").get<double>(), p.at("ci_low").get<double>(),
                          p.at("ci_high").get<double>()});
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw StructureError(std::string("malformed curve: ") + e.what());
  }
}

PsychometricCurve build_curve(const std::vector<CellTable>& subjects, const Condition& condition, PoolMode mode,
                              const BootstrapOptions& opts) {
  opts.validate();
  if (subjects.empty()) throw StructureError("no session tables to build a curve from");
  PsychometricCurve c;
  c.condition = condition;
  c.task = subjects.front().task;
  c.chance = chance_level(c.task);
  c.mode = mode;
  c.subjects = static_cast<int>(subjects.size());
  // eccentricity -> one (k, n) per subject that has the cell
  std::map<double, std::vector<std::pair<int, int>>> cells;
  for (const auto& t : subjects) {
    if (t.task != c.task) throw StructureError("cannot pool oddity and 2AFC tables into one curve");
    for (const auto& r : t.cells)
      if (r.condition == condition && r.n > 0) cells[r.eccentricity_deg].push_back({r.k, r.n});
  }
  if (cells.empty()) throw StructureError("no data for condition " + condition.label());
  std::size_t idx = 0;
  for (const auto& [ecc, counts] : cells) {
    CurvePoint p;
    p.eccentricity_deg = ecc;
    for (const auto& [k, n] : counts) {
      p.k += k;
      p.n += n;
    }
    BootstrapOptions o = opts;
    o.seed = detail::mix_seed(opts.seed, idx++);
    if (mode == PoolMode::kPooledTrials) {
      p.proportion = static_cast<double>(p.k) / p.n;
      const auto ci = bootstrap_ci(p.k, p.n, o);
      p.low = ci.low;
      p.high = ci.high;
    } else {
      double mean = 0.0;
      for (const auto& [k, n] : counts) mean += static_cast<double>(k) / n;
      p.proportion = mean / counts.size();
      std::mt19937_64 rng(o.seed);
      std::vector<std::binomial_distribution<int>> draws;
      for (const auto& [k, n] : counts) draws.emplace_back(n, static_cast<double>(k) / n);
      std::vector<double> v(o.samples);
      for (double& x : v) {
        double s = 0.0;
        for (std::size_t i = 0; i < counts.size(); ++i) s += static_cast<double>(draws[i](rng)) / counts[i].second;
        x = s / counts.size();
      }
      const auto ci = percentile_interval(v, o.level);
      p.low = ci.low;
      p.high = ci.high;
    }
    c.points.push_back(p);
  }
  return c;
}

// ---------------------------------------------------------------------------

double SigmoidFit::at(double r) const {
  if (!decay) return ceiling;
  return floor + (ceiling - floor) / (1.0 + std::exp(beta * (r - r0)));
}

bool SigmoidFit::has_flag(const std::string& f) const { return std::find(flags.begin(), flags.end(), f) != flags.end(); }

nlohmann::json SigmoidFit::to_json() const {
  auto finite = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"floor", floor},
          {"ceiling", ceiling},
          {"r0", finite(r0)},
          {"beta", beta},
          {"log_likelihood", log_likelihood},
          {"flat_log_likelihood", flat_log_likelihood},
          {"decay", decay},
          {"flags", flags},
          {"ecc_min", ecc_min},
          {"ecc_max", ecc_max}};
}

namespace {

struct FitData {
  std::vector<double> r;
  std::vector<int> k, n;
  double floor = 0.0;
};

double logistic(double u) { return 1.0 / (1.0 + std::exp(-u)); }

// Unconstrained parameters: x = (u, r0, v) with ceiling = floor + (1 -
// floor) logistic(u) and beta = exp(v).
struct Params {
  double ceiling, r0, beta;
};

Params decode(const FitData& d, const double* x) {
  const double v = std::clamp(x[2], -20.0, 5.0);
  return {d.floor + (1.0 - d.floor) * logistic(x[0]), x[1], std::exp(v)};
}

double binomial_ll(const std::vector<int>& k, const std::vector<int>& n, const std::vector<double>& p) {
  double ll = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double q = std::clamp(p[i], 1e-12, 1.0 - 1e-12);
    ll += k[i] * std::log(q) + (n[i] - k[i]) * std::log1p(-q);
  }
  return ll;
}

double negative_ll(const gsl_vector* xv, void* ctx) {
  const auto& d = *static_cast<const FitData*>(ctx);
  const double x[3] = {gsl_vector_get(xv, 0), gsl_vector_get(xv, 1), gsl_vector_get(xv, 2)};
  const Params p = decode(d, x);
  std::vector<double> q(d.r.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double z = p.beta * (d.r[i] - p.r0);
    // 1 / (1 + e^z) without overflow
    const double s = z > 0 ? std::exp(-z) / (1.0 + std::exp(-z)) : 1.0 / (1.0 + std::exp(z));
    q[i] = d.floor + (p.ceiling - d.floor) * s;
  }
  return -binomial_ll(d.k, d.n, q);
}

struct Minimum {
  double x[3];
  double nll;
};

Minimum nelder_mead(FitData& d, const double* start, const double* step) {
  const gsl_multimin_fminimizer_type* type = gsl_multimin_fminimizer_nmsimplex2;
  gsl_multimin_fminimizer* s = gsl_multimin_fminimizer_alloc(type, 3);
  gsl_vector *x = gsl_vector_alloc(3), *ss = gsl_vector_alloc(3);
  for (int i = 0; i < 3; ++i) {
    gsl_vector_set(x, i, start[i]);
    gsl_vector_set(ss, i, step[i]);
  }
  gsl_multimin_function f{&negative_ll, 3, &d};
  gsl_multimin_fminimizer_set(s, &f, x, ss);
  for (int it = 0; it < 2000; ++it) {
    if (gsl_multimin_fminimizer_iterate(s)) break;
    if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(s), 1e-9) == GSL_SUCCESS) break;
  }
  Minimum m{{gsl_vector_get(s->x, 0), gsl_vector_get(s->x, 1), gsl_vector_get(s->x, 2)}, s->fval};
  gsl_vector_free(x);
  gsl_vector_free(ss);
  gsl_multimin_fminimizer_free(s);
  return m;
}

FitData fit_data(const PsychometricCurve& c) {
  FitData d;
  d.floor = c.chance;
  for (const auto& p : c.points) {
    if (p.n <= 0) continue;
    d.r.push_back(p.eccentricity_deg);
    d.k.push_back(p.k);
    d.n.push_back(p.n);
  }
  return d;
}

double logit_ceiling(double c, double floor) {
  const double t = std::clamp((c - floor) / (1.0 - floor), 1e-3, 1.0 - 1e-3);
  return std::log(t / (1.0 - t));
}

}  // namespace

SigmoidFit fit_sigmoid(const PsychometricCurve& curve) {
  FitData d = fit_data(curve);
  if (d.r.size() < 3) throw ConfigError("fit_sigmoid needs at least 3 eccentricity points");
  if (!(curve.chance > 0.0 && curve.chance < 1.0)) throw ConfigError("chance level must lie in (0, 1)");
  SigmoidFit fit;
  fit.floor = d.floor;
  fit.ecc_min = *std::min_element(d.r.begin(), d.r.end());
  fit.ecc_max = *std::max_element(d.r.begin(), d.r.end());
  const double span = std::max(fit.ecc_max - fit.ecc_min, 1.0);

  int K = 0, N = 0;
  double pmax = 0.0;
  for (std::size_t i = 0; i < d.r.size(); ++i) {
    K += d.k[i];
    N += d.n[i];
    pmax = std::max(pmax, static_cast<double>(d.k[i]) / d.n[i]);
  }
  const double pflat = static_cast<double>(K) / N;
  fit.flat_log_likelihood = binomial_ll(d.k, d.n, std::vector<double>(d.r.size(), pflat));

  // Multistart grid: midpoint across the tested range, three slopes per
  // unit span, ceiling at the observed maximum or near 1.
  Minimum best{{0, 0, 0}, std::numeric_limits<double>::infinity()};
  const double step[3] = {1.0, span / 4.0, 0.5};
  for (double frac : {0.0, 0.25, 0.5, 0.75, 1.0})
    for (double slope : {1.0, 4.0, 16.0})
      for (double c0 : {pmax, 0.99}) {
        const double start[3] = {logit_ceiling(c0, d.floor), fit.ecc_min + frac * span, std::log(slope / span)};
        const Minimum m = nelder_mead(d, start, step);
        if (m.nll < best.nll) best = m;
      }
  const Params p = decode(d, best.x);
  fit.log_likelihood = -best.nll;
  const double lr = 2.0 * (fit.log_likelihood - fit.flat_log_likelihood);
  fit.decay = lr > gsl_cdf_chisq_Pinv(0.95, 2.0);
  if (fit.decay) {
    fit.ceiling = p.ceiling;
    fit.r0 = p.r0;
    fit.beta = p.beta;
  } else {
    fit.ceiling = std::clamp(pflat, d.floor, 1.0);
    fit.r0 = std::numeric_limits<double>::infinity();
    fit.beta = 0.0;
    fit.log_likelihood = fit.flat_log_likelihood;
    fit.flags.push_back("no measurable decay");
    BootstrapOptions o;
    o.seed = 1;
    if (bootstrap_ci(K, N, o).low <= d.floor) fit.flags.push_back("degenerate");
  }
  return fit;
}

SigmoidSE sigmoid_bootstrap_se(const PsychometricCurve& curve, const SigmoidFit& fit, int resamples,
                               std::uint64_t seed) {
  if (!fit.decay) throw ConfigError("bootstrap SE needs a decaying fit");
  if (resamples < 2) throw ConfigError("bootstrap SE needs >= 2 resamples");
  FitData d = fit_data(curve);
  const double span = std::max(fit.ecc_max - fit.ecc_min, 1.0);
  const double start[3] = {logit_ceiling(fit.ceiling, d.floor), fit.r0, std::log(fit.beta)};
  const double step[3] = {1.0, span / 4.0, 0.5};
  std::vector<double> cs, rs, bs;
  for (int b = 0; b < resamples; ++b) {
    std::mt19937_64 rng(detail::mix_seed(seed, b));
    for (std::size_t i = 0; i < d.r.size(); ++i)
      d.k[i] = std::binomial_distribution<int>(d.n[i], fit.at(d.r[i]))(rng);
    const Minimum m = nelder_mead(d, start, step);
    const Params p = decode(d, m.x);
    cs.push_back(p.ceiling);
    rs.push_back(p.r0);
    bs.push_back(p.beta);
  }
  auto sd = [](const std::vector<double>& v) {
    double m = 0.0, s = 0.0;
    for (double x : v) m += x;
    m /= v.size();
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (v.size() - 1));
  };
  return {sd(cs), sd(rs), sd(bs)};
}

// ---------------------------------------------------------------------------

nlohmann::json CurveComparison::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : points)
    pts.push_back({{"eccentricity_deg", p.eccentricity_deg},
                   {"difference", p.difference},
                   {"ci_low", p.low},
                   {"ci_high", p.high},
                   {"covers_zero", p.covers_zero}});
  return {{"a", a},
          {"b", b},
          {"points", pts},
          {"max_abs_difference", max_abs_difference},
          {"point_level", point_level},
          {"verdict", equal ? "equal" : "different"}};
}

CurveComparison compare_curves(const PsychometricCurve& a, const PsychometricCurve& b, const BootstrapOptions& opts) {
  opts.validate();
  if (a.points.size() != b.points.size())
    throw StructureError("curves have different eccentricity grids (" + std::to_string(a.points.size()) + " vs " +
                         std::to_string(b.points.size()) + " points); interpolation is refused");
  for (std::size_t i = 0; i < a.points.size(); ++i)
    if (a.points[i].eccentricity_deg != b.points[i].eccentricity_deg)
      throw StructureError("curves have different eccentricity grids at " + num(a.points[i].eccentricity_deg) +
                           " vs " + num(b.points[i].eccentricity_deg) + " deg; interpolation is refused");
  if (a.points.empty()) throw StructureError("cannot compare empty curves");

  // Resample in a canonical order so that swapping the arguments negates
  // the result exactly.
  auto counts = [](const PsychometricCurve& c) {
    std::vector<std::pair<int, int>> v;
    for (const auto& p : c.points) v.push_back({p.k, p.n});
    return v;
  };
  const auto ca = counts(a), cb = counts(b);
  const bool swapped = cb < ca;
  const bool same = ca == cb;
  const PsychometricCurve& first = swapped ? b : a;
  const PsychometricCurve& second = swapped ? a : b;

  CurveComparison out;
  out.a = a.condition.label();
  out.b = b.condition.label();
  const double m = static_cast<double>(a.points.size());
  out.point_level = 1.0 - (1.0 - opts.level) / m;
  for (std::size_t i = 0; i < first.points.size(); ++i) {
    const auto& p = first.points[i];
    const auto& q = second.points[i];
    if (p.n < 1 || q.n < 1) throw StructureError("curve point without trials");
    std::mt19937_64 rng(detail::mix_seed(opts.seed, i));
    std::binomial_distribution<int> da(p.n, static_cast<double>(p.k) / p.n), db(q.n, static_cast<double>(q.k) / q.n);
    std::vector<double> v(opts.samples);
    for (double& x : v) {
      const double xa = static_cast<double>(da(rng)) / p.n;
      const double xb = static_cast<double>(db(rng)) / q.n;
      x = xa - xb;
    }
    auto ci = percentile_interval(v, out.point_level);
    if (same) {
      const double h = std::max(std::abs(ci.low), std::abs(ci.high));
      ci = {-h, h};
    }
    DiffPoint d;
    d.eccentricity_deg = p.eccentricity_deg;
    d.difference = static_cast<double>(p.k) / p.n - static_cast<double>(q.k) / q.n;
    d.low = ci.low;
    d.high = ci.high;
    if (swapped) {
      d.difference = -d.difference;
      d.low = -ci.high;
      d.high = -ci.low;
    }
    if (same) d.difference = 0.0;
    d.covers_zero = d.low <= 0.0 && d.high >= 0.0;
    out.max_abs_difference = std::max(out.max_abs_difference, std::abs(d.difference));
    out.equal = out.equal && d.covers_zero;
    out.points.push_back(d);
  }
  return out;
}

std::optional<double> critical_eccentricity(const SigmoidFit& fit, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  if (!fit.decay) return std::nullopt;
  const double r = fit.r0 + std::log(1.0 / threshold - 1.0) / fit.beta;
  if (!(r >= fit.ecc_min && r <= fit.ecc_max)) return std::nullopt;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::string curves_svg(const std::vector<PsychometricCurve>& curves, const std::vector<std::optional<SigmoidFit>>& fits,
                       const std::string& title) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  const double W = 640, H = 420, L = 60, R = 180, T = 40, B = 50;
  double emax = 1.0;
  for (const auto& c : curves)
    for (const auto& p : c.points) emax = std::max(emax, p.eccentricity_deg);
  emax *= 1.05;
  auto X = [&](double e) { return L + (W - L - R) * e / emax; };
  auto Y = [&](double p) { return T + (H - T - B) * (1.0 - p); };

  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(W) + "\" height=\"" + fmt(H) +
                  "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + fmt(L) + "\" y=\"24\" font-size=\"14\">" + xml_escape(title) + "</text>\n";
  s += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(Y(0)) + "\" x2=\"" + fmt(W - R) + "\" y2=\"" + fmt(Y(0)) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(Y(0)) + "\" x2=\"" + fmt(L) + "\" y2=\"" + fmt(Y(1)) +
       "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double p = i / 4.0;
    s += "<text x=\"" + fmt(L - 8) + "\" y=\"" + fmt(Y(p) + 4) + "\" text-anchor=\"end\">" + fmt(p) + "</text>\n";
  }
  for (int i = 0; i <= 5; ++i) {
    const double e = emax * i / 5.0;
    s += "<text x=\"" + fmt(X(e)) + "\" y=\"" + fmt(Y(0) + 18) + "\" text-anchor=\"middle\">" + fmt(e) + "</text>\n";
  }
  s += "<text x=\"" + fmt((L + W - R) / 2) + "\" y=\"" + fmt(H - 10) +
       "\" text-anchor=\"middle\">eccentricity (deg)</text>\n";
  s += "<text x=\"16\" y=\"" + fmt((T + H - B) / 2) + "\" transform=\"rotate(-90 16 " + fmt((T + H - B) / 2) +
       ")\" text-anchor=\"middle\">proportion correct</text>\n";

  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const auto& c = curves[ci];
    const std::string col = palette[ci % 6];
    s += "<line x1=\"" + fmt(L) + "\" y1=\"" + fmt(Y(c.chance)) + "\" x2=\"" + fmt(W - R) + "\" y2=\"" +
         fmt(Y(c.chance)) + "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
    for (const auto& p : c.points) {
      s += "<line x1=\"" + fmt(X(p.eccentricity_deg)) + "\" y1=\"" + fmt(Y(p.low)) + "\" x2=\"" +
           fmt(X(p.eccentricity_deg)) + "\" y2=\"" + fmt(Y(p.high)) + "\" stroke=\"" + col + "\"/>\n";
      s += "<circle cx=\"" + fmt(X(p.eccentricity_deg)) + "\" cy=\"" + fmt(Y(p.proportion)) + "\" r=\"4\" fill=\"" +
           col + "\"/>\n";
    }
    if (ci < fits.size() && fits[ci]) {
      const auto& f = *fits[ci];
      std::string pts;
      for (int i = 0; i <= 100; ++i) {
        const double e = emax * i / 100.0;
        pts += fmt(X(e)) + "," + fmt(Y(f.at(e))) + " ";
      }
      s += "<polyline fill=\"none\" stroke=\"" + col + "\" points=\"" + pts + "\"/>\n";
    }
    s += "<text x=\"" + fmt(W - R + 10) + "\" y=\"" + fmt(T + 16 * (ci + 1)) + "\" fill=\"" + col + "\">" +
         xml_escape(c.condition.label()) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace metamer
