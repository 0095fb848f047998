// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "approxmac/error.hpp"
#include "approxmac/graph.hpp"
#include "approxmac/modelio.hpp"
#include "approxmac/multipliers.hpp"
#include "approxmac/parallel.hpp"
#include "approxmac/qformat.hpp"
#include "approxmac/rng.hpp"

// Error measurement: multiplier characterization, dot-product convergence,
// per-channel variance ratios and per-layer mean deviation profiles.
//
// All statistics are double precision and reduced sequentially in index
// order after any parallel section, so results never depend on the number of
// worker threads.

namespace approxmac {

/// (|approx| - |exact|) / |exact|.
inline double relative_error(QAcc exact, QAcc approx) {
  if (exact.raw == 0) throw Error(ErrorCode::ZeroReference, "relative error against an exact product of zero");
  const int128_t e = exact.raw < 0 ? -exact.raw : exact.raw;
  const int128_t a = approx.raw < 0 ? -approx.raw : approx.raw;
  return static_cast<double>(static_cast<long double>(a - e) / static_cast<long double>(e));
}

/// Operand distributions for characterization.
enum class RangePolicy {
  Uniform,         // uniform over nonzero QNum raws, -2^31 excluded
  Positive,        // uniform over raws in [1, 2^31 - 1]
  LayerRealistic,  // weight ~ N(0, 0.1), activation ~ |N(0, 1)|, both quantized
};

inline std::string to_string(RangePolicy p) {
  switch (p) {
    case RangePolicy::Uniform: return "uniform";
    case RangePolicy::Positive: return "positive";
    case RangePolicy::LayerRealistic: return "layer";
  }
  return "unknown";
}

inline RangePolicy range_policy_from_string(const std::string& s) {
  for (auto p : {RangePolicy::Uniform, RangePolicy::Positive, RangePolicy::LayerRealistic}) {
    if (to_string(p) == s) return p;
  }
  throw Error(ErrorCode::InvalidSpec, "unknown range policy '" + s + "'");
}

struct OperandPair {
  QNum a, b;
};

inline OperandPair draw_pair(Rng& rng, RangePolicy policy) {
  constexpr std::int64_t lo = std::numeric_limits<std::int32_t>::min() + 1;
  constexpr std::int64_t hi = std::numeric_limits<std::int32_t>::max();
  auto nonzero = [&] {
    std::int64_t r;
    do {
      r = rng.uniform_int(lo, hi);
    } while (r == 0);
    return QNum{static_cast<std::int32_t>(r)};
  };
  switch (policy) {
    case RangePolicy::Uniform: {
      const QNum a = nonzero();
      return {a, nonzero()};
    }
    case RangePolicy::Positive: {
      const QNum a{static_cast<std::int32_t>(rng.uniform_int(1, hi))};
      return {a, QNum{static_cast<std::int32_t>(rng.uniform_int(1, hi))}};
    }
    case RangePolicy::LayerRealistic: {
      const QNum a = quantize(rng.normal(0.0, 0.1));
      return {a, quantize(std::fabs(rng.normal()))};
    }
  }
  return {};
}

struct ErrorSample {
  double rel_err = 0.0;
  QNum a, b;
};

struct Histogram {
  double lo = -0.25;
  double hi = 0.25;
  std::vector<std::uint64_t> counts = std::vector<std::uint64_t>(200, 0);
  std::uint64_t below = 0;
  std::uint64_t above = 0;

  void add(double x) {
    if (x < lo) {
      ++below;
    } else if (x >= hi) {
      ++above;
    } else {
      auto bin = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(counts.size()));
      ++counts[std::min(bin, counts.size() - 1)];
    }
  }
  double bin_lo(std::size_t i) const { return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(counts.size()); }
};

/// Running mean/variance/min/max, fed in a fixed order.
class Moments {
 public:
  void add(double x) {
    ++n_;
    const double d = x - mean_;
    mean_ += d / static_cast<double>(n_);
    m2_ += d * (x - mean_);
    min_ = std::min(min_, x);
    max_ = std::max(max_, x);
  }
  std::uint64_t count() const { return n_; }
  double mean() const { return n_ ? mean_ : 0.0; }
  /// Population variance.
  double variance() const { return n_ ? m2_ / static_cast<double>(n_) : 0.0; }
  double min() const { return n_ ? min_ : 0.0; }
  double max() const { return n_ ? max_ : 0.0; }

 private:
  std::uint64_t n_ = 0;
  double mean_ = 0.0, m2_ = 0.0;
  double min_ = std::numeric_limits<double>::infinity();
  double max_ = -std::numeric_limits<double>::infinity();
};

struct CharacterizeOptions {
  std::size_t samples = 1'000'000;
  std::uint64_t seed = 1;
  RangePolicy range = RangePolicy::Uniform;
  bool keep_samples = false;
  unsigned threads = 1;
};

struct ErrorSummary {
  MultiplierSpec spec;
  CharacterizeOptions options;
  std::uint64_t used = 0;      // pairs with a nonzero exact product
  std::uint64_t excluded = 0;  // pairs with a zero exact product
  double mean = 0.0, variance = 0.0, min = 0.0, max = 0.0;
  Histogram histogram;
  std::vector<ErrorSample> dump;
};

inline ErrorSummary characterize(const MultiplierSpec& spec, const CharacterizeOptions& opt) {
  if (opt.samples == 0) throw Error(ErrorCode::InvalidSpec, "characterization needs at least one sample");
  const Multiplier mul(spec);
  Rng rng(opt.seed);
  std::vector<OperandPair> pairs(opt.samples);
  for (auto& p : pairs) p = draw_pair(rng, opt.range);

  constexpr double kExcluded = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> errs(pairs.size());
  mul.visit([&](const auto& kernel) {
    parallel_for(pairs.size(), opt.threads, [&](std::size_t i) {
      const QAcc exact = mul_exact(pairs[i].a, pairs[i].b);
      errs[i] = exact.raw == 0 ? kExcluded : relative_error(exact, kernel(pairs[i].a, pairs[i].b));
    });
  });

  ErrorSummary s;
  s.spec = spec;
  s.options = opt;
  Moments m;
  for (std::size_t i = 0; i < errs.size(); ++i) {
    if (std::isnan(errs[i])) {
      ++s.excluded;
      continue;
    }
    m.add(errs[i]);
    s.histogram.add(errs[i]);
    if (opt.keep_samples) s.dump.push_back(ErrorSample{errs[i], pairs[i].a, pairs[i].b});
  }
  s.used = m.count();
  s.mean = m.mean();
  s.variance = m.variance();
  s.min = m.min();
  s.max = m.max();
  return s;
}

// Dot-product convergence ------------------------------------------------------

struct ConvergencePoint {
  std::size_t length = 0;
  std::size_t trials = 0;
  double mean = 0.0;
  double variance = 0.0;
};

/// Relative error of approximate-multiply, exact-accumulate dot products of
/// random vectors, per length. Operands follow `range` (positive by default,
/// so partial sums cannot cancel). Trial t of length index i draws from its
/// own stream derive_seed(seed, i, t).
inline std::vector<ConvergencePoint> dot_error_convergence(const MultiplierSpec& spec,
                                                           const std::vector<std::size_t>& lengths,
                                                           std::size_t trials, std::uint64_t seed,
                                                           RangePolicy range = RangePolicy::Positive,
                                                           unsigned threads = 1) {
  if (trials == 0) throw Error(ErrorCode::InvalidSpec, "convergence needs at least one trial");
  const Multiplier mul(spec);
  std::vector<ConvergencePoint> out;
  for (std::size_t li = 0; li < lengths.size(); ++li) {
    const std::size_t n = lengths[li];
    if (n == 0) throw Error(ErrorCode::InvalidSpec, "dot-product length must be at least 1");
    std::vector<double> errs(trials);
    mul.visit([&](const auto& kernel) {
      parallel_for(trials, threads, [&](std::size_t t) {
        Rng rng(derive_seed(seed, li, t));
        QAcc exact, approx;
        for (std::size_t k = 0; k < n; ++k) {
          const OperandPair p = draw_pair(rng, range);
          exact = acc_add(exact, mul_exact(p.a, p.b));
          approx = acc_add(approx, kernel(p.a, p.b));
        }
        errs[t] = exact.raw == 0 ? std::numeric_limits<double>::quiet_NaN() : relative_error(exact, approx);
      });
    });
    Moments m;
    for (double e : errs)
      if (!std::isnan(e)) m.add(e);
    out.push_back(ConvergencePoint{n, static_cast<std::size_t>(m.count()), m.mean(), m.variance()});
  }
  return out;
}

// Model comparison -------------------------------------------------------------

/// Where the per-layer deviation is sampled.
enum class ProfilePoint {
  LayerOutput,  // conv / fc outputs, before any batch norm or activation
  Activation,   // relu outputs
};

struct LayerDeviation {
  std::string node;
  double mean = 0.0;             // mean over samples of the per-sample mean deviation
  std::uint64_t elements = 0;    // positive exact elements seen
  std::uint64_t samples = 0;     // samples with at least one such element
};

struct LayerErrorProfile {
  ProfilePoint point = ProfilePoint::LayerOutput;
  std::vector<LayerDeviation> layers;
};

struct ChannelVariance {
  std::size_t channel = 0;
  double error_variance = 0.0;   // geometric mean over this channel's maps
  double output_variance = 0.0;  // geometric mean over this channel's maps
  std::uint64_t maps = 0;
  std::uint64_t degenerate = 0;
};

struct ChannelVarianceReport {
  std::string node;
  std::vector<ChannelVariance> channels;
  double error_gmean = 0.0;
  double output_gmean = 0.0;
  double pct = 0.0;  // 100 * error_gmean / output_gmean
  std::uint64_t maps = 0;
  std::uint64_t degenerate = 0;
};

/// Maps whose exact output variance falls below this are excluded from the
/// geometric means and counted as degenerate.
inline constexpr double kDegenerateVariance = 0x1.0p-24;

struct CompareOptions {
  ProfilePoint point = ProfilePoint::LayerOutput;
  unsigned threads = 1;
};

struct Comparison {
  MultiplierSpec spec;
  Pipeline pipeline = Pipeline::Fixed;
  std::size_t samples = 0;
  LayerErrorProfile profile;
  std::vector<ChannelVarianceReport> variance;
  /// Saturations of the approximate pass, per node, summed over samples.
  std::map<std::string, std::uint64_t> saturations;
};

namespace detail {

struct MapStats {
  double error_variance = 0.0;
  double output_variance = 0.0;
};

struct SampleComparison {
  std::vector<double> deviation_sum;  // per profiled layer
  std::vector<std::uint64_t> deviation_count;
  std::vector<std::vector<MapStats>> maps;  // per conv layer, per channel
  std::map<std::string, std::uint64_t> saturations;
};

inline std::vector<const Node*> profiled_nodes(const ModelGraph& g, ProfilePoint point) {
  std::vector<const Node*> out;
  for (const auto& n : g.nodes) {
    if (point == ProfilePoint::LayerOutput ? n.multiplies() : n.kind == NodeKind::Relu) out.push_back(&n);
  }
  return out;
}

inline std::vector<const Node*> conv_nodes(const ModelGraph& g) {
  std::vector<const Node*> out;
  for (const auto& n : g.nodes)
    if (n.kind == NodeKind::Conv) out.push_back(&n);
  return out;
}

inline MapStats map_stats(const Tensor<double>& exact, const Tensor<double>& approx, std::size_t c) {
  const Shape& s = exact.shape();
  Moments err, out;
  for (std::size_t h = 0; h < s.h; ++h) {
    for (std::size_t w = 0; w < s.w; ++w) {
      const double e = exact.at(0, c, h, w);
      err.add(approx.at(0, c, h, w) - e);
      out.add(e);
    }
  }
  return MapStats{err.variance(), out.variance()};
}

/// Geometric mean; zero if any term is zero.
inline double geometric_mean(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double log_sum = 0.0;
  for (double x : xs) {
    if (x <= 0.0) return 0.0;
    log_sum += std::log(x);
  }
  return std::exp(log_sum / static_cast<double>(xs.size()));
}

}  // namespace detail

/// Runs the exact reference and the approximate model on the same inputs in
/// one pass over the samples. The reference graph runs with every per-node
/// override removed, exactly, in the approximate run's pipeline (fixed point,
/// or binary32 for bfloat16). Passing a distinct reference lets the
/// approximate model carry adjusted batch-norm statistics while the
/// reference keeps the original ones; both must share edge names.
inline Comparison compare_model(const ModelGraph& reference_model, const ModelGraph& model, const MultiplierSpec& spec,
                                const std::vector<Tensor<float>>& inputs, const CompareOptions& opt = {}) {
  validate(spec);
  const Pipeline pipeline = pipeline_for(spec);
  const ModelGraph reference = without_overrides(reference_model);
  const auto profiled = detail::profiled_nodes(model, opt.point);
  const auto convs = detail::conv_nodes(model);
  for (const auto* list : {&profiled, &convs}) {
    for (const Node* n : *list) {
      const Node* r = reference.find(n->name);
      if (!r || r->output != n->output || r->kind != n->kind) {
        throw Error(ErrorCode::ShapeMismatch, "reference model has no node matching '" + n->name + "'");
      }
    }
  }

  std::vector<detail::SampleComparison> per_sample(inputs.size());
  parallel_for(inputs.size(), opt.threads, [&](std::size_t i) {
    if (inputs[i].shape().n != 1) throw Error(ErrorCode::ShapeMismatch, "comparison samples must have batch size 1");
    const auto exact = forward_real_values(reference, inputs[i], MultiplierSpec::exact(), pipeline);
    auto& r = per_sample[i];
    const auto approx = forward_real_values(model, inputs[i], spec, pipeline, {}, &r.saturations);
    for (const Node* n : profiled) {
      const auto& e = exact.at(n->output).values();
      const auto& a = approx.at(n->output).values();
      double sum = 0.0;
      std::uint64_t count = 0;
      for (std::size_t k = 0; k < e.size(); ++k) {
        if (e[k] > 0.0) {
          sum += (a[k] - e[k]) / e[k];
          ++count;
        }
      }
      r.deviation_sum.push_back(sum);
      r.deviation_count.push_back(count);
    }
    for (const Node* n : convs) {
      const auto& e = exact.at(n->output);
      const auto& a = approx.at(n->output);
      std::vector<detail::MapStats> maps;
      for (std::size_t c = 0; c < e.shape().c; ++c) maps.push_back(detail::map_stats(e, a, c));
      r.maps.push_back(std::move(maps));
    }
  });

  Comparison out;
  out.spec = spec;
  out.pipeline = pipeline;
  out.samples = inputs.size();
  out.profile.point = opt.point;
  for (std::size_t l = 0; l < profiled.size(); ++l) {
    LayerDeviation d;
    d.node = profiled[l]->name;
    double sum = 0.0;
    for (const auto& r : per_sample) {
      d.elements += r.deviation_count[l];
      if (r.deviation_count[l] == 0) continue;
      sum += r.deviation_sum[l] / static_cast<double>(r.deviation_count[l]);
      ++d.samples;
    }
    d.mean = d.samples ? sum / static_cast<double>(d.samples) : 0.0;
    out.profile.layers.push_back(d);
  }
  for (std::size_t l = 0; l < convs.size(); ++l) {
    ChannelVarianceReport rep;
    rep.node = convs[l]->name;
    std::vector<double> all_err, all_out;
    const std::size_t channels = per_sample.empty() ? 0 : per_sample.front().maps[l].size();
    for (std::size_t c = 0; c < channels; ++c) {
      ChannelVariance cv;
      cv.channel = c;
      std::vector<double> err, outv;
      for (const auto& r : per_sample) {
        const auto& m = r.maps[l][c];
        ++cv.maps;
        if (m.output_variance < kDegenerateVariance) {
          ++cv.degenerate;
          continue;
        }
        err.push_back(m.error_variance);
        outv.push_back(m.output_variance);
      }
      cv.error_variance = detail::geometric_mean(err);
      cv.output_variance = detail::geometric_mean(outv);
      all_err.insert(all_err.end(), err.begin(), err.end());
      all_out.insert(all_out.end(), outv.begin(), outv.end());
      rep.maps += cv.maps;
      rep.degenerate += cv.degenerate;
      rep.channels.push_back(cv);
    }
    rep.error_gmean = detail::geometric_mean(all_err);
    rep.output_gmean = detail::geometric_mean(all_out);
    rep.pct = rep.output_gmean > 0.0 ? 100.0 * rep.error_gmean / rep.output_gmean : 0.0;
    out.variance.push_back(std::move(rep));
  }
  for (const auto& r : per_sample)
    for (const auto& [k, v] : r.saturations) out.saturations[k] += v;
  return out;
}

inline Comparison compare_model(const ModelGraph& model, const MultiplierSpec& spec,
                                const std::vector<Tensor<float>>& inputs, const CompareOptions& opt = {}) {
  return compare_model(model, model, spec, inputs, opt);
}

inline std::vector<ChannelVarianceReport> channel_variance_report(const ModelGraph& model, const MultiplierSpec& spec,
                                                                  const std::vector<Tensor<float>>& inputs,
                                                                  unsigned threads = 1) {
  return compare_model(model, spec, inputs, {ProfilePoint::LayerOutput, threads}).variance;
}

inline LayerErrorProfile layer_mean_error_profile(const ModelGraph& model, const MultiplierSpec& spec,
                                                  const std::vector<Tensor<float>>& inputs,
                                                  ProfilePoint point = ProfilePoint::LayerOutput,
                                                  unsigned threads = 1) {
  return compare_model(model, spec, inputs, {point, threads}).profile;
}

/// Profile of `model` against the exact run of `reference` (e.g. the same
/// network before adjust_bn).
inline LayerErrorProfile layer_mean_error_profile(const ModelGraph& reference, const ModelGraph& model,
                                                  const MultiplierSpec& spec, const std::vector<Tensor<float>>& inputs,
                                                  ProfilePoint point = ProfilePoint::LayerOutput,
                                                  unsigned threads = 1) {
  return compare_model(reference, model, spec, inputs, {point, threads}).profile;
}

// Report writers ---------------------------------------------------------------

/// Shortest text that round-trips the double.
inline std::string format_double(double x) {
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

inline std::string to_string(ProfilePoint p) {
  return p == ProfilePoint::LayerOutput ? "layer_output" : "activation";
}

inline nlohmann::json to_json(const ErrorSummary& s) {
  nlohmann::json hist{{"lo", s.histogram.lo},
                      {"hi", s.histogram.hi},
                      {"bins", s.histogram.counts.size()},
                      {"below", s.histogram.below},
                      {"above", s.histogram.above},
                      {"counts", s.histogram.counts}};
  return {{"multiplier", to_string(s.spec)},
          {"samples", s.options.samples},
          {"seed", s.options.seed},
          {"rng", Rng::kAlgorithm},
          {"range", to_string(s.options.range)},
          {"used", s.used},
          {"excluded_zero_products", s.excluded},
          {"mean", s.mean},
          {"variance", s.variance},
          {"min", s.min},
          {"max", s.max},
          {"histogram", std::move(hist)}};
}

inline std::string histogram_csv(const Histogram& h) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    os << format_double(h.bin_lo(i)) << ',' << format_double(h.bin_lo(i + 1)) << ',' << h.counts[i] << '\n';
  }
  return os.str();
}

/// (a, b, rel_err) triplets with operands as real values.
inline std::string dump_csv(const std::vector<ErrorSample>& dump) {
  std::ostringstream os;
  os << "a,b,rel_err\n";
  for (const auto& e : dump) {
    os << format_double(to_real(e.a)) << ',' << format_double(to_real(e.b)) << ',' << format_double(e.rel_err)
       << '\n';
  }
  return os.str();
}

inline std::string convergence_csv(const std::vector<ConvergencePoint>& pts) {
  std::ostringstream os;
  os << "length,trials,mean,variance\n";
  for (const auto& p : pts) {
    os << p.length << ',' << p.trials << ',' << format_double(p.mean) << ',' << format_double(p.variance) << '\n';
  }
  return os.str();
}

inline std::string profile_csv(const LayerErrorProfile& p) {
  std::ostringstream os;
  os << "index,node,mean_deviation,elements,samples\n";
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    os << i + 1 << ',' << l.node << ',' << format_double(l.mean) << ',' << l.elements << ',' << l.samples << '\n';
  }
  return os.str();
}

inline std::string variance_csv(const std::vector<ChannelVarianceReport>& reports) {
  std::ostringstream os;
  os << "node,channel,error_variance,output_variance,maps,degenerate\n";
  for (const auto& r : reports) {
    for (const auto& c : r.channels) {
      os << r.node << ',' << c.channel << ',' << format_double(c.error_variance) << ','
         << format_double(c.output_variance) << ',' << c.maps << ',' << c.degenerate << '\n';
    }
    os << r.node << ",all," << format_double(r.error_gmean) << ',' << format_double(r.output_gmean) << ','
       << r.maps << ',' << r.degenerate << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const Comparison& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.profile.layers) {
    layers.push_back({{"node", l.node}, {"mean_deviation", l.mean}, {"elements", l.elements}, {"samples", l.samples}});
  }
  nlohmann::json variance = nlohmann::json::array();
  for (const auto& r : c.variance) {
    variance.push_back({{"node", r.node},
                        {"error_variance_gmean", r.error_gmean},
                        {"output_variance_gmean", r.output_gmean},
                        {"pct", r.pct},
                        {"maps", r.maps},
                        {"degenerate", r.degenerate}});
  }
  return {{"multiplier", to_string(c.spec)},
          {"pipeline", c.pipeline == Pipeline::Real ? "binary32" : "q16.16"},
          {"samples", c.samples},
          {"profile_point", to_string(c.profile.point)},
          {"layers", std::move(layers)},
          {"channel_variance", std::move(variance)},
          {"saturations", c.saturations}};
}

}  // namespace approxmac
