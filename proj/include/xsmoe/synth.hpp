#pragma once

// Synthetic multimodal stream with controllable preference drift.
//
// Items carry a latent z = [shared | visual-only | textual-only] and
// attributes a = GELU(A z), standardized per attribute. Each user holds a unit
// taste vector over attributes that turns by an angle of drift*pi/2 per window
// in a fresh random plane. Interactions are sampled with probability
// proportional to exp(sharpness * u . a) over items released so far. A
// modality's cached layer outputs are fixed linear projections of the latent
// part it can see, plus per-item noise growing with depth.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "xsmoe/data.hpp"
#include "xsmoe/error.hpp"
#include "xsmoe/rng.hpp"

namespace xsmoe {

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t users = 2000;
  std::size_t items = 500;
  std::size_t windows = 6;
  double drift = 0.5;
  std::size_t interactions_per_window = 3000;
  std::size_t shared_dims = 4;
  std::size_t modality_dims = 4;  // per modality
  std::size_t attributes = 24;
  double sharpness = 3.0;
  double nonlinearity = 1.5;   // scale of the pre-activation A z
  double initial_items = 0.6;  // fraction released at window 0
  double feature_noise = 0.1;
  std::size_t dim = 32;
  std::size_t depth = 2;  // cached layers are l_0..l_depth

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("synth: " + m); };
    if (users == 0) bad("users must be positive");
    if (items == 0) bad("items must be positive");
    if (windows == 0) bad("windows must be positive");
    if (interactions_per_window == 0) bad("interactions_per_window must be positive");
    if (!(drift >= 0.0 && drift <= 1.0)) bad("drift must lie in [0, 1]");
    if (attributes == 0 || dim == 0) bad("attributes and dim must be positive");
    if (shared_dims + modality_dims == 0) bad("latent dims must be positive");
    if (!(initial_items > 0.0 && initial_items <= 1.0)) bad("initial_items must lie in (0, 1]");
    if (!(sharpness >= 0.0) || !(feature_noise >= 0.0) || !(nonlinearity > 0.0))
      bad("sharpness and feature_noise must be >= 0, nonlinearity > 0");
  }
};

struct SynthWorld {
  std::vector<Interaction> interactions;
  FeatureCache visual;
  FeatureCache textual;
  TruthTable truth;                                 // sharpness * u_w . a_i
  std::vector<std::vector<double>> user_latents;    // [window * users + user][attribute]
  std::vector<std::size_t> debut;                   // first window an item can be sampled
};

inline std::string synth_user_id(std::size_t u) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "u%05zu", u);
  return buf;
}
inline std::string synth_item_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "i%05zu", i);
  return buf;
}

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline void normalize(std::vector<double>& v) {
  const double n = std::sqrt(dot(v, v));
  for (auto& x : v) x /= n;
}

inline std::vector<double> random_unit(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  do {
    for (auto& x : v) x = rng.normal();
  } while (dot(v, v) < 1e-12);
  normalize(v);
  return v;
}

}  // namespace detail

inline SynthWorld synthesize(const SynthConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed);
  Rng item_rng = root.split("items");
  Rng user_rng = root.split("users");
  Rng feat_rng = root.split("features");
  Rng sample_rng = root.split("interactions");

  const std::size_t k = cfg.shared_dims + 2 * cfg.modality_dims;
  const std::size_t na = cfg.attributes;
  SynthWorld w;

  // Item latents and standardized nonlinear attributes.
  std::vector<double> z(cfg.items * k);
  for (auto& x : z) x = item_rng.normal();
  std::vector<double> A(na * k);
  for (auto& x : A) x = item_rng.normal(0.0, cfg.nonlinearity / std::sqrt(double(k)));
  std::vector<double> attr(cfg.items * na);
  for (std::size_t i = 0; i < cfg.items; ++i)
    for (std::size_t a = 0; a < na; ++a) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += A[a * k + c] * z[i * k + c];
      attr[i * na + a] = 0.5 * s * (1.0 + std::erf(s / std::numbers::sqrt2));
    }
  for (std::size_t a = 0; a < na; ++a) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < cfg.items; ++i) mean += attr[i * na + a];
    mean /= double(cfg.items);
    for (std::size_t i = 0; i < cfg.items; ++i) sq += (attr[i * na + a] - mean) * (attr[i * na + a] - mean);
    const double sd = std::sqrt(sq / double(cfg.items));
    for (std::size_t i = 0; i < cfg.items; ++i)
      attr[i * na + a] = sd > 0.0 ? (attr[i * na + a] - mean) / sd : 0.0;
  }

  // Release schedule.
  const std::size_t n0 = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(cfg.initial_items * double(cfg.items))));
  w.debut.resize(cfg.items);
  for (std::size_t i = 0; i < cfg.items; ++i)
    w.debut[i] = (i < n0 || cfg.windows == 1) ? 0 : 1 + (i - n0) * (cfg.windows - 1) / (cfg.items - n0);

  // User tastes: rotate by theta per window in a random plane.
  const double theta = cfg.drift * std::numbers::pi / 2.0;
  w.user_latents.resize(cfg.windows * cfg.users);
  for (std::size_t u = 0; u < cfg.users; ++u) w.user_latents[u] = detail::random_unit(na, user_rng);
  for (std::size_t win = 1; win < cfg.windows; ++win)
    for (std::size_t u = 0; u < cfg.users; ++u) {
      const auto& prev = w.user_latents[(win - 1) * cfg.users + u];
      std::vector<double> xi;
      double norm2 = 0.0;
      do {
        xi = detail::random_unit(na, user_rng);
        const double p = detail::dot(xi, prev);
        for (std::size_t a = 0; a < na; ++a) xi[a] -= p * prev[a];
        norm2 = detail::dot(xi, xi);
      } while (norm2 < 1e-12);
      detail::normalize(xi);
      std::vector<double> next(na);
      for (std::size_t a = 0; a < na; ++a) next[a] = std::cos(theta) * prev[a] + std::sin(theta) * xi[a];
      detail::normalize(next);
      w.user_latents[win * cfg.users + u] = std::move(next);
    }

  // Ground-truth affinities.
  w.truth.windows = cfg.windows;
  w.truth.users = cfg.users;
  w.truth.items = cfg.items;
  w.truth.affinity.resize(cfg.windows * cfg.users * cfg.items);
  for (std::size_t win = 0; win < cfg.windows; ++win)
    for (std::size_t u = 0; u < cfg.users; ++u) {
      const auto& lu = w.user_latents[win * cfg.users + u];
      for (std::size_t i = 0; i < cfg.items; ++i) {
        double s = 0.0;
        for (std::size_t a = 0; a < na; ++a) s += lu[a] * attr[i * na + a];
        w.truth.affinity[(win * cfg.users + u) * cfg.items + i] = static_cast<float>(cfg.sharpness * s);
      }
    }

  // Interactions: uniform user, softmax item over the released catalog.
  std::vector<double> cdf(cfg.items);
  for (std::size_t win = 0; win < cfg.windows; ++win) {
    for (std::size_t j = 0; j < cfg.interactions_per_window; ++j) {
      const std::size_t u = sample_rng.index(cfg.users);
      auto row = w.truth.row(win, u);
      double mx = -1e300;
      for (std::size_t i = 0; i < cfg.items; ++i)
        if (w.debut[i] <= win) mx = std::max(mx, double(row[i]));
      double acc = 0.0;
      for (std::size_t i = 0; i < cfg.items; ++i) {
        if (w.debut[i] <= win) acc += std::exp(double(row[i]) - mx);
        cdf[i] = acc;
      }
      const double r = sample_rng.uniform() * acc;
      std::size_t pick = std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin();
      if (pick >= cfg.items) pick = cfg.items - 1;
      while (w.debut[pick] > win) --pick;  // r landed on a flat segment's right edge
      w.interactions.push_back(
          {synth_user_id(u), synth_item_id(pick), static_cast<std::int64_t>(win * cfg.interactions_per_window + j)});
    }
  }

  // Cached layer outputs per modality.
  const std::size_t seen = cfg.shared_dims + cfg.modality_dims;
  for (Modality m : {Modality::visual, Modality::textual}) {
    Rng mr = feat_rng.split(to_string(m));
    FeatureCache& c = m == Modality::visual ? w.visual : w.textual;
    c.modality = m;
    c.layers = cfg.depth + 1;
    c.dim = cfg.dim;
    const std::size_t own = cfg.shared_dims + (m == Modality::visual ? 0 : cfg.modality_dims);
    std::vector<double> P(c.layers * cfg.dim * seen);
    for (auto& x : P) x = mr.normal(0.0, 1.0 / std::sqrt(double(seen)));
    c.values.resize(cfg.items * c.layers * cfg.dim);
    for (std::size_t i = 0; i < cfg.items; ++i) {
      c.item_ids.push_back(synth_item_id(i));
      std::vector<double> x(seen);
      for (std::size_t s = 0; s < cfg.shared_dims; ++s) x[s] = z[i * k + s];
      for (std::size_t s = 0; s < cfg.modality_dims; ++s) x[cfg.shared_dims + s] = z[i * k + own + s];
      for (std::size_t l = 0; l < c.layers; ++l) {
        const double noise = cfg.feature_noise * double(l + 1);
        for (std::size_t r = 0; r < cfg.dim; ++r) {
          double v = 0.0;
          for (std::size_t s = 0; s < seen; ++s) v += P[(l * cfg.dim + r) * seen + s] * x[s];
          c.values[(i * c.layers + l) * cfg.dim + r] = static_cast<float>(v + mr.normal(0.0, noise));
        }
      }
    }
  }
  return w;
}

}  // namespace xsmoe
