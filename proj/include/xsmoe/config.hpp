#pragma once

// Flat key = value configuration with typed fields. Unknown keys, duplicate
// keys and malformed values are rejected with the offending line.

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xsmoe/error.hpp"
#include "xsmoe/stream.hpp"
#include "xsmoe/synth.hpp"

namespace xsmoe {

struct RunConfig {
  StreamConfig stream{};
  std::size_t chunks = 10;  // T + 1
  std::string interactions;
  std::string visual_cache;
  std::string textual_cache;
  std::string output_dir = "out";
  bool checkpoint_windows = false;

  RunConfig() { stream.dims.encoder.dim = stream.dims.d_embed; }
};

namespace cfg {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out))
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
inline std::string fmt(bool v) { return v ? "true" : "false"; }
inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(const std::string& v) { return v; }

template <typename C>
struct Field {
  std::string key;
  std::string help;
  std::function<std::string(const C&)> get;
  std::function<void(C&, const std::string&)> set;
};

#define XSMOE_FIELD(C, key, help, expr, parse)                                    \
  Field<C> {                                                                       \
    key, help, [](const C& c) { return fmt(c.expr); },                             \
        [](C& c, const std::string& v) { c.expr = parse(key, v); }                 \
  }

inline std::string as_string(const std::string&, const std::string& v) { return v; }

}  // namespace cfg

inline const std::vector<cfg::Field<RunConfig>>& run_fields() {
  using namespace cfg;
  using C = RunConfig;
  static const std::vector<Field<C>> fields = {
      {"seed", "run seed", [](const C& c) { return std::to_string(c.stream.seed); },
       [](C& c, const std::string& v) { c.stream.seed = to_u64("seed", v); }},
      {"variant", "xsmoe | static | noft | visual | textual",
       [](const C& c) { return std::string(to_string(c.stream.variant)); },
       [](C& c, const std::string& v) { c.stream.variant = parse_variant(v); }},
      XSMOE_FIELD(C, "tau", "pruning threshold in [0, 1]", stream.tau, to_double),
      XSMOE_FIELD(C, "chunks", "number of chunks T+1", chunks, to_size),
      XSMOE_FIELD(C, "d", "backbone and side width", stream.dims.d, to_size),
      XSMOE_FIELD(C, "d_hidden", "expert bottleneck width", stream.dims.d_hidden, to_size),
      XSMOE_FIELD(C, "d_embed", "item and user embedding width", stream.dims.d_embed, to_size),
      XSMOE_FIELD(C, "layers", "side layers per modality (M)", stream.dims.layers, to_size),
      XSMOE_FIELD(C, "group", "backbone layers per side layer (g)", stream.dims.group, to_size),
      XSMOE_FIELD(C, "max_len", "maximum sequence length", stream.dims.encoder.max_len, to_size),
      XSMOE_FIELD(C, "blocks", "transformer blocks", stream.dims.encoder.blocks, to_size),
      XSMOE_FIELD(C, "heads", "attention heads", stream.dims.encoder.heads, to_size),
      XSMOE_FIELD(C, "ffn", "transformer feed-forward width", stream.dims.encoder.ffn, to_size),
      XSMOE_FIELD(C, "dropout", "encoder dropout rate", stream.dims.encoder.dropout, to_double),
      XSMOE_FIELD(C, "lr_init", "learning rate at window start", stream.lr_init, to_double),
      XSMOE_FIELD(C, "lr_decay", "per-epoch learning-rate factor", stream.lr_decay, to_double),
      XSMOE_FIELD(C, "lr_min", "training stops before the rate falls below this", stream.lr_min, to_double),
      XSMOE_FIELD(C, "patience", "epochs without validation gain before stopping", stream.patience, to_size),
      XSMOE_FIELD(C, "max_epochs", "epoch cap per window, 0 for none", stream.max_epochs, to_size),
      XSMOE_FIELD(C, "batch_size", "training batch size", stream.batch_size, to_size),
      XSMOE_FIELD(C, "top_k", "cutoff for HR and NDCG", stream.top_k, to_size),
      XSMOE_FIELD(C, "eval_next_chunk_fraction", "leading fraction of the next chunk used as test set",
                  stream.eval_next_chunk_fraction, to_double),
      XSMOE_FIELD(C, "filter_seen", "drop previously consumed items from the ranking", stream.filter_seen, to_bool),
      XSMOE_FIELD(C, "utilization_includes_backbone", "count the backbone slot in the utilization denominator",
                  stream.utilization_includes_backbone, to_bool),
      XSMOE_FIELD(C, "eval_threads", "evaluation threads, 0 for all cores", stream.eval_threads, to_size),
      XSMOE_FIELD(C, "record_wall_clock", "write measured wall-clock seconds into reports",
                  stream.record_wall_clock, to_bool),
      XSMOE_FIELD(C, "interactions", "interaction CSV path", interactions, as_string),
      XSMOE_FIELD(C, "visual_cache", "visual XSMF cache path", visual_cache, as_string),
      XSMOE_FIELD(C, "textual_cache", "textual XSMF cache path", textual_cache, as_string),
      XSMOE_FIELD(C, "output_dir", "directory for reports and checkpoints", output_dir, as_string),
      XSMOE_FIELD(C, "checkpoint_windows", "write a checkpoint after every window", checkpoint_windows, to_bool),
  };
  return fields;
}

inline const std::vector<cfg::Field<SynthConfig>>& synth_fields() {
  using namespace cfg;
  using C = SynthConfig;
  static const std::vector<Field<C>> fields = {
      {"seed", "generator seed", [](const C& c) { return std::to_string(c.seed); },
       [](C& c, const std::string& v) { c.seed = to_u64("seed", v); }},
      XSMOE_FIELD(C, "users", "number of users", users, to_size),
      XSMOE_FIELD(C, "items", "number of items", items, to_size),
      XSMOE_FIELD(C, "windows", "number of time windows", windows, to_size),
      XSMOE_FIELD(C, "drift", "per-window preference turn, fraction of a right angle", drift, to_double),
      XSMOE_FIELD(C, "interactions_per_window", "interactions sampled per window", interactions_per_window, to_size),
      XSMOE_FIELD(C, "shared_dims", "latent dims seen by both modalities", shared_dims, to_size),
      XSMOE_FIELD(C, "modality_dims", "latent dims seen by one modality", modality_dims, to_size),
      XSMOE_FIELD(C, "attributes", "nonlinear item attributes", attributes, to_size),
      XSMOE_FIELD(C, "sharpness", "inverse temperature of the item sampler", sharpness, to_double),
      XSMOE_FIELD(C, "nonlinearity", "scale of attribute pre-activations", nonlinearity, to_double),
      XSMOE_FIELD(C, "initial_items", "fraction of items released at window 0", initial_items, to_double),
      XSMOE_FIELD(C, "feature_noise", "per-layer feature noise scale", feature_noise, to_double),
      XSMOE_FIELD(C, "dim", "feature width d", dim, to_size),
      XSMOE_FIELD(C, "depth", "cached layers beyond l_0", depth, to_size),
  };
  return fields;
}

#undef XSMOE_FIELD

template <typename C>
const cfg::Field<C>& find_field(const std::vector<cfg::Field<C>>& fields, const std::string& key) {
  for (const auto& f : fields)
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

template <typename C>
void set_field(const std::vector<cfg::Field<C>>& fields, C& c, const std::string& key, const std::string& value) {
  find_field(fields, key).set(c, value);
}

/// Applies `key = value` lines; '#' starts a comment.
template <typename C>
void apply_config_text(const std::vector<cfg::Field<C>>& fields, C& c, std::istream& in, const std::string& name) {
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = cfg::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = name + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = cfg::trim(line.substr(0, eq));
    const std::string value = cfg::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      set_field(fields, c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

template <typename C>
void apply_config_file(const std::vector<cfg::Field<C>>& fields, C& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  apply_config_text(fields, c, in, path.string());
}

/// For every field, PREFIX + upper-cased key overrides the current value.
template <typename C>
void apply_env(const std::vector<cfg::Field<C>>& fields, C& c, const std::string& prefix,
               const std::function<const char*(const char*)>& getenv_fn = [](const char* k) { return std::getenv(k); }) {
  for (const auto& f : fields) {
    std::string var = prefix;
    for (char ch : f.key) var += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (const char* v = getenv_fn(var.c_str())) {
      try {
        f.set(c, v);
      } catch (const ConfigError& e) {
        throw ConfigError("environment " + var + ": " + e.what());
      }
    }
  }
}

template <typename C>
std::string config_text(const std::vector<cfg::Field<C>>& fields, const C& c) {
  std::string out;
  for (const auto& f : fields) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

inline void validate(RunConfig& c) {
  auto& s = c.stream;
  auto& d = s.dims;
  d.encoder.dim = d.d_embed;
  auto bad = [](const std::string& m) { throw ConfigError(m); };
  if (d.d == 0 || d.d_hidden == 0 || d.d_embed == 0 || d.layers == 0 || d.group == 0)
    bad("d, d_hidden, d_embed, layers and group must be positive");
  if (d.encoder.max_len == 0 || d.encoder.heads == 0 || d.encoder.ffn == 0) bad("max_len, heads and ffn must be positive");
  if (d.d_embed % d.encoder.heads != 0) bad("d_embed must be a multiple of heads");
  if (!(d.encoder.dropout >= 0.0 && d.encoder.dropout < 1.0)) bad("dropout must lie in [0, 1)");
  if (!(s.tau >= 0.0 && s.tau <= 1.0)) bad("tau must lie in [0, 1]");
  if (!(s.lr_init > 0.0)) bad("lr_init must be positive");
  if (!(s.lr_decay > 0.0 && s.lr_decay <= 1.0)) bad("lr_decay must lie in (0, 1]");
  if (!(s.lr_min > 0.0 && s.lr_min <= s.lr_init)) bad("lr_min must lie in (0, lr_init]");
  if (s.patience == 0) bad("patience must be positive");
  if (s.batch_size == 0) bad("batch_size must be positive");
  if (s.top_k == 0) bad("top_k must be positive");
  if (!(s.eval_next_chunk_fraction > 0.0 && s.eval_next_chunk_fraction <= 1.0))
    bad("eval_next_chunk_fraction must lie in (0, 1]");
  if (c.chunks < 3) bad("chunks must be at least 3 (warm-up, one training window, one test window)");
}

/// Variant and cache paths must agree before any data is read.
inline void validate_inputs(const RunConfig& c) {
  if (c.interactions.empty()) throw ConfigError("interactions path is required");
  for (Modality m : {Modality::visual, Modality::textual}) {
    const std::string& path = m == Modality::visual ? c.visual_cache : c.textual_cache;
    if (uses_modality(c.stream.variant, m) && path.empty())
      throw ConfigError("variant " + std::string(to_string(c.stream.variant)) + " needs " +
                        std::string(to_string(m)) + "_cache");
  }
}

}  // namespace xsmoe
