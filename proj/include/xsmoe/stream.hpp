#pragma once

// Chronological streaming protocol: chunking, warm-up, per-window
// expand/train/validate/test/prune, and per-window reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "xsmoe/adam.hpp"
#include "xsmoe/data.hpp"
#include "xsmoe/recommender.hpp"

namespace xsmoe {

struct Record {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  std::int64_t timestamp = 0;
  std::uint32_t position = 0;  // index within the user's sequence
};

/// Interactions in global chronological order, split into contiguous chunks.
struct StreamDataset {
  std::vector<std::string> user_ids;  // dense index -> id, first-appearance order
  std::vector<std::string> item_ids;
  std::vector<Record> records;
  std::vector<std::size_t> chunk_begin;  // chunks()+1 offsets into records
  std::vector<std::vector<std::uint32_t>> user_items;  // per user, chronological

  std::size_t chunks() const { return chunk_begin.size() - 1; }
  std::size_t chunk_size(std::size_t c) const { return chunk_begin[c + 1] - chunk_begin[c]; }

  /// Up to max_len items the user consumed before record r, oldest first.
  std::span<const std::uint32_t> prefix(std::size_t r, std::size_t max_len) const {
    const Record& rec = records[r];
    const std::size_t end = rec.position;
    const std::size_t begin = end > max_len ? end - max_len : 0;
    return std::span<const std::uint32_t>(user_items[rec.user]).subspan(begin, end - begin);
  }
};

/// Sorts a copy by (timestamp, user, item) and cuts it into `parts` contiguous
/// chunks; the first n % parts chunks hold one extra interaction.
inline StreamDataset chunk_stream(std::vector<Interaction> xs, std::size_t parts) {
  if (parts == 0) throw ConfigError("chunk_stream: need at least one chunk");
  if (xs.size() < parts)
    throw ConfigError("chunk_stream: " + std::to_string(xs.size()) + " interactions cannot fill " +
                      std::to_string(parts) + " chunks");
  sort_interactions(xs);
  StreamDataset ds;
  std::unordered_map<std::string, std::uint32_t> users, items;
  ds.records.reserve(xs.size());
  for (const auto& x : xs) {
    auto [ui, unew] = users.try_emplace(x.user_id, static_cast<std::uint32_t>(ds.user_ids.size()));
    if (unew) {
      ds.user_ids.push_back(x.user_id);
      ds.user_items.emplace_back();
    }
    auto [ii, inew] = items.try_emplace(x.item_id, static_cast<std::uint32_t>(ds.item_ids.size()));
    if (inew) ds.item_ids.push_back(x.item_id);
    Record r;
    r.user = ui->second;
    r.item = ii->second;
    r.timestamp = x.timestamp;
    r.position = static_cast<std::uint32_t>(ds.user_items[r.user].size());
    ds.user_items[r.user].push_back(r.item);
    ds.records.push_back(r);
  }
  const std::size_t base = xs.size() / parts, extra = xs.size() % parts;
  ds.chunk_begin.push_back(0);
  for (std::size_t c = 0; c < parts; ++c) ds.chunk_begin.push_back(ds.chunk_begin.back() + base + (c < extra ? 1 : 0));
  return ds;
}

struct WindowSplit {
  std::size_t begin = 0;
  std::size_t train_end = 0;  // validation is [train_end, end)
  std::size_t end = 0;
  bool degenerate = false;    // fewer than 2 interactions: no validation

  std::size_t train_size() const { return train_end - begin; }
  std::size_t val_size() const { return end - train_end; }
};

/// First floor(85%) of the chunk trains, the rest validates.
inline WindowSplit split_window(std::size_t begin, std::size_t end) {
  if (end <= begin) throw ContractError("split_window: empty chunk");
  WindowSplit s{begin, begin, end, false};
  const std::size_t n = end - begin;
  if (n < 2) {
    s.train_end = end;
    s.degenerate = true;
    return s;
  }
  s.train_end = begin + n * 85 / 100;
  return s;
}

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Records one epoch's validation score; true when it is a new best.
  bool update(double score) {
    ++epoch_;
    if (epoch_ == 1 || score > best_) {
      best_ = score;
      best_epoch_ = epoch_;
      bad_ = 0;
      return true;
    }
    ++bad_;
    return false;
  }
  bool should_stop() const { return bad_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  std::size_t epochs() const { return epoch_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0, best_epoch_ = 0, bad_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

struct StreamConfig {
  Variant variant = Variant::xsmoe;
  ModelDims dims{};
  double tau = 0.1;
  std::uint64_t seed = 1;
  double lr_init = 1e-3;
  double lr_decay = 0.95;
  double lr_min = 1e-4;
  std::size_t patience = 5;
  std::size_t max_epochs = 0;  // 0: bounded only by patience and lr_min
  std::size_t batch_size = 128;
  std::size_t top_k = 10;
  double eval_next_chunk_fraction = 1.0;
  bool filter_seen = false;
  bool utilization_includes_backbone = false;
  std::size_t eval_threads = 0;  // 0: hardware concurrency
  bool record_wall_clock = false;  // measured seconds make reports nondeterministic
};

/// Learning rate for a 1-based epoch: lr_init * decay^(epoch-1).
inline double epoch_lr(const StreamConfig& c, std::size_t epoch) {
  double lr = c.lr_init;
  for (std::size_t e = 1; e < epoch; ++e) lr *= c.lr_decay;
  return lr;
}

struct StreamFeatures {
  std::optional<FeatureBank> visual;
  std::optional<FeatureBank> textual;

  const std::optional<FeatureBank>& bank(Modality m) const { return m == Modality::visual ? visual : textual; }
  std::optional<FeatureBank>& bank(Modality m) { return m == Modality::visual ? visual : textual; }
};

/// Fails before training if the variant needs a modality that is absent or
/// shaped differently from the model.
inline void check_features(const StreamFeatures& f, const StreamDataset& ds, const StreamConfig& cfg) {
  for (Modality m : {Modality::visual, Modality::textual}) {
    if (!uses_modality(cfg.variant, m)) continue;
    const auto& b = f.bank(m);
    if (!b)
      throw ConfigError("variant " + std::string(to_string(cfg.variant)) + " needs a " + std::string(to_string(m)) +
                        " feature cache");
    const std::size_t depth = cfg.dims.group * cfg.dims.layers + 1;
    if (b->layers != depth)
      throw ConfigError(std::string(to_string(m)) + " cache has " + std::to_string(b->layers) +
                        " layers; g*M+1 = " + std::to_string(depth));
    if (b->dim != cfg.dims.d)
      throw ConfigError(std::string(to_string(m)) + " cache dim " + std::to_string(b->dim) + " != d " +
                        std::to_string(cfg.dims.d));
    if (b->items != ds.item_ids.size())
      throw DataError(std::string(to_string(m)) + " feature bank is not aligned with the item index");
  }
}

template <typename T>
FeatureBatch<T> gather_features(const StreamFeatures& f, Variant v, std::span<const std::size_t> items) {
  FeatureBatch<T> fb;
  if (uses_modality(v, Modality::visual)) fb.visual = f.visual->template gather<T>(items);
  if (uses_modality(v, Modality::textual)) fb.textual = f.textual->template gather<T>(items);
  return fb;
}

/// One training batch through item tower, sequence encoder and loss.
/// prefixes[b] lists item indices oldest first; histories[b] is sorted or null.
template <typename T>
Tensor<T> pair_loss(Recommender<T>& model, const StreamFeatures& f,
                    const std::vector<std::vector<std::size_t>>& prefixes, const std::vector<std::size_t>& targets,
                    const std::vector<const std::vector<std::size_t>*>& histories, const PopularityTable& pop,
                    bool training, Rng& rng) {
  const std::size_t B = targets.size();
  const std::size_t L = model.encoder.config.max_len;
  if (prefixes.size() != B) throw ContractError("pair_loss: one prefix per target");
  std::vector<std::size_t> uniq(targets.begin(), targets.end());
  for (const auto& p : prefixes) uniq.insert(uniq.end(), p.begin(), p.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  auto row_of = [&](std::size_t item) {
    return static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), item) - uniq.begin());
  };

  Tensor<T> emb = model.item_embeddings(gather_features<T>(f, model.variant, uniq));
  std::vector<std::size_t> seq_idx(B * L, kPadRow), tgt_idx(B), lengths(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& p = prefixes[b];
    if (p.empty() || p.size() > L) throw ContractError("pair_loss: prefix length must be in [1, max_len]");
    lengths[b] = p.size();
    for (std::size_t i = 0; i < p.size(); ++i) seq_idx[b * L + L - p.size() + i] = row_of(p[i]);
    tgt_idx[b] = row_of(targets[b]);
  }
  Tensor<T> users = model.encoder.encode(gather_rows(emb, std::move(seq_idx)), B, lengths, training, rng);
  Tensor<T> scores = matmul_nt(users, gather_rows(emb, std::move(tgt_idx)));
  return batch_loss(scores, targets, histories, pop);
}

struct EvalOptions {
  std::size_t top_k = 10;
  bool filter_seen = false;
  std::size_t threads = 1;
  std::size_t max_len = 10;
};

struct EvalResult {
  double hr = 0.0;
  double ndcg = 0.0;
  std::size_t cases = 0;
  std::size_t skipped_no_prefix = 0;
  std::size_t missing_target = 0;
};

/// Discounted gain of a 1-based rank under a top-k cutoff.
inline double ndcg_gain(std::size_t rank, std::size_t k) {
  return rank <= k ? 1.0 / std::log2(double(rank) + 1.0) : 0.0;
}

/// 1-based rank of `target` among `catalog`; higher score first, equal scores
/// ordered by item index.
inline std::size_t rank_of(std::span<const float> scores, std::span<const std::uint32_t> catalog, std::size_t target_pos,
                           const std::vector<std::uint8_t>* skip = nullptr) {
  const float st = scores[target_pos];
  const std::uint32_t ti = catalog[target_pos];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < catalog.size(); ++j) {
    if (j == target_pos || (skip && (*skip)[j])) continue;
    if (scores[j] > st || (scores[j] == st && catalog[j] < ti)) ++rank;
  }
  return rank;
}

/// HR@k / NDCG@k of every record in `cases` that has a non-empty prefix,
/// ranking the full catalog. Parameters are read only.
template <typename T>
EvalResult evaluate(Recommender<T>& model, const StreamDataset& ds, const StreamFeatures& f,
                    std::span<const std::size_t> cases, std::span<const std::uint32_t> catalog,
                    const EvalOptions& opt) {
  NoGradGuard guard;
  EvalResult res;
  std::vector<std::size_t> live;
  for (std::size_t r : cases) {
    if (ds.records[r].position == 0)
      ++res.skipped_no_prefix;
    else
      live.push_back(r);
  }
  if (live.empty() || catalog.empty()) return res;

  std::vector<std::size_t> needed(catalog.begin(), catalog.end());
  for (std::size_t r : live)
    for (auto i : ds.prefix(r, opt.max_len)) needed.push_back(i);
  std::sort(needed.begin(), needed.end());
  needed.erase(std::unique(needed.begin(), needed.end()), needed.end());
  const std::size_t de = model.dims.d_embed;
  std::vector<T> emb(needed.size() * de);
  constexpr std::size_t kItemBlock = 1024;
  for (std::size_t s = 0; s < needed.size(); s += kItemBlock) {
    const std::size_t n = std::min(kItemBlock, needed.size() - s);
    auto block = model.item_embeddings(gather_features<T>(f, model.variant, std::span(needed).subspan(s, n)));
    std::copy(block.data().begin(), block.data().end(), emb.begin() + static_cast<std::ptrdiff_t>(s * de));
  }
  auto row_of = [&](std::size_t item) {
    return static_cast<std::size_t>(std::lower_bound(needed.begin(), needed.end(), item) - needed.begin());
  };

  // Catalog embeddings contiguous for ranking.
  std::vector<float> cat_emb(catalog.size() * de);
  for (std::size_t j = 0; j < catalog.size(); ++j) {
    const std::size_t row = row_of(catalog[j]);
    for (std::size_t c = 0; c < de; ++c) cat_emb[j * de + c] = static_cast<float>(emb[row * de + c]);
  }

  const std::size_t L = model.encoder.config.max_len;
  std::vector<float> user_emb(live.size() * de);
  Rng unused(0);
  constexpr std::size_t kUserBlock = 256;
  for (std::size_t s = 0; s < live.size(); s += kUserBlock) {
    const std::size_t B = std::min(kUserBlock, live.size() - s);
    std::vector<T> seq(B * L * de, T(0));
    std::vector<std::size_t> lengths(B);
    for (std::size_t b = 0; b < B; ++b) {
      auto p = ds.prefix(live[s + b], std::min(opt.max_len, L));
      lengths[b] = p.size();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const std::size_t row = row_of(p[i]);
        std::copy_n(emb.begin() + static_cast<std::ptrdiff_t>(row * de), de,
                    seq.begin() + static_cast<std::ptrdiff_t>((b * L + L - p.size() + i) * de));
      }
    }
    auto out = model.encoder.encode(Tensor<T>::from({B * L, de}, std::move(seq)), B, lengths, false, unused);
    for (std::size_t i = 0; i < B * de; ++i) user_emb[s * de + i] = static_cast<float>(out[i]);
  }

  std::vector<std::int64_t> cat_pos(ds.item_ids.size(), -1);
  for (std::size_t j = 0; j < catalog.size(); ++j) cat_pos[catalog[j]] = static_cast<std::int64_t>(j);

  std::vector<double> hit(live.size(), 0.0), gain(live.size(), 0.0);
  std::vector<std::uint8_t> missing(live.size(), 0);
  auto work = [&](std::size_t lo, std::size_t hi) {
    std::vector<float> scores(catalog.size());
    std::vector<std::uint8_t> skip;
    for (std::size_t k = lo; k < hi; ++k) {
      const Record& rec = ds.records[live[k]];
      if (cat_pos[rec.item] < 0) {
        missing[k] = 1;
        continue;
      }
      std::span<const float> eu(user_emb.data() + k * de, de);
      for (std::size_t j = 0; j < catalog.size(); ++j)
        scores[j] = score<float>(eu, std::span<const float>(cat_emb.data() + j * de, de));
      const std::vector<std::uint8_t>* skip_ptr = nullptr;
      if (opt.filter_seen) {
        skip.assign(catalog.size(), 0);
        const auto& seq = ds.user_items[rec.user];
        for (std::size_t p = 0; p < rec.position; ++p)
          if (cat_pos[seq[p]] >= 0 && seq[p] != rec.item) skip[static_cast<std::size_t>(cat_pos[seq[p]])] = 1;
        skip_ptr = &skip;
      }
      const std::size_t rank = rank_of(scores, catalog, static_cast<std::size_t>(cat_pos[rec.item]), skip_ptr);
      hit[k] = rank <= opt.top_k ? 1.0 : 0.0;
      gain[k] = ndcg_gain(rank, opt.top_k);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(opt.threads, live.size()));
  if (threads == 1) {
    work(0, live.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t per = (live.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t lo = t * per, hi = std::min(live.size(), lo + per);
      if (lo < hi) pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  double h = 0.0, g = 0.0;
  for (std::size_t k = 0; k < live.size(); ++k) {
    h += hit[k];
    g += gain[k];
    res.missing_target += missing[k];
  }
  res.cases = live.size();
  res.hr = h / double(live.size());
  res.ndcg = g / double(live.size());
  return res;
}

struct WindowReport {
  int window = 0;
  double hr_at_10 = 0.0;
  double ndcg_at_10 = 0.0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double best_val_ndcg = 0.0;
  std::map<std::string, std::vector<std::size_t>> experts_before_prune;
  std::map<std::string, std::vector<std::size_t>> experts_per_layer;  // after prune
  std::size_t total_params = 0;      // side networks while training
  std::size_t trainable_params = 0;  // side networks while training
  std::size_t total_params_after_prune = 0;
  std::size_t head_params = 0;  // fusion head + sequence encoder
  double wall_clock_s = 0.0;
  std::size_t memory_bytes_est = 0;
  std::size_t test_cases = 0;
  std::size_t missing_targets = 0;
  bool degenerate = false;
};

inline constexpr std::string_view kReportSchema = "xsmoe.window_report/1";

struct RunSummary {
  std::vector<WindowReport> windows;
  double avg_hr = 0.0;
  double avg_ndcg = 0.0;
  double avg_epochs = 0.0;
  double wall_clock_s = 0.0;
};

inline nlohmann::ordered_json report_json(const WindowReport& r, const StreamConfig& cfg) {
  nlohmann::ordered_json j;
  j["schema"] = kReportSchema;
  j["window"] = r.window;
  j["variant"] = to_string(cfg.variant);
  j["tau"] = cfg.tau;
  j["hr_at_10"] = r.hr_at_10;
  j["ndcg_at_10"] = r.ndcg_at_10;
  j["epochs"] = r.epochs;
  j["best_epoch"] = r.best_epoch;
  j["best_val_ndcg"] = r.best_val_ndcg;
  j["experts_per_layer"] = r.experts_per_layer;
  j["experts_before_prune"] = r.experts_before_prune;
  j["total_params"] = r.total_params;
  j["trainable_params"] = r.trainable_params;
  j["total_params_after_prune"] = r.total_params_after_prune;
  j["head_params"] = r.head_params;
  j["wall_clock_s"] = r.wall_clock_s;
  j["memory_bytes_est"] = r.memory_bytes_est;
  j["test_cases"] = r.test_cases;
  j["missing_targets"] = r.missing_targets;
  j["degenerate"] = r.degenerate;
  return j;
}

inline nlohmann::ordered_json avg_json(const RunSummary& s, const StreamConfig& cfg) {
  nlohmann::ordered_json j;
  j["schema"] = kReportSchema;
  j["window"] = "avg";
  j["variant"] = to_string(cfg.variant);
  j["tau"] = cfg.tau;
  j["hr_at_10"] = s.avg_hr;
  j["ndcg_at_10"] = s.avg_ndcg;
  j["epochs"] = s.avg_epochs;
  if (!s.windows.empty()) {
    const auto& last = s.windows.back();
    j["experts_per_layer"] = last.experts_per_layer;
    j["total_params"] = last.total_params_after_prune;
    j["trainable_params"] = last.trainable_params;
    j["head_params"] = last.head_params;
  }
  j["wall_clock_s"] = s.wall_clock_s;
  j["windows"] = s.windows.size();
  return j;
}

inline std::string report_lines(const RunSummary& s, const StreamConfig& cfg) {
  std::string out;
  for (const auto& w : s.windows) out += report_json(w, cfg).dump() + "\n";
  out += avg_json(s, cfg).dump() + "\n";
  return out;
}

/// Hooks for tests and tooling; every callback sees the live model.
struct StreamObserver {
  virtual ~StreamObserver() = default;
  virtual void on_expand(int /*window*/, const Recommender<float>& /*model*/) {}
  virtual void on_train_batch(int /*window*/, std::span<const std::size_t> /*records*/) {}
  virtual void on_epoch(int /*window*/, std::size_t /*epoch*/, double /*lr*/, double /*val_ndcg*/) {}
  virtual void on_before_test(int /*window*/, const Recommender<float>& /*model*/) {}
  virtual void on_after_test(int /*window*/, const Recommender<float>& /*model*/) {}
  virtual void on_utilization(int /*window*/, Modality, std::size_t /*layer*/, const UtilizationResult&,
                              std::size_t /*experts_before*/, std::optional<std::size_t> /*pruned*/) {}
  virtual void on_window_end(int /*window*/, const Recommender<float>& /*model*/, const WindowReport&) {}
};

namespace detail {

struct UtilSnapshot {
  std::vector<std::vector<double>> num;
  std::vector<double> backbone;
  std::vector<std::uint64_t> count;
};

inline UtilSnapshot snapshot_util(Recommender<float>& m) {
  UtilSnapshot s;
  for (auto* n : m.side_networks())
    for (auto& l : n->layers) {
      s.num.push_back(l.util_num);
      s.backbone.push_back(l.util_backbone);
      s.count.push_back(l.util_count);
    }
  return s;
}

inline void restore_util(Recommender<float>& m, const UtilSnapshot& s) {
  std::size_t k = 0;
  for (auto* n : m.side_networks())
    for (auto& l : n->layers) {
      l.util_num = s.num[k];
      l.util_backbone = s.backbone[k];
      l.util_count = s.count[k];
      ++k;
    }
}

inline std::map<std::string, std::vector<std::size_t>> census(const Recommender<float>& m) {
  std::map<std::string, std::vector<std::size_t>> out;
  for (const auto* n : m.side_networks()) out[std::string(to_string(n->modality))] = n->experts_per_layer();
  return out;
}

/// Items of records [0, end), sorted and unique.
inline std::vector<std::uint32_t> items_before(const StreamDataset& ds, std::size_t end) {
  std::vector<std::uint8_t> seen(ds.item_ids.size(), 0);
  for (std::size_t r = 0; r < end; ++r) seen[ds.records[r].item] = 1;
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (seen[i]) out.push_back(static_cast<std::uint32_t>(i));
  return out;
}

}  // namespace detail

/// Trains on one chunk's training portion with early stopping on the
/// validation portion; leaves the best-validation weights in the model.
struct TrainOutcome {
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double best_val_ndcg = 0.0;
  bool degenerate = false;
};

inline TrainOutcome train_window(Recommender<float>& model, const StreamDataset& ds, const StreamFeatures& f,
                                 std::size_t chunk, const StreamConfig& cfg, Rng& rng, int window,
                                 StreamObserver* obs) {
  const WindowSplit split = split_window(ds.chunk_begin[chunk], ds.chunk_begin[chunk + 1]);
  const std::size_t L = model.encoder.config.max_len;
  const bool track_util = expands(model.variant);

  std::vector<std::size_t> train;
  for (std::size_t r = split.begin; r < split.train_end; ++r)
    if (ds.records[r].position > 0) train.push_back(r);
  std::vector<std::size_t> val;
  for (std::size_t r = split.train_end; r < split.end; ++r) val.push_back(r);

  // Exclusion sets: everything each user consumed through this training portion.
  std::vector<std::vector<std::size_t>> history(ds.user_ids.size());
  for (std::size_t r = 0; r < split.train_end; ++r) history[ds.records[r].user].push_back(ds.records[r].item);
  for (auto& h : history) {
    std::sort(h.begin(), h.end());
    h.erase(std::unique(h.begin(), h.end()), h.end());
  }
  std::vector<std::size_t> pop_items;
  for (std::size_t r = split.begin; r < split.train_end; ++r) pop_items.push_back(ds.records[r].item);
  const auto pop_catalog32 = detail::items_before(ds, split.train_end);
  const std::vector<std::size_t> pop_catalog(pop_catalog32.begin(), pop_catalog32.end());
  const PopularityTable pop = build_popularity(pop_items, pop_catalog, ds.item_ids.size());
  const auto catalog = detail::items_before(ds, split.end);

  EvalOptions eo;
  eo.top_k = cfg.top_k;
  eo.filter_seen = cfg.filter_seen;
  eo.max_len = L;
  eo.threads = cfg.eval_threads ? cfg.eval_threads : std::max(1u, std::thread::hardware_concurrency());

  auto params = model.trainable_parameters();
  Adam<float> opt(params);
  EarlyStopping stopper(cfg.patience);
  TrainOutcome out;
  out.degenerate = split.degenerate;
  auto best = snapshot_values(model);
  auto best_util = detail::snapshot_util(model);
  const std::size_t max_epochs = split.degenerate ? 1 : cfg.max_epochs;

  for (std::size_t epoch = 1;; ++epoch) {
    const double lr = epoch_lr(cfg, epoch);
    const auto epoch_start = snapshot_values(model);
    for (auto* n : model.side_networks()) n->reset_utilization();
    model.arm_utilization(track_util);
    std::shuffle(train.begin(), train.end(), rng.engine());
    for (std::size_t s = 0; s < train.size(); s += cfg.batch_size) {
      const std::size_t B = std::min(cfg.batch_size, train.size() - s);
      std::span<const std::size_t> batch(train.data() + s, B);
      if (obs) obs->on_train_batch(window, batch);
      std::vector<std::vector<std::size_t>> prefixes(B);
      std::vector<std::size_t> targets(B);
      std::vector<const std::vector<std::size_t>*> hist(B);
      for (std::size_t b = 0; b < B; ++b) {
        auto p = ds.prefix(batch[b], L);
        prefixes[b].assign(p.begin(), p.end());
        targets[b] = ds.records[batch[b]].item;
        hist[b] = &history[ds.records[batch[b]].user];
      }
      opt.zero_grad();
      Tensor<float> loss = pair_loss(model, f, prefixes, targets, hist, pop, true, rng);
      if (!std::isfinite(loss.item())) {
        Tape<float>::current().clear();
        model.arm_utilization(false);
        restore_values(model, epoch_start);
        throw NumericalError("window " + std::to_string(window) + " epoch " + std::to_string(epoch) +
                             ": non-finite loss; restored weights from the last completed epoch");
      }
      backward(loss);
      try {
        opt.step(lr);
      } catch (const NumericalError& e) {
        model.arm_utilization(false);
        restore_values(model, epoch_start);
        throw NumericalError("window " + std::to_string(window) + " epoch " + std::to_string(epoch) + ": " +
                             e.what() + "; restored weights from the last completed epoch");
      }
    }
    model.arm_utilization(false);
    out.epochs = epoch;

    if (split.degenerate) {
      best = snapshot_values(model);
      best_util = detail::snapshot_util(model);
      out.best_epoch = epoch;
      if (obs) obs->on_epoch(window, epoch, lr, 0.0);
    } else {
      const auto v = evaluate(model, ds, f, val, catalog, eo);
      if (obs) obs->on_epoch(window, epoch, lr, v.ndcg);
      if (stopper.update(v.ndcg)) {
        best = snapshot_values(model);
        best_util = detail::snapshot_util(model);
        out.best_epoch = epoch;
        out.best_val_ndcg = v.ndcg;
      }
      if (stopper.should_stop()) break;
    }
    if (max_epochs && epoch >= max_epochs) break;
    if (epoch_lr(cfg, epoch + 1) < cfg.lr_min) break;
  }
  opt.zero_grad();
  restore_values(model, best);
  detail::restore_util(model, best_util);
  return out;
}

/// Warm-up on chunk 0, then for s = 1..T-1: expand, train on D_s, test on
/// D_{s+1}, finalize utilization and prune.
inline RunSummary run_stream(Recommender<float>& model, const StreamDataset& ds, const StreamFeatures& f,
                             const StreamConfig& cfg, StreamObserver* obs = nullptr) {
  using clock = std::chrono::steady_clock;
  if (ds.chunks() < 3) throw ConfigError("run_stream: need at least 3 chunks (T+1 >= 3)");
  if (!(cfg.tau >= 0.0 && cfg.tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  if (!(cfg.eval_next_chunk_fraction > 0.0 && cfg.eval_next_chunk_fraction <= 1.0))
    throw ConfigError("eval_next_chunk_fraction must lie in (0, 1]");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
  check_features(f, ds, cfg);

  const Rng root(cfg.seed);
  RunSummary summary;
  {
    Rng r = root.split("window/0");
    train_window(model, ds, f, 0, cfg, r, 0, obs);
  }
  const std::size_t T = ds.chunks() - 1;
  for (std::size_t s = 1; s + 1 <= T; ++s) {
    const auto t0 = clock::now();
    const int window = static_cast<int>(s);
    if (expands(model.variant)) model.expand(window);
    if (obs) obs->on_expand(window, model);
    WindowReport rep;
    rep.window = window;
    rep.experts_before_prune = detail::census(model);
    const ParamCounts during = model.side_param_counts();
    rep.total_params = during.total;
    rep.trainable_params = during.trainable;

    Rng r = root.split("window/" + std::to_string(s));
    const TrainOutcome tr = train_window(model, ds, f, s, cfg, r, window, obs);
    rep.epochs = tr.epochs;
    rep.best_epoch = tr.best_epoch;
    rep.best_val_ndcg = tr.best_val_ndcg;
    rep.degenerate = tr.degenerate;

    // Test on the next chunk against the catalog seen through D_s.
    const auto catalog = detail::items_before(ds, ds.chunk_begin[s + 1]);
    const std::size_t tb = ds.chunk_begin[s + 1];
    const std::size_t tn = static_cast<std::size_t>(std::floor(cfg.eval_next_chunk_fraction * double(ds.chunk_size(s + 1))));
    std::vector<std::size_t> test;
    for (std::size_t k = 0; k < std::max<std::size_t>(1, tn); ++k) test.push_back(tb + k);
    EvalOptions eo;
    eo.top_k = cfg.top_k;
    eo.filter_seen = cfg.filter_seen;
    eo.max_len = model.encoder.config.max_len;
    eo.threads = cfg.eval_threads ? cfg.eval_threads : std::max(1u, std::thread::hardware_concurrency());
    if (obs) obs->on_before_test(window, model);
    const EvalResult ev = evaluate(model, ds, f, test, catalog, eo);
    if (obs) obs->on_after_test(window, model);
    rep.hr_at_10 = ev.hr;
    rep.ndcg_at_10 = ev.ndcg;
    rep.test_cases = ev.cases;
    rep.missing_targets = ev.missing_target;

    if (expands(model.variant)) {
      for (auto* net : model.side_networks())
        for (std::size_t li = 0; li < net->layers.size(); ++li) {
          auto& layer = net->layers[li];
          const std::size_t before = layer.num_experts();
          if (layer.util_count == 0) {
            if (obs) obs->on_utilization(window, net->modality, li, UtilizationResult{}, before, std::nullopt);
            continue;
          }
          const auto u = finalize_utilization(layer, cfg.utilization_includes_backbone);
          const auto pruned = prune(layer, u.scores, cfg.tau);
          if (obs) obs->on_utilization(window, net->modality, li, u, before, pruned);
        }
    }
    rep.experts_per_layer = detail::census(model);
    rep.total_params_after_prune = model.side_param_counts().total;
    const ParamCounts head = model.head_param_counts();
    rep.head_params = head.total;
    // float weights + float grads + two double Adam moments per trainable value
    rep.memory_bytes_est = (during.total + head.total) * sizeof(float) +
                           (during.trainable + head.trainable) * (sizeof(float) + 2 * sizeof(double));
    rep.wall_clock_s = cfg.record_wall_clock ? std::chrono::duration<double>(clock::now() - t0).count() : 0.0;
    if (obs) obs->on_window_end(window, model, rep);
    summary.windows.push_back(std::move(rep));
  }
  for (const auto& w : summary.windows) {
    summary.avg_hr += w.hr_at_10;
    summary.avg_ndcg += w.ndcg_at_10;
    summary.avg_epochs += double(w.epochs);
    summary.wall_clock_s += w.wall_clock_s;
  }
  const double n = double(summary.windows.size());
  summary.avg_hr /= n;
  summary.avg_ndcg /= n;
  summary.avg_epochs /= n;
  return summary;
}

}  // namespace xsmoe
