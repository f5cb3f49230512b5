// Acceptance checks A1-A10. Prints one PASS/FAIL line per criterion plus
// indented detail, and exits non-zero if any criterion fails.
//
// Usage: acceptance [A1 A7 ...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "xsmoe/data.hpp"
#include "xsmoe/stream.hpp"
#include "xsmoe/synth.hpp"

using namespace xsmoe;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string summary;
  std::vector<std::string> detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared synthetic runs

struct World {
  StreamDataset ds;
  StreamFeatures features;
  std::size_t interactions = 0;
};

World make_world(const SynthConfig& sc, std::size_t chunks) {
  World w;
  const SynthWorld sw = synthesize(sc);
  w.interactions = sw.interactions.size();
  w.ds = chunk_stream(sw.interactions, chunks);
  w.features.visual = align_features(sw.visual, w.ds.item_ids, "visual");
  w.features.textual = align_features(sw.textual, w.ds.item_ids, "textual");
  return w;
}

// Fans one run's callbacks out to several checkers.
struct Tee : StreamObserver {
  std::vector<StreamObserver*> to;
  void on_expand(int w, const Recommender<float>& m) override {
    for (auto* o : to) o->on_expand(w, m);
  }
  void on_train_batch(int w, std::span<const std::size_t> r) override {
    for (auto* o : to) o->on_train_batch(w, r);
  }
  void on_before_test(int w, const Recommender<float>& m) override {
    for (auto* o : to) o->on_before_test(w, m);
  }
  void on_after_test(int w, const Recommender<float>& m) override {
    for (auto* o : to) o->on_after_test(w, m);
  }
  void on_utilization(int w, Modality mod, std::size_t l, const UtilizationResult& u, std::size_t n,
                      std::optional<std::size_t> p) override {
    for (auto* o : to) o->on_utilization(w, mod, l, u, n, p);
  }
  void on_window_end(int w, const Recommender<float>& m, const WindowReport& r) override {
    for (auto* o : to) o->on_window_end(w, m, r);
  }
};

// Frozen experts must keep the bytes they had when they were frozen.
struct RetentionCheck : StreamObserver {
  std::map<std::tuple<std::size_t, int, int, int>, std::uint64_t> snapshot;  // run, modality, layer, birth -> hash
  std::size_t run = 0, comparisons = 0, violations = 0;

  void begin_run() { ++run; }

  static std::uint64_t expert_hash(const ExpertNet<float>& e) { return hash_tensors<float>({e.w_down, e.w_up}); }

  void on_expand(int, const Recommender<float>& m) override {
    for (const auto* net : m.side_networks())
      for (std::size_t l = 0; l < net->layers.size(); ++l)
        for (const auto& e : net->layers[l].experts)
          if (e.frozen) snapshot.try_emplace({run, int(net->modality), int(l), e.birth_window}, expert_hash(e));
  }
  void on_window_end(int, const Recommender<float>& m, const WindowReport&) override {
    for (const auto* net : m.side_networks())
      for (std::size_t l = 0; l < net->layers.size(); ++l)
        for (const auto& e : net->layers[l].experts) {
          if (!e.frozen) continue;
          auto it = snapshot.find({run, int(net->modality), int(l), e.birth_window});
          ++comparisons;
          if (it == snapshot.end() || it->second != expert_hash(e) || e.w_down.requires_grad() ||
              e.w_up.requires_grad())
            ++violations;
        }
  }
};

// One prune at most, always the minimal score below tau, never a lone expert.
struct PruneCheck : StreamObserver {
  double tau = 0.0;
  std::size_t decisions = 0, prunes = 0, single_layers = 0;
  std::vector<std::string> violations;

  void on_utilization(int w, Modality mod, std::size_t l, const UtilizationResult& u, std::size_t n,
                      std::optional<std::size_t> pruned) override {
    ++decisions;
    const std::string where = fmt("window %d %s layer %zu: ", w, std::string(to_string(mod)).c_str(), l);
    if (u.scores.size() != n) {
      violations.push_back(where + "score count differs from expert count");
      return;
    }
    if (n == 1) {
      ++single_layers;
      if (pruned) violations.push_back(where + "single expert pruned");
      if (std::abs(u.scores[0] - 1.0) > 1e-12) violations.push_back(where + "lone expert r != 1");
      return;
    }
    std::size_t argmin = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (u.scores[j] < u.scores[argmin]) argmin = j;
    if (pruned) {
      ++prunes;
      if (*pruned != argmin) violations.push_back(where + "pruned expert is not the lowest-index minimum");
      if (!(u.scores[*pruned] < tau)) violations.push_back(where + "pruned expert has r >= tau");
    } else if (u.scores[argmin] < tau) {
      violations.push_back(where + "expert below tau left in place");
    }
  }
  void on_window_end(int w, const Recommender<float>&, const WindowReport& r) override {
    for (const auto& [mod, before] : r.experts_before_prune) {
      const auto& after = r.experts_per_layer.at(mod);
      for (std::size_t l = 0; l < before.size(); ++l)
        if (before[l] < after[l] || before[l] - after[l] > 1)
          violations.push_back(fmt("window %d %s layer %zu: %zu -> %zu experts", w, mod.c_str(), l, before[l], after[l]));
    }
  }
};

// Closed forms for M layers of N experts each, per modality.
std::size_t closed_total(std::size_t M, std::size_t N, std::size_t d, std::size_t dh) {
  return M * (2 * N * d * dh + N * d + d);
}
std::size_t closed_trainable(std::size_t M, std::size_t N, std::size_t d, std::size_t dh) {
  return M * (2 * d * dh + N * d + d);
}

struct AccountingCheck {
  std::size_t windows = 0, uniform = 0, ragged = 0;
  std::vector<std::string> violations;

  void check(const RunSummary& s, const StreamConfig& c, const std::string& run) {
    const std::size_t d = c.dims.d, dh = c.dims.d_hidden;
    auto sum_forms = [&](const std::map<std::string, std::vector<std::size_t>>& census, bool trainable,
                         bool& all_uniform) {
      std::size_t total = 0;
      for (const auto& [mod, ns] : census) {
        const bool uni = std::all_of(ns.begin(), ns.end(), [&](std::size_t n) { return n == ns.front(); });
        if (uni) {
          total += trainable ? closed_trainable(ns.size(), ns.front(), d, dh) : closed_total(ns.size(), ns.front(), d, dh);
        } else {
          all_uniform = false;
          for (std::size_t n : ns) total += trainable ? closed_trainable(1, n, d, dh) : closed_total(1, n, d, dh);
        }
      }
      return total;
    };
    for (const auto& r : s.windows) {
      ++windows;
      bool uni = true;
      const std::size_t tot = sum_forms(r.experts_before_prune, false, uni);
      const std::size_t tr = sum_forms(r.experts_before_prune, true, uni);
      const std::size_t after = sum_forms(r.experts_per_layer, false, uni);
      (uni ? uniform : ragged)++;
      if (tot != r.total_params || tr != r.trainable_params || after != r.total_params_after_prune)
        violations.push_back(fmt("%s window %d: reported %zu/%zu/%zu, closed form %zu/%zu/%zu", run.c_str(), r.window,
                                 r.total_params, r.trainable_params, r.total_params_after_prune, tot, tr, after));
    }
  }
};

// ---------------------------------------------------------------------------
// A1

Outcome a1_gradients() {
  const auto t0 = Clock::now();
  ModelDims dims;
  dims.d = 8;
  dims.d_hidden = 4;
  dims.d_embed = 8;
  dims.layers = 2;
  dims.encoder.ffn = 16;
  dims.encoder.max_len = 4;
  dims.encoder.dropout = 0.0;
  const std::size_t B = 4, items = 12;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    auto model = Recommender<double>::create(Variant::xsmoe, dims, rng);
    model.expand(1);
    model.expand(2);
    for (auto* n : model.side_networks())
      for (auto& l : n->layers)
        for (auto& v : l.router.weights.data()) v = rng.normal(0.0, 0.5);
    StreamFeatures f;
    for (Modality m : {Modality::visual, Modality::textual}) {
      FeatureBank b;
      b.items = items;
      b.layers = model.stack_depth();
      b.dim = dims.d;
      b.values.resize(b.items * b.layers * b.dim);
      for (auto& v : b.values) v = static_cast<float>(rng.normal());
      f.bank(m) = std::move(b);
    }
    std::vector<std::vector<std::size_t>> prefixes(B);
    std::vector<std::size_t> targets(B);
    std::vector<std::vector<std::size_t>> hist(B);
    std::vector<const std::vector<std::size_t>*> hp(B);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t len = 1 + rng.index(dims.encoder.max_len);
      for (std::size_t k = 0; k < len; ++k) prefixes[b].push_back(rng.index(items));
      targets[b] = rng.index(items);
      hist[b] = prefixes[b];
      std::sort(hist[b].begin(), hist[b].end());
      hist[b].erase(std::unique(hist[b].begin(), hist[b].end()), hist[b].end());
      hp[b] = &hist[b];
    }
    PopularityTable pop;
    for (std::size_t i = 0; i < items; ++i) pop.prob.push_back(0.02 + rng.uniform());
    Rng unused(0);
    const auto res = testing::grad_check(
        [&] { return pair_loss(model, f, prefixes, targets, hp, pop, true, unused); }, model.trainable_parameters());
    worst = std::max(worst, res.max_rel_error);
    checked += res.checked;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst < 1e-3 && secs < 60.0;
  o.summary = fmt("gradient integrity: max rel err %.2e over 20 seeds, %zu coordinates, %.1f s", worst, checked, secs);
  return o;
}

// ---------------------------------------------------------------------------
// A2

Outcome a2_simplex() {
  Rng rng(2024);
  double worst_alpha = 0.0, worst_r = 0.0;
  bool negative = false;
  std::size_t alpha_rows = 0, r_vectors = 0;
  NoGradGuard guard;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t d = 2 + rng.index(6), dh = 1 + rng.index(4), n = 1 + rng.index(8);
    auto net = SideNetwork<float>::create(Modality::visual, 1, d, dh, 1, rng);
    const std::size_t grow = rng.index(5);
    for (std::size_t k = 0; k < grow; ++k) net.expand(int(k + 1));
    auto& layer = net.layers[0];
    const double scale = std::exp(rng.uniform(-3.0, 3.0));
    for (auto& v : layer.router.weights.data()) v = static_cast<float>(rng.normal(0.0, scale));
    std::vector<float> h(n * d), l(n * d);
    for (auto& v : h) v = static_cast<float>(rng.normal(0.0, scale));
    for (auto& v : l) v = static_cast<float>(rng.normal());
    net.arm_utilization(true);
    layer.forward(Tensor<float>::from({n, d}, std::move(h)), Tensor<float>::from({n, d}, std::move(l)));
    const auto& a = layer.last_alpha;
    const std::size_t k = a.dim(1);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double v = a.data()[r * k + j];
        negative |= v < 0.0;
        s += v;
      }
      worst_alpha = std::max(worst_alpha, std::abs(s - 1.0));
      ++alpha_rows;
    }
    const auto u = finalize_utilization(layer);
    double s = 0.0;
    for (double v : u.scores) {
      negative |= v < 0.0;
      s += v;
    }
    worst_r = std::max(worst_r, std::abs(s - 1.0));
    ++r_vectors;
  }
  Outcome o;
  o.pass = !negative && worst_alpha <= 1e-6 && worst_r <= 1e-6;
  o.summary = fmt("routing simplex: %zu alpha rows, %zu r vectors, max |sum-1| %.1e / %.1e, negatives: %s",
                  alpha_rows, r_vectors, worst_alpha, worst_r, negative ? "yes" : "none");
  return o;
}

// ---------------------------------------------------------------------------
// A6

Outcome a6_loss_oracle() {
  Rng rng(6);
  double worst = 0.0;
  std::size_t zero_cases = 0;
  bool zero_mismatch = false;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(8), universe = 10;
    std::vector<std::size_t> targets(n);
    for (auto& t : targets) t = rng.index(universe);
    std::vector<std::vector<std::size_t>> hist(n);
    std::vector<std::set<std::size_t>> hist_set(n);
    std::vector<const std::vector<std::size_t>*> hp;
    for (std::size_t u = 0; u < n; ++u) {
      const std::size_t h = rng.index(4);
      for (std::size_t k = 0; k < h; ++k) hist[u].push_back(rng.index(universe));
      std::sort(hist[u].begin(), hist[u].end());
      hist[u].erase(std::unique(hist[u].begin(), hist[u].end()), hist[u].end());
      hist_set[u] = {hist[u].begin(), hist[u].end()};
    }
    for (auto& h : hist) hp.push_back(&h);
    PopularityTable pop;
    for (std::size_t i = 0; i < universe; ++i) pop.prob.push_back(0.01 + rng.uniform());
    std::vector<std::vector<double>> y(n, std::vector<double>(n));
    std::vector<float> flat;
    for (auto& row : y)
      for (auto& v : row) {
        v = static_cast<float>(rng.normal(0.0, 3.0));
        flat.push_back(static_cast<float>(v));
      }
    const double got = batch_loss(Tensor<float>::from({n, n}, flat), targets, hp, pop).item();
    const double ref = testing::loss_oracle(y, targets, hist_set, pop.prob);
    if (ref == 0.0) {
      ++zero_cases;
      zero_mismatch |= got != 0.0;
    } else {
      worst = std::max(worst, std::abs(got - ref) / std::abs(ref));
    }
  }
  Outcome o;
  o.pass = worst <= 1e-5 && !zero_mismatch;
  o.summary = fmt("loss oracle: 100 batches, max rel err %.2e (float vs 64-bit brute force), %zu exact-zero cases %s",
                  worst, zero_cases, zero_mismatch ? "MISMATCH" : "match");
  return o;
}

// ---------------------------------------------------------------------------
// A9

struct LeakCheck : StreamObserver {
  const StreamDataset* ds = nullptr;
  std::size_t batches = 0, tests = 0;
  std::vector<std::string> violations;
  std::uint64_t before = 0;

  void on_train_batch(int w, std::span<const std::size_t> recs) override {
    ++batches;
    const auto s = split_window(ds->chunk_begin[w], ds->chunk_begin[w + 1]);
    for (std::size_t r : recs)
      if (r < s.begin || r >= s.train_end) {
        violations.push_back(fmt("window %d trained on record %zu outside its training split", w, r));
        return;
      }
  }
  void on_before_test(int, const Recommender<float>& m) override { before = hash_tensors(m.parameters()); }
  void on_after_test(int w, const Recommender<float>& m) override {
    ++tests;
    if (hash_tensors(m.parameters()) != before) violations.push_back(fmt("window %d: parameters changed in test", w));
  }
};

Outcome a9_protocol() {
  SynthConfig sc;
  sc.seed = 9;
  sc.users = 500;
  sc.items = 200;
  sc.windows = 10;
  sc.interactions_per_window = 800;
  const SynthWorld sw = synthesize(sc);
  auto sorted = sw.interactions;
  sort_interactions(sorted);
  World w = make_world(sc, 10);
  std::vector<std::string> bad;

  // partition: contiguous, complete, chronological, multiset-equal
  if (w.ds.chunks() != 10 || w.ds.chunk_begin.front() != 0 || w.ds.chunk_begin.back() != sorted.size())
    bad.push_back("chunk boundaries do not cover the input");
  std::multiset<std::tuple<std::string, std::string, std::int64_t>> in, out;
  for (const auto& x : sorted) in.emplace(x.user_id, x.item_id, x.timestamp);
  for (const auto& r : w.ds.records) out.emplace(w.ds.user_ids[r.user], w.ds.item_ids[r.item], r.timestamp);
  if (in != out) bad.push_back("chunk records differ from the input multiset");
  for (std::size_t c = 0; c + 1 < w.ds.chunks(); ++c)
    if (w.ds.records[w.ds.chunk_begin[c + 1] - 1].timestamp > w.ds.records[w.ds.chunk_begin[c + 1]].timestamp)
      bad.push_back(fmt("chunk %zu ends after chunk %zu starts", c, c + 1));

  StreamConfig c;
  c.seed = 9;
  c.max_epochs = 3;
  LeakCheck leak;
  leak.ds = &w.ds;
  Rng rng(c.seed);
  auto model = Recommender<float>::create(c.variant, c.dims, rng);
  const RunSummary s = run_stream(model, w.ds, w.features, c, &leak);
  bad.insert(bad.end(), leak.violations.begin(), leak.violations.end());
  std::string tested;
  for (std::size_t k = 0; k < s.windows.size(); ++k) {
    const auto& r = s.windows[k];
    const std::size_t chunk = std::size_t(r.window) + 1;
    std::size_t first_seen = 0;
    for (std::size_t i = w.ds.chunk_begin[chunk]; i < w.ds.chunk_begin[chunk + 1]; ++i)
      first_seen += w.ds.records[i].position == 0;
    if (r.window != int(k + 1) || r.test_cases + first_seen != w.ds.chunk_size(chunk))
      bad.push_back(fmt("window %d tested %zu cases, chunk %zu has %zu", r.window, r.test_cases, chunk,
                        w.ds.chunk_size(chunk)));
    tested += (tested.empty() ? "D" : ",D") + std::to_string(chunk);
  }
  Outcome o;
  o.pass = s.windows.size() == 8 && leak.tests == 8 && bad.empty();
  o.summary = fmt("protocol: 10 chunks -> %zu test evaluations (%s), %zu training batches, %zu violations",
                  s.windows.size(), tested.c_str(), leak.batches, bad.size());
  for (std::size_t k = 0; k < std::min<std::size_t>(bad.size(), 5); ++k) o.detail.push_back(bad[k]);
  return o;
}

// ---------------------------------------------------------------------------
// A10

int run_cli(const std::string& args) {
  const std::string cmd = std::string(XSMOE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome a10_determinism() {
  const fs::path dir = fs::temp_directory_path() / "xsmoe_acceptance_a10";
  fs::remove_all(dir);
  Outcome o;
  const std::string synth = "synth --out " + (dir / "data").string() +
                            " --users 400 --items 150 --windows 5 --interactions_per_window 600";
  if (run_cli(synth) != 0) {
    o.summary = "determinism: synth failed";
    return o;
  }
  const std::string inputs = " --interactions " + (dir / "data" / "interactions.csv").string() + " --visual_cache " +
                             (dir / "data" / "visual.xsmf").string() + " --textual_cache " +
                             (dir / "data" / "textual.xsmf").string() + " --chunks 5 --max_epochs 4 --seed 10";
  for (const char* run : {"a", "b"})
    if (run_cli("run" + inputs + " --output_dir " + (dir / run).string()) != 0) {
      o.summary = "determinism: run failed";
      return o;
    }
  const std::string ra = io::slurp(dir / "a" / "report.jsonl"), rb = io::slurp(dir / "b" / "report.jsonl");
  const bool ck = io::slurp(dir / "a" / "checkpoint.xsmo") == io::slurp(dir / "b" / "checkpoint.xsmo");
  o.pass = !ra.empty() && ra == rb && ck;
  o.summary = fmt("determinism: two CLI runs, report.jsonl %zu bytes %s, checkpoint %s", ra.size(),
                  ra == rb ? "byte-identical" : "DIFFERS", ck ? "byte-identical" : "DIFFERS");
  fs::remove_all(dir);
  return o;
}

// ---------------------------------------------------------------------------
// A3, A4, A5, A7, A8 share synthetic stream runs.

struct SeedRuns {
  std::map<std::string, RunSummary> by_key;  // "xsmoe", "static", "noft", "tau0", "tau0.25"
};

struct StreamEvidence {
  std::vector<SeedRuns> seeds;
  RetentionCheck retention;
  AccountingCheck accounting;
  double seconds = 0.0;
  std::size_t retention_runs = 0;
};

StreamEvidence run_streams(bool with_a8) {
  StreamEvidence ev;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthConfig sc;  // 2,000 users, 500 items, 6 windows, drift 0.5
    sc.seed = seed;
    const World w = make_world(sc, sc.windows);
    SeedRuns sr;
    auto go = [&](const std::string& key, Variant v, double tau, StreamObserver* obs) {
      StreamConfig c;
      c.variant = v;
      c.tau = tau;
      c.seed = seed;
      Rng rng(seed);
      auto model = Recommender<float>::create(v, c.dims, rng);
      if (obs == &ev.retention) ev.retention.begin_run();
      const auto t = Clock::now();
      sr.by_key[key] = run_stream(model, w.ds, w.features, c, obs);
      ev.accounting.check(sr.by_key[key], c, fmt("seed %d %s", int(seed), key.c_str()));
      std::fprintf(stderr, "  [seed %d] %-8s NDCG@10 %.4f  (%.0f s)\n", int(seed), key.c_str(),
                   sr.by_key[key].avg_ndcg, seconds_since(t));
    };
    go("xsmoe", Variant::xsmoe, 0.1, &ev.retention);
    ++ev.retention_runs;
    go("static", Variant::static_experts, 0.1, nullptr);
    go("noft", Variant::noft, 0.1, nullptr);
    if (with_a8) {
      go("tau0", Variant::xsmoe, 0.0, &ev.retention);
      go("tau0.25", Variant::xsmoe, 0.25, &ev.retention);
      ev.retention_runs += 2;
    }
    ev.seeds.push_back(std::move(sr));
  }
  ev.seconds = seconds_since(t0);
  return ev;
}

Outcome a3_retention(const StreamEvidence& ev) {
  Outcome o;
  o.pass = ev.retention.violations == 0 && ev.retention.comparisons > 0;
  o.summary = fmt("knowledge retention: %zu frozen experts snapshotted, %zu post-window comparisons over %zu runs, "
                  "%zu mismatches",
                  ev.retention.snapshot.size(), ev.retention.comparisons, ev.retention_runs, ev.retention.violations);
  return o;
}

Outcome a4_accounting(const StreamEvidence& ev) {
  Outcome o;
  o.pass = ev.accounting.violations.empty() && ev.accounting.uniform > 0;
  o.summary = fmt("parameter accounting: %zu windows checked (%zu uniform, %zu ragged after pruning), %zu mismatches",
                  ev.accounting.windows, ev.accounting.uniform, ev.accounting.ragged, ev.accounting.violations.size());
  for (std::size_t k = 0; k < std::min<std::size_t>(ev.accounting.violations.size(), 5); ++k)
    o.detail.push_back(ev.accounting.violations[k]);
  return o;
}

Outcome a5_pruning() {
  PruneCheck pc;
  pc.tau = 0.25;
  AccountingCheck acc;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    SynthConfig sc;
    sc.seed = 100 + seed;
    sc.users = 600;
    sc.items = 200;
    sc.windows = 7;
    sc.interactions_per_window = 1000;
    const World w = make_world(sc, sc.windows);
    StreamConfig c;
    c.seed = seed;
    c.tau = 0.25;
    c.max_epochs = 5;
    Rng rng(seed);
    auto model = Recommender<float>::create(c.variant, c.dims, rng);
    acc.check(run_stream(model, w.ds, w.features, c, &pc), c, fmt("A5 seed %d", int(seed)));
  }
  Outcome o;
  o.pass = pc.violations.empty() && acc.violations.empty() && pc.prunes > 0;
  o.summary = fmt("pruning discipline (tau 0.25): 10 runs, %zu layer decisions, %zu prunes, %zu single-expert layers "
                  "kept, %zu violations",
                  pc.decisions, pc.prunes, pc.single_layers, pc.violations.size() + acc.violations.size());
  if (pc.prunes == 0) o.detail.push_back("no prune happened, so the check would be vacuous");
  for (std::size_t k = 0; k < std::min<std::size_t>(pc.violations.size(), 5); ++k) o.detail.push_back(pc.violations[k]);
  return o;
}

Outcome a7_forgetting(const StreamEvidence& ev) {
  int x_over_s = 0, both_over_n = 0;
  Outcome o;
  for (std::size_t k = 0; k < ev.seeds.size(); ++k) {
    const double x = ev.seeds[k].by_key.at("xsmoe").avg_ndcg, s = ev.seeds[k].by_key.at("static").avg_ndcg,
                 n = ev.seeds[k].by_key.at("noft").avg_ndcg;
    x_over_s += x > s;
    both_over_n += x > n && s > n;
    o.detail.push_back(fmt("seed %zu: xsmoe %.4f  static %.4f  noft %.4f", k + 1, x, s, n));
  }
  o.pass = x_over_s >= 4 && both_over_n >= 4;
  o.summary = fmt("forgetting ablation: xsmoe > static in %d/5 seeds, both > noft in %d/5 seeds", x_over_s, both_over_n);
  return o;
}

Outcome a8_tau(const StreamEvidence& ev) {
  int ok = 0;
  Outcome o;
  for (std::size_t k = 0; k < ev.seeds.size(); ++k) {
    const auto& r0 = ev.seeds[k].by_key.at("tau0");
    const auto& r1 = ev.seeds[k].by_key.at("xsmoe");
    const auto& r2 = ev.seeds[k].by_key.at("tau0.25");
    const std::size_t p0 = r0.windows.back().total_params_after_prune, p1 = r1.windows.back().total_params_after_prune,
                      p2 = r2.windows.back().total_params_after_prune;
    const double rel = (r0.avg_ndcg - r1.avg_ndcg) / r0.avg_ndcg;
    const bool good = p0 >= p1 && p1 >= p2 && std::abs(rel) <= 0.05;
    ok += good;
    o.detail.push_back(fmt("seed %zu: params %zu >= %zu >= %zu, NDCG tau0 %.4f tau0.1 %.4f (drop %+.1f%%)%s", k + 1, p0,
                           p1, p2, r0.avg_ndcg, r1.avg_ndcg, 100.0 * rel, good ? "" : "  <- fails"));
  }
  o.pass = ok >= 3;
  o.summary = fmt("tau sweep: %d/5 seeds satisfy monotone parameters and <= 5%% NDCG change at tau 0.1", ok);
  return o;
}

}  // namespace

// Usage: acceptance [--expect-fail ID]... [ID]...
// An expected failure still prints FAIL. The exit status is 0 only when the failing set equals the
// declared set, so a known-red criterion that turns green also fails the run until the list is updated.
int main(int argc, char** argv) {
  std::set<std::string> want, expect_fail;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--expect-fail" && i + 1 < argc)
      expect_fail.insert(argv[++i]);
    else
      want.insert(a);
  }
  auto on = [&](const std::string& id) { return want.empty() || want.count(id) > 0; };

  std::map<std::string, Outcome> results;
  auto record = [&](const std::string& id, Outcome o) {
    std::cout << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << o.summary
              << (!o.pass && expect_fail.count(id) ? "  [known red, see README]" : "") << "\n";
    for (const auto& d : o.detail) std::cout << "     " << d << "\n";
    std::cout.flush();
    results[id] = std::move(o);
  };

  try {
    if (on("A1")) record("A1", a1_gradients());
    if (on("A2")) record("A2", a2_simplex());
    if (on("A6")) record("A6", a6_loss_oracle());
    if (on("A9")) record("A9", a9_protocol());
    if (on("A10")) record("A10", a10_determinism());
    if (on("A5")) record("A5", a5_pruning());
    if (on("A3") || on("A4") || on("A7") || on("A8")) {
      const StreamEvidence ev = run_streams(on("A8"));
      std::cerr << fmt("  shared stream runs took %.0f s\n", ev.seconds);
      if (on("A3")) record("A3", a3_retention(ev));
      if (on("A4")) record("A4", a4_accounting(ev));
      if (on("A7")) record("A7", a7_forgetting(ev));
      if (on("A8")) record("A8", a8_tau(ev));
    }
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << "\n";
    return 1;
  }
  std::size_t failed = 0;
  bool as_declared = true;
  for (const auto& [id, o] : results) {
    failed += !o.pass;
    if (!o.pass != (expect_fail.count(id) > 0)) {
      as_declared = false;
      if (o.pass) std::cout << id << " passes but is declared --expect-fail\n";
    }
  }
  std::cout << (failed == 0 ? std::string("all criteria pass") : fmt("%zu criteria fail", failed));
  if (failed > 0 && as_declared) std::cout << ", exactly the declared known-red set";
  std::cout << "\n";
  return as_declared ? 0 : 1;
}
