// Command-line front end: synth, run, report, validate-cache.
//
// Settings resolve as defaults < --config file < environment < flags.
// Exit codes: 0 ok, 2 configuration, 3 data, 4 numerical abort, 1 internal.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "xsmoe/checkpoint.hpp"
#include "xsmoe/config.hpp"
#include "xsmoe/data.hpp"
#include "xsmoe/report.hpp"
#include "xsmoe/stream.hpp"
#include "xsmoe/synth.hpp"

namespace fs = std::filesystem;
using namespace xsmoe;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

// One string flag per config field; only flags that were given are applied.
template <typename C>
struct FieldFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void add(CLI::App& app, const std::vector<cfg::Field<C>>& fields) {
    for (const auto& f : fields) options[f.key] = app.add_option("--" + f.key, values[f.key], f.help)->type_name("VALUE");
  }
  void apply(const std::vector<cfg::Field<C>>& fields, C& c) const {
    for (const auto& f : fields)
      if (options.at(f.key)->count() > 0) {
        try {
          f.set(c, values.at(f.key));
        } catch (const ConfigError& e) {
          throw ConfigError("--" + f.key + ": " + e.what());
        }
      }
  }
};

template <typename C>
C resolve(const std::vector<cfg::Field<C>>& fields, const std::string& config_path, const std::string& env_prefix,
          const FieldFlags<C>& flags) {
  C c;
  if (!config_path.empty()) apply_config_file(fields, c, config_path);
  apply_env(fields, c, env_prefix);
  flags.apply(fields, c);
  return c;
}

int cmd_synth(const std::string& out, bool force, SynthConfig c) {
  c.validate();
  const fs::path dir(out);
  const std::vector<std::string> names{"interactions.csv", "visual.xsmf", "textual.xsmf", "truth.xsmg",
                                       "synth_config.txt"};
  if (!force)
    for (const auto& n : names)
      if (fs::exists(dir / n))
        throw ConfigError((dir / n).string() + " already exists (pass --force to overwrite)");
  fs::create_directories(dir);
  const SynthWorld w = synthesize(c);
  write_interactions(dir / "interactions.csv", w.interactions);
  write_cache(dir / "visual.xsmf", w.visual);
  write_cache(dir / "textual.xsmf", w.textual);
  write_truth(dir / "truth.xsmg", w.truth);
  io::spit(dir / "synth_config.txt", config_text(synth_fields(), c));
  std::cout << "wrote " << w.interactions.size() << " interactions, " << w.visual.item_ids.size()
            << " items to " << dir.string() << "\n";
  return 0;
}

// Loads data and caches, listing every problem before giving up.
struct LoadedInputs {
  StreamDataset ds;
  StreamFeatures features;
};

LoadedInputs load_inputs(const RunConfig& c) {
  LoadedInputs in;
  in.ds = chunk_stream(load_interactions(c.interactions), c.chunks);
  std::string problems;
  for (Modality m : {Modality::visual, Modality::textual}) {
    if (!uses_modality(c.stream.variant, m)) continue;
    const std::string& path = m == Modality::visual ? c.visual_cache : c.textual_cache;
    try {
      FeatureCache cache = read_cache(path);
      if (cache.modality != m)
        throw DataError(path + ": cache holds " + std::string(to_string(cache.modality)) + " features, expected " +
                        std::string(to_string(m)));
      in.features.bank(m) = align_features(cache, in.ds.item_ids, path);
    } catch (const DataError& e) {
      problems += std::string(problems.empty() ? "" : "\n") + e.what();
    }
  }
  if (!problems.empty()) throw DataError(problems);
  return in;
}

struct CheckpointEachWindow : StreamObserver {
  fs::path dir;
  std::string suffix;
  void on_window_end(int window, const Recommender<float>& model, const WindowReport&) override {
    save_checkpoint(dir / ("checkpoint_w" + std::to_string(window) + suffix + ".xsmo"), model, window, "");
  }
};

std::string tau_tag(double tau) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", tau);
  return buf;
}

void run_one(RunConfig c, const LoadedInputs& in, const std::string& suffix) {
  const fs::path dir(c.output_dir);
  io::spit(dir / ("resolved_config" + suffix + ".txt"), config_text(run_fields(), c));
  Rng rng(c.stream.seed);
  auto model = Recommender<float>::create(c.stream.variant, c.stream.dims, rng);
  const auto t0 = std::chrono::steady_clock::now();
  CheckpointEachWindow ckpt;
  ckpt.dir = dir;
  ckpt.suffix = suffix;
  const RunSummary s = run_stream(model, in.ds, in.features, c.stream, c.checkpoint_windows ? &ckpt : nullptr);
  io::spit(dir / ("report" + suffix + ".jsonl"), report_lines(s, c.stream));
  save_checkpoint(dir / ("checkpoint" + suffix + ".xsmo"), model, static_cast<int>(s.windows.size()), "");
  std::cout << to_string(c.stream.variant) << " tau=" << cfg::fmt(c.stream.tau) << " avg HR@10 "
            << detail::fixed4(s.avg_hr) << " NDCG@10 " << detail::fixed4(s.avg_ndcg) << " over "
            << s.windows.size() << " windows, "
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
}

std::vector<double> parse_tau_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(cfg::to_double("tau-sweep", cfg::trim(tok)));
  if (out.empty()) throw ConfigError("--tau-sweep needs at least one value");
  return out;
}

int cmd_run(RunConfig c, const std::string& tau_sweep) {
  validate(c);
  validate_inputs(c);
  std::vector<double> taus;
  if (!tau_sweep.empty()) {
    taus = parse_tau_list(tau_sweep);
    for (double t : taus)
      if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("--tau-sweep: tau must lie in [0, 1]");
  }
  const LoadedInputs in = load_inputs(c);
  fs::create_directories(c.output_dir);
  if (taus.empty()) {
    run_one(c, in, "");
    return 0;
  }
  for (double t : taus) {
    RunConfig ct = c;
    ct.stream.tau = t;
    run_one(ct, in, "_tau" + tau_tag(t));
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& csv_dir) {
  std::vector<RunReport> runs;
  for (const auto& p : paths) runs.push_back(read_report(p));
  std::cout << report_table(runs);
  if (!csv_dir.empty()) {
    fs::create_directories(csv_dir);
    io::spit(fs::path(csv_dir) / "tau_curve.csv", tau_curve_csv(runs));
    io::spit(fs::path(csv_dir) / "windows.csv", window_csv(runs));
  }
  return 0;
}

int cmd_validate_cache(const std::vector<std::string>& paths, const std::string& interactions) {
  std::optional<std::vector<std::string>> items;
  if (!interactions.empty()) items = chunk_stream(load_interactions(interactions), 1).item_ids;
  for (const auto& p : paths) {
    const FeatureCache c = read_cache(p);
    if (items) align_features(c, *items, p);
    std::cout << p << ": ok, " << to_string(c.modality) << ", " << c.item_ids.size() << " items, " << c.layers
              << " layers, dim " << c.dim << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expandable side mixture-of-experts for streaming recommendation"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic drifting stream with feature caches");
  std::string synth_out, synth_config;
  bool force = false;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--config", synth_config, "key = value file");
  synth->add_flag("--force", force, "overwrite existing files");
  FieldFlags<SynthConfig> synth_flags;
  synth_flags.add(*synth, synth_fields());

  auto* run = app.add_subcommand("run", "stream training and evaluation");
  std::string run_config, tau_sweep;
  run->add_option("--config", run_config, "key = value file");
  run->add_option("--tau-sweep", tau_sweep, "comma-separated tau values, one report per value");
  FieldFlags<RunConfig> run_flags;
  run_flags.add(*run, run_fields());

  auto* report = app.add_subcommand("report", "tabulate one or more run reports");
  std::vector<std::string> report_paths;
  std::string csv_dir;
  report->add_option("reports", report_paths, "report.jsonl files")->required();
  report->add_option("--csv-dir", csv_dir, "also write tau_curve.csv and windows.csv here");

  auto* vcache = app.add_subcommand("validate-cache", "check XSMF feature caches");
  std::vector<std::string> cache_paths;
  std::string cover;
  vcache->add_option("caches", cache_paths, "cache files")->required();
  vcache->add_option("--interactions", cover, "also require every item of this interaction file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(synth_out, force, resolve(synth_fields(), synth_config, "XSMOE_SYNTH_", synth_flags));
    if (*run) return cmd_run(resolve(run_fields(), run_config, "XSMOE_", run_flags), tau_sweep);
    if (*report) return cmd_report(report_paths, csv_dir);
    if (*vcache) return cmd_validate_cache(cache_paths, cover);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
