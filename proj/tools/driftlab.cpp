#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "driftlab/harness.hpp"

using namespace driftlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0, kConfig = 2, kData = 3, kGate = 4;

struct ConfigFlags {
  std::string preset;
  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seeds;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("preset", f.preset, "Preset: " + [] {
    std::string s;
    for (const auto& n : preset_names()) s += (s.empty() ? "" : ", ") + n;
    return s;
  }())->required();
  cmd->add_option("--config", f.config_file, "JSON file merged over the preset defaults");
  cmd->add_option("--set", f.sets, "key=value override (dotted keys for nested fields)");
  cmd->add_option("--seeds", f.seeds, "Run seeds")->delimiter(',');
}

// Preset defaults, then the config file, then --set, then --seeds. Returns the
// config and the flag echo recorded in manifests.
std::pair<ExperimentConfig, std::vector<std::string>> build_config(const ConfigFlags& f) {
  json j = preset_config(f.preset).to_json();
  std::vector<std::string> echo;
  if (!f.config_file.empty()) {
    std::ifstream is(f.config_file);
    if (!is) throw DataError("cannot read config file " + f.config_file);
    json patch;
    try {
      patch = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError(f.config_file + ": " + e.what());
    }
    if (patch.contains("preset") && patch["preset"] != f.preset) {
      throw UsageError("config file is for preset " + patch["preset"].dump() + ", not " + f.preset);
    }
    for (const auto& [key, value] : patch.items()) {
      if (!j.contains(key)) throw UsageError(f.config_file + ": unknown key '" + key + "'");
    }
    j.merge_patch(patch);
    echo.push_back("config=" + patch.dump());
  }
  for (const auto& s : f.sets) {
    apply_override(j, s);
    echo.push_back(s);
  }
  if (!f.seeds.empty()) {
    j["seeds"] = f.seeds;
    echo.push_back("seeds=" + json(f.seeds).dump());
  }
  return {ExperimentConfig::from_json(j), echo};
}

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  os << s;
}

// Prints gate results; returns true when every applicable gate passed.
bool report_gates(const std::vector<GateResult>& gates, std::ostream& os) {
  bool ok = true;
  for (const auto& g : gates) {
    const char* verdict = !g.applicable ? "N/A" : g.passed ? "PASS" : "FAIL";
    os << verdict << " criterion " << g.criterion << ": " << g.name << " | " << g.detail << '\n';
    ok = ok && (!g.applicable || g.passed);
  }
  return ok;
}

int summarize_dirs(const std::vector<fs::path>& dirs, const fs::path& out, bool check) {
  const auto s = summarize(dirs);
  write_text(out / "summary.csv", s.table);
  write_text(out / "ratios.csv", s.ratios);
  std::cout << s.table << '\n' << s.ratios;
  if (!check) return kOk;
  return report_gates(evaluate_gates(dirs), std::cout) ? kOk : kGate;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"driftlab: drafter hidden-state drift experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string out_flag, cache_flag;
  bool quiet = false;
  app.add_option("--out", out_flag, "Output root (default: $DRIFTLAB_OUT or ./runs)");
  app.add_option("--cache", cache_flag, "Checkpoint cache (default: <out>/cache)");
  app.add_flag("-q,--quiet", quiet, "No progress output");

  app.add_subcommand("presets", "List experiment presets");

  ConfigFlags tv_flags;
  auto* tv = app.add_subcommand("train-verifier", "Train (or load from cache) the preset's verifier");
  add_config_flags(tv, tv_flags);

  ConfigFlags td_flags;
  std::string td_variant = "pre_norm";
  int td_ttt = 0;
  auto* td = app.add_subcommand("train-drafter", "Train (or load from cache) drafters for the preset's seeds");
  add_config_flags(td, td_flags);
  td->add_option("--variant", td_variant, "pre_norm, post_norm, gated or gated_post_norm");
  td->add_option("--ttt", td_ttt, "TTT depth (default: the preset's)");

  ConfigFlags run_flags;
  bool run_check = false;
  auto* run = app.add_subcommand("run", "Run a preset for every seed");
  add_config_flags(run, run_flags);
  run->add_flag("--check", run_check, "Evaluate the preset's directional gates (exit 4 on failure)");

  std::string manifest_path;
  auto* rerun = app.add_subcommand("rerun", "Re-run one seed from its manifest");
  rerun->add_option("manifest", manifest_path, "manifest.json")->required();

  std::vector<std::string> sum_dirs;
  bool sum_check = false;
  std::string sum_out;
  auto* sum = app.add_subcommand("summarize", "Aggregate seed directories of one preset");
  sum->add_option("dirs", sum_dirs, "seed directories")->required();
  sum->add_option("--to", sum_out, "Directory for summary.csv and ratios.csv (default: parent of the first)");
  sum->add_flag("--check", sum_check, "Evaluate directional gates (exit 4 on failure)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  const fs::path out = out_flag.empty() ? output_root_from_env() : fs::path(out_flag);
  const fs::path cache = cache_flag.empty() ? out / "cache" : fs::path(cache_flag);
  std::ostream* log = quiet ? nullptr : &std::cerr;

  try {
    if (app.got_subcommand("presets")) {
      for (const auto& n : preset_names()) std::cout << n << '\n';
      return kOk;
    }
    if (tv->parsed()) {
      const auto [config, echo] = build_config(tv_flags);
      ModelStore store(config, cache, log);
      std::cout << "verifier " << store.verifier().hash() << '\n';
      return kOk;
    }
    if (td->parsed()) {
      const auto [config, echo] = build_config(td_flags);
      ModelStore store(config, cache, log);
      const auto variant = variant_from_string(td_variant);
      const int depth = td_ttt > 0 ? td_ttt : config.drafter_train.ttt_depth;
      for (auto seed : config.seeds) {
        std::cout << to_string(variant) << " ttt" << depth << " seed" << seed << ' '
                  << store.drafter(variant, depth, seed).hash() << '\n';
      }
      return kOk;
    }
    if (run->parsed()) {
      const auto [config, echo] = build_config(run_flags);
      const auto runs = run_experiment(config, out, cache, echo, log);
      std::vector<fs::path> dirs;
      for (const auto& r : runs) {
        dirs.push_back(r.dir);
        std::cout << r.dir.string() << '\n';
      }
      return summarize_dirs(dirs, out / config.preset, run_check);
    }
    if (rerun->parsed()) {
      const auto r = rerun_from_manifest(manifest_path, out, cache, log);
      std::cout << r.dir.string() << '\n';
      return kOk;
    }
    if (sum->parsed()) {
      std::vector<fs::path> dirs(sum_dirs.begin(), sum_dirs.end());
      const fs::path to = sum_out.empty() ? dirs.front().parent_path() : fs::path(sum_out);
      return summarize_dirs(dirs, to, sum_check);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::runtime_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
