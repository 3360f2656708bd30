// casper: generate, train, impute, evaluate, inspect, benchmark.
//
// Options may also come from --config, a JSON object with one section per subcommand whose keys
// are the long option names, e.g. {"train": {"data": "run/data", "model": "configs/model.json"}}.
// Flags given on the command line win over the file.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "casper/commands.hpp"

namespace {

using casper::cli::json;
namespace fs = std::filesystem;

// Fills `value` from config[section][key] unless the option was given on the command line.
template <class T>
void from_config(const json& cfg, const std::string& section, const std::string& key, CLI::Option* opt, T& value) {
  if (opt->count() > 0 || !cfg.contains(section) || !cfg[section].contains(key)) return;
  try {
    value = cfg[section][key].get<T>();
  } catch (const json::exception& e) {
    throw casper::ConfigError("--config " + section + "." + key + ": " + e.what());
  }
}

void require(const fs::path& p, const std::string& name) {
  if (p.empty()) throw casper::ConfigError("missing required option --" + name);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causality-aware spatiotemporal imputation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::uint64_t> seed;
  std::string out, config_path, ablate;
  std::size_t threads = 1;
  auto* seed_opt = app.add_option("--seed", seed, "Seed overriding the config files");
  auto* out_opt = app.add_option("--out", out, "Output directory");
  app.add_option("--config", config_path, "JSON file with default option values per subcommand");
  auto* ablate_opt = app.add_option("--ablate", ablate, "Ablation: no-sca, no-pbd or prompts-sampling")
                         ->check(CLI::IsMember({"no-sca", "no-pbd", "prompts-sampling"}));
  app.add_option("--threads", threads, "Worker threads (computation is single-threaded; must be >= 1)")
      ->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("generate", "Generate a planted-world dataset");
  std::string world;
  std::size_t steps = 2000;
  auto* world_opt = gen->add_option("--world", world, "Planted world JSON");
  auto* steps_opt = gen->add_option("--steps", steps, "Number of time steps");

  auto* train = app.add_subcommand("train", "Train a model");
  std::string data, model_json, train_json;
  auto* data_opt = train->add_option("--data", data, "Dataset directory");
  auto* model_opt = train->add_option("--model", model_json, "Model config JSON");
  auto* train_opt = train->add_option("--train", train_json, "Training config JSON");

  auto* imp = app.add_subcommand("impute", "Impute missing values");
  std::string checkpoint;
  auto* ck_opt_i = imp->add_option("--checkpoint", checkpoint, "Checkpoint file");
  auto* data_opt_i = imp->add_option("--data", data, "Dataset directory");

  auto* eval = app.add_subcommand("evaluate", "Evaluate against held-out points");
  std::string mask_json;
  auto* ck_opt_e = eval->add_option("--checkpoint", checkpoint, "Checkpoint file");
  auto* data_opt_e = eval->add_option("--data", data, "Dataset directory");
  auto* mask_opt = eval->add_option("--mask", mask_json, "Mask spec JSON (default: 25% point missing)");

  auto* insp = app.add_subcommand("inspect", "Causal edges, gate statistics and attention maps");
  std::string queries, aggregation = "mean";
  std::optional<double> threshold;
  auto* ck_opt_n = insp->add_option("--checkpoint", checkpoint, "Checkpoint file");
  auto* data_opt_n = insp->add_option("--data", data, "Dataset directory");
  auto* queries_opt = insp->add_option("--queries", queries, "Query points as sensor:step,sensor:step");
  auto* agg_opt = insp->add_option("--aggregation", aggregation, "Edge aggregation")->check(CLI::IsMember({"mean", "max"}));
  auto* thr_opt = insp->add_option("--threshold", threshold, "Edge threshold (default: uniform-attention level)");

  auto* bench = app.add_subcommand("benchmark", "Per-component timing benchmark");
  std::string sizes;
  auto* sizes_opt = bench->add_option("--sizes", sizes, "Sizes JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : casper::cli::kConfig;
  }

  return casper::cli::exit_code_for([&] {
    json cfg = json::object();
    if (!config_path.empty()) cfg = casper::cli::read_json(config_path);
    if (!cfg.is_object()) throw casper::ConfigError("--config must hold a JSON object");
    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    from_config(cfg, name, "out", out_opt, out);
    from_config(cfg, name, "ablate", ablate_opt, ablate);
    if (seed_opt->count() == 0 && cfg.contains(name) && cfg[name].contains("seed"))
      seed = cfg[name]["seed"].get<std::uint64_t>();
    require(out, "out");

    if (name == "generate") {
      from_config(cfg, name, "world", world_opt, world);
      from_config(cfg, name, "steps", steps_opt, steps);
      require(world, "world");
      casper::cli::cmd_generate({world, steps, out, seed});
    } else if (name == "train") {
      from_config(cfg, name, "data", data_opt, data);
      from_config(cfg, name, "model", model_opt, model_json);
      from_config(cfg, name, "train", train_opt, train_json);
      require(data, "data");
      casper::cli::cmd_train({data, model_json, train_json, out, seed, ablate, &std::cerr});
    } else if (name == "impute") {
      from_config(cfg, name, "checkpoint", ck_opt_i, checkpoint);
      from_config(cfg, name, "data", data_opt_i, data);
      require(checkpoint, "checkpoint");
      require(data, "data");
      casper::cli::cmd_impute({checkpoint, data, out});
    } else if (name == "evaluate") {
      from_config(cfg, name, "checkpoint", ck_opt_e, checkpoint);
      from_config(cfg, name, "data", data_opt_e, data);
      from_config(cfg, name, "mask", mask_opt, mask_json);
      require(checkpoint, "checkpoint");
      require(data, "data");
      casper::cli::cmd_evaluate({checkpoint, data, mask_json, out, seed});
    } else if (name == "inspect") {
      from_config(cfg, name, "checkpoint", ck_opt_n, checkpoint);
      from_config(cfg, name, "data", data_opt_n, data);
      from_config(cfg, name, "queries", queries_opt, queries);
      from_config(cfg, name, "aggregation", agg_opt, aggregation);
      if (thr_opt->count() == 0 && cfg.contains(name) && cfg[name].contains("threshold"))
        threshold = cfg[name]["threshold"].get<double>();
      require(checkpoint, "checkpoint");
      require(data, "data");
      casper::cli::InspectOptions o{checkpoint, data, out, casper::cli::parse_queries(queries),
                                    aggregation == "max" ? casper::EdgeAggregation::kMax : casper::EdgeAggregation::kMean,
                                    threshold};
      casper::cli::cmd_inspect(o);
    } else if (name == "benchmark") {
      from_config(cfg, name, "sizes", sizes_opt, sizes);
      require(sizes, "sizes");
      casper::cli::cmd_benchmark({sizes, out, seed});
    }
    std::cout << "wrote " << out << '\n';
  });
}
