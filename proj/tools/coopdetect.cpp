// Command-line front end:
//   coopdetect {paths|diffusion|marl} --config FILE [--seed N] [--out DIR] [--jobs K]

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "coopdetect/experiment.hpp"

namespace ex = coopdetect::experiment;

namespace {

int report_error(std::string_view category, const std::string& message,
                 const ex::ConfigError* config = nullptr) {
  ex::Json err;
  err["status"] = "error";
  err["category"] = category;
  err["message"] = message;
  if (config) {
    if (!config->key().empty()) err["key"] = config->key();
    if (config->line()) err["line"] = *config->line();
    if (config->column()) err["column"] = *config->column();
  }
  std::cerr << err.dump(2) << "\n";
  return category == "config" ? 2 : 1;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cooperative detection experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<unsigned> jobs;

  for (const char* name : {"paths", "diffusion", "marl"}) {
    auto* sub = app.add_subcommand(name, std::string("Run the ") + name + " experiment");
    sub->add_option("--config", config_path, "Config file (JSON)")->required();
    sub->add_option("--seed", seed, "Master seed, overrides the config");
    sub->add_option("--out", out, "Output directory");
    sub->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const auto kind = ex::kind_from_string(app.get_subcommands().front()->get_name());
  try {
    ex::ExperimentConfig cfg = ex::parse_config(read_text(config_path), kind);
    if (seed) cfg.seed = *seed;
    if (jobs) cfg.jobs = *jobs;
    const auto dir = ex::resolve_output_dir(out, cfg);
    const ex::ResultBundle bundle = ex::run(cfg);
    const auto files = ex::write_bundle(bundle, dir);

    ex::Json done;
    done["status"] = "ok";
    done["output_dir"] = dir.string();
    done["metrics"] = bundle.summary["metrics"];
    std::cout << done.dump(2) << "\n";
    return 0;
  } catch (const ex::ConfigError& e) {
    return report_error("config", e.what(), &e);
  } catch (const std::exception& e) {
    return report_error("runtime", e.what());
  }
}
