// Command-line driver for the dosing experiment.
//
//   anemia_rl --config configs/experiment.cfg --out out cohort
//   anemia_rl --config configs/experiment.cfg --out out run

#include <chrono>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "anemia/config.hpp"
#include "anemia/harness.hpp"

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<unsigned> threads;
};

anemia::ExperimentConfig resolve(const GlobalOptions& g) {
  anemia::ExperimentConfig cfg = g.config.empty() ? anemia::ExperimentConfig{} : anemia::load_config(g.config);
  if (g.seed) cfg.set_master_seed(*g.seed);
  if (!g.out.empty()) cfg.out_dir = g.out;
  if (g.threads) cfg.threads = *g.threads;
  cfg.validate();
  return cfg;
}

void log_stderr(const std::string& line) { std::cerr << line << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulated anemia dosing: experience generation, FQI and Q-learning, protocol comparison"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "key = value configuration file");
  app.add_option("--seed", g.seed, "master seed; overrides the cohort, treatment and learning seeds");
  app.add_option("--out", g.out, "output directory (default: run.out from the config, else ./out)");
  app.add_option("--threads", g.threads, "worker threads (0 = all cores)");

  using Stage = std::function<void(const anemia::ExperimentConfig&)>;
  auto add = [&](const char* name, const char* help, Stage stage) {
    app.add_subcommand(name, help)->callback([&g, stage] { stage(resolve(g)); });
  };
  add("cohort", "generate and cluster the training and evaluation cohorts",
      [](const auto& c) { anemia::stage_cohort(c, log_stderr); });
  add("simulate", "random-dose experience for the training cohort",
      [](const auto& c) { anemia::stage_simulate(c, log_stderr); });
  add("train-fqi", "fitted Q iteration on the transition set",
      [](const auto& c) { anemia::stage_train_fqi(c, log_stderr); });
  add("train-ql", "single-pass Q-learning baseline",
      [](const auto& c) { anemia::stage_train_ql(c, log_stderr); });
  add("evaluate", "paired evaluation of the protocol and every trained policy",
      [](const auto& c) { anemia::stage_evaluate(c, log_stderr); });
  add("report", "quantile and monthly summary files from traces.csv",
      [](const auto& c) { anemia::stage_report(c, log_stderr); });
  add("run", "every stage in order", [](const auto& c) {
    const auto t0 = std::chrono::steady_clock::now();
    anemia::run_all_stages(c, log_stderr);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    std::cerr << "run: finished in " << anemia::format_double(std::round(dt.count() * 10) / 10) << " s\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const anemia::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const anemia::InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
