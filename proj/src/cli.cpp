#include <chrono>
#include <cstdio>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "robusttraj/experiment.hpp"
#include "robusttraj/json_io.hpp"

namespace robusttraj::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Everything one subcommand needs after resolution.
struct Context {
  ExperimentConfig cfg;
  std::string digest;
  fs::path out;
};

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f << content;
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string csv_with_digest(const std::string& digest, const std::string& csv) {
  return "# config_digest=" + digest + "\n" + csv;
}

std::string json_with_digest(const std::string& digest, json j) {
  j["config_digest"] = digest;
  return j.dump(2) + "\n";
}

void save_scenes(const fs::path& path, const std::vector<Scene>& scenes, const std::string& digest) {
  std::string out;
  for (const auto& s : scenes) {
    json j = scene_to_json(s);
    j["config_digest"] = digest;
    out += j.dump() + "\n";
  }
  write_file(path, out);
}

void save_model(const fs::path& path, model::TrajectoryModel& m, const std::string& digest) {
  write_file(path, json_with_digest(digest, model::checkpoint_json(m)));
}

fs::path data_path(const Context& c, const std::string& flag) { return flag.empty() ? c.out / "data.jsonl" : fs::path(flag); }

fs::path run_dir(const Context& c) { return c.out / "runs" / train::run_label(c.cfg.train); }

fs::path checkpoint_path(const Context& c, const std::string& flag) {
  return flag.empty() ? run_dir(c) / "model.json" : fs::path(flag);
}

// ---- subcommands ---------------------------------------------------------------------------

void cmd_gen_data(const Context& c) {
  const auto& d = c.cfg.data;
  const Dataset ds = generate_dataset(d.generator, d.train, d.val, d.test, module_seed(c.cfg.seed, "data"));
  save_scenes(c.out / "data.jsonl", ds.scenes, c.digest);
  std::cout << "wrote " << ds.scenes.size() << " scenes to " << (c.out / "data.jsonl").string() << "\n";
}

void cmd_augment(const Context& c, const std::string& data_flag) {
  const Dataset ds = load_dataset(data_path(c, data_flag));
  const auto train = ds.split(Split::Train);
  std::vector<Scene> out;
  json log = json::array();
  std::size_t modified = 0, agents = 0;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto r = augment::augment_scene(*train[i], c.cfg.augment, derive_seed(c.cfg.augment.seed, i));
    for (const auto& a : r.agents) {
      ++agents;
      modified += a.modified;
      if (!a.warning.empty()) std::cerr << "warning: " << r.scene.id << ": " << a.warning << "\n";
      log.push_back({{"scene_id", r.scene.id},
                     {"modified", a.modified},
                     {"direction", augment::to_string(a.direction)},
                     {"fit_rmse", a.fit_rmse},
                     {"initial_loss", a.initial_loss},
                     {"final_loss", a.final_loss},
                     {"warning", a.warning}});
    }
    out.push_back(r.scene);
  }
  save_scenes(c.out / "augmented.jsonl", out, c.digest);
  write_file(c.out / "augment_log.json", json_with_digest(c.digest, {{"agents", log}}));
  std::cout << "augmented " << modified << "/" << agents << " agents in " << out.size() << " scenes\n";
}

train::ExperimentOptions experiment_options(const Context& c) {
  train::ExperimentOptions eo;
  eo.eval_eps = c.cfg.attack.eps;
  eo.eval_attacks = {c.cfg.attack.kind};
  eo.eval_K = c.cfg.attack.K;
  eo.eval_seed = module_seed(c.cfg.seed, "eval");
  return eo;
}

void cmd_train(const Context& c, const std::string& data_flag) {
  const Dataset ds = load_dataset(data_path(c, data_flag));
  std::vector<Scene> aug;
  if (c.cfg.train.augment) {
    const Dataset a = load_dataset(c.out / "augmented.jsonl");
    aug = a.scenes;
  }
  const fs::path dir = run_dir(c);
  train::ExperimentOptions eo = experiment_options(c);
  eo.checkpoint_dir = dir / "checkpoints";
  std::unique_ptr<model::TrajectoryModel> m;
  const train::RunReport r = train::run_experiment(c.cfg.train, ds, aug, eo, &m);
  save_model(dir / "model.json", *m, c.digest);
  write_file(dir / "report.json", json_with_digest(c.digest, r.to_json()));
  write_file(dir / "metrics.csv", csv_with_digest(c.digest, train::metrics_csv({r})));
  std::cout << train::metrics_csv({r});
}

void cmd_eval(const Context& c, const std::string& data_flag, const std::string& ckpt) {
  const Dataset ds = load_dataset(data_path(c, data_flag));
  const auto m = model::load_checkpoint(checkpoint_path(c, ckpt));
  const auto test = ds.split(Split::Test);
  train::RunReport r;
  r.run_id = train::run_label(c.cfg.train);
  r.config = c.cfg.train;
  train::EvalOptions eo;
  eo.K = c.cfg.attack.K;
  eo.seed = module_seed(c.cfg.seed, "eval");
  r.rows.push_back({"test", 0.0, "none", train::evaluate(*m, test, eo).metrics, 0.0});
  eo.attack = c.cfg.attack.kind;
  eo.attack_config = attack::default_config(c.cfg.attack.kind);
  eo.attack_config.steps = c.cfg.attack.steps;
  eo.threat.all_agents = c.cfg.attack.all_agents;
  if (c.cfg.attack.kind != attack::Kind::None) {
    for (double eps : c.cfg.attack.eps) {
      eo.threat.epsilon = eps;
      const auto res = train::evaluate(*m, test, eo);
      r.rows.push_back({"test", eps, attack::to_string(c.cfg.attack.kind), res.metrics, res.drift});
    }
  }
  const std::string csv = train::metrics_csv({r});
  write_file(run_dir(c) / "eval.csv", csv_with_digest(c.digest, csv));
  std::cout << csv;
}

void cmd_attack(const Context& c, const std::string& data_flag, const std::string& ckpt, std::size_t limit) {
  const Dataset ds = load_dataset(data_path(c, data_flag));
  const auto m = model::load_checkpoint(checkpoint_path(c, ckpt));
  auto test = ds.split(Split::Test);
  if (limit > 0 && limit < test.size()) test.resize(limit);
  attack::AttackConfig ac = attack::default_config(c.cfg.attack.kind);
  ac.steps = c.cfg.attack.steps;
  ac.K = c.cfg.attack.K;
  std::string out;
  for (double eps : c.cfg.attack.eps) {
    attack::ThreatModel tm{eps, c.cfg.attack.all_agents};
    for (std::size_t i = 0; i < test.size(); ++i) {
      ac.seed = derive_seed(module_seed(c.cfg.seed, "attack"), i);
      json j = attack::to_json(attack::run_attack(*m, *test[i], c.cfg.attack.kind, tm, ac));
      j["config_digest"] = c.digest;
      out += j.dump() + "\n";
    }
  }
  const fs::path path = c.out / "attacks" / (std::string(attack::to_string(c.cfg.attack.kind)) + ".jsonl");
  write_file(path, out);
  std::cout << "wrote " << test.size() * c.cfg.attack.eps.size() << " attack results to " << path.string() << "\n";
}

void cmd_probe(const Context& c) {
  struct Job {
    probe::NoiseKind kind;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto k : c.cfg.probe.kinds)
    for (auto s : c.cfg.probe.seeds) jobs.push_back({k, s});
  const std::uint64_t base = module_seed(c.cfg.seed, "probe");
  std::vector<probe::ProbeReport> reports;
  for (const auto& j : jobs) {
    auto r = probe::run_probe(c.cfg.probe.config, j.kind, derive_seed(base, j.seed));
    r.seed = j.seed;
    if (r.low_budget) std::cerr << "warning: " << probe::to_string(j.kind) << " seed " << j.seed << ": " << r.warning << "\n";
    reports.push_back(std::move(r));
  }
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  write_file(c.out / "probe.csv", csv_with_digest(c.digest, probe::probe_csv(reports)));
  write_file(c.out / "probe.json", json_with_digest(c.digest, {{"reports", arr}}));
  std::cout << probe::probe_csv(reports);
}

void cmd_simulate(const Context& c, const std::string& ckpt, bool oracle, const std::string& regime_flag) {
  const auto suite = planner::scenario_suite(c.cfg.train.arch.history_len, c.cfg.simulate.frames,
                                             c.cfg.train.arch.future_len);
  std::vector<planner::OutcomeRow> rows;
  std::string regime;
  if (oracle) {
    regime = "oracle";
    std::vector<std::future<planner::SimOutcome>> fut;
    for (const auto& sc : suite)
      fut.push_back(std::async(std::launch::async, [&, sc_ptr = &sc] {
        return planner::run_episode(*sc_ptr, planner::oracle_predictor(*sc_ptr, c.cfg.planner.K), c.cfg.planner);
      }));
    for (std::size_t i = 0; i < suite.size(); ++i) rows.push_back({suite[i].id, regime, "none", fut[i].get()});
  } else {
    const auto m = model::load_checkpoint(checkpoint_path(c, ckpt));
    regime = regime_flag.empty() ? train::run_label(c.cfg.train) : regime_flag;
    rows = planner::run_suite(suite, *m, regime, c.cfg.planner, std::nullopt);
    planner::SequenceAttack atk;
    atk.epsilon = c.cfg.simulate.epsilon;
    atk.config.seed = module_seed(c.cfg.seed, "simulate");
    auto attacked = planner::run_suite(suite, *m, regime, c.cfg.planner, atk);
    rows.insert(rows.end(), attacked.begin(), attacked.end());
  }
  const fs::path dir = c.out / "simulate" / regime;
  write_file(dir / "outcomes.csv", csv_with_digest(c.digest, planner::outcomes_csv(rows)));
  std::string log;
  {
    std::istringstream in(planner::episode_log_jsonl(rows));
    for (std::string line; std::getline(in, line);) {
      json j = json::parse(line);
      j["config_digest"] = c.digest;
      log += j.dump() + "\n";
    }
  }
  write_file(dir / "episodes.jsonl", log);
  std::cout << planner::outcomes_csv(rows);
}

void cmd_report(const Context& c, const std::string& runs_flag, double eps) {
  const fs::path root = runs_flag.empty() ? c.out / "runs" : fs::path(runs_flag);
  if (!fs::is_directory(root)) throw IoError("no runs directory at " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "report.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<train::RunReport> runs;
  for (const auto& f : files) {
    std::ifstream in(f);
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ValidationError(f.string(), "malformed JSON");
    runs.push_back(train::RunReport::from_json(j));
  }
  if (runs.empty()) throw IoError("no report.json files under " + root.string());
  const auto rows = compare_runs(runs, eps, attack::to_string(c.cfg.attack.kind));
  const std::string table = report_table(rows, eps);
  write_file(c.out / "report.csv", csv_with_digest(c.digest, report_csv(rows)));
  write_file(c.out / "report.txt", "# config_digest=" + c.digest + "\n" + table);
  std::cout << table;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"robusttraj: robust trajectory prediction experiments"};
  app.require_subcommand(1);

  std::string config_file, out_flag, data_flag, ckpt_flag, runs_flag, regime_flag, attack_flag;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed_flag;
  std::optional<std::size_t> epochs_flag;
  std::vector<double> eps_flag;
  std::optional<double> report_eps;
  std::size_t scene_limit = 0;
  bool augment_flag = false, oracle_flag = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_file, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--set", overrides, "Override a field, key.path=value (repeatable)");
    sub->add_option("--seed", seed_flag, "Global seed");
    sub->add_option("--out", out_flag, "Output directory");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  auto* aug = app.add_subcommand("augment", "Augment the training split");
  auto* trn = app.add_subcommand("train", "Train one regime and evaluate it");
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint clean and attacked");
  auto* atk = app.add_subcommand("attack", "Attack test scenes and store the perturbations");
  auto* prb = app.add_subcommand("probe", "Run the degeneration probe");
  auto* sim = app.add_subcommand("simulate", "Run the closed-loop planning suite");
  auto* rep = app.add_subcommand("report", "Compare training runs");
  for (auto* s : {gen, aug, trn, evl, atk, prb, sim, rep}) common(s);
  for (auto* s : {aug, trn, evl, atk}) s->add_option("--data", data_flag, "Dataset file (default <out>/data.jsonl)");
  for (auto* s : {evl, atk, sim}) s->add_option("--checkpoint", ckpt_flag, "Model checkpoint (default from the run)");
  for (auto* s : {trn, evl, atk, sim}) s->add_option("--regime", regime_flag, "clean, naive_at or robusttraj");
  for (auto* s : {evl, atk}) {
    s->add_option("--attack", attack_flag, "Attack kind");
    s->add_option("--eps", eps_flag, "Attack budget(s) in meters");
  }
  trn->add_option("--epochs", epochs_flag, "Training epochs");
  trn->add_flag("--augment", augment_flag, "Mix in <out>/augmented.jsonl");
  atk->add_option("--scenes", scene_limit, "Only the first N test scenes");
  sim->add_flag("--oracle", oracle_flag, "Use ground-truth predictions");
  sim->add_option("--eps", report_eps, "Attack budget (simulate.epsilon)");
  rep->add_option("--runs", runs_flag, "Directory searched for report.json files");
  rep->add_option("--eps", report_eps, "Attacked column (default: first attack.eps)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    json file = config_file.empty() ? json::object() : read_config_file(config_file);
    std::vector<std::string> ov = overrides;
    if (seed_flag) ov.push_back("seed=" + std::to_string(*seed_flag));
    if (!out_flag.empty()) ov.push_back("out_dir=" + json(out_flag).dump());
    if (epochs_flag) ov.push_back("train.epochs=" + std::to_string(*epochs_flag));
    if (!regime_flag.empty() && !sim->parsed()) ov.push_back("train.regime=" + json(regime_flag).dump());
    if (augment_flag) ov.push_back("train.augment=true");
    if (!attack_flag.empty()) ov.push_back("attack.kind=" + json(attack_flag).dump());
    if (!eps_flag.empty()) ov.push_back("attack.eps=" + json(eps_flag).dump());
    if (sim->parsed() && report_eps) ov.push_back("simulate.epsilon=" + json(*report_eps).dump());
    // The regime flag of simulate labels the run; it does not retrain.
    if (sim->parsed() && !regime_flag.empty()) {
      try {
        train::regime_from_string(regime_flag);
        ov.push_back("train.regime=" + json(regime_flag).dump());
      } catch (const ValidationError&) {
      }
    }

    Context c;
    c.cfg = resolve_config(file, ov);
    c.digest = c.cfg.digest();
    c.out = c.cfg.out_dir;
    fs::create_directories(c.out);
    std::string sub_name = app.get_subcommands().front()->get_name();
    write_file(c.out / (sub_name + ".config.json"), json_with_digest(c.digest, c.cfg.to_json()));

    if (gen->parsed()) cmd_gen_data(c);
    else if (aug->parsed()) cmd_augment(c, data_flag);
    else if (trn->parsed()) cmd_train(c, data_flag);
    else if (evl->parsed()) cmd_eval(c, data_flag, ckpt_flag);
    else if (atk->parsed()) cmd_attack(c, data_flag, ckpt_flag, scene_limit);
    else if (prb->parsed()) cmd_probe(c);
    else if (sim->parsed()) cmd_simulate(c, ckpt_flag, oracle_flag, regime_flag);
    else if (rep->parsed()) cmd_report(c, runs_flag, report_eps ? *report_eps : c.cfg.attack.eps.front());
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

int cli_main(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("robusttraj");
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace robusttraj::experiment
