// Acceptance run: one PASS/FAIL line per criterion, with the measured
// numbers. Full budget; expect roughly half an hour on one core.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "robusttraj/experiment.hpp"

using namespace robusttraj;
namespace fs = std::filesystem;
using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& msg) {
  static const auto t0 = std::chrono::steady_clock::now();
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << fmt("[%7.1fs] ", s) << msg << std::endl;
}

// ---- shared trained models ----------------------------------------------------------------

constexpr train::Regime kRegimes[] = {train::Regime::Clean, train::Regime::NaiveAt, train::Regime::RobustTraj};

experiment::ExperimentConfig seed_config(std::uint64_t seed) {
  return experiment::resolve_config(nlohmann::json::object(), {"seed=" + std::to_string(seed)});
}

Dataset benchmark_data(const experiment::ExperimentConfig& c) {
  const auto& d = c.data;
  return generate_dataset(d.generator, d.train, d.val, d.test, experiment::module_seed(c.seed, "data"));
}

struct Trained {
  train::RunReport report;
  std::unique_ptr<model::TrajectoryModel> model;
};

// Benchmark-budget models, trained once per (seed, regime) exactly as the
// CLI's train command would.
class ModelCache {
 public:
  const Trained& get(std::uint64_t seed, train::Regime r) {
    const auto key = std::make_pair(seed, static_cast<int>(r));
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    experiment::ExperimentConfig c = seed_config(seed);
    c.train.regime = r;
    if (!data_.count(seed)) data_.emplace(seed, benchmark_data(c));
    train::ExperimentOptions eo;
    eo.eval_eps = c.attack.eps;
    eo.eval_attacks = {c.attack.kind};
    eo.eval_K = c.attack.K;
    eo.eval_seed = experiment::module_seed(c.seed, "eval");
    progress("training " + train::run_label(c.train));
    Trained t;
    t.report = train::run_experiment(c.train, data_.at(seed), {}, eo, &t.model);
    return cache_.emplace(key, std::move(t)).first->second;
  }

 private:
  std::map<std::pair<std::uint64_t, int>, Trained> cache_;
  std::map<std::uint64_t, Dataset> data_;
};

const train::EvalRow& row(const train::RunReport& r, const std::string& attack, double eps) {
  for (const auto& x : r.rows)
    if (x.attack == attack && std::abs(x.eps - eps) < 1e-12) return x;
  throw std::runtime_error("missing eval row " + attack + " in " + r.run_id);
}

// ---- 1: gradient fidelity -----------------------------------------------------------------

Scene toy_scene(std::uint64_t seed) {
  GeneratorConfig g;
  g.min_agents = g.max_agents = 2;
  g.future_len = 4;
  return generate_synthetic(g, seed);
}

model::Arch toy_arch(model::Family f, std::uint64_t seed) {
  model::Arch a;
  a.family = f;
  a.hidden_dim = 6;
  a.latent_dim = 2;
  a.future_len = 4;
  a.init_seed = seed + 1;
  return a;
}

Outcome criterion1() {
  std::map<std::string, std::pair<std::size_t, double>> stats;  // passes, worst error
  auto record = [&](const std::string& name, const ad::GradCheckReport& r) {
    auto& s = stats[name];
    s.first += r.pass && r.max_rel_error < 1e-4;
    s.second = std::max(s.second, r.max_rel_error);
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Scene s = toy_scene(1000 + seed);
    const Tensor X = model::as_rows(s.history), Y = model::as_rows(s.future);
    model::CvaeModel cvae(toy_arch(model::Family::Cvae, seed));
    model::CganModel cgan(toy_arch(model::Family::Cgan, seed));

    record("cvae_loss", ad::gradient_check(
                            [&](Graph& g, Var flat) {
                              return cvae.loss_total(nn::bind_flat(g, flat, cvae.params()), g.constant(X), Y, 3, seed);
                            },
                            nn::flatten(cvae.params())));
    record("cgan_generator", ad::gradient_check(
                                 [&](Graph& g, Var flat) {
                                   return cgan.loss_total(nn::bind_flat(g, flat, cgan.params()), g.constant(X), Y, 3, seed);
                                 },
                                 nn::flatten(cgan.params())));
    record("cgan_discriminator", ad::gradient_check(
                                     [&](Graph& g, Var flat) {
                                       const auto b = nn::bind(g, cgan.params(), false);
                                       const auto d = nn::bind_flat(g, flat, cgan.disc_params());
                                       return cgan.loss_gan(b, d, g.constant(X), Y, 3, seed).disc;
                                     },
                                     nn::flatten(cgan.disc_params())));
    const Tensor start =
        attack::project_linf(model::standard_normal(X.dim(0), X.dim(1), seed), 0.5).reshaped({X.size()});
    const auto det = attack::objective_deterministic(cvae, X, Y);
    record("deterministic_attack",
           ad::gradient_check([&](Graph& g, Var d) { return det(g, ad::reshape(d, X.shape()), 0); }, start));
    const Tensor delta = start.reshaped(X.shape());
    record("regularizer", ad::gradient_check(
                              [&](Graph& g, Var flat) {
                                return train::loss_reg(cvae, nn::bind_flat(g, flat, cvae.params()), X, delta);
                              },
                              nn::flatten(cvae.params())));
    record("clean_anchor", ad::gradient_check(
                               [&](Graph& g, Var flat) {
                                 return train::loss_clean(cvae, nn::bind_flat(g, flat, cvae.params()), X, Y, 3, seed);
                               },
                               nn::flatten(cvae.params())));

    // L_dyn through the differentiable rollout, against a second agent.
    const double dt = s.dt;
    const std::vector<Vec2> track = s.full_track(0), other = s.full_track(1);
    const std::size_t L = track.size() - 1;
    std::vector<double> start_u;
    const Tensor noise = model::standard_normal(1, 2 * L, seed + 77);
    for (std::size_t i = 0; i < 2 * L; ++i) start_u.push_back(noise[i] * (i < L ? 0.02 : 0.5));
    const double heading = std::atan2(track[1].y - track[0].y, track[1].x - track[0].x);
    const double speed = (track[1] - track[0]).norm() / dt;
    auto to_tensor = [](const std::vector<Vec2>& pts) {
      std::vector<double> v;
      for (auto p : pts) v.insert(v.end(), {p.x, p.y});
      return Tensor::matrix(pts.size(), 2, std::move(v));
    };
    const Tensor Xo = to_tensor(track), Xn = to_tensor(other);
    const double ang = 0.3 * static_cast<double>(seed);
    record("dynamic_augmentation",
           ad::gradient_check(
               [&](Graph& g, Var z) {
                 augment::GraphState st{g.constant(Tensor::vector({track[0].x})), g.constant(Tensor::vector({track[0].y})),
                                        g.constant(Tensor::vector({heading})), g.constant(Tensor::vector({speed})),
                                        g.constant(Tensor::vector({0.0}))};
                 const Var Xa = augment::rollout_graph(st, ad::slice(z, 0, 0, L), ad::slice(z, 0, L, L), dt);
                 return augment::loss_deviation(g.constant(Xo), Xa, {std::cos(ang), std::sin(ang)}) +
                        augment::loss_collision(Xa, {Xn});
               },
               Tensor::vector(start_u)));
  }
  bool pass = true;
  std::string detail;
  for (const auto& [name, s] : stats) {
    pass = pass && s.first == 20;
    detail += fmt("%s %zu/20 (max rel err %.1e); ", name.c_str(), s.first, s.second);
  }
  return {pass, detail};
}

// ---- 3: attack ordering -------------------------------------------------------------------

Outcome criterion3() {
  int vs_naive = 0, vs_latent = 0, vs_context = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Dataset d = generate_dataset({}, 128, 0, 32, derive_seed(seed, 300));
    train::TrainConfig c;
    c.epochs = 60;
    c.arch.hidden_dim = 32;
    c.arch.latent_dim = 4;
    c.arch.init_seed = seed + 1;
    c.seed = seed;
    c.drift_scenes = 0;
    train::RunReport rep;
    const auto m = train::fit(c, d.split(Split::Train), {}, rep);
    std::map<attack::Kind, double> ade;
    for (auto k : {attack::Kind::Deterministic, attack::Kind::Naive, attack::Kind::Latent, attack::Kind::Context}) {
      train::EvalOptions eo;
      eo.attack = k;
      eo.attack_config = attack::default_config(k);
      eo.threat.epsilon = 0.5;
      eo.seed = seed;
      ade[k] = train::evaluate(*m, d.split(Split::Test), eo).metrics.ade;
    }
    const double det = ade[attack::Kind::Deterministic];
    vs_naive += det >= ade[attack::Kind::Naive];
    vs_latent += det >= ade[attack::Kind::Latent];
    vs_context += det >= ade[attack::Kind::Context];
    progress(fmt("toy CVAE %llu: det %.3f naive %.3f latent %.3f context %.3f", static_cast<unsigned long long>(seed), det,
                 ade[attack::Kind::Naive], ade[attack::Kind::Latent], ade[attack::Kind::Context]));
  }
  return {vs_naive >= 8 && vs_latent >= 7 && vs_context >= 7,
          fmt("deterministic >= naive on %d/10, >= latent on %d/10, >= context on %d/10", vs_naive, vs_latent, vs_context)};
}

// ---- 4: PGD convergence -------------------------------------------------------------------

Outcome criterion4(ModelCache& models) {
  const auto& m = *models.get(0, train::Regime::Clean).model;
  const Dataset d = generate_dataset({}, 0, 0, 20, 4004);
  std::vector<double> gaps;
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    auto ac = attack::default_config(attack::Kind::Deterministic);
    ac.steps = 100;
    ac.seed = i;
    const auto r = attack::run_attack(m, d.scenes[i], attack::Kind::Deterministic, {0.5, false}, ac);
    const double b20 = r.pgd.trace.at(19), b100 = r.pgd.trace.back();
    gaps.push_back(std::abs(b100 - b20) / std::max(std::abs(b100), 1e-12));
  }
  std::sort(gaps.begin(), gaps.end());
  const double median = 0.5 * (gaps[9] + gaps[10]);
  return {median <= 0.01, fmt("median relative gap step 20 vs 100 = %.2e (max %.2e) over 20 scenes", median, gaps.back())};
}

// ---- 5 and 7: robustness ordering and the regularizer ----------------------------------------

Outcome criterion5(ModelCache& models, const std::vector<std::uint64_t>& seeds) {
  std::map<train::Regime, double> robust, clean;
  for (auto s : seeds)
    for (auto r : kRegimes) {
      const auto& rep = models.get(s, r).report;
      robust[r] += row(rep, "deterministic", 0.5).metrics.ade / static_cast<double>(seeds.size());
      clean[r] += row(rep, "none", 0.0).metrics.ade / static_cast<double>(seeds.size());
    }
  const double c = robust[train::Regime::Clean], n = robust[train::Regime::NaiveAt], t = robust[train::Regime::RobustTraj];
  const double gap1 = (c - n) / c, gap2 = (n - t) / n;
  const double deg_n = clean[train::Regime::NaiveAt] - clean[train::Regime::Clean];
  const double deg_t = clean[train::Regime::RobustTraj] - clean[train::Regime::Clean];
  const bool pass = gap1 >= 0.05 && gap2 >= 0.05 && deg_t <= deg_n;
  return {pass, fmt("robust ADE clean %.3f, naive_at %.3f, robusttraj %.3f (gaps %.1f%%, %.1f%%); clean ADE %.3f/%.3f/%.3f, "
                    "degradation robusttraj %.3f vs naive_at %.3f",
                    c, n, t, 100 * gap1, 100 * gap2, clean[train::Regime::Clean], clean[train::Regime::NaiveAt],
                    clean[train::Regime::RobustTraj], deg_t, deg_n)};
}

Outcome criterion7(ModelCache& models, const std::vector<std::uint64_t>& seeds) {
  double naive = 0.0, robust = 0.0;
  for (auto s : seeds) {
    naive += row(models.get(s, train::Regime::NaiveAt).report, "deterministic", 0.5).drift;
    robust += row(models.get(s, train::Regime::RobustTraj).report, "deterministic", 0.5).drift;
  }
  naive /= static_cast<double>(seeds.size());
  robust /= static_cast<double>(seeds.size());
  return {robust <= 0.5 * naive, fmt("mean attack-time context drift at eps 0.5: robusttraj %.4f, naive_at %.4f (ratio %.3f)",
                                     robust, naive, robust / naive)};
}

// ---- 6: degenerate identity ---------------------------------------------------------------

Outcome criterion6() {
  double worst = 0.0;
  std::size_t n = 0;
  for (auto f : {model::Family::Cvae, model::Family::Cgan})
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      train::TrainConfig cfg;
      cfg.regime = train::Regime::RobustTraj;
      cfg.arch = toy_arch(f, seed);
      cfg.arch.future_len = 12;
      cfg.inner_eps = 0.0;
      cfg.beta = 0.0;
      const auto m = model::make_model(cfg.arch);
      const Scene s = generate_synthetic({}, 2000 + seed);
      Graph g;
      const auto b = nn::bind(g, m->params(), false);
      const double outer =
          train::outer_loss(*m, b, s, train::inner_perturbation(*m, s, cfg, seed), cfg, seed).total.value().item();
      const double clean =
          train::loss_clean(*m, b, model::as_rows(s.history), model::as_rows(s.future), cfg.K, seed).value().item();
      worst = std::max(worst, std::abs(outer - 2.0 * clean));
      ++n;
    }
  return {worst <= 1e-12, fmt("max |outer - 2 clean| = %.3e over %zu scenes (cvae and cgan)", worst, n)};
}

// ---- 8: augmentation feasibility ----------------------------------------------------------

Outcome criterion8() {
  const auto cfg = seed_config(0);
  const augment::AugConfig& ac = cfg.augment;
  const Dataset d = generate_dataset(cfg.data.generator, 100, 0, 0, 8008);
  std::size_t ok_scenes = 0, modified = 0, agents = 0;
  double worst_replay = 0.0, worst_dev = 0.0;
  for (std::size_t i = 0; i < d.scenes.size(); ++i) {
    const Scene& orig = d.scenes[i];
    const auto r = augment::augment_scene(orig, ac, derive_seed(ac.seed, i));
    bool ok = true;
    for (std::size_t a = 0; a < orig.num_agents(); ++a) {
      ++agents;
      const auto& log = r.agents[a];
      if (!log.modified) continue;
      ++modified;
      ok = ok && log.final_loss <= log.initial_loss;
      const auto& rec = r.scene.controls.at(a);
      if (!rec) {
        ok = false;
        continue;
      }
      try {
        const auto states = bicycle::rollout(rec->init, rec->controls, orig.dt, ac.limits);
        for (std::size_t t = 0; t < rec->controls.size(); ++t) {
          ok = ok && std::abs(rec->controls.accel[t]) <= ac.limits.accel_max &&
               std::abs(rec->controls.curvature_rate[t]) <= ac.limits.curvature_rate_max;
        }
        for (const auto& st : states) ok = ok && std::abs(st.curvature) <= ac.limits.curvature_max;
      } catch (const bicycle::BoundViolation&) {
        ok = false;
      }
      const auto before = orig.full_track(a), after = r.scene.full_track(a);
      for (std::size_t t = 0; t < before.size(); ++t)
        worst_dev = std::max({worst_dev, std::abs(after[t].x - before[t].x), std::abs(after[t].y - before[t].y)});
    }
    const double rep = augment::replay_error(r.scene, ac.limits);
    worst_replay = std::max(worst_replay, rep);
    ok = ok && rep < 1e-9 && worst_dev <= ac.clip + 1e-12;
    ok_scenes += ok;
  }
  return {ok_scenes == d.scenes.size(),
          fmt("%zu/%zu scenes feasible, %zu/%zu agents modified, max deviation %.4f m (clip %.2f), max replay error %.1e m",
              ok_scenes, d.scenes.size(), modified, agents, worst_dev, ac.clip, worst_replay)};
}

// ---- 9: degeneration trend ----------------------------------------------------------------

Outcome criterion9(const std::vector<std::uint64_t>& seeds) {
  const auto cfg = seed_config(0);
  const std::uint64_t base = experiment::module_seed(cfg.seed, "probe");
  std::map<probe::NoiseKind, std::vector<double>> mean;
  bool all_negative = true;
  std::string detail;
  for (auto kind : {probe::NoiseKind::SaltPepper, probe::NoiseKind::Adversarial}) {
    mean[kind].assign(cfg.probe.config.levels.size(), 0.0);
    for (auto s : seeds) {
      const auto r = probe::run_probe(cfg.probe.config, kind, derive_seed(base, s));
      std::vector<double> x, y;
      for (std::size_t i = 0; i < r.levels.size(); ++i) {
        x.push_back(r.levels[i].level);
        y.push_back(r.levels[i].score);
        mean[kind][i] += r.levels[i].score / static_cast<double>(seeds.size());
      }
      const double rho = probe::spearman(x, y);
      all_negative = all_negative && rho < 0.0;
      detail += fmt("%s seed %llu rho %.2f; ", probe::to_string(kind), static_cast<unsigned long long>(s), rho);
      progress(fmt("probe %s seed %llu done", probe::to_string(kind), static_cast<unsigned long long>(s)));
    }
  }
  bool below = true;
  const auto& sp = mean[probe::NoiseKind::SaltPepper];
  const auto& adv = mean[probe::NoiseKind::Adversarial];
  detail += "mean score by level (salt_pepper/adversarial):";
  for (std::size_t i = 0; i < sp.size(); ++i) {
    below = below && adv[i] <= sp[i];
    detail += fmt(" %.1f: %.3f/%.3f", cfg.probe.config.levels[i], sp[i], adv[i]);
  }
  return {all_negative && below, detail};
}

// ---- 10: closed-loop impact ---------------------------------------------------------------

Outcome criterion10(ModelCache& models) {
  const auto cfg = seed_config(0);
  const auto suite = planner::scenario_suite(cfg.train.arch.history_len, cfg.simulate.frames, cfg.train.arch.future_len);
  std::size_t oracle = 0;
  for (const auto& sc : suite)
    oracle += planner::run_episode(sc, planner::oracle_predictor(sc, cfg.planner.K), cfg.planner).collided;
  std::map<train::Regime, std::size_t> benign, attacked;
  planner::SequenceAttack atk;
  atk.epsilon = cfg.simulate.epsilon;
  atk.config.seed = experiment::module_seed(cfg.seed, "simulate");
  for (auto r : kRegimes) {
    const auto& m = *models.get(0, r).model;
    benign[r] = planner::count_collisions(planner::run_suite(suite, m, train::to_string(r), cfg.planner, std::nullopt));
    attacked[r] = planner::count_collisions(planner::run_suite(suite, m, train::to_string(r), cfg.planner, atk));
    progress(fmt("suite %s: benign %zu attacked %zu", train::to_string(r), benign[r], attacked[r]));
  }
  const bool benign_ok =
      oracle == 0 && std::all_of(benign.begin(), benign.end(), [](const auto& kv) { return kv.second == 0; });
  const std::size_t c = attacked[train::Regime::Clean], t = attacked[train::Regime::RobustTraj];
  return {benign_ok && c >= 3 && t < c,
          fmt("benign collisions oracle %zu, clean %zu, naive_at %zu, robusttraj %zu; attacked (eps %.1f) clean %zu, "
              "naive_at %zu, robusttraj %zu (of %zu)",
              oracle, benign[train::Regime::Clean], benign[train::Regime::NaiveAt], benign[train::Regime::RobustTraj],
              atk.epsilon, c, attacked[train::Regime::NaiveAt], t, suite.size())};
}

// ---- 11: reproducibility ------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("missing " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome criterion11(const fs::path& work) {
  std::vector<std::string> outputs;
  for (const char* run : {"run_a", "run_b"}) {
    const fs::path out = work / "repro" / run;
    fs::remove_all(out);
    const std::string o = out.string();
    std::stringstream sink;
    auto* old = std::cout.rdbuf(sink.rdbuf());
    const std::vector<std::vector<std::string>> steps{
        {"gen-data", "--out", o, "--seed", "11"},
        {"augment", "--out", o, "--seed", "11"},
        {"train", "--out", o, "--seed", "11", "--regime", "robusttraj", "--augment"},
        {"eval", "--out", o, "--seed", "11", "--regime", "robusttraj", "--set", "train.augment=true"}};
    int rc = 0;
    for (const auto& s : steps) rc = rc ? rc : experiment::cli_main(s);
    std::cout.rdbuf(old);
    if (rc != 0) return {false, fmt("pipeline exited with %d", rc)};
    const fs::path run_dir = out / "runs" / "robusttraj_aug-seed11";
    outputs.push_back(slurp(run_dir / "metrics.csv") + slurp(run_dir / "eval.csv"));
    progress(std::string("pipeline ") + run + " done");
  }
  return {outputs[0] == outputs[1] && !outputs[0].empty(),
          outputs[0] == outputs[1] ? "metrics.csv and eval.csv identical across two runs (seed 11)"
                                   : "metrics differ between runs"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string work = "acceptance_work";
  std::vector<std::uint64_t> seeds{0, 1, 2};
  app.add_option("--only", only, "Run only these criteria (2 covers whatever else ran)");
  app.add_option("--work", work, "Scratch directory for pipeline outputs");
  app.add_option("--seeds", seeds, "Seeds for criteria 5, 7 and 9");
  CLI11_PARSE(app, argc, argv);
  auto want = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  ModelCache models;
  std::map<int, Outcome> results;
  auto run = [&](int c, auto&& fn) {
    if (!want(c)) return;
    progress(fmt("criterion %d", c));
    try {
      results[c] = fn();
    } catch (const std::exception& e) {
      results[c] = {false, std::string("error: ") + e.what()};
    }
    std::cerr << (results[c].pass ? "  PASS " : "  FAIL ") << results[c].detail << std::endl;
  };
  run(1, criterion1);
  run(6, criterion6);
  run(8, criterion8);
  run(3, criterion3);
  run(4, [&] { return criterion4(models); });
  run(5, [&] { return criterion5(models, seeds); });
  run(7, [&] { return criterion7(models, seeds); });
  run(10, [&] { return criterion10(models); });
  run(9, [&] { return criterion9(seeds); });
  run(11, [&] { return criterion11(work); });
  if (want(2)) {
    const std::size_t v = attack::threat_violations();
    results[2] = {v == 0, fmt("%zu threat-set violations recorded across criteria run in this process", v)};
  }

  bool all = true;
  for (int c = 1; c <= 11; ++c) {
    auto it = results.find(c);
    if (it == results.end()) continue;
    all = all && it->second.pass;
    std::cout << "criterion " << c << ": " << (it->second.pass ? "PASS" : "FAIL") << "  " << it->second.detail << "\n";
  }
  return all ? 0 : 1;
}
