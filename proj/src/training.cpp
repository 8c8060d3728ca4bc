#include "robusttraj/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

namespace robusttraj::train {

using ad::Graph;
using ad::Tensor;
using ad::Var;
using nlohmann::json;

const char* to_string(Regime r) {
  switch (r) {
    case Regime::Clean:
      return "clean";
    case Regime::NaiveAt:
      return "naive_at";
    case Regime::RobustTraj:
      return "robusttraj";
  }
  return "?";
}

Regime regime_from_string(const std::string& s) {
  for (Regime r : {Regime::Clean, Regime::NaiveAt, Regime::RobustTraj})
    if (s == to_string(r)) return r;
  throw ValidationError("train.regime", "unknown regime '" + s + "'");
}

void TrainConfig::validate() const {
  arch.validate();
  if (epochs < 1) throw ValidationError("train.epochs", "must be >= 1");
  if (batch_size < 1) throw ValidationError("train.batch_size", "must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("train.lr", "must be > 0");
  if (K < 1) throw ValidationError("train.K", "must be >= 1");
  if (!(beta >= 0.0)) throw ValidationError("train.beta", "must be >= 0");
  if (!(inner_eps >= 0.0)) throw ValidationError("train.inner_eps", "must be >= 0");
  if (regime != Regime::Clean && inner_steps < 1) {
    throw ValidationError("train.inner_steps", "must be >= 1 for adversarial regimes");
  }
  if (!(inner_alpha > 0.0)) throw ValidationError("train.inner_alpha", "must be > 0");
  if (!(augment_fraction >= 0.0 && augment_fraction < 1.0)) {
    throw ValidationError("train.augment_fraction", "must be in [0, 1)");
  }
}

json TrainConfig::to_json() const {
  return {{"regime", to_string(regime)},
          {"arch", arch.to_json()},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"K", K},
          {"inner_eps", inner_eps},
          {"inner_steps", inner_steps},
          {"inner_alpha", inner_alpha},
          {"beta", beta},
          {"seed", seed},
          {"augment", augment},
          {"augment_fraction", augment_fraction},
          {"drift_scenes", drift_scenes}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ValidationError("train", "expected an object");
  try {
    if (j.contains("regime")) c.regime = regime_from_string(j.at("regime").get<std::string>());
    if (j.contains("arch")) c.arch = model::Arch::from_json(j.at("arch"));
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.K = j.value("K", c.K);
    c.inner_eps = j.value("inner_eps", c.inner_eps);
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.inner_alpha = j.value("inner_alpha", c.inner_alpha);
    c.beta = j.value("beta", c.beta);
    c.seed = j.value("seed", c.seed);
    c.augment = j.value("augment", c.augment);
    c.augment_fraction = j.value("augment_fraction", c.augment_fraction);
    c.drift_scenes = j.value("drift_scenes", c.drift_scenes);
  } catch (const json::exception& e) {
    throw ValidationError("train", e.what());
  }
  c.validate();
  return c;
}

// ---- losses ---------------------------------------------------------------------

Var loss_reg(const model::TrajectoryModel& m, const nn::Bound& b, const Tensor& X, const Tensor& delta) {
  Graph& g = b.graph;
  const Var clean = m.context(b, g.constant(X));
  const Var adv = m.context(b, g.constant(X) + g.constant(delta));
  return ad::norm(adv - clean);
}

Var loss_clean(const model::TrajectoryModel& m, const nn::Bound& b, const Tensor& X, const Tensor& Y, std::size_t K,
               std::uint64_t seed) {
  return m.loss_total(b, b.graph.constant(X), Y, K, seed);
}

OuterTerms outer_loss(const model::TrajectoryModel& m, const nn::Bound& b, const Scene& s, const Tensor& delta,
                      const TrainConfig& cfg, std::uint64_t seed) {
  Graph& g = b.graph;
  const Tensor X = model::as_rows(s.history), Y = model::as_rows(s.future);
  OuterTerms t;
  if (cfg.regime == Regime::Clean) {
    t.adv = t.total = m.loss_total(b, g.constant(X), Y, cfg.K, seed);
    return t;
  }
  t.adv = m.loss_total(b, g.constant(X) + g.constant(delta), Y, cfg.K, seed);
  if (cfg.regime == Regime::NaiveAt) {
    t.total = t.adv;
    return t;
  }
  t.clean = loss_clean(m, b, X, Y, cfg.K, seed);
  t.reg = loss_reg(m, b, X, delta);
  t.total = t.adv + t.clean + cfg.beta * t.reg;
  return t;
}

Tensor inner_perturbation(const model::TrajectoryModel& m, const Scene& s, const TrainConfig& cfg,
                          std::uint64_t seed) {
  const Tensor X = model::as_rows(s.history);
  if (cfg.regime == Regime::Clean || cfg.inner_eps == 0.0) return Tensor::zeros(X.shape());
  const Tensor Y = model::as_rows(s.future);
  const Tensor mask = attack::attack_mask(s.num_agents(), s.history_len(), s.adversarial_agent, false);
  attack::AttackConfig ac;
  ac.steps = cfg.inner_steps;
  ac.alpha = cfg.inner_alpha * cfg.inner_eps;
  ac.seed = seed;
  const attack::Objective obj = cfg.regime == Regime::NaiveAt ? attack::objective_naive(m, X, Y, cfg.K, seed)
                                                               : attack::objective_deterministic(m, X, Y);
  return attack::pgd(obj, mask, cfg.inner_eps, ac).delta;
}

Trainer::Trainer(const TrainConfig& cfg) : gen(nn::AdamConfig{cfg.lr}), disc(nn::AdamConfig{cfg.lr}) {}

namespace {
void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite ") + what);
}
}  // namespace

StepLog train_step(model::TrajectoryModel& m, Trainer& opt, const std::vector<const Scene*>& batch,
                   const TrainConfig& cfg, std::uint64_t seed) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const double inv = 1.0 / double(batch.size());
  StepLog log;

  if (auto* gan = dynamic_cast<model::CganModel*>(&m)) {
    Graph g;
    const auto b = nn::bind(g, gan->params(), false);
    const auto d = nn::bind(g, gan->disc_params(), true);
    Var total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Scene& s = *batch[i];
      const Var l = gan->loss_gan(b, d, g.constant(model::as_rows(s.history)), model::as_rows(s.future), cfg.K,
                                  derive_seed(seed, i, 1))
                        .disc;
      total = total.valid() ? total + l : l;
    }
    total = inv * total;
    log.disc = total.value().item();
    require_finite(log.disc, "discriminator loss");
    opt.disc.step(gan->disc_params(), nn::gradients(g.backward(total), d));
  }

  // Inner maximisation against the pre-step parameters.
  std::vector<Tensor> deltas;
  deltas.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    deltas.push_back(inner_perturbation(m, *batch[i], cfg, derive_seed(seed, i, 2)));

  Graph g;
  const auto b = nn::bind(g, m.params(), true);
  Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const OuterTerms t = outer_loss(m, b, *batch[i], deltas[i], cfg, derive_seed(seed, i, 3));
    total = total.valid() ? total + t.total : t.total;
    log.adv += inv * t.adv.value().item();
    if (t.clean.valid()) log.clean += inv * t.clean.value().item();
    if (t.reg.valid()) log.reg += inv * t.reg.value().item();
  }
  total = inv * total;
  log.loss = total.value().item();
  require_finite(log.loss, "training loss");
  opt.gen.step(m.params(), nn::gradients(g.backward(total), b));
  return log;
}

// ---- evaluation -------------------------------------------------------------------

EvalResult evaluate(const model::TrajectoryModel& m, const std::vector<const Scene*>& scenes, const EvalOptions& opt) {
  MetricsAccumulator acc;
  double drift = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = *scenes[i];
    Tensor hist = s.history;
    if (opt.attack != attack::Kind::None) {
      attack::AttackConfig ac = opt.attack_config;
      ac.seed = derive_seed(opt.seed, i);
      hist = attack::run_attack(m, s, opt.attack, opt.threat, ac).perturbed_history;
    }
    const Tensor X = model::as_rows(hist);
    const auto pred = model::sample_predictions(m, X, opt.K, derive_seed(opt.seed, i, 1));
    acc.add(compute_metrics(pred, s.future, s.lanes));
    if (opt.attack != attack::Kind::None) {
      const Tensor a = model::encode_context(m, X), c = model::encode_context(m, model::as_rows(s.history));
      double sq = 0.0;
      for (std::size_t j = 0; j < a.size(); ++j) sq += (a[j] - c[j]) * (a[j] - c[j]);
      drift += std::sqrt(sq);
    }
  }
  EvalResult r;
  r.metrics = acc.mean();
  r.scenes = scenes.size();
  r.drift = scenes.empty() ? 0.0 : drift / double(scenes.size());
  return r;
}

// ---- experiments --------------------------------------------------------------------

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // Fisher-Yates with our own draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

namespace {

}  // namespace

std::string run_label(const TrainConfig& cfg) {
  std::string s = to_string(cfg.regime);
  if (cfg.augment) s += "_aug";
  if (cfg.arch.family == model::Family::Cgan) s = "cgan_" + s;
  return s + "-seed" + std::to_string(cfg.seed);
}

std::unique_ptr<model::TrajectoryModel> fit(const TrainConfig& cfg, const std::vector<const Scene*>& train,
                                            const std::vector<const Scene*>& augmented, RunReport& report,
                                            const std::optional<std::filesystem::path>& checkpoint_dir) {
  cfg.validate();
  if (train.empty()) throw ValidationError("train", "no training scenes");
  model::Arch arch = cfg.arch;
  arch.init_seed = derive_seed(cfg.seed, 0xa11c);
  auto m = model::make_model(arch);
  Trainer opt(cfg);

  const bool mix = cfg.augment && !augmented.empty() && cfg.augment_fraction > 0.0;
  const std::size_t n_aug = mix ? std::max<std::size_t>(1, std::size_t(std::lround(cfg.batch_size * cfg.augment_fraction))) : 0;
  const std::size_t n_real = std::max<std::size_t>(1, cfg.batch_size - std::min(n_aug, cfg.batch_size - 1));
  std::vector<const Scene*> drift_set(train.begin(), train.begin() + long(std::min(cfg.drift_scenes, train.size())));

  if (checkpoint_dir) std::filesystem::create_directories(*checkpoint_dir);
  std::size_t aug_cursor = 0;
  std::vector<std::size_t> aug_order;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto order = shuffled(train.size(), derive_seed(cfg.seed, 1, e));
    double sum = 0.0;
    std::size_t steps = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += n_real) {
        std::vector<const Scene*> batch;
        for (std::size_t j = start; j < std::min(order.size(), start + n_real); ++j) batch.push_back(train[order[j]]);
        for (std::size_t j = 0; j < n_aug; ++j) {
          if (aug_cursor == aug_order.size()) {
            aug_order = shuffled(augmented.size(), derive_seed(cfg.seed, 2, e, start));
            aug_cursor = 0;
          }
          batch.push_back(augmented[aug_order[aug_cursor++]]);
        }
        sum += train_step(*m, opt, batch, cfg, derive_seed(cfg.seed, 3, e, start)).loss;
        ++steps;
      }
    } catch (const NumericalError& err) {
      report.partial = true;
      report.error = "epoch " + std::to_string(e + 1) + ": " + err.what();
      if (checkpoint_dir) model::save_checkpoint(*checkpoint_dir / "diagnostic.json", *m);
      break;
    }
    report.epoch_loss.push_back(sum / double(steps));
    if (!drift_set.empty() && cfg.inner_eps > 0.0) {
      EvalOptions eo;
      eo.attack = attack::Kind::Deterministic;
      eo.threat.epsilon = cfg.inner_eps;
      eo.seed = derive_seed(cfg.seed, 4);
      report.epoch_drift.push_back(evaluate(*m, drift_set, eo).drift);
    }
    if (checkpoint_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.json", e + 1);
      model::save_checkpoint(*checkpoint_dir / name, *m);
    }
  }
  return m;
}

RunReport run_experiment(const TrainConfig& cfg, const Dataset& data, const std::vector<Scene>& augmented,
                         const ExperimentOptions& opt, std::unique_ptr<model::TrajectoryModel>* trained) {
  RunReport report;
  report.config = cfg;
  report.run_id = run_label(cfg);
  std::vector<const Scene*> aug;
  for (const auto& s : augmented) aug.push_back(&s);
  auto m = fit(cfg, data.split(Split::Train), aug, report, opt.checkpoint_dir);

  const auto test = data.split(Split::Test);
  EvalOptions eo;
  eo.K = opt.eval_K;
  eo.seed = opt.eval_seed;
  const EvalResult clean = evaluate(*m, test, eo);
  report.rows.push_back({"test", 0.0, "none", clean.metrics, 0.0});
  for (double eps : opt.eval_eps)
    for (attack::Kind k : opt.eval_attacks) {
      if (k == attack::Kind::Latent && !m->has_posterior()) continue;
      eo.attack = k;
      eo.attack_config = attack::default_config(k);
      eo.threat.epsilon = eps;
      const EvalResult r = evaluate(*m, test, eo);
      report.rows.push_back({"test", eps, attack::to_string(k), r.metrics, r.drift});
    }
  if (trained) *trained = std::move(m);
  return report;
}

json RunReport::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows)
    rows_j.push_back({{"split", r.split},
                      {"eps", r.eps},
                      {"attack", r.attack},
                      {"ade", r.metrics.ade},
                      {"fde", r.metrics.fde},
                      {"mr", r.metrics.mr},
                      {"orr", r.metrics.orr},
                      {"drift", r.drift}});
  json j = {{"run_id", run_id},       {"config", config.to_json()}, {"epoch_loss", epoch_loss},
            {"epoch_drift", epoch_drift}, {"rows", rows_j},         {"partial", partial}};
  if (!error.empty()) j["error"] = error;
  return j;
}

RunReport RunReport::from_json(const json& j) {
  RunReport r;
  try {
    r.run_id = j.at("run_id").get<std::string>();
    r.config = TrainConfig::from_json(j.at("config"));
    r.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
    r.epoch_drift = j.value("epoch_drift", std::vector<double>{});
    r.partial = j.value("partial", false);
    r.error = j.value("error", std::string{});
    for (const auto& row : j.at("rows")) {
      EvalRow e;
      e.split = row.at("split").get<std::string>();
      e.eps = row.at("eps").get<double>();
      e.attack = row.at("attack").get<std::string>();
      e.metrics = {row.at("ade").get<double>(), row.at("fde").get<double>(), row.at("mr").get<double>(),
                   row.at("orr").get<double>()};
      e.drift = row.value("drift", 0.0);
      r.rows.push_back(e);
    }
  } catch (const json::exception& e) {
    throw ValidationError("report", e.what());
  }
  return r;
}

std::string metrics_csv(const std::vector<RunReport>& reports, bool header) {
  std::ostringstream out;
  if (header) out << kMetricsCsvHeader << "\n";
  char buf[256];
  for (const auto& rep : reports)
    for (const auto& r : rep.rows) {
      std::snprintf(buf, sizeof buf, "%s,%s,%.2f,%s,%.6f,%.6f,%.6f,%.6f\n", rep.run_id.c_str(), r.split.c_str(), r.eps,
                    r.attack.c_str(), r.metrics.ade, r.metrics.fde, r.metrics.mr, r.metrics.orr);
      out << buf;
    }
  return out.str();
}

}  // namespace robusttraj::train
