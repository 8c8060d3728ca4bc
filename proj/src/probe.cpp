#include "robusttraj/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <random>
#include <sstream>

#include "robusttraj/attacks.hpp"
#include "robusttraj/training.hpp"

namespace robusttraj::probe {

using ad::Tensor;
using nlohmann::json;

const char* to_string(NoiseKind k) { return k == NoiseKind::SaltPepper ? "salt_pepper" : "adversarial"; }

NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "salt_pepper") return NoiseKind::SaltPepper;
  if (s == "adversarial") return NoiseKind::Adversarial;
  throw ValidationError("noise_kind", "unknown noise kind '" + s + "'");
}

Tensor salt_pepper(const Tensor& X, double p, std::uint64_t seed, double magnitude) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("salt_pepper: p must be in [0, 1]");
  if (!std::isfinite(magnitude)) throw std::invalid_argument("salt_pepper: magnitude must be finite");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v = X.data();
  for (double& x : v) {
    // Both draws always happen so the stream does not depend on p.
    const bool hit = u(rng) < p;
    const double sign = u(rng) < 0.5 ? -1.0 : 1.0;
    if (hit) x = sign * magnitude;
  }
  return Tensor(X.shape(), std::move(v));
}

namespace {

double ade_rows(const Tensor& samples, std::size_t k, const Tensor& target) {
  const std::size_t T = target.dim(0);
  double s = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double dx = samples[(k * T + t) * 2] - target[t * 2];
    const double dy = samples[(k * T + t) * 2 + 1] - target[t * 2 + 1];
    s += std::hypot(dx, dy);
  }
  return s / static_cast<double>(T);
}

}  // namespace

double retrieval_score(const std::vector<Tensor>& samples, const std::vector<Tensor>& targets) {
  const std::size_t M = targets.size();
  if (M < 2) throw ValidationError("probe", "need at least two probe scenes");
  if (samples.size() != M) throw std::invalid_argument("retrieval_score: one sample set per scene");
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < M; ++i) {
    if (samples[i].rank() != 3 || samples[i].dim(1) != targets[i].dim(0)) {
      throw ad::ShapeError("retrieval_score: samples must be K×T×2");
    }
    for (std::size_t k = 0; k < samples[i].dim(0); ++k) {
      const double own = ade_rows(samples[i], k, targets[i]);
      bool hit = true;
      for (std::size_t j = 0; j < M && hit; ++j) {
        if (j != i && ade_rows(samples[i], k, targets[j]) <= own) hit = false;
      }
      hits += hit;
      ++total;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

double condition_dependence_score(const model::TrajectoryModel& m, const std::vector<const Scene*>& probe,
                                  std::size_t K, std::uint64_t seed) {
  if (probe.size() < 2) throw ValidationError("probe", "need at least two probe scenes");
  if (K == 0) throw ValidationError("probe.K", "must be >= 1");
  for (std::size_t i = 0; i < probe.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (probe[i]->full_track(0) == probe[j]->full_track(0)) {
        throw ValidationError("probe", "scenes " + std::to_string(j) + " and " + std::to_string(i) + " duplicate agent 0");
      }
    }
  }
  std::vector<Tensor> samples, targets;
  for (const Scene* s : probe) {
    const std::size_t H = s->history_len(), T = s->future_len();
    const Vec2 last = s->hist(0, H - 1);
    const Tensor X = model::as_rows(s->history);
    std::vector<double> sv, tv;
    for (std::size_t k = 0; k < K; ++k) {
      // One sample at a time so agent 0 draws the same latent in every scene.
      const PredictionSet p = model::sample_predictions(m, X, 1, derive_seed(seed, k));
      for (std::size_t t = 0; t < T; ++t) {
        const Vec2 q = p.at(0, 0, t) - last;
        sv.push_back(q.x);
        sv.push_back(q.y);
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const Vec2 q = s->fut(0, t) - last;
      tv.push_back(q.x);
      tv.push_back(q.y);
    }
    samples.emplace_back(ad::Shape{K, T, 2}, std::move(sv));
    targets.push_back(Tensor::matrix(T, 2, std::move(tv)));
  }
  return retrieval_score(samples, targets);
}

// ---- configuration -----------------------------------------------------------------

void ProbeConfig::validate() const {
  arch.validate();
  if (levels.empty()) throw ValidationError("probe.levels", "must not be empty");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!(levels[i] >= 0.0) || !std::isfinite(levels[i])) throw ValidationError("probe.levels", "must be finite and >= 0");
    if (i > 0 && !(levels[i] > levels[i - 1])) throw ValidationError("probe.levels", "must be strictly increasing");
  }
  if (!(salt_pepper_p >= 0.0 && salt_pepper_p <= 1.0)) throw ValidationError("probe.salt_pepper_p", "must be in [0, 1]");
  if (train_scenes < 1) throw ValidationError("probe.train_scenes", "must be >= 1");
  if (epochs < 1) throw ValidationError("probe.epochs", "must be >= 1");
  if (batch_size < 1) throw ValidationError("probe.batch_size", "must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("probe.lr", "must be > 0");
  if (inner_steps < 1) throw ValidationError("probe.inner_steps", "must be >= 1");
  if (!(inner_alpha > 0.0)) throw ValidationError("probe.inner_alpha", "must be > 0");
  if (probe_scenes < 2) throw ValidationError("probe.probe_scenes", "must be >= 2");
  if (K < 1) throw ValidationError("probe.K", "must be >= 1");
}

json ProbeConfig::to_json() const {
  return {{"family", model::to_string(family)},
          {"arch", arch.to_json()},
          {"levels", levels},
          {"salt_pepper_p", salt_pepper_p},
          {"train_scenes", train_scenes},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"inner_steps", inner_steps},
          {"inner_alpha", inner_alpha},
          {"probe_scenes", probe_scenes},
          {"K", K}};
}

ProbeConfig ProbeConfig::from_json(const json& j) {
  ProbeConfig c;
  if (!j.is_object()) throw ValidationError("probe", "expected an object");
  try {
    if (j.contains("family")) c.family = model::family_from_string(j.at("family").get<std::string>());
    if (j.contains("arch")) c.arch = model::Arch::from_json(j.at("arch"));
    c.levels = j.value("levels", c.levels);
    c.salt_pepper_p = j.value("salt_pepper_p", c.salt_pepper_p);
    c.train_scenes = j.value("train_scenes", c.train_scenes);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.inner_alpha = j.value("inner_alpha", c.inner_alpha);
    c.probe_scenes = j.value("probe_scenes", c.probe_scenes);
    c.K = j.value("K", c.K);
  } catch (const json::exception& e) {
    throw ValidationError("probe", e.what());
  }
  c.validate();
  return c;
}

json ProbeReport::to_json() const {
  json lv = json::array();
  for (const auto& l : levels) lv.push_back({{"level", l.level}, {"score", l.score}, {"score_std", l.score_std}});
  return {{"noise_kind", to_string(kind)}, {"seed", seed}, {"levels", lv}, {"low_budget", low_budget}, {"warning", warning}};
}

// ---- training and the probe ----------------------------------------------------------

std::unique_ptr<model::TrajectoryModel> train_noisy(const ProbeConfig& cfg, NoiseKind kind, double level,
                                                    const std::vector<const Scene*>& train, std::uint64_t seed) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_noisy: empty training set");
  train::TrainConfig tc;
  tc.regime = train::Regime::Clean;
  tc.arch = cfg.arch;
  tc.arch.family = cfg.family;
  tc.arch.init_seed = derive_seed(seed, 0);
  tc.batch_size = cfg.batch_size;
  tc.lr = cfg.lr;
  tc.seed = seed;
  auto m = model::make_model(tc.arch);
  train::Trainer opt(tc);

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto order = train::shuffled(train.size(), derive_seed(seed, 1, e));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      // Noisy copies of the batch; only the conditions are corrupted.
      std::vector<Scene> noisy;
      noisy.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        Scene s = *train[order[i]];
        if (level > 0.0) {
          const Tensor X = model::as_rows(s.history);
          const std::uint64_t ns = derive_seed(seed, 2, e, i);
          Tensor delta;
          if (kind == NoiseKind::SaltPepper) {
            delta = salt_pepper(Tensor::zeros(X.shape()), cfg.salt_pepper_p, ns, level);
          } else {
            attack::AttackConfig ac;
            ac.steps = cfg.inner_steps;
            ac.alpha = cfg.inner_alpha * level;
            ac.seed = ns;
            const Tensor mask = attack::attack_mask(s.num_agents(), s.history_len(), 0, true);
            delta = attack::pgd(attack::objective_deterministic(*m, X, model::as_rows(s.future)), mask, level, ac).delta;
          }
          std::vector<double> v = X.data();
          for (std::size_t k = 0; k < v.size(); ++k) v[k] += delta[k];
          s.history = Tensor(X.shape(), std::move(v)).reshaped(s.history.shape());
        }
        noisy.push_back(std::move(s));
      }
      std::vector<const Scene*> batch;
      for (const auto& s : noisy) batch.push_back(&s);
      train::train_step(*m, opt, batch, tc, derive_seed(seed, 3, e, start));
    }
  }
  return m;
}

ProbeReport run_probe(const ProbeConfig& cfg, NoiseKind kind, std::uint64_t seed) {
  cfg.validate();
  GeneratorConfig gc;
  gc.history_len = cfg.arch.history_len;
  gc.future_len = cfg.arch.future_len;
  const Dataset data = generate_dataset(gc, cfg.train_scenes, 0, cfg.probe_scenes, derive_seed(seed, 10));
  const auto train = data.split(Split::Train);
  const auto probe = data.split(Split::Test);

  std::vector<std::future<double>> jobs;
  for (double level : cfg.levels) {
    jobs.push_back(std::async(std::launch::async, [&, level] {
      // Every level starts from the same initialisation and batch order.
      const auto m = train_noisy(cfg, kind, level, train, seed);
      return condition_dependence_score(*m, probe, cfg.K, derive_seed(seed, 20));
    }));
  }
  ProbeReport r;
  r.kind = kind;
  r.seed = seed;
  const double n = static_cast<double>(cfg.probe_scenes * cfg.K);
  for (std::size_t i = 0; i < cfg.levels.size(); ++i) {
    const double s = jobs[i].get();
    r.levels.push_back({cfg.levels[i], s, std::sqrt(s * (1.0 - s) / n)});
  }
  const double chance = 1.0 / static_cast<double>(cfg.probe_scenes);
  const LevelScore& base = r.levels.front();
  if (base.score - 3.0 * std::max(base.score_std, std::sqrt(chance * (1.0 - chance) / n)) <= chance) {
    r.low_budget = true;
    r.warning = "score at the lowest level is within 3 standard errors of chance; increase epochs or train_scenes";
  }
  return r;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) mx += rx[i] / n, my += ry[i] / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::string probe_csv(const std::vector<ProbeReport>& reports, bool header) {
  std::ostringstream os;
  if (header) os << kProbeCsvHeader << "\n";
  char buf[128];
  for (const auto& r : reports) {
    for (const auto& l : r.levels) {
      std::snprintf(buf, sizeof buf, "%s,%.2f,%llu,%.6f\n", to_string(r.kind), l.level,
                    static_cast<unsigned long long>(r.seed), l.score);
      os << buf;
    }
  }
  return os.str();
}

}  // namespace robusttraj::probe
