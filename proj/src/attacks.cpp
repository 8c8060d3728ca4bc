#include "robusttraj/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <optional>
#include <random>

namespace robusttraj::attack {

using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {
std::atomic<std::size_t> g_violations{0};

constexpr const char* kNames[] = {"none", "naive", "deterministic", "latent", "context", "sequence"};
}  // namespace

const char* to_string(Kind k) { return kNames[static_cast<int>(k)]; }

Kind kind_from_string(const std::string& s) {
  for (int i = 0; i < 6; ++i)
    if (s == kNames[i]) return static_cast<Kind>(i);
  throw ValidationError("attack", "unknown attack kind '" + s + "'");
}

AttackConfig default_config(Kind k) {
  AttackConfig c;
  c.random_init = k == Kind::Latent || k == Kind::Context;
  return c;
}

std::size_t threat_violations() { return g_violations.load(); }

Tensor project_linf(const Tensor& delta, double eps) {
  if (eps < 0.0) throw std::invalid_argument("project_linf: negative epsilon");
  std::vector<double> v = delta.data();
  for (auto& x : v) x = std::clamp(x, -eps, eps);
  return Tensor(delta.shape(), std::move(v));
}

Tensor attack_mask(std::size_t agents, std::size_t frames, std::size_t adversarial_agent, bool all_agents) {
  if (!all_agents && adversarial_agent >= agents) {
    throw std::invalid_argument("attack_mask: adversarial agent " + std::to_string(adversarial_agent) +
                                " out of range");
  }
  std::vector<double> v(agents * 2 * frames, 0.0);
  for (std::size_t a = 0; a < agents; ++a)
    if (all_agents || a == adversarial_agent)
      for (std::size_t j = 0; j < 2 * frames; ++j) v[a * 2 * frames + j] = 1.0;
  return Tensor::matrix(agents, 2 * frames, std::move(v));
}

namespace {

Tensor masked(const Tensor& t, const Tensor& mask) {
  std::vector<double> v = t.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= mask[i];
  return Tensor(t.shape(), std::move(v));
}

void audit(const Tensor& delta, const Tensor& mask, double eps) {
  for (std::size_t i = 0; i < delta.size(); ++i) {
    if (std::abs(delta[i]) > eps || (mask[i] == 0.0 && delta[i] != 0.0)) {
      g_violations.fetch_add(1);
      return;
    }
  }
}

}  // namespace

PgdResult pgd(const Objective& objective, const Tensor& mask, double eps, const AttackConfig& cfg) {
  if (cfg.steps < 1) throw std::invalid_argument("pgd: steps must be >= 1");
  if (eps < 0.0 || !std::isfinite(eps)) throw std::invalid_argument("pgd: epsilon must be finite and >= 0");
  double alpha = cfg.alpha < 0.0 ? eps / 4.0 : cfg.alpha;
  const double floor = eps * cfg.alpha_floor;

  Tensor delta = Tensor::zeros(mask.shape());
  if (cfg.random_init && eps > 0.0) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x1d17));
    std::uniform_real_distribution<double> ud(-eps, eps);
    std::vector<double> v(mask.size());
    for (auto& x : v) x = ud(rng);
    delta = masked(Tensor(mask.shape(), std::move(v)), mask);
  }
  audit(delta, mask, eps);

  PgdResult r;
  r.trace.reserve(cfg.steps);
  std::size_t stale = 0;
  // Iteration s evaluates δ_s (and its gradient unless it is the last).
  for (std::size_t s = 0; s <= cfg.steps; ++s) {
    Graph g;
    const Var d = g.leaf(delta);
    const Var loss = objective(g, d, s);
    const double value = loss.value().item();
    if (s == 0) {
      r.initial = r.best = value;
      r.delta = delta;
    } else {
      if (value > r.best) {
        r.best = value;
        r.delta = delta;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        alpha = std::max(alpha / 2.0, floor);
        stale = 0;
      }
      r.trace.push_back(r.best);
    }
    if (s == cfg.steps) break;
    const Tensor grad = g.backward(loss).wrt(d);
    if (!grad.all_finite()) throw NumericalError("pgd: non-finite gradient at step " + std::to_string(s));
    std::vector<double> v = delta.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double gi = grad[i];
      v[i] += alpha * double((gi > 0.0) - (gi < 0.0)) * mask[i];
    }
    delta = project_linf(Tensor(delta.shape(), std::move(v)), eps);
    audit(delta, mask, eps);
  }
  return r;
}

// ---- objectives ------------------------------------------------------------------

namespace {

struct Frame {
  nn::Bound b;
  Var X;
};

Frame perturbed(Graph& g, const model::TrajectoryModel& m, const Tensor& X, Var delta) {
  return {nn::bind(g, m.params(), false), g.constant(X) + delta};
}

}  // namespace

Objective objective_naive(const model::TrajectoryModel& m, const Tensor& X, const Tensor& Y, std::size_t K,
                          std::uint64_t seed) {
  if (K < 1) throw std::invalid_argument("objective_naive: K must be >= 1");
  return [&m, X, Y, K, seed](Graph& g, Var delta, std::size_t step) {
    const Frame f = perturbed(g, m, X, delta);
    const Var C = m.context(f.b, f.X);
    const Var Z = m.sample_latent(f.b, C, K, derive_seed(seed, step));
    return model::min_k_sq_error(m.decode(f.b, f.X, C, Z), Y, K);
  };
}

Objective objective_deterministic(const model::TrajectoryModel& m, const Tensor& X, const Tensor& Y) {
  return [&m, X, Y](Graph& g, Var delta, std::size_t) {
    const Frame f = perturbed(g, m, X, delta);
    const Var C = m.context(f.b, f.X);
    return ad::sqnorm(m.decode(f.b, f.X, C, m.deterministic_latent(f.b, C)) - g.constant(Y));
  };
}

Objective objective_latent(const model::TrajectoryModel& m, const Tensor& X, const Tensor& Y) {
  const auto* cvae = dynamic_cast<const model::CvaeModel*>(&m);
  if (cvae == nullptr || !m.has_posterior()) {
    throw UnsupportedAttack(std::string("latent attack needs a posterior; model kind is ") + model::to_string(m.family()));
  }
  return [cvae, X, Y](Graph& g, Var delta, std::size_t) {
    const Frame f = perturbed(g, *cvae, X, delta);
    const Var Xc = g.constant(X), Yv = g.constant(Y);
    const auto q_clean = cvae->posterior(f.b, Xc, cvae->context(f.b, Xc), Yv);
    const auto q_adv = cvae->posterior(f.b, f.X, cvae->context(f.b, f.X), Yv);
    return model::kl_diag_gaussian(q_clean, q_adv);
  };
}

Objective objective_context(const model::TrajectoryModel& m, const Tensor& X) {
  return [&m, X](Graph& g, Var delta, std::size_t) {
    const Frame f = perturbed(g, m, X, delta);
    return ad::norm(m.context(f.b, f.X) - m.context(f.b, g.constant(X)));
  };
}

SequenceScenario SequenceScenario::from_scene(const Scene& s, std::size_t history_len) {
  if (s.history_len() < history_len) {
    throw ValidationError("scene.history", "sequence attack needs at least " + std::to_string(history_len) + " frames");
  }
  SequenceScenario sc;
  sc.history_len = history_len;
  sc.frames = s.history_len() - history_len;
  sc.future_len = s.future_len();
  const std::size_t N = s.num_agents(), L = s.history_len() + s.future_len();
  std::vector<double> v;
  v.reserve(N * L * 2);
  for (std::size_t a = 0; a < N; ++a)
    for (const Vec2& p : s.full_track(a)) {
      v.push_back(p.x);
      v.push_back(p.y);
    }
  sc.track = Tensor({N, L, 2}, std::move(v));
  return sc;
}

namespace {
Tensor track_window(const Tensor& track, std::size_t start, std::size_t len) {
  const std::size_t N = track.dim(0), L = track.dim(1);
  std::vector<double> v;
  v.reserve(N * len * 2);
  for (std::size_t a = 0; a < N; ++a)
    for (std::size_t t = start; t < start + len; ++t) {
      v.push_back(track[(a * L + t) * 2]);
      v.push_back(track[(a * L + t) * 2 + 1]);
    }
  return Tensor::matrix(N, 2 * len, std::move(v));
}
}  // namespace

Tensor SequenceScenario::window_history(std::size_t w) const {
  if (w > frames) throw std::out_of_range("sequence: window out of range");
  return track_window(track, w, history_len);
}

Tensor SequenceScenario::window_future(std::size_t w) const {
  if (w > frames) throw std::out_of_range("sequence: window out of range");
  return track_window(track, w + history_len, future_len);
}

Objective objective_sequence(const model::TrajectoryModel& m, const SequenceScenario& sc, std::size_t eot_draws,
                             std::uint64_t seed) {
  if (sc.history_len != m.arch().history_len || sc.future_len != m.arch().future_len) {
    throw ValidationError("sequence", "window length does not match the model");
  }
  return [&m, sc, eot_draws, seed](Graph& g, Var delta, std::size_t) {
    const std::size_t H = sc.history_len;
    if (delta.shape() != ad::Shape{sc.track.dim(0), 2 * (H + sc.frames)}) {
      throw ad::ShapeError("sequence: δ shape " + ad::shape_str(delta.shape()));
    }
    const auto b = nn::bind(g, m.params(), false);
    Var total;
    for (std::size_t w = 0; w < sc.window_count(); ++w) {
      const Var X = g.constant(sc.window_history(w)) + ad::slice(delta, 1, 2 * w, 2 * H);
      const Var Y = g.constant(sc.window_future(w));
      const Var C = m.context(b, X);
      Var loss;
      if (eot_draws == 0) {
        loss = ad::sqnorm(m.decode(b, X, C, m.deterministic_latent(b, C)) - Y);
      } else {
        for (std::size_t d = 0; d < eot_draws; ++d) {
          const Var l = ad::sqnorm(m.decode(b, X, C, m.sample_latent(b, C, 1, derive_seed(seed, w, d))) - Y);
          loss = loss.valid() ? loss + l : l;
        }
        loss = ad::scale(loss, 1.0 / double(eot_draws));
      }
      total = total.valid() ? total + loss : loss;
    }
    return total;
  };
}

// ---- driver ------------------------------------------------------------------------

AttackResult run_attack(const model::TrajectoryModel& m, const Scene& scene, Kind kind, const ThreatModel& threat,
                        const AttackConfig& cfg) {
  AttackResult r;
  r.scene_id = scene.id;
  r.kind = kind;
  r.epsilon = threat.epsilon;
  r.steps = kind == Kind::None ? 0 : cfg.steps;
  const std::size_t N = scene.num_agents(), frames = scene.history_len();
  const Tensor X = model::as_rows(scene.history);
  const Tensor mask = attack_mask(N, frames, scene.adversarial_agent, threat.all_agents);
  if (kind != Kind::Sequence && frames != m.arch().history_len) {
    throw ValidationError("scene.history", "length " + std::to_string(frames) + " does not match the model's " +
                                               std::to_string(m.arch().history_len));
  }
  if (kind == Kind::None) {
    r.pgd.delta = Tensor::zeros(mask.shape());
    r.perturbed_history = scene.history;
    return r;
  }
  Objective obj;
  std::optional<SequenceScenario> seq;
  const Tensor Y = model::as_rows(scene.future);
  switch (kind) {
    case Kind::Naive:
      obj = objective_naive(m, X, Y, cfg.K, cfg.seed);
      break;
    case Kind::Deterministic:
      obj = objective_deterministic(m, X, Y);
      break;
    case Kind::Latent:
      obj = objective_latent(m, X, Y);
      break;
    case Kind::Context:
      obj = objective_context(m, X);
      break;
    case Kind::Sequence:
      seq = SequenceScenario::from_scene(scene, m.arch().history_len);
      if (seq->frames != cfg.sequence_frames) {
        throw ValidationError("scene.history", "expected " + std::to_string(m.arch().history_len + cfg.sequence_frames) +
                                                   " frames for the sequence attack");
      }
      obj = objective_sequence(m, *seq, cfg.eot_draws, cfg.seed);
      break;
    case Kind::None:
      break;
  }
  r.pgd = pgd(obj, mask, threat.epsilon, cfg);
  const Tensor adv = Tensor(X.shape(), [&] {
    std::vector<double> v = X.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += r.pgd.delta[i];
    return v;
  }());
  r.perturbed_history = adv.reshaped(scene.history.shape());
  return r;
}

nlohmann::json to_json(const AttackResult& r) {
  return {{"scene_id", r.scene_id},     {"attack_kind", to_string(r.kind)}, {"eps", r.epsilon},
          {"steps", r.steps},           {"delta", r.pgd.delta.data()},      {"trace", r.pgd.trace}};
}

}  // namespace robusttraj::attack
