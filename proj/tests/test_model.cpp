#include "doctest.h"
#include "robusttraj/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace robusttraj;
using namespace robusttraj::model;
using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

Arch toy_arch(Family f = Family::Cvae, std::uint64_t seed = 3) {
  Arch a;
  a.family = f;
  a.hidden_dim = 6;
  a.latent_dim = 2;
  a.future_len = 3;
  a.init_seed = seed;
  return a;
}

Scene cruise_scene(std::uint64_t seed, std::size_t agents = 2, std::size_t T = 12) {
  GeneratorConfig cfg;
  cfg.min_agents = cfg.max_agents = agents;
  cfg.future_len = T;
  cfg.behavior_weights = {1, 0, 0, 0};
  return generate_synthetic(cfg, seed);
}

Tensor rows(const Tensor& t) { return as_rows(t); }

Tensor shifted(const Tensor& t, Vec2 v) {
  std::vector<double> d = t.data();
  for (std::size_t i = 0; i < d.size(); i += 2) {
    d[i] += v.x;
    d[i + 1] += v.y;
  }
  return Tensor(t.shape(), d);
}

void zero_params(nn::ParamSet& p, const std::string& prefix) {
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.name(i).rfind(prefix, 0) == 0) p.set(i, Tensor::zeros(p[i].shape()));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("context encoder") {
  CvaeModel m(Arch{});
  const Scene s = cruise_scene(5, 3);
  const Tensor X = rows(s.history);
  const Tensor c1 = encode_context(m, X);
  CHECK(c1.shape() == ad::Shape{3, m.arch().context_dim()});
  CHECK(encode_context(m, X) == c1);

  SUBCASE("single agent pools to zero") {
    const Scene one = cruise_scene(6, 1);
    const Tensor c = encode_context(m, rows(one.history));
    for (std::size_t j = m.arch().hidden_dim; j < m.arch().context_dim(); ++j) CHECK(c.at(0, j) == 0.0);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(encode_context(m, Tensor::zeros({2, 6})), ad::ShapeError);
  }
  SUBCASE("translation invariant") {
    const Tensor c2 = encode_context(m, shifted(X, {13.0, -7.5}));
    CHECK(max_abs_diff(c1, c2) < 1e-12);
  }
}

TEST_CASE("context drift grows linearly with first-layer scale") {
  // A stationary agent sits at the tanh origin, so the encoder is linear to
  // first order and the drift should track the weight scale.
  CvaeModel m(Arch{});
  const Tensor X = Tensor::zeros({1, 8});
  std::vector<double> d(8, 0.0);
  d[2] = 1e-6;
  d[5] = -1e-6;
  const Tensor Xd(X.shape(), d);
  const std::size_t w = m.params().index("enc1.weight");
  const Tensor w0 = m.params()[w];
  auto drift = [&](double c) {
    std::vector<double> v = w0.data();
    for (auto& x : v) x *= c;
    m.params().set(w, Tensor(w0.shape(), v));
    const Tensor a = encode_context(m, X), b = encode_context(m, Xd);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  };
  const double d1 = drift(1.0);
  CHECK(d1 > 0.0);
  for (double c : {2.0, 10.0, 100.0}) CHECK(drift(c) / d1 == doctest::Approx(c).epsilon(1e-3));
}

TEST_CASE("prior and posterior") {
  CvaeModel m(Arch{});
  const Scene s = cruise_scene(7, 2);
  const Tensor X = rows(s.history), Y = rows(s.future);
  const Gaussian p = prior(m, X);
  for (double v : p.std.data()) {
    CHECK(v >= std::exp(kLogSigmaMin));
    CHECK(v <= std::exp(kLogSigmaMax));
  }
  const Gaussian q1 = posterior(m, X, Y), q2 = posterior(m, X, Y);
  CHECK(q1.mean == q2.mean);
  CHECK(q1.std == q2.std);
  CHECK_THROWS_AS(posterior(m, X, Tensor::zeros({2, 4})), ad::ShapeError);

  SUBCASE("log std clamp") {
    const std::size_t bi = m.params().index("prior_log_std.bias");
    m.params().set(bi, Tensor::filled(m.params()[bi].shape(), 50.0));
    const Gaussian clamped = prior(m, X);
    for (double v : clamped.std.data()) CHECK(v == doctest::Approx(std::exp(kLogSigmaMax)));
  }
}

TEST_CASE("diagonal Gaussian KL") {
  Graph g;
  auto gv = [&](double mu, double ls, std::size_t n) {
    return GaussianVars{g.constant(Tensor::filled({1, n}, mu)), g.constant(Tensor::filled({1, n}, ls))};
  };
  CHECK(kl_diag_gaussian(gv(1.0, 0.0, 1), gv(0.0, 0.0, 1)).value().item() == doctest::Approx(0.5));
  CHECK(kl_diag_gaussian(gv(1.0, 0.0, 4), gv(0.0, 0.0, 4)).value().item() == doctest::Approx(2.0));
  CHECK(kl_diag_gaussian(gv(0.3, -0.2, 3), gv(0.3, -0.2, 3)).value().item() == doctest::Approx(0.0).epsilon(1e-15));
  // Against the textbook scalar formula.
  const double mq = 0.4, sq = 0.7, mp = -0.2, sp = 1.3;
  const double ref = std::log(sp / sq) + (sq * sq + (mq - mp) * (mq - mp)) / (2 * sp * sp) - 0.5;
  CHECK(kl_diag_gaussian(gv(mq, std::log(sq), 1), gv(mp, std::log(sp), 1)).value().item() ==
        doctest::Approx(ref).epsilon(1e-12));
  // Non-negative on random parameters.
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Tensor a = standard_normal(2, 3, seed), b = standard_normal(2, 3, seed + 100);
    const Tensor c = standard_normal(2, 3, seed + 200), d = standard_normal(2, 3, seed + 300);
    CHECK(kl_diag_gaussian({g.constant(a), g.constant(b)}, {g.constant(c), g.constant(d)}).value().item() >= 0.0);
  }
}

TEST_CASE("decoder") {
  CvaeModel m(Arch{});
  const Scene s = cruise_scene(8, 3);
  const Tensor X = rows(s.history);
  const Tensor Z = standard_normal(3, m.arch().latent_dim, 4);
  CHECK(decode(m, X, Z) == decode(m, X, Z));
  CHECK_THROWS_AS(decode(m, X, standard_normal(3, 5, 1)), ad::ShapeError);

  SUBCASE("zero decoder is stationary") {
    zero_params(m.params(), "dec");
    const Tensor out = decode(m, X, Z);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t t = 0; t < m.arch().future_len; ++t) {
        const std::size_t i = (a * m.arch().future_len + t) * 2;
        CHECK(out[i] == s.hist(a, 3).x);
        CHECK(out[i + 1] == s.hist(a, 3).y);
      }
  }
  SUBCASE("translation equivariant") {
    const Vec2 v{-4.25, 9.0};
    const Tensor a = decode(m, X, Z), b = decode(m, shifted(X, v), Z);
    CHECK(max_abs_diff(shifted(a, v), b) < 1e-9);
  }
  SUBCASE("deterministic prediction decodes the prior mean") {
    const Tensor mu = prior(m, X).mean;
    CHECK(predict_deterministic(m, X) == decode(m, X, mu));
  }
  SUBCASE("gradient w.r.t. Z") {
    CvaeModel t(toy_arch());
    const Scene s2 = cruise_scene(9, 2, 3);
    const Tensor X2 = rows(s2.history), Y2 = rows(s2.future);
    const auto rep = ad::gradient_check(
        [&](Graph& g, Var z) {
          const auto b = nn::bind(g, t.params(), false);
          const Var Xv = g.constant(X2);
          return ad::sqnorm(t.decode(b, Xv, t.context(b, Xv), ad::reshape(z, {2, 2})) - g.constant(Y2));
        },
        standard_normal(1, 4, 11).reshaped({4}));
    CHECK(rep.pass);
    CHECK(rep.max_rel_error < 1e-4);
  }
}

TEST_CASE("sample predictions") {
  CvaeModel m(Arch{});
  const Scene s = cruise_scene(10, 2);
  const Tensor X = rows(s.history);
  const auto p1 = sample_predictions(m, X, 5, 99);
  CHECK(p1.candidates.shape() == ad::Shape{5, 2, 12, 2});
  CHECK(sample_predictions(m, X, 5, 99).candidates == p1.candidates);
  CHECK_FALSE(sample_predictions(m, X, 5, 100).candidates == p1.candidates);

  SUBCASE("zero-variance sample equals prior-mean decode") {
    const std::size_t bi = m.params().index("prior_log_std.bias");
    const std::size_t wi = m.params().index("prior_log_std.weight");
    m.params().set(wi, Tensor::zeros(m.params()[wi].shape()));
    m.params().set(bi, Tensor::filled(m.params()[bi].shape(), -1e3));  // clamped to σ = 1e-4
    const auto p = sample_predictions(m, X, 1, 1);
    CHECK(max_abs_diff(p.candidates.reshaped({2, 12, 2}), predict_deterministic(m, X)) < 1e-2);
  }
  SUBCASE("candidate spread is positive") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto p = sample_predictions(m, X, 4, seed);
      double spread = 0.0;
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j)
          for (std::size_t t = 0; t < 12; ++t) spread += (p.at(i, 0, t) - p.at(j, 0, t)).norm();
      CHECK(spread > 0.0);
    }
  }
}

TEST_CASE("CVAE loss") {
  CvaeModel m(toy_arch());
  const Scene s = cruise_scene(12, 2, 3);
  const Tensor X = rows(s.history), Y = rows(s.future);

  SUBCASE("diversity is zero when a candidate is exact") {
    Graph g;
    const Var c = g.constant(Tensor::matrix(4, 6, std::vector<double>(24, 3.0)));
    std::vector<double> yv(12, 3.0);
    CHECK(min_k_sq_error(c, Tensor::matrix(2, 6, yv), 2).value().item() == 0.0);
    std::vector<double> mixed(24, 0.0);
    for (std::size_t i = 12; i < 24; ++i) mixed[i] = 3.0;
    CHECK(min_k_sq_error(g.constant(Tensor::matrix(4, 6, mixed)), Tensor::matrix(2, 6, yv), 2).value().item() == 0.0);
  }
  SUBCASE("seeded loss is reproducible") {
    CHECK(loss_value(m, X, Y, 3, 5) == loss_value(m, X, Y, 3, 5));
    CHECK(loss_value(m, X, Y, 3, 5) != loss_value(m, X, Y, 3, 6));
  }
  SUBCASE("terms add up") {
    Graph g;
    const auto b = nn::bind(g, m.params(), false);
    const auto t = m.loss_terms(b, g.constant(X), Y, 3, 5);
    CHECK(t.kl.value().item() >= 0.0);
    CHECK(t.recon.value().item() >= 0.0);
    CHECK(t.total.value().item() ==
          doctest::Approx(t.recon.value().item() + t.kl.value().item() + t.diversity.value().item()));
  }
  SUBCASE("gradient w.r.t. all parameters") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      CvaeModel toy(toy_arch(Family::Cvae, seed + 20));
      const Scene sc = cruise_scene(seed + 40, 2, 3);
      const Tensor Xs = rows(sc.history), Ys = rows(sc.future);
      const auto rep = ad::gradient_check(
          [&](Graph& g, Var flat) {
            const auto b = nn::bind_flat(g, flat, toy.params());
            return toy.loss_total(b, g.constant(Xs), Ys, 3, seed);
          },
          nn::flatten(toy.params()));
      CHECK(rep.pass);
      CHECK(rep.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("cGAN") {
  CganModel m(toy_arch(Family::Cgan));
  const Scene s = cruise_scene(13, 2, 3);
  const Tensor X = rows(s.history), Y = rows(s.future);
  const Tensor Z = standard_normal(2, 2, 3);
  CHECK(decode(m, X, Z) == decode(m, X, Z));
  CHECK_FALSE(m.has_posterior());

  SUBCASE("zero generator head is stationary") {
    zero_params(m.params(), "dec");
    const Tensor out = decode(m, X, Z);
    for (std::size_t t = 0; t < 3; ++t) CHECK(out[t * 2] == s.hist(0, 3).x);
  }
  SUBCASE("deterministic latent is zero") {
    CHECK(predict_deterministic(m, X) == decode(m, X, Tensor::zeros({2, 2})));
  }
  SUBCASE("D = 0.5 gives 2 ln 2") {
    zero_params(m.disc_params(), "disc.head2");
    Graph g;
    const auto b = nn::bind(g, m.params(), false);
    const auto d = nn::bind(g, m.disc_params(), false);
    const auto l = m.loss_gan(b, d, g.constant(X), Y, 3, 1);
    CHECK(l.disc.value().item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    CHECK(l.adversarial.value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("frozen half-discriminator leaves only the diversity gradient") {
    zero_params(m.disc_params(), "disc.head2");
    Graph g;
    const auto b = nn::bind(g, m.params(), true);
    const auto d = nn::bind(g, m.disc_params(), false);
    const auto l = m.loss_gan(b, d, g.constant(X), Y, 3, 1);
    const auto g_gen = nn::gradients(g.backward(l.gen), b);
    const auto g_div = nn::gradients(g.backward(l.diversity), b);
    for (std::size_t i = 0; i < g_gen.size(); ++i) CHECK(max_abs_diff(g_gen[i], g_div[i]) < 1e-12);
  }
  SUBCASE("gradients") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      CganModel toy(toy_arch(Family::Cgan, seed + 30));
      const auto disc = ad::gradient_check(
          [&](Graph& g, Var flat) {
            const auto b = nn::bind(g, toy.params(), false);
            const auto d = nn::bind_flat(g, flat, toy.disc_params());
            return toy.loss_gan(b, d, g.constant(X), Y, 2, seed).disc;
          },
          nn::flatten(toy.disc_params()));
      CHECK(disc.pass);
      const auto gen = ad::gradient_check(
          [&](Graph& g, Var flat) {
            const auto b = nn::bind_flat(g, flat, toy.params());
            return toy.loss_total(b, g.constant(X), Y, 2, seed);
          },
          nn::flatten(toy.params()));
      CHECK(gen.pass);
      const auto wrt_z = ad::gradient_check(
          [&](Graph& g, Var z) {
            const auto b = nn::bind(g, toy.params(), false);
            return ad::sqnorm(toy.generate(b, g.constant(X), ad::reshape(z, {2, 2})) - g.constant(Y));
          },
          Z.reshaped({4}));
      CHECK(wrt_z.pass);
    }
  }
}

TEST_CASE("checkpoint round trip") {
  for (Family f : {Family::Cvae, Family::Cgan}) {
    auto m = make_model(toy_arch(f, 77));
    const auto path = std::filesystem::temp_directory_path() / "robusttraj_test_ckpt.json";
    save_checkpoint(path, *m);
    auto back = load_checkpoint(path);
    CHECK(back->arch() == m->arch());
    CHECK(back->params() == m->params());
    if (f == Family::Cgan) {
      CHECK(dynamic_cast<CganModel&>(*back).disc_params() == dynamic_cast<CganModel&>(*m).disc_params());
    }
  }
  SUBCASE("validation") {
    auto m = make_model(toy_arch());
    auto j = checkpoint_json(*m);
    auto bad = j;
    bad["format_version"] = 2;
    CHECK_THROWS_AS(model_from_checkpoint(bad), FormatVersionError);
    bad = j;
    bad["arch"]["latent_dim"] = 0;
    CHECK_THROWS_WITH_AS(model_from_checkpoint(bad), doctest::Contains("latent_dim"), ValidationError);
    bad = j;
    bad["params"]["enc1.weight"].erase(0);
    CHECK_THROWS_WITH_AS(model_from_checkpoint(bad), doctest::Contains("enc1.weight"), ValidationError);
    bad = j;
    bad["params"]["extra"] = {1.0};
    CHECK_THROWS_AS(model_from_checkpoint(bad), ValidationError);
    bad = j;
    bad["arch"]["kind"] = "diffusion";
    CHECK_THROWS_AS(model_from_checkpoint(bad), ValidationError);
  }
}

TEST_CASE("CVAE learns cruise scenes") {
  CvaeModel m(Arch{});
  std::vector<Scene> scenes;
  for (std::uint64_t i = 0; i < 64; ++i) scenes.push_back(cruise_scene(1000 + i, 1 + i % 3));
  auto total = [&] {
    double sum = 0.0;
    for (std::size_t i = 0; i < scenes.size(); ++i)
      sum += loss_value(m, rows(scenes[i].history), rows(scenes[i].future), 5, i);
    return sum / double(scenes.size());
  };
  const double before = total();
  nn::Adam opt;
  for (std::size_t step = 0; step < 200; ++step) {
    Graph g;
    const auto b = nn::bind(g, m.params(), true);
    Var loss;
    for (std::size_t j = 0; j < 8; ++j) {
      const std::size_t i = (step * 8 + j) % scenes.size();
      const Var l = m.loss_total(b, g.constant(rows(scenes[i].history)), rows(scenes[i].future), 5, step * 64 + j);
      loss = loss.valid() ? loss + l : l;
    }
    opt.step(m.params(), nn::gradients(g.backward(ad::scale(loss, 1.0 / 8)), b));
  }
  const double after = total();
  MESSAGE("loss " << before << " -> " << after);
  CHECK(after <= 0.5 * before);
}
