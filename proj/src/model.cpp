#include "robusttraj/model.hpp"

#include <fstream>
#include <random>

#include "robusttraj/common.hpp"

namespace robusttraj::model {

using ad::Graph;
using ad::Tensor;
using ad::Var;
using nlohmann::json;

const char* to_string(Family f) { return f == Family::Cvae ? "cvae" : "cgan"; }

Family family_from_string(const std::string& s) {
  if (s == "cvae") return Family::Cvae;
  if (s == "cgan") return Family::Cgan;
  throw ValidationError("arch.kind", "unknown model kind '" + s + "'");
}

void Arch::validate() const {
  if (history_len < 2) throw ValidationError("arch.history_len", "must be >= 2");
  if (future_len < 1) throw ValidationError("arch.future_len", "must be >= 1");
  if (hidden_dim < 1) throw ValidationError("arch.hidden_dim", "must be >= 1");
  if (latent_dim < 1) throw ValidationError("arch.latent_dim", "must be >= 1");
  if (!(input_scale > 0.0) || !std::isfinite(input_scale)) throw ValidationError("arch.input_scale", "must be > 0");
  if (!(output_scale > 0.0) || !std::isfinite(output_scale)) {
    throw ValidationError("arch.output_scale", "must be > 0");
  }
  if (!(diversity_weight >= 0.0)) throw ValidationError("arch.diversity_weight", "must be >= 0");
}

json Arch::to_json() const {
  return {{"kind", to_string(family)},
          {"history_len", history_len},
          {"future_len", future_len},
          {"hidden_dim", hidden_dim},
          {"latent_dim", latent_dim},
          {"input_scale", input_scale},
          {"output_scale", output_scale},
          {"diversity_weight", diversity_weight},
          {"init_seed", init_seed}};
}

Arch Arch::from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("arch", "expected an object");
  Arch a;
  auto req = [&](const char* key) -> const json& {
    if (!j.contains(key)) throw ValidationError(std::string("arch.") + key, "missing");
    return j.at(key);
  };
  try {
    a.family = family_from_string(req("kind").get<std::string>());
    a.history_len = req("history_len").get<std::size_t>();
    a.future_len = req("future_len").get<std::size_t>();
    a.hidden_dim = req("hidden_dim").get<std::size_t>();
    a.latent_dim = req("latent_dim").get<std::size_t>();
    a.input_scale = req("input_scale").get<double>();
    a.output_scale = req("output_scale").get<double>();
    a.diversity_weight = j.value("diversity_weight", 1.0);
    a.init_seed = j.value("init_seed", std::uint64_t{1});
  } catch (const json::exception& e) {
    throw ValidationError("arch", e.what());
  }
  a.validate();
  return a;
}

// ---- shared pieces -----------------------------------------------------------

namespace {

// Stacks K copies of an N-row matrix: (K·N) × N.
Tensor replicate_matrix(std::size_t N, std::size_t K) {
  std::vector<double> v(K * N * N, 0.0);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < N; ++i) v[(k * N + i) * N + i] = 1.0;
  return Tensor::matrix(K * N, N, std::move(v));
}

Var replicate(Var x, std::size_t K) {
  if (K == 1) return x;
  return ad::matmul(x.graph().constant(replicate_matrix(x.shape()[0], K)), x);
}

// Mean over the other agents; all-zero for a single agent.
Tensor pool_matrix(std::size_t N) {
  std::vector<double> v(N * N, 0.0);
  if (N > 1)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j)
        if (i != j) v[i * N + j] = 1.0 / double(N - 1);
  return Tensor::matrix(N, N, std::move(v));
}

std::uint64_t layer_seed(std::uint64_t base, const std::string& name) { return derive_seed(base, hash_string(name)); }

void check_rows(Var X, std::size_t H, const char* what) {
  const auto& s = X.shape();
  if (s.size() != 2 || s[1] != 2 * H || s[0] == 0) {
    throw ad::ShapeError(std::string(what) + ": expected N×" + std::to_string(2 * H) + ", got " + ad::shape_str(s));
  }
}

}  // namespace

Tensor standard_normal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = nd(rng);
  return Tensor::matrix(rows, cols, std::move(v));
}

Var kl_diag_gaussian(const GaussianVars& q, const GaussianVars& p) {
  if (q.mean.shape() != p.mean.shape() || q.log_std.shape() != p.log_std.shape() ||
      q.mean.shape() != q.log_std.shape()) {
    throw ad::ShapeError("kl: mismatched Gaussian shapes");
  }
  // log σp − log σq + (σq² + (μq − μp)²) / (2σp²) − ½
  const double n = double(ad::shape_size(q.mean.shape()));
  const Var log_ratio = ad::sum(p.log_std - q.log_std);
  const Var var_ratio = ad::sum(ad::exp(2.0 * (q.log_std - p.log_std)));
  const Var z = (q.mean - p.mean) * ad::exp(-p.log_std);
  return ad::add_scalar(log_ratio + 0.5 * var_ratio + 0.5 * ad::sqnorm(z), -0.5 * n);
}

Var min_k_sq_error(Var candidates, const Tensor& Y, std::size_t K) {
  const std::size_t N = Y.dim(0), W = Y.dim(1);
  if (candidates.shape() != ad::Shape{K * N, W}) {
    throw ad::ShapeError("min_k: candidates " + ad::shape_str(candidates.shape()) + " vs K=" + std::to_string(K) +
                         " and Y " + ad::shape_str(Y.shape()));
  }
  Graph& g = candidates.graph();
  const Var err = candidates - replicate(g.constant(Y), K);
  const Var per_k = ad::sum(ad::reshape(err * err, {K, N * W}), 1);
  return ad::min_over_axis(per_k, 0);
}

TrajectoryModel::TrajectoryModel(Arch arch) : arch_(std::move(arch)) {
  arch_.validate();
  const std::size_t H = arch_.history_len, T = arch_.future_len;
  std::vector<double> rel(4 * H * H, 0.0), ltf(4 * H * T, 0.0), cs(4 * T * T, 0.0);
  for (std::size_t i = 0; i < 2 * H; ++i) rel[i * 2 * H + i] = 1.0;
  for (std::size_t t = 0; t < H; ++t)
    for (std::size_t c = 0; c < 2; ++c) rel[(2 * (H - 1) + c) * 2 * H + 2 * t + c] -= 1.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < 2; ++c) ltf[(2 * (H - 1) + c) * 2 * T + 2 * t + c] = 1.0;
  for (std::size_t s = 0; s < T; ++s)
    for (std::size_t t = s; t < T; ++t)
      for (std::size_t c = 0; c < 2; ++c) cs[(2 * s + c) * 2 * T + 2 * t + c] = 1.0;
  rel_hist_ = Tensor::matrix(2 * H, 2 * H, std::move(rel));
  last_to_future_ = Tensor::matrix(2 * H, 2 * T, std::move(ltf));
  cumsum_ = Tensor::matrix(2 * T, 2 * T, std::move(cs));

  const std::uint64_t s = arch_.init_seed;
  const std::size_t hd = arch_.hidden_dim;
  enc1_ = nn::make_dense(params_, "enc1", 2 * H, hd, layer_seed(s, "enc1"));
  enc2_ = nn::make_dense(params_, "enc2", hd, hd, layer_seed(s, "enc2"));
  dec1_ = nn::make_dense(params_, "dec1", arch_.context_dim() + arch_.latent_dim, hd, layer_seed(s, "dec1"));
  dec2_ = nn::make_dense(params_, "dec2", hd, 2 * T, layer_seed(s, "dec2"));
}

std::vector<std::pair<std::string, nn::ParamSet*>> TrajectoryModel::param_groups() { return {{"", &params_}}; }

Var TrajectoryModel::encode(const nn::Bound& b, const nn::Dense& l1, const nn::Dense& l2, Var X) const {
  check_rows(X, arch_.history_len, "context");
  Graph& g = b.graph;
  const std::size_t N = X.shape()[0];
  const Var rel = arch_.input_scale * ad::matmul(X, g.constant(rel_hist_));
  const Var e = ad::tanh(nn::apply(b, l2, ad::tanh(nn::apply(b, l1, rel))));
  const Var pooled = ad::matmul(g.constant(pool_matrix(N)), e);
  return ad::concat({e, pooled}, 1);
}

Var TrajectoryModel::context(const nn::Bound& b, Var X) const { return encode(b, enc1_, enc2_, X); }

Var TrajectoryModel::relative_future(Var X, Var Y) const {
  const std::size_t rows = Y.shape()[0];
  const std::size_t K = rows / X.shape()[0];
  return Y - ad::matmul(replicate(X, K), X.graph().constant(last_to_future_));
}

Var TrajectoryModel::decode(const nn::Bound& b, Var X, Var C, Var Z) const {
  check_rows(X, arch_.history_len, "decode");
  const std::size_t N = X.shape()[0];
  if (C.shape() != ad::Shape{N, arch_.context_dim()}) {
    throw ad::ShapeError("decode: context shape " + ad::shape_str(C.shape()));
  }
  const auto& zs = Z.shape();
  if (zs.size() != 2 || zs[1] != arch_.latent_dim || zs[0] == 0 || zs[0] % N != 0) {
    throw ad::ShapeError("decode: latent shape " + ad::shape_str(zs) + " for " + std::to_string(N) + " agents");
  }
  const std::size_t K = zs[0] / N;
  Graph& g = b.graph;
  const Var h = ad::tanh(nn::apply(b, dec1_, ad::concat({replicate(C, K), Z}, 1)));
  const Var steps = arch_.output_scale * nn::apply(b, dec2_, h);
  const Var origin = ad::matmul(replicate(X, K), g.constant(last_to_future_));
  return origin + ad::matmul(steps, g.constant(cumsum_));
}

// ---- CVAE --------------------------------------------------------------------

CvaeModel::CvaeModel(Arch arch) : TrajectoryModel(std::move(arch)) {
  arch_.family = Family::Cvae;
  const std::uint64_t s = arch_.init_seed;
  const std::size_t cd = arch_.context_dim(), hd = arch_.hidden_dim, L = arch_.latent_dim;
  const std::size_t T = arch_.future_len;
  prior_mu_ = nn::make_dense(params_, "prior_mu", cd, L, layer_seed(s, "prior_mu"), 0.1);
  prior_ls_ = nn::make_dense(params_, "prior_log_std", cd, L, layer_seed(s, "prior_log_std"), 0.1);
  post1_ = nn::make_dense(params_, "post1", cd + 2 * T, hd, layer_seed(s, "post1"));
  post_mu_ = nn::make_dense(params_, "post_mu", hd, L, layer_seed(s, "post_mu"), 0.1);
  post_ls_ = nn::make_dense(params_, "post_log_std", hd, L, layer_seed(s, "post_log_std"), 0.1);
}

GaussianVars CvaeModel::prior(const nn::Bound& b, Var C) const {
  return {nn::apply(b, prior_mu_, C), ad::clamp(nn::apply(b, prior_ls_, C), kLogSigmaMin, kLogSigmaMax)};
}

GaussianVars CvaeModel::posterior(const nn::Bound& b, Var X, Var C, Var Y) const {
  if (Y.shape() != ad::Shape{X.shape()[0], 2 * arch_.future_len}) {
    throw ad::ShapeError("posterior: future shape " + ad::shape_str(Y.shape()));
  }
  const Var rel = arch_.input_scale * relative_future(X, Y);
  const Var h = ad::tanh(nn::apply(b, post1_, ad::concat({C, rel}, 1)));
  return {nn::apply(b, post_mu_, h), ad::clamp(nn::apply(b, post_ls_, h), kLogSigmaMin, kLogSigmaMax)};
}

Var CvaeModel::deterministic_latent(const nn::Bound& b, Var C) const { return prior(b, C).mean; }

Var CvaeModel::sample_latent(const nn::Bound& b, Var C, std::size_t K, std::uint64_t seed) const {
  const GaussianVars p = prior(b, C);
  const Var u = b.graph.constant(standard_normal(K * C.shape()[0], arch_.latent_dim, seed));
  return replicate(p.mean, K) + replicate(ad::exp(p.log_std), K) * u;
}

CvaeModel::Terms CvaeModel::loss_terms(const nn::Bound& b, Var X, const Tensor& Y, std::size_t K,
                                       std::uint64_t seed) const {
  if (K == 0) throw std::invalid_argument("loss_total: K must be >= 1");
  Graph& g = b.graph;
  const Var C = context(b, X);
  const Var Yv = g.constant(Y);
  const GaussianVars p = prior(b, C);
  const GaussianVars q = posterior(b, X, C, Yv);
  const std::size_t N = X.shape()[0], L = arch_.latent_dim;
  const Var zq = q.mean + ad::exp(q.log_std) * g.constant(standard_normal(N, L, derive_seed(seed, 1)));
  Terms t;
  t.recon = ad::sqnorm(decode(b, X, C, zq) - Yv);
  t.kl = kl_diag_gaussian(q, p);
  const Var u = g.constant(standard_normal(K * N, L, derive_seed(seed, 2)));
  const Var zp = replicate(p.mean, K) + replicate(ad::exp(p.log_std), K) * u;
  t.diversity = arch_.diversity_weight * min_k_sq_error(decode(b, X, C, zp), Y, K);
  t.total = t.recon + t.kl + t.diversity;
  return t;
}

Var CvaeModel::loss_total(const nn::Bound& b, Var X, const Tensor& Y, std::size_t K, std::uint64_t seed) const {
  return loss_terms(b, X, Y, K, seed).total;
}

// ---- cGAN --------------------------------------------------------------------

CganModel::CganModel(Arch arch) : TrajectoryModel(std::move(arch)) {
  arch_.family = Family::Cgan;
  const std::uint64_t s = arch_.init_seed;
  const std::size_t H = arch_.history_len, T = arch_.future_len, hd = arch_.hidden_dim;
  denc1_ = nn::make_dense(disc_, "disc.enc1", 2 * H, hd, layer_seed(s, "disc.enc1"));
  denc2_ = nn::make_dense(disc_, "disc.enc2", hd, hd, layer_seed(s, "disc.enc2"));
  dhead1_ = nn::make_dense(disc_, "disc.head1", arch_.context_dim() + 2 * T, hd, layer_seed(s, "disc.head1"));
  dhead2_ = nn::make_dense(disc_, "disc.head2", hd, 1, layer_seed(s, "disc.head2"), 0.1);
}

std::vector<std::pair<std::string, nn::ParamSet*>> CganModel::param_groups() {
  return {{"", &params_}, {"disc", &disc_}};
}

Var CganModel::disc_logits(const nn::Bound& d, Var X, Var Y_rows, std::size_t K) const {
  const std::size_t N = X.shape()[0];
  if (Y_rows.shape() != ad::Shape{K * N, 2 * arch_.future_len}) {
    throw ad::ShapeError("discriminator: candidates " + ad::shape_str(Y_rows.shape()));
  }
  const Var Cd = encode(d, denc1_, denc2_, X);
  const Var rel = arch_.input_scale * relative_future(X, Y_rows);
  const Var h = ad::tanh(nn::apply(d, dhead1_, ad::concat({replicate(Cd, K), rel}, 1)));
  return nn::apply(d, dhead2_, h);
}

Var CganModel::generate(const nn::Bound& b, Var X, Var Z) const { return decode(b, X, context(b, X), Z); }

CganModel::Losses CganModel::loss_gan(const nn::Bound& b, const nn::Bound& d, Var X, const Tensor& Y,
                                      std::size_t K, std::uint64_t seed) const {
  if (K == 0) throw std::invalid_argument("loss_gan: K must be >= 1");
  Graph& g = b.graph;
  const Var C = context(b, X);
  const Var fake = decode(b, X, C, sample_latent(b, C, K, seed));
  const Var real_logit = disc_logits(d, X, g.constant(Y), 1);
  const Var fake_logit = disc_logits(d, X, fake, K);
  Losses l;
  // −log D = softplus(−l), −log(1 − D) = softplus(l)
  l.disc = ad::mean(ad::softplus(-real_logit)) + ad::mean(ad::softplus(fake_logit));
  l.adversarial = ad::mean(ad::softplus(-fake_logit));
  l.diversity = arch_.diversity_weight * min_k_sq_error(fake, Y, K);
  l.gen = l.adversarial + l.diversity;
  return l;
}

Var CganModel::deterministic_latent(const nn::Bound& b, Var C) const {
  return b.graph.constant(Tensor::zeros({C.shape()[0], arch_.latent_dim}));
}

Var CganModel::sample_latent(const nn::Bound& b, Var C, std::size_t K, std::uint64_t seed) const {
  return b.graph.constant(standard_normal(K * C.shape()[0], arch_.latent_dim, seed));
}

Var CganModel::loss_total(const nn::Bound& b, Var X, const Tensor& Y, std::size_t K, std::uint64_t seed) const {
  const nn::Bound d = nn::bind(b.graph, disc_, false);
  return loss_gan(b, d, X, Y, K, seed).gen;
}

std::unique_ptr<TrajectoryModel> make_model(const Arch& arch) {
  if (arch.family == Family::Cvae) return std::make_unique<CvaeModel>(arch);
  return std::make_unique<CganModel>(arch);
}

// ---- tensor-level helpers ----------------------------------------------------

Tensor as_rows(const Tensor& tracks) {
  if (tracks.rank() != 3 || tracks.dim(2) != 2) throw ad::ShapeError("as_rows: expected N×L×2, got " + ad::shape_str(tracks.shape()));
  return tracks.reshaped({tracks.dim(0), 2 * tracks.dim(1)});
}

namespace {
Tensor to_tracks(const Tensor& rows, std::size_t K, std::size_t N) {
  const std::size_t T = rows.dim(1) / 2;
  return K == 1 ? rows.reshaped({N, T, 2}) : rows.reshaped({K, N, T, 2});
}
}  // namespace

Tensor encode_context(const TrajectoryModel& m, const Tensor& X) {
  Graph g;
  const auto b = nn::bind(g, m.params(), false);
  return m.context(b, g.constant(X)).value();
}

Gaussian prior(const CvaeModel& m, const Tensor& X) {
  Graph g;
  const auto b = nn::bind(g, m.params(), false);
  const auto p = m.prior(b, m.context(b, g.constant(X)));
  return {p.mean.value(), ad::exp(p.log_std).value()};
}

Gaussian posterior(const CvaeModel& m, const Tensor& X, const Tensor& Y) {
  Graph g;
  const auto b = nn::bind(g, m.params(), false);
  const Var Xv = g.constant(X);
  const auto q = m.posterior(b, Xv, m.context(b, Xv), g.constant(Y));
  return {q.mean.value(), ad::exp(q.log_std).value()};
}

Tensor decode(const TrajectoryModel& m, const Tensor& X, const Tensor& Z) {
  Graph g;
  const auto b = nn::bind(g, m.params(), false);
  const Var Xv = g.constant(X);
  return to_tracks(m.decode(b, Xv, m.context(b, Xv), g.constant(Z)).value(), 1, X.dim(0));
}

Tensor predict_deterministic(const TrajectoryModel& m, const Tensor& X) {
  Graph g;
  const auto b = nn::bind(g, m.params(), false);
  const Var Xv = g.constant(X);
  const Var C = m.context(b, Xv);
  return to_tracks(m.decode(b, Xv, C, m.deterministic_latent(b, C)).value(), 1, X.dim(0));
}

PredictionSet sample_predictions(const TrajectoryModel& m, const Tensor& X, std::size_t K, std::uint64_t seed) {
  if (K == 0) throw std::invalid_argument("sample_predictions: K must be >= 1");
  Graph g;
  const auto b = nn::bind(g, m.params(), false);
  const Var Xv = g.constant(X);
  const Var C = m.context(b, Xv);
  const Tensor rows = m.decode(b, Xv, C, m.sample_latent(b, C, K, seed)).value();
  const std::size_t T = rows.dim(1) / 2;
  return {rows.reshaped({K, X.dim(0), T, 2})};
}

double loss_value(const TrajectoryModel& m, const Tensor& X, const Tensor& Y, std::size_t K, std::uint64_t seed) {
  Graph g;
  const auto b = nn::bind(g, m.params(), false);
  return m.loss_total(b, g.constant(X), Y, K, seed).value().item();
}

// ---- checkpoints -------------------------------------------------------------

json checkpoint_json(TrajectoryModel& m) {
  json params = json::object();
  for (auto& [prefix, set] : m.param_groups()) {
    (void)prefix;
    for (std::size_t i = 0; i < set->size(); ++i) params[set->name(i)] = (*set)[i].data();
  }
  return {{"format_version", kCheckpointFormatVersion}, {"arch", m.arch().to_json()}, {"params", params}};
}

std::unique_ptr<TrajectoryModel> model_from_checkpoint(const json& j) {
  if (!j.is_object()) throw ValidationError("checkpoint", "expected an object");
  if (!j.contains("format_version")) throw ValidationError("checkpoint.format_version", "missing");
  const int v = j.at("format_version").get<int>();
  if (v != kCheckpointFormatVersion) throw FormatVersionError("checkpoint.format_version", v, kCheckpointFormatVersion);
  if (!j.contains("arch")) throw ValidationError("checkpoint.arch", "missing");
  auto m = make_model(Arch::from_json(j.at("arch")));
  if (!j.contains("params") || !j.at("params").is_object()) throw ValidationError("checkpoint.params", "missing");
  const json& params = j.at("params");
  std::size_t expected = 0;
  for (auto& [prefix, set] : m->param_groups()) {
    (void)prefix;
    expected += set->size();
    for (std::size_t i = 0; i < set->size(); ++i) {
      const std::string& name = set->name(i);
      const std::string path = "checkpoint.params." + name;
      if (!params.contains(name)) throw ValidationError(path, "missing");
      std::vector<double> vals;
      try {
        vals = params.at(name).get<std::vector<double>>();
      } catch (const json::exception& e) {
        throw ValidationError(path, e.what());
      }
      if (vals.size() != (*set)[i].size()) {
        throw ValidationError(path, "expected " + std::to_string((*set)[i].size()) + " values, got " +
                                        std::to_string(vals.size()));
      }
      try {
        set->set(i, Tensor((*set)[i].shape(), std::move(vals)));
      } catch (const std::invalid_argument& e) {
        throw ValidationError(path, e.what());
      }
    }
  }
  if (params.size() != expected) throw ValidationError("checkpoint.params", "unexpected extra parameters");
  return m;
}

void save_checkpoint(const std::filesystem::path& path, TrajectoryModel& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << checkpoint_json(m).dump() << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

std::unique_ptr<TrajectoryModel> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("checkpoint", e.what());
  }
  return model_from_checkpoint(j);
}

}  // namespace robusttraj::model
