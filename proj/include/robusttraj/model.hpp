#pragma once

// Trajectory predictors: a shared context encoder and displacement decoder,
// specialised into a CVAE (learned conditional prior + posterior) and a cGAN
// (standard-normal latent + discriminator).
//
// Graph-level conventions: a scene history enters as X, an N×2H matrix whose
// row holds x0,y0,x1,y1,... for one agent; futures are N×2T. Decoders accept
// latent rows for K stacked copies of the scene (K·N rows, copy-major).

#include <filesystem>
#include <memory>
#include <string>
#include <utility>

#include "json.hpp"
#include "robusttraj/autodiff.hpp"
#include "robusttraj/nn.hpp"
#include "robusttraj/scene.hpp"

namespace robusttraj::model {

enum class Family { Cvae, Cgan };
const char* to_string(Family f);
Family family_from_string(const std::string& s);

struct Arch {
  Family family = Family::Cvae;
  std::size_t history_len = 4;
  std::size_t future_len = 12;
  std::size_t hidden_dim = 64;
  std::size_t latent_dim = 8;
  // Relative coordinates are multiplied by input_scale before the encoder;
  // decoder outputs are multiplied by output_scale (meters per unit).
  double input_scale = 0.1;
  double output_scale = 1.0;
  double diversity_weight = 1.0;
  std::uint64_t init_seed = 1;

  std::size_t context_dim() const { return 2 * hidden_dim; }
  void validate() const;
  nlohmann::json to_json() const;
  static Arch from_json(const nlohmann::json& j);
  friend bool operator==(const Arch&, const Arch&) = default;
};

inline constexpr double kLogSigmaMin = -9.2;
inline constexpr double kLogSigmaMax = 9.2;

struct GaussianVars {
  ad::Var mean;
  ad::Var log_std;  // already clamped
};

struct Gaussian {
  ad::Tensor mean;
  ad::Tensor std;
};

// Closed-form KL(q || p) for diagonal Gaussians, summed over all entries.
ad::Var kl_diag_gaussian(const GaussianVars& q, const GaussianVars& p);

// min over k of the scene-level squared error between K stacked candidates
// (K·N × 2T) and Y (N × 2T).
ad::Var min_k_sq_error(ad::Var candidates, const ad::Tensor& Y, std::size_t K);

// Seeded standard-normal matrix.
ad::Tensor standard_normal(std::size_t rows, std::size_t cols, std::uint64_t seed);

class TrajectoryModel {
 public:
  explicit TrajectoryModel(Arch arch);
  virtual ~TrajectoryModel() = default;

  const Arch& arch() const { return arch_; }
  Family family() const { return arch_.family; }
  // Parameters trained by the prediction loss (θ and φ for the CVAE, the
  // generator for the cGAN).
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  // Per-agent embedding of the relative history, concatenated with the mean
  // of the other agents' embeddings (zero when alone). N × context_dim.
  ad::Var context(const nn::Bound& b, ad::Var X) const;
  // (C, Z) → absolute positions, K·N × 2T. Z has K·N rows; C has N.
  ad::Var decode(const nn::Bound& b, ad::Var X, ad::Var C, ad::Var Z) const;

  // Maximum-likelihood latent used by the deterministic attack. N × latent.
  virtual ad::Var deterministic_latent(const nn::Bound& b, ad::Var C) const = 0;
  // K·N × latent rows drawn from the model's sampling distribution.
  virtual ad::Var sample_latent(const nn::Bound& b, ad::Var C, std::size_t K, std::uint64_t seed) const = 0;
  // The family's training loss on one scene.
  virtual ad::Var loss_total(const nn::Bound& b, ad::Var X, const ad::Tensor& Y, std::size_t K,
                             std::uint64_t seed) const = 0;
  virtual bool has_posterior() const { return false; }
  virtual std::unique_ptr<TrajectoryModel> clone() const = 0;

  // All parameter sets, with a prefix, for checkpointing.
  virtual std::vector<std::pair<std::string, nn::ParamSet*>> param_groups();

  // Build-time constants, exposed for tests.
  const ad::Tensor& rel_history_matrix() const { return rel_hist_; }
  const ad::Tensor& last_to_future_matrix() const { return last_to_future_; }

 protected:
  // Y − last observed position, N × 2T.
  ad::Var relative_future(ad::Var X, ad::Var Y) const;
  ad::Var encode(const nn::Bound& b, const nn::Dense& l1, const nn::Dense& l2, ad::Var X) const;

  Arch arch_;
  nn::ParamSet params_;
  nn::Dense enc1_, enc2_, dec1_, dec2_;

 private:
  ad::Tensor rel_hist_;        // 2H × 2H
  ad::Tensor last_to_future_;  // 2H × 2T
  ad::Tensor cumsum_;          // 2T × 2T
};

class CvaeModel : public TrajectoryModel {
 public:
  explicit CvaeModel(Arch arch);

  GaussianVars prior(const nn::Bound& b, ad::Var C) const;
  GaussianVars posterior(const nn::Bound& b, ad::Var X, ad::Var C, ad::Var Y) const;

  ad::Var deterministic_latent(const nn::Bound& b, ad::Var C) const override;
  ad::Var sample_latent(const nn::Bound& b, ad::Var C, std::size_t K, std::uint64_t seed) const override;
  ad::Var loss_total(const nn::Bound& b, ad::Var X, const ad::Tensor& Y, std::size_t K,
                     std::uint64_t seed) const override;
  bool has_posterior() const override { return true; }
  std::unique_ptr<TrajectoryModel> clone() const override { return std::make_unique<CvaeModel>(*this); }

  // Loss terms, exposed for tests and reporting.
  struct Terms {
    ad::Var recon, kl, diversity, total;
  };
  Terms loss_terms(const nn::Bound& b, ad::Var X, const ad::Tensor& Y, std::size_t K, std::uint64_t seed) const;

 private:
  nn::Dense prior_mu_, prior_ls_, post1_, post_mu_, post_ls_;
};

class CganModel : public TrajectoryModel {
 public:
  explicit CganModel(Arch arch);

  nn::ParamSet& disc_params() { return disc_; }
  const nn::ParamSet& disc_params() const { return disc_; }

  // Discriminator logit per candidate row. Y_rows has K·N rows.
  ad::Var disc_logits(const nn::Bound& d, ad::Var X, ad::Var Y_rows, std::size_t K) const;
  ad::Var generate(const nn::Bound& b, ad::Var X, ad::Var Z) const;

  struct Losses {
    ad::Var disc, gen, adversarial, diversity;
  };
  // Both losses in one graph; `b` and `d` decide which side is trainable.
  Losses loss_gan(const nn::Bound& b, const nn::Bound& d, ad::Var X, const ad::Tensor& Y, std::size_t K,
                  std::uint64_t seed) const;

  ad::Var deterministic_latent(const nn::Bound& b, ad::Var C) const override;
  ad::Var sample_latent(const nn::Bound& b, ad::Var C, std::size_t K, std::uint64_t seed) const override;
  // Generator loss with the discriminator held constant.
  ad::Var loss_total(const nn::Bound& b, ad::Var X, const ad::Tensor& Y, std::size_t K,
                     std::uint64_t seed) const override;
  std::unique_ptr<TrajectoryModel> clone() const override { return std::make_unique<CganModel>(*this); }
  std::vector<std::pair<std::string, nn::ParamSet*>> param_groups() override;

 private:
  nn::ParamSet disc_;
  nn::Dense denc1_, denc2_, dhead1_, dhead2_;
};

std::unique_ptr<TrajectoryModel> make_model(const Arch& arch);

// ---- tensor-level helpers ----------------------------------------------------

// N×H×2 history → N×2H, N×T×2 future → N×2T.
ad::Tensor as_rows(const ad::Tensor& tracks);

ad::Tensor encode_context(const TrajectoryModel& m, const ad::Tensor& X);
Gaussian prior(const CvaeModel& m, const ad::Tensor& X);
Gaussian posterior(const CvaeModel& m, const ad::Tensor& X, const ad::Tensor& Y);
// Absolute N×T×2 positions for explicit latents (N × latent).
ad::Tensor decode(const TrajectoryModel& m, const ad::Tensor& X, const ad::Tensor& Z);
// Decode at the maximum-likelihood latent. N×T×2.
ad::Tensor predict_deterministic(const TrajectoryModel& m, const ad::Tensor& X);
PredictionSet sample_predictions(const TrajectoryModel& m, const ad::Tensor& X, std::size_t K, std::uint64_t seed);
double loss_value(const TrajectoryModel& m, const ad::Tensor& X, const ad::Tensor& Y, std::size_t K,
                  std::uint64_t seed);

// ---- checkpoints -------------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;

nlohmann::json checkpoint_json(TrajectoryModel& m);
std::unique_ptr<TrajectoryModel> model_from_checkpoint(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, TrajectoryModel& m);
std::unique_ptr<TrajectoryModel> load_checkpoint(const std::filesystem::path& path);

}  // namespace robusttraj::model
