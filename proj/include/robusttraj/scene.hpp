#pragma once

// Scenes, datasets, the synthetic scene generator and best-of-K metrics.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "robusttraj/autodiff.hpp"
#include "robusttraj/bicycle.hpp"
#include "robusttraj/common.hpp"

namespace robusttraj {

enum class Split { Train, Val, Test };
enum class Provenance { Real, Synthetic, Augmented };

const char* to_string(Split s);
const char* to_string(Provenance p);
Split split_from_string(const std::string& s);
Provenance provenance_from_string(const std::string& s);

// Controls that regenerate one augmented agent's full H+T trajectory.
struct ControlRecord {
  bicycle::State init;
  bicycle::ControlSequence controls;
  friend bool operator==(const ControlRecord&, const ControlRecord&) = default;
};

struct Scene {
  std::string id;
  double dt = 0.5;
  ad::Tensor history;  // N×H×2, meters
  ad::Tensor future;   // N×T×2, meters
  std::vector<Polygon> lanes;
  std::size_t adversarial_agent = 0;
  Split split = Split::Train;
  Provenance provenance = Provenance::Synthetic;
  // Per agent; set only for augmented agents.
  std::vector<std::optional<ControlRecord>> controls;

  std::size_t num_agents() const { return history.dim(0); }
  std::size_t history_len() const { return history.dim(1); }
  std::size_t future_len() const { return future.dim(1); }
  Vec2 hist(std::size_t agent, std::size_t t) const;
  Vec2 fut(std::size_t agent, std::size_t t) const;
  // History followed by future, H+T points.
  std::vector<Vec2> full_track(std::size_t agent) const;

  // Throws ValidationError naming the failing field.
  void validate(const std::string& path = "scene") const;

  friend bool operator==(const Scene&, const Scene&) = default;
};

// Build N×L×2 tensors from point lists.
ad::Tensor tracks_to_tensor(const std::vector<std::vector<Vec2>>& tracks);

struct Dataset {
  std::vector<Scene> scenes;

  std::vector<const Scene*> split(Split s) const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// ---- generation -------------------------------------------------------------

enum class LaneFamily { Straight, Curve, Intersection };
enum class Behavior { Cruise, SlowDown, LaneChange, Turn };

const char* to_string(LaneFamily f);
const char* to_string(Behavior b);

struct GeneratorConfig {
  std::size_t min_agents = 1;
  std::size_t max_agents = 4;
  std::size_t history_len = 4;
  std::size_t future_len = 12;
  double dt = 0.5;
  double v_max = 20.0;
  double min_speed = 4.0;
  double max_speed = 12.0;
  double noise_std = 0.03;
  double lane_width = 3.5;
  std::vector<LaneFamily> lane_families{LaneFamily::Straight, LaneFamily::Curve, LaneFamily::Intersection};
  // Relative weights for cruise, slow-down, lane-change, turn.
  std::vector<double> behavior_weights{0.4, 0.2, 0.2, 0.2};

  void validate() const;
};

// Deterministic in (config, seed). Agents follow lane centerlines; turning
// agents exist only in intersection scenes. Origin at the history centroid.
Scene generate_synthetic(const GeneratorConfig& config, std::uint64_t seed);

// `count` scenes with ids "<prefix><i>", seeds derived from `seed`.
Dataset generate_dataset(const GeneratorConfig& config, std::size_t train, std::size_t val, std::size_t test,
                         std::uint64_t seed);

// Largest per-step displacement divided by dt over all agents and steps.
double max_step_speed(const Scene& scene);

// ---- metrics ----------------------------------------------------------------

struct PredictionSet {
  ad::Tensor candidates;  // K×N×T×2

  std::size_t k() const { return candidates.dim(0); }
  Vec2 at(std::size_t k, std::size_t agent, std::size_t t) const;
};

struct Metrics {
  double ade = 0.0;
  double fde = 0.0;
  double mr = 0.0;
  double orr = 0.0;
};

inline constexpr double kMissThreshold = 2.0;

// Per agent, the candidate with the smallest mean displacement is selected.
std::vector<std::size_t> best_of_k(const PredictionSet& pred, const ad::Tensor& gt);
double ade(const PredictionSet& pred, const ad::Tensor& gt);
double fde(const PredictionSet& pred, const ad::Tensor& gt);
double miss_rate(const PredictionSet& pred, const ad::Tensor& gt, double threshold = kMissThreshold);
double offroad_rate(const PredictionSet& pred, const ad::Tensor& gt, const std::vector<Polygon>& lanes);
Metrics compute_metrics(const PredictionSet& pred, const ad::Tensor& gt, const std::vector<Polygon>& lanes,
                        double miss_threshold = kMissThreshold);

// Running mean over scenes.
class MetricsAccumulator {
 public:
  void add(const Metrics& m);
  Metrics mean() const;
  std::size_t count() const { return n_; }

 private:
  Metrics sum_;
  std::size_t n_ = 0;
};

// ---- persistence ------------------------------------------------------------

inline constexpr int kDatasetFormatVersion = 1;

// JSON Lines, one scene per line. Round-trips values bitwise.
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
// Throws IoError, FormatVersionError or ValidationError (with "line N" path).
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace robusttraj
