#include "robusttraj/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <sstream>

#include "robusttraj/json_io.hpp"

namespace robusttraj::experiment {

using nlohmann::json;

namespace {

// ---- small section serializers ---------------------------------------------------------

json limits_json(const bicycle::Limits& l) {
  return {{"curvature_max", l.curvature_max}, {"accel_max", l.accel_max}, {"curvature_rate_max", l.curvature_rate_max}};
}

LaneFamily lane_family_from_string(const std::string& s) {
  for (LaneFamily f : {LaneFamily::Straight, LaneFamily::Curve, LaneFamily::Intersection})
    if (s == to_string(f)) return f;
  throw ValidationError("data.generator.lane_families", "unknown lane family '" + s + "'");
}

json generator_json(const GeneratorConfig& g) {
  std::vector<std::string> fams;
  for (LaneFamily f : g.lane_families) fams.emplace_back(to_string(f));
  return {{"min_agents", g.min_agents},   {"max_agents", g.max_agents},     {"history_len", g.history_len},
          {"future_len", g.future_len},   {"dt", g.dt},                     {"v_max", g.v_max},
          {"min_speed", g.min_speed},     {"max_speed", g.max_speed},       {"noise_std", g.noise_std},
          {"lane_width", g.lane_width},   {"lane_families", fams},          {"behavior_weights", g.behavior_weights}};
}

json augment_json(const augment::AugConfig& a) {
  return {{"gamma", a.gamma},
          {"clip", a.clip},
          {"steps", a.steps},
          {"step_size", a.step_size},
          {"warm_start_steps", a.warm_start_steps},
          {"max_fit_rmse", a.max_fit_rmse},
          {"lane_check", a.lane_check},
          {"seed", a.seed}};
}

// Rethrows a section's validation error with the section prefix on its path.
template <class F>
auto in_section(const std::string& section, F&& f) {
  try {
    return f();
  } catch (const ValidationError& e) {
    const std::string& p = e.path();
    if (p == section || p.rfind(section + ".", 0) == 0) throw;
    std::string msg = e.what();
    if (msg.rfind(p + ": ", 0) == 0) msg = msg.substr(p.size() + 2);
    // Module validators name their own section ("generator.dt"); keep the leaf.
    const auto dot = p.find('.');
    const std::string leaf = dot == std::string::npos ? p : p.substr(dot + 1);
    const bool own_prefix = dot != std::string::npos && (p.rfind("generator.", 0) == 0 || p.rfind("probe.", 0) == 0 ||
                                                         p.rfind("planner.", 0) == 0 || p.rfind("augment.", 0) == 0);
    // A bare name (e.g. from an enum parser) refers to the section itself.
    if (dot == std::string::npos) throw ValidationError(section, msg);
    throw ValidationError(section + "." + (own_prefix ? leaf : p), msg);
  }
}

const char* json_kind(const json& j) {
  if (j.is_object()) return "an object";
  if (j.is_array()) return "an array";
  if (j.is_boolean()) return "a boolean";
  if (j.is_number_integer()) return "a non-negative integer";
  if (j.is_number()) return "a number";
  if (j.is_string()) return "a string";
  return "a value";
}

// Structural check of `given` against the fully populated defaults.
void check_against(const json& given, const json& tmpl, const std::string& path) {
  auto fail = [&] { throw ValidationError(path, std::string("expected ") + json_kind(tmpl)); };
  if (tmpl.is_object()) {
    if (!given.is_object()) fail();
    for (const auto& [k, v] : given.items()) {
      const std::string p = path.empty() ? k : path + "." + k;
      if (!tmpl.contains(k)) throw ValidationError(p, "unknown key");
      check_against(v, tmpl.at(k), p);
    }
  } else if (tmpl.is_array()) {
    if (!given.is_array()) fail();
    if (!tmpl.empty())
      for (std::size_t i = 0; i < given.size(); ++i) check_against(given[i], tmpl[0], path + "[" + std::to_string(i) + "]");
  } else if (tmpl.is_boolean()) {
    if (!given.is_boolean()) fail();
  } else if (tmpl.is_number_integer()) {
    if (!given.is_number_unsigned() && !(given.is_number_integer() && given.get<std::int64_t>() >= 0)) fail();
  } else if (tmpl.is_number()) {
    if (!given.is_number()) fail();
  } else if (tmpl.is_string()) {
    if (!given.is_string()) fail();
  }
}

}  // namespace

std::uint64_t module_seed(std::uint64_t global, const std::string& module) {
  return derive_seed(global, hash_string(module));
}

// ---- ExperimentConfig --------------------------------------------------------------------

json ExperimentConfig::to_json() const {
  json probe_j = probe.config.to_json();
  std::vector<std::string> kinds;
  for (auto k : probe.kinds) kinds.emplace_back(probe::to_string(k));
  probe_j["kinds"] = kinds;
  probe_j["seeds"] = probe.seeds;
  return {{"format_version", kConfigFormatVersion},
          {"seed", seed},
          {"out_dir", out_dir},
          {"data",
           {{"generator", generator_json(data.generator)}, {"train", data.train}, {"val", data.val}, {"test", data.test}}},
          {"train", train.to_json()},
          {"attack",
           {{"kind", attack::to_string(attack.kind)},
            {"eps", attack.eps},
            {"steps", attack.steps},
            {"K", attack.K},
            {"all_agents", attack.all_agents}}},
          {"augment", augment_json(augment)},
          {"planner", planner.to_json()},
          {"simulate", {{"epsilon", simulate.epsilon}, {"frames", simulate.frames}}},
          {"probe", probe_j},
          {"limits", limits_json(limits)}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config", "expected an object");
  const json tmpl = ExperimentConfig{}.to_json();
  check_against(j, tmpl, "");
  if (j.contains("format_version") && j.at("format_version").get<int>() != kConfigFormatVersion) {
    throw FormatVersionError("format_version", j.at("format_version").get<int>(), kConfigFormatVersion);
  }
  json m = tmpl;
  m.merge_patch(j);
  // Arrays are replaced wholesale by merge_patch, objects merged key by key.

  ExperimentConfig c;
  c.seed = m.at("seed").get<std::uint64_t>();
  c.out_dir = m.at("out_dir").get<std::string>();
  if (c.out_dir.empty()) throw ValidationError("out_dir", "must not be empty");
  auto given = [&](const char* section, const char* key) { return j.contains(section) && j.at(section).contains(key); };

  c.limits.curvature_max = m["limits"].at("curvature_max").get<double>();
  c.limits.accel_max = m["limits"].at("accel_max").get<double>();
  c.limits.curvature_rate_max = m["limits"].at("curvature_rate_max").get<double>();
  if (!(c.limits.curvature_max > 0.0) || !(c.limits.accel_max > 0.0) || !(c.limits.curvature_rate_max > 0.0)) {
    throw ValidationError("limits", "bounds must be > 0");
  }

  const json& d = m.at("data");
  const json& g = d.at("generator");
  GeneratorConfig& gc = c.data.generator;
  gc.min_agents = g.at("min_agents").get<std::size_t>();
  gc.max_agents = g.at("max_agents").get<std::size_t>();
  gc.history_len = g.at("history_len").get<std::size_t>();
  gc.future_len = g.at("future_len").get<std::size_t>();
  gc.dt = g.at("dt").get<double>();
  gc.v_max = g.at("v_max").get<double>();
  gc.min_speed = g.at("min_speed").get<double>();
  gc.max_speed = g.at("max_speed").get<double>();
  gc.noise_std = g.at("noise_std").get<double>();
  gc.lane_width = g.at("lane_width").get<double>();
  gc.lane_families.clear();
  for (const auto& f : g.at("lane_families")) gc.lane_families.push_back(lane_family_from_string(f.get<std::string>()));
  gc.behavior_weights = g.at("behavior_weights").get<std::vector<double>>();
  in_section("data.generator", [&] { gc.validate(); });
  c.data.train = d.at("train").get<std::size_t>();
  c.data.val = d.at("val").get<std::size_t>();
  c.data.test = d.at("test").get<std::size_t>();

  json tj = m.at("train");
  if (!given("train", "seed")) tj["seed"] = c.seed;
  c.train = in_section("train", [&] { return train::TrainConfig::from_json(tj); });
  if (c.train.arch.history_len != gc.history_len) {
    throw ValidationError("train.arch.history_len", "must equal data.generator.history_len");
  }
  if (c.train.arch.future_len != gc.future_len) {
    throw ValidationError("train.arch.future_len", "must equal data.generator.future_len");
  }

  const json& a = m.at("attack");
  c.attack.kind = in_section("attack.kind", [&] { return attack::kind_from_string(a.at("kind").get<std::string>()); });
  c.attack.eps = a.at("eps").get<std::vector<double>>();
  if (c.attack.eps.empty()) throw ValidationError("attack.eps", "must not be empty");
  for (double e : c.attack.eps)
    if (!(e >= 0.0) || !std::isfinite(e)) throw ValidationError("attack.eps", "must be finite and >= 0");
  c.attack.steps = a.at("steps").get<std::size_t>();
  c.attack.K = a.at("K").get<std::size_t>();
  if (c.attack.K < 1) throw ValidationError("attack.K", "must be >= 1");
  c.attack.all_agents = a.at("all_agents").get<bool>();

  const json& au = m.at("augment");
  augment::AugConfig& ac = c.augment;
  ac.gamma = au.at("gamma").get<double>();
  ac.clip = au.at("clip").get<double>();
  ac.steps = au.at("steps").get<std::size_t>();
  ac.step_size = au.at("step_size").get<double>();
  ac.warm_start_steps = au.at("warm_start_steps").get<std::size_t>();
  ac.max_fit_rmse = au.at("max_fit_rmse").get<double>();
  ac.lane_check = au.at("lane_check").get<bool>();
  ac.seed = given("augment", "seed") ? au.at("seed").get<std::uint64_t>() : module_seed(c.seed, "augment");
  ac.limits = c.limits;
  in_section("augment", [&] { ac.validate(); });

  json pj = m.at("planner");
  if (!given("planner", "seed")) pj["seed"] = module_seed(c.seed, "planner");
  c.planner = in_section("planner", [&] { return planner::PlannerConfig::from_json(pj); });
  c.planner.limits = c.limits;

  const json& s = m.at("simulate");
  c.simulate.epsilon = s.at("epsilon").get<double>();
  if (!(c.simulate.epsilon >= 0.0) || !std::isfinite(c.simulate.epsilon)) {
    throw ValidationError("simulate.epsilon", "must be finite and >= 0");
  }
  c.simulate.frames = s.at("frames").get<std::size_t>();
  if (c.simulate.frames < 1) throw ValidationError("simulate.frames", "must be >= 1");

  json pr = m.at("probe");
  c.probe.kinds.clear();
  for (const auto& k : pr.at("kinds"))
    c.probe.kinds.push_back(in_section("probe.kinds", [&] { return probe::noise_kind_from_string(k.get<std::string>()); }));
  c.probe.seeds = pr.at("seeds").get<std::vector<std::uint64_t>>();
  if (c.probe.kinds.empty()) throw ValidationError("probe.kinds", "must not be empty");
  if (c.probe.seeds.empty()) throw ValidationError("probe.seeds", "must not be empty");
  pr.erase("kinds");
  pr.erase("seeds");
  c.probe.config = in_section("probe", [&] { return probe::ProbeConfig::from_json(pr); });
  return c;
}

std::string ExperimentConfig::digest() const {
  json j = to_json();
  j.erase("out_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_string(j.dump())));
  return buf;
}

ExperimentConfig resolve_config(const json& file, const std::vector<std::string>& overrides) {
  json j = file.is_null() ? json::object() : file;
  if (!j.is_object()) throw ValidationError("config", "expected an object");
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError(o, "override must look like key.path=value");
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    std::vector<std::string> parts;
    std::stringstream walk(key);
    for (std::string part; std::getline(walk, part, '.');) {
      if (part.empty()) throw ValidationError(key, "empty path component");
      parts.push_back(part);
    }
    if (key.back() == '.') throw ValidationError(key, "empty path component");
    // Intermediate objects are created as needed; the schema check catches
    // anything that does not exist.
    json* node = &j;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      json& next = (*node)[parts[i]];
      if (next.is_null()) next = json::object();
      if (!next.is_object()) throw ValidationError(key, "'" + parts[i] + "' is not an object");
      node = &next;
    }
    (*node)[parts.back()] = value;
  }
  if (const char* env = std::getenv("ROBUSTTRAJ_OUT"); env && *env) j["out_dir"] = env;
  return ExperimentConfig::from_json(j);
}

json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError(path.string(), "malformed JSON");
  return j;
}

// ---- reports --------------------------------------------------------------------------------

std::vector<ReportRow> compare_runs(const std::vector<train::RunReport>& runs, double eps, const std::string& attack) {
  std::map<std::string, ReportRow> by;
  for (const auto& r : runs) {
    const std::string regime = r.run_id.substr(0, r.run_id.rfind("-seed"));
    const train::EvalRow* clean = nullptr;
    const train::EvalRow* adv = nullptr;
    for (const auto& row : r.rows) {
      if (row.attack == "none") clean = &row;
      if (row.attack == attack && std::abs(row.eps - eps) < 1e-12) adv = &row;
    }
    if (!clean || !adv) continue;
    ReportRow& out = by[regime];
    out.regime = regime;
    ++out.runs;
    out.ade += clean->metrics.ade;
    out.fde += clean->metrics.fde;
    out.robust_ade += adv->metrics.ade;
    out.robust_fde += adv->metrics.fde;
    out.drift += adv->drift;
  }
  static const std::vector<std::string> order{"clean", "naive_at", "robusttraj", "robusttraj_aug"};
  std::vector<ReportRow> rows;
  for (auto& [name, row] : by) {
    const double n = static_cast<double>(row.runs);
    row.ade /= n;
    row.fde /= n;
    row.robust_ade /= n;
    row.robust_fde /= n;
    row.drift /= n;
    rows.push_back(row);
  }
  auto rank = [&](const std::string& s) {
    const auto it = std::find(order.begin(), order.end(), s);
    return static_cast<std::size_t>(it - order.begin());
  };
  std::stable_sort(rows.begin(), rows.end(), [&](const ReportRow& a, const ReportRow& b) {
    return rank(a.regime) != rank(b.regime) ? rank(a.regime) < rank(b.regime) : a.regime < b.regime;
  });
  return rows;
}

std::string report_table(const std::vector<ReportRow>& rows, double eps) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-18s %5s %8s %8s %11s %11s %8s\n", "method", "runs", "ADE", "FDE", "robust ADE",
                "robust FDE", "drift");
  os << buf;
  std::snprintf(buf, sizeof buf, "%-18s %5s %8s %8s %11s %11s %8s\n", "", "", "clean", "clean", "", "", "");
  os << buf << "  attacked at eps = " << eps << "\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-18s %5zu %8.3f %8.3f %11.3f %11.3f %8.3f\n", r.regime.c_str(), r.runs, r.ade, r.fde,
                  r.robust_ade, r.robust_fde, r.drift);
    os << buf;
  }
  return os.str();
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << kReportCsvHeader << "\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.regime.c_str(), r.runs, r.ade, r.fde,
                  r.robust_ade, r.robust_fde, r.drift);
    os << buf;
  }
  return os.str();
}

}  // namespace robusttraj::experiment
