#pragma once

// Run configuration. The file format is JSON with one object per section;
// every key is optional and unknown keys are rejected. Overrides use dotted
// paths, e.g. `train.edit_lr=0.4`.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "repair/distill.hpp"
#include "repair/feedback.hpp"
#include "repair/side_memory.hpp"
#include "repair/ties_merge.hpp"
#include "repair/toy_lm.hpp"

namespace repair {

inline constexpr const char* kConfigSchema = "repair.config.v1";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class RunMode { kQa, kHallucination };

inline std::string to_string(RunMode m) { return m == RunMode::kQa ? "qa" : "hallucination"; }

inline RunMode parse_mode(const std::string& s) {
  if (s == "qa") return RunMode::kQa;
  if (s == "hallucination") return RunMode::kHallucination;
  throw ConfigError("run.mode must be \"qa\" or \"hallucination\", got \"" + s + "\"");
}

struct TrainConfig {
  double edit_lr = 0.5;
  std::size_t n_iter = 30;
  double lambda_a = 1.0;
  std::size_t irrelevant_per_edit = 8;
  /// Edits held by other shards, drawn per member as extra routing negatives.
  std::size_t cross_shard_negatives = 4;
  /// Edits already held by the shard, rehearsed alongside each new batch.
  std::size_t replay = 8;
  /// Edits consumed from the stream per training window.
  std::size_t window = 4;
  double kd_weight = 1.0;    // weight of the feature KD term
  double soft_weight = 0.0;  // weight of the soft logit KD term (needs kd.temperature > 0)
};

/// Trade-off weights of the editing objective. Held for completeness; the
/// training loop realizes the trade-off structurally and never reads them.
struct ObjectiveWeights {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
};

struct RunConfig {
  ModelConfig model;
  std::uint64_t model_seed = 0;
  std::size_t num_shards = 4;
  double mask_ratio = 0.2;
  TrainConfig train;
  RoutingMarginConfig margin;
  KDConfig kd;
  FeedbackConfig feedback;
  MergeConfig merge;
  ObjectiveWeights objective;
  std::size_t n_edits = 30;
  std::uint64_t seed = 0;
  RunMode mode = RunMode::kQa;
  std::size_t eval_every = 10;
  std::size_t rephrases_per_fact = 2;
  std::size_t unrelated_pool = 200;
  std::size_t calibration_pool = 200;
  double max_grad_norm = 1e6;

  RunConfig() {
    kd.temperature = 2.0;
    feedback.tau_correct = 0.85;
  }

  void validate() const {
    try {
      model.validate();
      margin.validate();
      kd.validate();
      feedback.validate();
      merge.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    auto require = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    require(num_shards >= 1, "shards.k must be >= 1");
    require(mask_ratio > 0.0 && mask_ratio <= 1.0, "shards.mask_ratio must lie in (0, 1]");
    require(train.edit_lr > 0.0, "train.edit_lr must be > 0");
    require(train.n_iter >= 1, "train.n_iter must be >= 1");
    require(train.lambda_a >= 0.0, "train.lambda_a must be >= 0");
    require(train.window >= 1, "train.window must be >= 1");
    require(train.kd_weight >= 0.0 && train.soft_weight >= 0.0, "train KD weights must be >= 0");
    require(n_edits >= 1, "run.n_edits must be >= 1");
    require(eval_every >= 1, "run.eval_every must be >= 1");
    require(rephrases_per_fact >= 1, "corpus.rephrases_per_fact must be >= 1");
    require(calibration_pool >= 1, "corpus.calibration_pool must be >= 1");
    require(unrelated_pool >= 1 || train.lambda_a == 0.0,
            "corpus.unrelated_pool must be >= 1 when train.lambda_a > 0");
    require(max_grad_norm > 0.0, "run.max_grad_norm must be > 0");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  using nlohmann::json;
  return json{
      {"schema", kConfigSchema},
      {"model",
       {{"vocab_size", c.model.vocab_size},
        {"hidden_dim", c.model.hidden_dim},
        {"ffn_dim", c.model.ffn_dim},
        {"context_decay", c.model.context_decay},
        {"activation_shift", c.model.activation_shift},
        {"key_gain", c.model.key_gain},
        {"embed_scale", c.model.embed_scale},
        {"seed", c.model_seed}}},
      {"shards", {{"k", c.num_shards}, {"mask_ratio", c.mask_ratio}}},
      {"train",
       {{"edit_lr", c.train.edit_lr},
        {"n_iter", c.train.n_iter},
        {"lambda_a", c.train.lambda_a},
        {"irrelevant_per_edit", c.train.irrelevant_per_edit},
        {"cross_shard_negatives", c.train.cross_shard_negatives},
        {"replay", c.train.replay},
        {"window", c.train.window},
        {"kd_weight", c.train.kd_weight},
        {"soft_weight", c.train.soft_weight}}},
      {"margin",
       {{"gamma1", c.margin.gamma1}, {"gamma2", c.margin.gamma2}, {"gamma", c.margin.gamma}}},
      {"kd",
       {{"lambda_cos", c.kd.lambda_cos},
        {"theta_var", c.kd.theta_var},
        {"eps_cons", c.kd.eps_cons},
        {"temperature", c.kd.temperature},
        {"batch_size", c.kd.batch_size},
        {"max_recluster_rounds", c.kd.max_recluster_rounds}}},
      {"feedback",
       {{"tau_correct", c.feedback.tau_correct},
        {"tau_prune", c.feedback.tau_prune},
        {"tau_E", c.feedback.tau_E},
        {"max_iter", c.feedback.max_iter},
        {"sigma_init", c.feedback.sigma_init},
        {"max_per_check", c.feedback.max_per_check}}},
      {"merge", {{"alpha", c.merge.alpha}, {"cadence", c.merge.merge_cadence}}},
      {"objective",
       {{"alpha", c.objective.alpha}, {"beta", c.objective.beta}, {"gamma", c.objective.gamma}}},
      {"run",
       {{"n_edits", c.n_edits},
        {"seed", c.seed},
        {"mode", to_string(c.mode)},
        {"eval_every", c.eval_every},
        {"max_grad_norm", c.max_grad_norm}}},
      {"corpus",
       {{"rephrases_per_fact", c.rephrases_per_fact},
        {"unrelated_pool", c.unrelated_pool},
        {"calibration_pool", c.calibration_pool}}}};
}

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const char* section, const char* key) {
  const auto& v = j.at(section).at(key);
  try {
    if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        throw ConfigError("");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError(std::string(section) + "." + key + ": wrong type (got " + v.dump() + ")");
  }
}

/// Copies `patch` onto `base`, rejecting keys that `base` lacks.
inline void merge_strict(nlohmann::json& base, const nlohmann::json& patch,
                         const std::string& path) {
  if (!patch.is_object()) throw ConfigError(path + ": expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string where = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key " + where);
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), where);
    } else {
      slot = it.value();
    }
  }
}

}  // namespace detail

inline RunConfig config_from_full_json(const nlohmann::json& j) {
  using detail::field;
  RunConfig c;
  if (j.value("schema", std::string(kConfigSchema)) != kConfigSchema) {
    throw ConfigError(std::string("config schema must be ") + kConfigSchema);
  }
  c.model.vocab_size = field<std::size_t>(j, "model", "vocab_size");
  c.model.hidden_dim = field<std::size_t>(j, "model", "hidden_dim");
  c.model.ffn_dim = field<std::size_t>(j, "model", "ffn_dim");
  c.model.context_decay = field<double>(j, "model", "context_decay");
  c.model.activation_shift = field<double>(j, "model", "activation_shift");
  c.model.key_gain = field<double>(j, "model", "key_gain");
  c.model.embed_scale = field<double>(j, "model", "embed_scale");
  c.model_seed = field<std::uint64_t>(j, "model", "seed");
  c.num_shards = field<std::size_t>(j, "shards", "k");
  c.mask_ratio = field<double>(j, "shards", "mask_ratio");
  c.train.edit_lr = field<double>(j, "train", "edit_lr");
  c.train.n_iter = field<std::size_t>(j, "train", "n_iter");
  c.train.lambda_a = field<double>(j, "train", "lambda_a");
  c.train.irrelevant_per_edit = field<std::size_t>(j, "train", "irrelevant_per_edit");
  c.train.cross_shard_negatives = field<std::size_t>(j, "train", "cross_shard_negatives");
  c.train.replay = field<std::size_t>(j, "train", "replay");
  c.train.window = field<std::size_t>(j, "train", "window");
  c.train.kd_weight = field<double>(j, "train", "kd_weight");
  c.train.soft_weight = field<double>(j, "train", "soft_weight");
  c.margin.gamma1 = field<double>(j, "margin", "gamma1");
  c.margin.gamma2 = field<double>(j, "margin", "gamma2");
  c.margin.gamma = field<double>(j, "margin", "gamma");
  c.kd.lambda_cos = field<double>(j, "kd", "lambda_cos");
  c.kd.theta_var = field<double>(j, "kd", "theta_var");
  c.kd.eps_cons = field<double>(j, "kd", "eps_cons");
  c.kd.temperature = field<double>(j, "kd", "temperature");
  c.kd.batch_size = field<std::size_t>(j, "kd", "batch_size");
  c.kd.max_recluster_rounds = field<std::size_t>(j, "kd", "max_recluster_rounds");
  c.feedback.tau_correct = field<double>(j, "feedback", "tau_correct");
  c.feedback.tau_prune = field<double>(j, "feedback", "tau_prune");
  c.feedback.tau_E = field<std::size_t>(j, "feedback", "tau_E");
  c.feedback.max_iter = field<std::size_t>(j, "feedback", "max_iter");
  c.feedback.sigma_init = field<double>(j, "feedback", "sigma_init");
  c.feedback.max_per_check = field<std::size_t>(j, "feedback", "max_per_check");
  c.merge.alpha = field<double>(j, "merge", "alpha");
  c.merge.merge_cadence = field<std::size_t>(j, "merge", "cadence");
  c.objective.alpha = field<double>(j, "objective", "alpha");
  c.objective.beta = field<double>(j, "objective", "beta");
  c.objective.gamma = field<double>(j, "objective", "gamma");
  c.n_edits = field<std::size_t>(j, "run", "n_edits");
  c.seed = field<std::uint64_t>(j, "run", "seed");
  c.mode = parse_mode(field<std::string>(j, "run", "mode"));
  c.eval_every = field<std::size_t>(j, "run", "eval_every");
  c.max_grad_norm = field<double>(j, "run", "max_grad_norm");
  c.rephrases_per_fact = field<std::size_t>(j, "corpus", "rephrases_per_fact");
  c.unrelated_pool = field<std::size_t>(j, "corpus", "unrelated_pool");
  c.calibration_pool = field<std::size_t>(j, "corpus", "calibration_pool");
  c.validate();
  return c;
}

/// Parses `key=value` where key is a dotted path; the value is read as JSON
/// and falls back to a plain string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override \"" + assignment + "\" is not of the form section.key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  detail::merge_strict(j, patch, "");
}

/// Defaults, then the optional file, then the overrides in order.
inline RunConfig load_config(const nlohmann::json* file, const std::vector<std::string>& overrides) {
  nlohmann::json j = to_json(RunConfig{});
  if (file != nullptr) detail::merge_strict(j, *file, "");
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_full_json(j);
}

inline RunConfig load_config_file(const std::string& path,
                                  const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return load_config(&j, overrides);
}

}  // namespace repair
