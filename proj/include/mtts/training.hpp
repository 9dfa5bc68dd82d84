#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mtts/batching.hpp"
#include "mtts/model.hpp"

namespace mtts {

inline constexpr const char* kVersion = "0.1.0";

struct TrainConfig {
  std::size_t steps = 3000;
  /// Zero selects the variant default: 1e-4 for SEP, 1e-3 otherwise.
  double lr0 = 0.0;
  std::size_t lr_halving_interval = 10000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  double weight_decay = 1e-6;
  std::size_t batch_size = 60;
  /// Guided attention: g(step) = min(g_cap, g0 * g_growth^step). A zero growth
  /// selects the rate that doubles g every 20% of `steps`.
  double g0 = 0.2;
  double g_growth = 0.0;
  double g_cap = 0.6;
  double guided_weight = 1.0;
  /// Tolerance of the guided term inside the validation loss (kept fixed so
  /// validation values are comparable across the schedule).
  double validation_tolerance = 0.2;
  std::size_t validate_every = 100;
  std::size_t patience = 3;
  double clip_norm = 1.0;
  double divergence_threshold = 1e6;
  std::uint64_t seed = 1;

  /// Fills the variant-dependent defaults (lr0, g_growth).
  TrainConfig resolved(Variant variant) const;
  void validate() const;
};

/// lr0 * 0.5^floor(step / interval).
double lr_at(std::size_t step, const TrainConfig& cfg);
/// min(g_cap, g0 * g_growth^step); requires a resolved config.
double tolerance_at(std::size_t step, const TrainConfig& cfg);

struct AdamState {
  std::vector<std::vector<double>> m, v;  // one buffer per parameter, same length
  std::size_t step = 0;
};

struct AdamReport {
  double grad_norm = 0.0;   // global L2 norm before clipping
  double clip_scale = 1.0;  // factor applied to every gradient
};

/// One Adam update over every parameter of `params`, reading their grads
/// (missing grads count as zero). Order: global-norm clip of the raw
/// gradients, then the L2 term weight_decay * theta, then bias-corrected
/// moments. A non-finite gradient throws NumericalError naming the parameter
/// before anything is modified.
AdamReport adam_step(ParameterStore& params, AdamState& state, double lr, const TrainConfig& cfg);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double tolerance = 0.0;
  double total = 0.0;
  std::map<std::string, double> components;
  double grad_norm = 0.0;
};

struct ValidationRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double cer = 0.0;  // only meaningful when has_cer
  bool has_cer = false;
  bool best = false;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<ValidationRecord> validations;
  std::vector<double> step_seconds;  // wall time per step; kept out of the CSVs

  static constexpr const char* kStepHeader = "step,lr,tolerance,total,frame,stop,guided,classifier,grad_norm";
  static constexpr const char* kValidationHeader = "step,validation_loss,cer,best";
  /// Values printed with 17 significant digits; absent components are empty.
  std::string steps_csv() const;
  std::string validations_csv() const;
  std::string timings_csv() const;
};

/// Interrupted: a step hook asked to stop; the model keeps its current weights.
enum class StopReason { Completed, EarlyStop, Diverged, Interrupted };
const char* stop_reason_name(StopReason r);

/// Mean validation loss of the adversarial-free objective (frame + stop +
/// guided at the fixed validation tolerance) over `pool`, in
/// single-language batches, eval-mode batch norm, fixed prenet dropout stream.
double validation_loss(Model& model, const std::vector<Utterance>& pool, const TrainConfig& cfg);

struct TrainResult {
  StopReason reason = StopReason::Completed;
  std::string message;
  std::size_t steps_done = 0;
  std::size_t best_step = 0;
  double best_validation = 0.0;
  bool has_best = false;
};

/// Everything needed to continue a run exactly.
struct TrainState {
  std::size_t step = 0;
  AdamState optimizer;
  Model::Snapshot best;
  std::size_t best_step = 0;
  double best_validation = 0.0;
  bool has_best = false;
  double last_validation = 0.0;
  std::size_t rising = 0;  // consecutive validation increases
  std::size_t validations = 0;
};

class Trainer {
 public:
  /// Replaces the real validation loss (tests of the stopping rule).
  using ValidationFn = std::function<double(Model&, std::size_t step)>;
  /// Called after every step; returning false stops the run (checkpoint tests).
  using StepHook = std::function<bool(const Trainer&, std::size_t step)>;
  /// Optional held-out CER recorded next to each validation loss.
  using CerFn = std::function<double(Model&)>;

  Trainer(Model& model, std::vector<Utterance> train, std::vector<Utterance> validation, TrainConfig cfg);

  void set_validation(ValidationFn fn) { validation_fn_ = std::move(fn); }
  void set_step_hook(StepHook fn) { step_hook_ = std::move(fn); }
  void set_cer(CerFn fn) { cer_fn_ = std::move(fn); }

  /// Continues from state().step until cfg.steps, early stop, divergence or a
  /// hook stop. Except when interrupted, the model ends up holding the best
  /// validated weights (the last good weights when nothing was validated).
  TrainResult run();

  const TrainConfig& config() const { return cfg_; }
  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const Model& model() const { return model_; }
  const TrainLog& log() const { return log_; }

  /// Batch of `step`: a pure function of (seed, step) and the training pool.
  Batch batch_for(std::size_t step) const;

 private:
  Model& model_;
  std::vector<Utterance> train_, validation_;
  TrainConfig cfg_;
  std::size_t languages_ = 1;
  TrainState state_;
  TrainLog log_;
  ValidationFn validation_fn_;
  StepHook step_hook_;
  CerFn cer_fn_;
  mutable std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  mutable BatchPlan cached_plan_;
};

/// Checkpoint container. Binary, little-endian:
///   "MTTSCKPT" | u32 format | str version | str config | u64 model_seed |
///   u64 step | tensors | batch-norm states | adam state | training state |
///   u64 FNV-1a of all preceding bytes
/// where str = u64 length + bytes and each tensor = str name, u64 rank, u64
/// dims, f64 values.
struct Checkpoint {
  std::string version = kVersion;
  std::string config;  // canonical run-config text
  std::uint64_t model_seed = 0;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  TrainState state;
  Model::Snapshot weights;
};

Checkpoint make_checkpoint(const Model& model, const TrainState& state, std::string config, std::uint64_t model_seed);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// ParseError (with byte offset) on malformed or truncated input; ConfigError
/// when the file was written by another version.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies weights into `model` after checking every name and shape.
void apply_checkpoint(const Checkpoint& ckpt, Model& model);

}  // namespace mtts
