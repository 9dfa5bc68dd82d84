#include "mtts/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "mtts/errors.hpp"

namespace mtts {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::uint64_t kPlanStream = 0x706c616e;     // "plan"
constexpr std::uint64_t kDropoutStream = 0x64726f70;  // "drop"
constexpr std::uint64_t kValidationStream = 0x76616c;
constexpr std::size_t kValidationBatch = 32;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

TrainConfig TrainConfig::resolved(Variant variant) const {
  TrainConfig c = *this;
  if (c.lr0 == 0.0) c.lr0 = variant == Variant::SEP ? 1e-4 : 1e-3;
  if (c.g_growth == 0.0) {
    if (c.steps == 0) throw ConfigError("train: steps must be positive");
    // g doubles every 20% of the run.
    c.g_growth = std::exp(std::log(2.0) / (0.2 * static_cast<double>(c.steps)));
  }
  return c;
}

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string("train: ") + name + " must be positive");
  };
  if (steps == 0) throw ConfigError("train: steps must be positive");
  if (lr_halving_interval == 0) throw ConfigError("train: lr_halving_interval must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (validate_every == 0) throw ConfigError("train: validate_every must be positive");
  if (patience == 0) throw ConfigError("train: patience must be positive");
  positive(lr0, "lr0");
  positive(epsilon, "epsilon");
  positive(g0, "g0");
  positive(g_cap, "g_cap");
  positive(validation_tolerance, "validation_tolerance");
  positive(clip_norm, "clip_norm");
  positive(divergence_threshold, "divergence_threshold");
  if (!(g_growth >= 1.0)) throw ConfigError("train: g_growth must be at least 1");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
    throw ConfigError("train: Adam betas must lie in (0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be non-negative");
  if (!(guided_weight >= 0.0)) throw ConfigError("train: guided_weight must be non-negative");
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (cfg.lr_halving_interval == 0) throw ConfigError("lr_at: zero halving interval");
  // ldexp halves exactly, so every plateau is lr0 * 2^-k to the last bit.
  return std::ldexp(cfg.lr0, -static_cast<int>(std::min<std::size_t>(step / cfg.lr_halving_interval, 2000)));
}

double tolerance_at(std::size_t step, const TrainConfig& cfg) {
  if (!(cfg.g_growth >= 1.0)) throw ConfigError("tolerance_at: unresolved or invalid g_growth");
  const double g = cfg.g0 * std::pow(cfg.g_growth, static_cast<double>(step));
  return std::min(cfg.g_cap, g);
}

AdamReport adam_step(ParameterStore& params, AdamState& state, double lr, const TrainConfig& cfg) {
  const auto& entries = params.entries();
  if (state.m.empty() && state.v.empty()) {
    for (const auto& [name, t] : entries) {
      state.m.emplace_back(t.numel(), 0.0);
      state.v.emplace_back(t.numel(), 0.0);
    }
  }
  if (state.m.size() != entries.size() || state.v.size() != entries.size())
    throw ContractViolation("adam_step: optimizer state does not match the parameter list");

  AdamReport report;
  double sq = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = entries[i];
    if (state.m[i].size() != t.numel() || state.v[i].size() != t.numel())
      throw ContractViolation("adam_step: moment buffer size mismatch for " + name);
    if (!t.has_grad()) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericalError("adam_step: non-finite gradient in parameter '" + name + "'");
      sq += g * g;
    }
  }
  report.grad_norm = std::sqrt(sq);
  if (report.grad_norm > cfg.clip_norm) report.clip_scale = cfg.clip_norm / report.grad_norm;

  ++state.step;
  const double t_ = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t_);
  const double c2 = 1.0 - std::pow(cfg.beta2, t_);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor p = entries[i].second;
    std::span<double> theta = p.mutable_data();
    std::span<const double> grad = p.grad();
    const bool has = p.has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = (has ? grad[j] * report.clip_scale : 0.0) + cfg.weight_decay * theta[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      theta[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.epsilon);
    }
  }
  return report;
}

std::string TrainLog::steps_csv() const {
  std::string out = std::string(kStepHeader) + "\n";
  for (const auto& r : steps) {
    out += std::to_string(r.step) + "," + fmt(r.lr) + "," + fmt(r.tolerance) + "," + fmt(r.total);
    for (const char* key : {"frame", "stop", "guided", "classifier"}) {
      out += ",";
      if (auto it = r.components.find(key); it != r.components.end()) out += fmt(it->second);
    }
    out += "," + fmt(r.grad_norm) + "\n";
  }
  return out;
}

std::string TrainLog::validations_csv() const {
  std::string out = std::string(kValidationHeader) + "\n";
  for (const auto& r : validations)
    out += std::to_string(r.step) + "," + fmt(r.loss) + "," + (r.has_cer ? fmt(r.cer) : "") + "," +
           (r.best ? "1" : "0") + "\n";
  return out;
}

std::string TrainLog::timings_csv() const {
  std::string out = "step,seconds\n";
  for (std::size_t i = 0; i < step_seconds.size() && i < steps.size(); ++i)
    out += std::to_string(steps[i].step) + "," + fmt(step_seconds[i]) + "\n";
  return out;
}

const char* stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::Completed: return "completed";
    case StopReason::EarlyStop: return "early_stop";
    case StopReason::Diverged: return "diverged";
    case StopReason::Interrupted: return "interrupted";
  }
  return "unknown";
}

double validation_loss(Model& model, const std::vector<Utterance>& pool, const TrainConfig& cfg) {
  if (pool.empty()) throw ContractViolation("validation_loss: empty validation pool");
  NoGradScope no_grad;
  SeededRng rng(derive_seed(cfg.seed, kValidationStream));
  const ForwardSettings settings = ForwardSettings::inference(rng);
  const LossWeights weights{cfg.guided_weight, cfg.validation_tolerance, false};

  std::map<int, std::vector<std::size_t>> by_language;
  for (std::size_t i = 0; i < pool.size(); ++i) by_language[pool[i].language].push_back(i);
  double weighted = 0.0;
  for (const auto& [lang, idx] : by_language) {
    for (std::size_t start = 0; start < idx.size(); start += kValidationBatch) {
      const std::size_t end = std::min(idx.size(), start + kValidationBatch);
      std::vector<std::size_t> chunk(idx.begin() + static_cast<long>(start), idx.begin() + static_cast<long>(end));
      Batch batch = assemble_batch(pool, chunk);
      LossBreakdown loss = total_loss(model, batch, model.forward(batch, settings), weights);
      weighted += loss.total.item() * static_cast<double>(chunk.size());
    }
  }
  return weighted / static_cast<double>(pool.size());
}

Trainer::Trainer(Model& model, std::vector<Utterance> train, std::vector<Utterance> validation, TrainConfig cfg)
    : model_(model), train_(std::move(train)), validation_(std::move(validation)), cfg_(cfg.resolved(model.variant())) {
  cfg_.validate();
  if (train_.empty()) throw ContractViolation("train: empty training pool");
  languages_ = model.config().languages;
  if (cfg_.batch_size % languages_ != 0)
    throw ConfigError("train: batch size " + std::to_string(cfg_.batch_size) + " is not divisible by " +
                      std::to_string(languages_) + " languages");
  if (batch_for(0).size == 0) throw ConfigError("train: pool too small for one batch");
}

Batch Trainer::batch_for(std::size_t step) const {
  // Every epoch plans the same number of batches, so epoch 0 fixes the period.
  if (cached_epoch_ == static_cast<std::size_t>(-1)) {
    SeededRng rng(derive_seed(derive_seed(cfg_.seed, kPlanStream), 0));
    cached_plan_ = plan_epoch(train_, cfg_.batch_size, languages_, rng);
    cached_epoch_ = 0;
    if (cached_plan_.size() == 0)
      throw ConfigError("train: batch size " + std::to_string(cfg_.batch_size) + " exceeds the training pool");
  }
  const std::size_t per_epoch = cached_plan_.size();
  const std::size_t epoch = step / per_epoch;
  if (epoch != cached_epoch_) {
    SeededRng rng(derive_seed(derive_seed(cfg_.seed, kPlanStream), epoch));
    cached_plan_ = plan_epoch(train_, cfg_.batch_size, languages_, rng);
    cached_epoch_ = epoch;
  }
  return assemble_batch(train_, cached_plan_.batches.at(step % per_epoch));
}

TrainResult Trainer::run() {
  TrainResult result;
  auto finish = [&](StopReason reason, std::string message) {
    result.reason = reason;
    result.message = std::move(message);
    result.steps_done = state_.step;
    result.best_step = state_.best_step;
    result.best_validation = state_.best_validation;
    result.has_best = state_.has_best;
    if (reason != StopReason::Interrupted && state_.has_best) model_.restore(state_.best);
    return result;
  };

  auto validate_now = [&](std::size_t step) -> bool {
    model_.parameters().zero_grad();
    const double loss = validation_fn_ ? validation_fn_(model_, step) : validation_loss(model_, validation_, cfg_);
    ValidationRecord rec;
    rec.step = step;
    rec.loss = loss;
    if (cer_fn_) {
      rec.cer = cer_fn_(model_);
      rec.has_cer = true;
    }
    if (state_.validations > 0 && loss > state_.last_validation)
      ++state_.rising;
    else
      state_.rising = 0;
    if (std::isfinite(loss) && (!state_.has_best || loss < state_.best_validation)) {
      state_.best = model_.snapshot();
      state_.best_step = step;
      state_.best_validation = loss;
      state_.has_best = true;
      rec.best = true;
    }
    state_.last_validation = loss;
    ++state_.validations;
    log_.validations.push_back(rec);
    return state_.rising < cfg_.patience;
  };

  while (state_.step < cfg_.steps) {
    const std::size_t step = state_.step;
    const auto started = std::chrono::steady_clock::now();
    const Batch batch = batch_for(step);
    SeededRng rng(derive_seed(derive_seed(cfg_.seed, kDropoutStream), step));
    const double lr = lr_at(step, cfg_);
    const double tol = tolerance_at(step, cfg_);
    const std::vector<BatchNormState> bn_before = model_.batchnorm_states();

    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.tolerance = tol;
    try {
      model_.parameters().zero_grad();
      Tape tape;
      TapeScope scope(tape);
      ModelOutputs outputs = model_.forward(batch, ForwardSettings::training(rng));
      LossBreakdown loss = total_loss(model_, batch, outputs, {cfg_.guided_weight, tol, true});
      rec.total = loss.total.item();
      rec.components = loss.components;
      if (!std::isfinite(rec.total) || rec.total > cfg_.divergence_threshold)
        throw NumericalError("training loss " + fmt(rec.total) + " exceeds the divergence threshold");
      tape.backward(loss.total);
      rec.grad_norm = adam_step(model_.parameters(), state_.optimizer, lr, cfg_).grad_norm;
    } catch (const NumericalError& e) {
      model_.batchnorm_states() = bn_before;
      model_.parameters().zero_grad();
      return finish(StopReason::Diverged, "step " + std::to_string(step) + ": " + e.what());
    }
    model_.parameters().zero_grad();
    ++state_.step;
    log_.steps.push_back(std::move(rec));
    log_.step_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());

    const bool due = state_.step % cfg_.validate_every == 0 || state_.step == cfg_.steps;
    if (due && !validate_now(state_.step))
      return finish(StopReason::EarlyStop, "validation loss rose " + std::to_string(state_.rising) +
                                               " consecutive times at step " + std::to_string(state_.step));
    if (step_hook_ && !step_hook_(*this, state_.step))
      return finish(StopReason::Interrupted, "stopped by hook at step " + std::to_string(state_.step));
  }
  return finish(StopReason::Completed, "completed " + std::to_string(state_.step) + " steps");
}

// ---- checkpoint I/O -------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'T', 'T', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormat = 1;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void u64(std::uint64_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void str(std::string_view s) {
    u64(s.size());
    out_.append(s);
  }
  void doubles(const std::vector<double>& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void bn(const std::vector<BatchNormState>& states) {
    u64(states.size());
    for (const auto& s : states) {
      doubles(s.running_mean);
      doubles(s.running_var);
      u64(s.updates.size());
      for (long n : s.updates) u64(static_cast<std::uint64_t>(n));
    }
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T pod(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::uint64_t u64(const char* what) { return pod<std::uint64_t>(what); }
  double f64(const char* what) { return pod<double>(what); }
  /// A length that must fit in the remaining bytes at `unit` bytes per element.
  std::size_t count(std::size_t unit, const char* what) {
    const std::size_t at = pos_;
    const std::uint64_t n = u64(what);
    if (unit > 0 && n > (data_.size() - pos_) / unit)
      throw ParseError(std::string("checkpoint: implausible length for ") + what, at);
    return static_cast<std::size_t>(n);
  }
  std::string str(const char* what) {
    const std::size_t n = count(1, what);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<double> doubles(const char* what) {
    const std::size_t n = count(sizeof(double), what);
    std::vector<double> v(n);
    if (n > 0) std::memcpy(v.data(), data_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  std::vector<BatchNormState> bn(const char* what) {
    std::vector<BatchNormState> states(count(8, what));
    for (auto& s : states) {
      s.running_mean = doubles(what);
      s.running_var = doubles(what);
      s.updates.resize(count(8, what));
      for (long& n : s.updates) n = static_cast<long>(u64(what));
      if (s.running_var.size() != s.running_mean.size() || s.updates.size() != s.running_mean.size())
        throw ParseError(std::string("checkpoint: inconsistent batch-norm state in ") + what, pos_);
    }
    return states;
  }
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n)
      throw ParseError(std::string("checkpoint: truncated while reading ") + what, pos_);
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

void write_snapshot(Writer& w, const Model::Snapshot& s) {
  w.u64(s.values.size());
  for (const auto& v : s.values) w.doubles(v);
  w.bn(s.batchnorm);
}

Model::Snapshot read_snapshot(Reader& r, const char* what) {
  Model::Snapshot s;
  s.values.resize(r.count(8, what));
  for (auto& v : s.values) v = r.doubles(what);
  s.batchnorm = r.bn(what);
  return s;
}

}  // namespace

Checkpoint make_checkpoint(const Model& model, const TrainState& state, std::string config, std::uint64_t model_seed) {
  Checkpoint c;
  c.config = std::move(config);
  c.model_seed = model_seed;
  for (const auto& [name, t] : model.parameters().entries()) {
    c.names.push_back(name);
    c.shapes.push_back(t.shape());
  }
  c.weights = model.snapshot();
  c.state = state;
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (ckpt.names.size() != ckpt.shapes.size() || ckpt.names.size() != ckpt.weights.values.size())
    throw ContractViolation("save_checkpoint: inconsistent tensor lists");
  Writer w;
  w.bytes().append(kMagic, sizeof(kMagic));
  w.pod(kFormat);
  w.str(ckpt.version);
  w.str(ckpt.config);
  w.u64(ckpt.model_seed);
  w.u64(ckpt.state.step);
  w.u64(ckpt.names.size());
  for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
    w.str(ckpt.names[i]);
    w.u64(ckpt.shapes[i].size());
    for (std::size_t d : ckpt.shapes[i]) w.u64(d);
    if (shape_numel(ckpt.shapes[i]) != ckpt.weights.values[i].size())
      throw ContractViolation("save_checkpoint: shape does not match values for " + ckpt.names[i]);
    for (double x : ckpt.weights.values[i]) w.f64(x);
  }
  w.bn(ckpt.weights.batchnorm);

  const TrainState& s = ckpt.state;
  w.u64(s.optimizer.step);
  w.u64(s.optimizer.m.size());
  for (std::size_t i = 0; i < s.optimizer.m.size(); ++i) {
    w.doubles(s.optimizer.m[i]);
    w.doubles(s.optimizer.v.at(i));
  }
  w.u64(s.has_best ? 1 : 0);
  if (s.has_best) write_snapshot(w, s.best);
  w.u64(s.best_step);
  w.f64(s.best_validation);
  w.f64(s.last_validation);
  w.u64(s.rising);
  w.u64(s.validations);
  w.u64(fnv1a(w.bytes()));

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ContractViolation("save_checkpoint: cannot open " + tmp.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw ContractViolation("save_checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractViolation("load_checkpoint: cannot open " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(data);

  r.need(sizeof(kMagic), "magic");
  if (std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) throw ParseError("checkpoint: bad magic", 0);
  r.pod<std::uint64_t>("magic");
  const std::size_t format_at = r.pos();
  const auto format = r.pod<std::uint32_t>("format");
  if (format != kFormat)
    throw ParseError("checkpoint: unsupported format " + std::to_string(format), format_at);
  if (data.size() < 8 + r.pos()) throw ParseError("checkpoint: truncated before checksum", data.size());
  const std::size_t body = data.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, data.data() + body, 8);
  const std::string_view payload(data.data(), body);

  Checkpoint c;
  // Parse against the payload only, so a truncated file fails on structure
  // (with the offset where data ran out) rather than on a checksum.
  Reader p(payload);
  p.pod<std::uint64_t>("magic");
  p.pod<std::uint32_t>("format");
  c.version = p.str("version");
  c.config = p.str("config");
  c.model_seed = p.u64("model seed");
  c.state.step = p.u64("step");
  const std::size_t tensors = p.count(8, "tensor count");
  for (std::size_t i = 0; i < tensors; ++i) {
    c.names.push_back(p.str("tensor name"));
    Shape shape(p.count(8, "tensor rank"));
    for (auto& d : shape) d = p.u64("tensor dims");
    const std::size_t n = shape_numel(shape);
    p.need(n * sizeof(double), "tensor values");
    std::vector<double> v(n);
    for (auto& x : v) x = p.f64("tensor values");
    c.shapes.push_back(std::move(shape));
    c.weights.values.push_back(std::move(v));
  }
  c.weights.batchnorm = p.bn("batch-norm states");
  c.state.optimizer.step = p.u64("optimizer step");
  const std::size_t moments = p.count(16, "optimizer buffers");
  for (std::size_t i = 0; i < moments; ++i) {
    c.state.optimizer.m.push_back(p.doubles("optimizer m"));
    c.state.optimizer.v.push_back(p.doubles("optimizer v"));
  }
  c.state.has_best = p.u64("best flag") != 0;
  if (c.state.has_best) c.state.best = read_snapshot(p, "best snapshot");
  c.state.best_step = p.u64("best step");
  c.state.best_validation = p.f64("best validation");
  c.state.last_validation = p.f64("last validation");
  c.state.rising = p.u64("rising count");
  c.state.validations = p.u64("validation count");
  if (p.pos() != payload.size()) throw ParseError("checkpoint: trailing bytes before checksum", p.pos());
  if (fnv1a(payload) != stored) throw ParseError("checkpoint: checksum mismatch", body);
  if (c.version != kVersion)
    throw ConfigError("checkpoint written by version " + c.version + ", this build is " + kVersion);
  return c;
}

void apply_checkpoint(const Checkpoint& ckpt, Model& model) {
  const auto& entries = model.parameters().entries();
  if (ckpt.names.size() != entries.size())
    throw ContractViolation("apply_checkpoint: checkpoint has " + std::to_string(ckpt.names.size()) +
                            " tensors, model has " + std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (ckpt.names[i] != entries[i].first || ckpt.shapes[i] != entries[i].second.shape())
      throw ContractViolation("apply_checkpoint: tensor " + std::to_string(i) + " is " + ckpt.names[i] + " " +
                              shape_str(ckpt.shapes[i]) + ", model expects " + entries[i].first + " " +
                              shape_str(entries[i].second.shape()));
  }
  model.restore(ckpt.weights);
}

}  // namespace mtts
