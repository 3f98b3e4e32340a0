#include "bnlstm/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <map>
#include <sstream>

#include "bnlstm/csv.hpp"
#include "bnlstm/errors.hpp"
#include "json.hpp"

namespace bnlstm {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double wall_since(const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "mnist") return TaskKind::Mnist;
  if (name == "pmnist") return TaskKind::PMnist;
  if (name == "char-lm") return TaskKind::CharLm;
  throw ConfigError("unknown task '" + name + "'");
}

void ExperimentConfig::validate() const {
  task_kind();
  model_kind();
  optim_config();
  if (clip_mode != "none") clip_config();
  pop_estimator_kind();
  input_mode();
  if (d_h < 1) throw ConfigError("hidden-size must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (updates < 1) throw ConfigError("updates must be >= 1");
  if (eval_every < 1) throw ConfigError("eval-every must be >= 1");
  if (learning_rate <= 0.0) throw ConfigError("learning-rate must be > 0");
  if (epsilon <= 0.0) throw ConfigError("epsilon must be > 0");
  if (gamma0 <= 0.0) throw ConfigError("gamma0 must be > 0");
  if (noise_std < 0.0) throw ConfigError("noise-std must be >= 0");
  if (seq_len < 0 || t_max < 0) throw ConfigError("seq-len / t-max must be >= 0");
  if (popstat_reset_frac < 0.0 || popstat_reset_frac >= 1.0) {
    throw ConfigError("popstat-reset-frac must be in [0, 1)");
  }
  if (pop_momentum <= 0.0 || pop_momentum > 1.0) {
    throw ConfigError("pop-momentum must be in (0, 1]");
  }
  if (!hidden_init.empty() && hidden_init != "identity" && hidden_init != "orthogonal") {
    throw ConfigError("hidden-init must be 'identity' or 'orthogonal'");
  }
  if (embed_dim < 0) throw ConfigError("embed-dim must be >= 0");
  switch (task_kind()) {
    case TaskKind::Mnist:
    case TaskKind::PMnist:
      if (images.empty() || labels.empty()) {
        throw ConfigError("pixel tasks require --images and --labels");
      }
      break;
    case TaskKind::CharLm:
      if (corpus.empty()) throw ConfigError("char-lm requires --corpus");
      if (seq_len < 1) throw ConfigError("char-lm requires --seq-len >= 1");
      if (train_count < 1) throw ConfigError("char-lm requires --train-count >= 1");
      if (valid_count < 0) throw ConfigError("valid-count must be >= 0");
      break;
  }
}

std::string ExperimentConfig::canonical() const {
  std::map<std::string, std::string> kv;
  kv["task"] = task;
  kv["model"] = model;
  kv["hidden-size"] = std::to_string(d_h);
  kv["batch"] = std::to_string(batch);
  kv["seq-len"] = std::to_string(seq_len);
  kv["t-max"] = std::to_string(t_max);
  kv["optimizer"] = optimizer;
  kv["learning-rate"] = fmt_double(learning_rate);
  kv["rmsprop-momentum"] = fmt_double(rmsprop_momentum);
  kv["adam-beta1"] = fmt_double(adam_beta1);
  kv["adam-beta2"] = fmt_double(adam_beta2);
  kv["stabilizer"] = fmt_double(stabilizer);
  kv["clip-mode"] = clip_mode;
  kv["clip-threshold"] = fmt_double(clip_threshold);
  kv["gamma0"] = fmt_double(gamma0);
  kv["beta0"] = fmt_double(beta0);
  kv["epsilon"] = fmt_double(epsilon);
  kv["noise-std"] = fmt_double(noise_std);
  kv["bn-input-mode"] = bn_input_mode;
  kv["pop-estimator"] = pop_estimator;
  kv["pop-momentum"] = fmt_double(pop_momentum);
  kv["popstat-reset-frac"] = fmt_double(popstat_reset_frac);
  kv["updates"] = std::to_string(updates);
  kv["eval-every"] = std::to_string(eval_every);
  kv["eval-max-batches"] = std::to_string(eval_max_batches);
  kv["init-seed"] = std::to_string(init_seed);
  kv["data-seed"] = std::to_string(data_seed);
  kv["noise-seed"] = std::to_string(noise_seed);
  kv["hidden-init"] = hidden_init;
  kv["hidden-init-gain"] = fmt_double(hidden_init_gain);
  kv["embed-dim"] = std::to_string(embed_dim);
  kv["images"] = images;
  kv["labels"] = labels;
  kv["corpus"] = corpus;
  kv["train-count"] = std::to_string(train_count);
  kv["valid-count"] = std::to_string(valid_count);
  kv["pool14"] = pool14 ? "true" : "false";
  kv["subset-n"] = std::to_string(subset_n);
  kv["valid-n"] = std::to_string(valid_n);
  kv["pixel-perm-seed"] = std::to_string(pixel_perm_seed);
  kv["out-dir"] = out_dir;
  kv["run-name"] = run_name;

  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

uint64_t ExperimentConfig::hash() const {
  const std::string text = canonical();
  uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

OptimConfig ExperimentConfig::optim_config() const {
  OptimConfig cfg;
  if (optimizer == "sgd") {
    cfg.kind = OptimKind::Sgd;
  } else if (optimizer == "rmsprop") {
    cfg.kind = OptimKind::RmsProp;
  } else if (optimizer == "adam") {
    cfg.kind = OptimKind::Adam;
  } else {
    throw ConfigError("unknown optimizer '" + optimizer + "'");
  }
  cfg.learning_rate = learning_rate;
  cfg.rmsprop_momentum = rmsprop_momentum;
  cfg.adam_beta1 = adam_beta1;
  cfg.adam_beta2 = adam_beta2;
  cfg.stabilizer = stabilizer;
  return cfg;
}

ClipConfig ExperimentConfig::clip_config() const {
  ClipConfig cfg;
  cfg.threshold = clip_threshold;
  if (clip_mode == "global-norm") {
    cfg.mode = ClipMode::GlobalNorm;
  } else if (clip_mode == "per-param-norm") {
    cfg.mode = ClipMode::PerParamNorm;
  } else if (clip_mode == "value") {
    cfg.mode = ClipMode::Value;
  } else {
    throw ConfigError("unknown clip-mode '" + clip_mode + "'");
  }
  return cfg;
}

PopEstimator ExperimentConfig::pop_estimator_kind() const {
  if (pop_estimator == "cumulative") return PopEstimator::Cumulative;
  if (pop_estimator == "ema") return PopEstimator::Ema;
  throw ConfigError("unknown pop-estimator '" + pop_estimator + "'");
}

BNMode ExperimentConfig::input_mode() const {
  if (bn_input_mode == "per-timestep") return BNMode::PerTimestep;
  if (bn_input_mode == "sequencewise") return BNMode::Sequencewise;
  throw ConfigError("unknown bn-input-mode '" + bn_input_mode + "'");
}

std::string ExperimentConfig::reference_scale_json() const {
  nlohmann::json j;
  switch (task_kind()) {
    case TaskKind::Mnist:
    case TaskKind::PMnist:
      j = {{"hidden-size", 100},       {"seq-len", 784},
           {"optimizer", "rmsprop"},   {"learning-rate", 1e-3},
           {"rmsprop-momentum", 0.9},  {"clip-threshold", 1.0},
           {"gamma0", 0.1},            {"hidden-init", "identity"}};
      break;
    case TaskKind::CharLm:
      j = {{"hidden-size", 1000}, {"seq-len", 100},    {"batch", 64},
           {"optimizer", "adam"}, {"learning-rate", 0.002}, {"clip-threshold", 1.0},
           {"gamma0", 0.1},       {"hidden-init", "orthogonal"}};
      break;
  }
  return j.dump();
}

void RunRecord::add(int64_t update, std::string split, std::string metric, double value,
                    double wall_ms) {
  rows.push_back(Row{update, std::move(split), std::move(metric), value, wall_ms});
}

std::string RunRecord::canonical_bytes() const {
  std::string out = config_snapshot;
  out += "update,split,metric,value\r\n";
  for (const auto& r : rows) {
    out += std::to_string(r.update);
    out += ',';
    out += r.split;
    out += ',';
    out += r.metric;
    out += ',';
    out += fmt_double(r.value);
    out += "\r\n";
  }
  return out;
}

void RunRecord::write_jsonl(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open run record output: " + path);
  nlohmann::json meta;
  meta["type"] = "meta";
  meta["config"] = config_snapshot;
  if (!reference_scale.empty()) {
    meta["reference_scale"] = nlohmann::json::parse(reference_scale);
  }
  out << meta.dump() << "\n";
  for (const auto& r : rows) {
    nlohmann::json j;
    j["type"] = "row";
    j["update"] = r.update;
    j["split"] = r.split;
    j["metric"] = r.metric;
    j["value"] = r.value;
    j["wall_ms"] = r.wall_ms;
    out << j.dump() << "\n";
  }
}

void RunRecord::write_csv(const std::string& path) const {
  CsvWriter csv(path);
  csv.row({"update", "split", "metric", "value"});
  for (const auto& r : rows) {
    csv.row({CsvWriter::number(r.update), r.split, r.metric, CsvWriter::number(r.value)});
  }
}

// ---------------------------------------------------------------------------
// Task loading.
// ---------------------------------------------------------------------------

namespace {

PixelSequenceDataset truncate_steps(const PixelSequenceDataset& ds, int64_t len) {
  const int64_t t = ds.seq_len();
  if (len >= t) return ds;
  PixelSequenceDataset out;
  out.image_rows = ds.image_rows;
  out.image_cols = ds.image_cols;
  out.labels = ds.labels;
  out.permutation = ds.permutation;
  out.permutation_seed = ds.permutation_seed;
  const int64_t n = ds.num_examples();
  out.sequences = Tensor({n, len, 1});
  for (int64_t i = 0; i < n; ++i) {
    std::copy(ds.sequences.raw() + i * t, ds.sequences.raw() + i * t + len,
              out.sequences.raw() + i * len);
  }
  return out;
}

}  // namespace

TaskData load_task(const ExperimentConfig& config) {
  config.validate();
  TaskData data;
  data.kind = config.task_kind();
  switch (data.kind) {
    case TaskKind::Mnist:
    case TaskKind::PMnist: {
      PixelSequenceDataset ds = load_idx(config.images, config.labels);
      if (config.pool14) ds = pool_2x2(ds);
      if (data.kind == TaskKind::PMnist) ds = permute_pixels(ds, config.pixel_perm_seed);
      if (config.seq_len > 0) ds = truncate_steps(ds, config.seq_len);

      const int64_t valid_n = std::min<int64_t>(config.valid_n, ds.num_examples() / 4);
      int64_t train_n = config.subset_n > 0 ? config.subset_n : ds.num_examples() - valid_n;
      if (train_n + valid_n > ds.num_examples()) {
        throw DataError("subset-n + valid-n exceed dataset size " +
                        std::to_string(ds.num_examples()));
      }
      // Shuffle once, then carve disjoint contiguous slices: validation off
      // the front so changing subset-n leaves it stable.
      PixelSequenceDataset pool =
          subset(ds, train_n + valid_n, config.data_seed ^ 0x9E3779B97F4A7C15ULL);
      auto slice = [&pool](int64_t start, int64_t count) {
        const int64_t t = pool.seq_len();
        PixelSequenceDataset out;
        out.image_rows = pool.image_rows;
        out.image_cols = pool.image_cols;
        out.permutation = pool.permutation;
        out.permutation_seed = pool.permutation_seed;
        out.sequences = Tensor({count, t, 1});
        out.labels.resize(static_cast<size_t>(count));
        for (int64_t i = 0; i < count; ++i) {
          std::copy(pool.sequences.raw() + (start + i) * t,
                    pool.sequences.raw() + (start + i + 1) * t, out.sequences.raw() + i * t);
          out.labels[static_cast<size_t>(i)] = pool.labels[static_cast<size_t>(start + i)];
        }
        return out;
      };
      if (valid_n > 0) data.valid_pixels = slice(0, valid_n);
      data.train_pixels = slice(valid_n, train_n);
      int32_t max_label = 0;
      for (int32_t l : data.train_pixels.labels) max_label = std::max(max_label, l);
      for (int32_t l : data.valid_pixels.labels) max_label = std::max(max_label, l);
      data.num_classes = max_label + 1;
      data.input_width = 1;
      data.effective_len = data.train_pixels.seq_len();
      break;
    }
    case TaskKind::CharLm: {
      data.corpus = load_corpus(config.corpus, config.train_count, config.valid_count);
      data.input_width = data.corpus.num_classes();
      data.num_classes = data.corpus.num_classes();
      data.effective_len = config.seq_len;
      break;
    }
  }
  return data;
}

ModelState build_model(const ExperimentConfig& config, const TaskData& data) {
  ModelInit init;
  init.gamma0 = config.gamma0;
  init.beta0 = config.beta0;
  init.epsilon = config.epsilon;
  init.embed_dim = config.embed_dim;
  init.input_mode = config.input_mode();
  init.hidden_init_gain = config.hidden_init_gain;
  if (!config.hidden_init.empty()) {
    init.hidden_init = config.hidden_init;
  } else {
    init.hidden_init = data.kind == TaskKind::CharLm ? "orthogonal" : "identity";
  }
  const int64_t t_max = config.t_max > 0 ? config.t_max : data.effective_len;
  return init_model(config.model_kind(), data.input_width, config.d_h, data.num_classes, t_max,
                    init, config.init_seed);
}

// ---------------------------------------------------------------------------
// Forward pass over one batch.
// ---------------------------------------------------------------------------

BatchRun run_batch(Tape& tape, const ModelState& model, const Batch& batch, Phase phase,
                   double noise_std, Rng* noise_rng, int64_t t_offset) {
  if (batch.steps.empty()) throw ShapeError("empty batch");
  BatchRun run;
  run.bound = bind_model(tape, model);

  std::vector<Var> x_vars;
  x_vars.reserve(batch.steps.size());
  for (const Tensor& x : batch.steps) {
    Var v = tape.leaf(x);
    if (run.bound.embed.valid()) v = tape.matmul(v, run.bound.embed);
    x_vars.push_back(v);
  }

  const double applied_noise = (phase == Phase::Train && noise_rng) ? noise_std : 0.0;
  Rng dummy(0);
  StepVars init = init_state_on_tape(tape, bound_h0(run.bound), bound_c0(run.bound),
                                     batch.batch_size(), applied_noise,
                                     noise_rng ? *noise_rng : dummy);

  run.unrolled = unroll_bound(tape, run.bound, x_vars, init, phase, t_offset);

  if (!batch.labels.empty()) {
    Var logits = classify_head(tape, run.unrolled.states.back().h, run.bound.head_w,
                               run.bound.head_b);
    run.step_logits.push_back(logits);
    run.loss = tape.softmax_cross_entropy(logits, batch.labels);
  } else {
    if (batch.step_targets.size() != batch.steps.size()) {
      throw ShapeError("LM batch needs per-step targets");
    }
    Var total;
    for (size_t t = 0; t < batch.steps.size(); ++t) {
      Var logits = lm_head(tape, run.unrolled.states[t].h, run.bound.head_w, run.bound.head_b);
      run.step_logits.push_back(logits);
      Var ce = tape.softmax_cross_entropy(logits, batch.step_targets[t]);
      total = total.valid() ? tape.add(total, ce) : ce;
    }
    run.loss = tape.scale(total, 1.0 / static_cast<double>(batch.steps.size()));
  }
  return run;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

namespace {

Phase eval_phase_for(const ModelState& model, Phase requested) {
  // BN models cannot run inference until population statistics exist;
  // before the first update the evaluation falls back to batch statistics.
  if (requested == Phase::Infer && is_bn_kind(model.kind) && !population_ready(model)) {
    return Phase::Train;
  }
  return requested;
}

}  // namespace

Metrics evaluate_pixels(const ModelState& model, const PixelSequenceDataset& ds, int64_t batch,
                        Phase phase, int64_t max_batches) {
  const int64_t n = ds.num_examples();
  if (n < 1) throw DataError("evaluate_pixels: empty dataset");
  const Phase effective = eval_phase_for(model, phase);
  int64_t done = 0, batches = 0;
  double ce_sum = 0.0, acc_sum = 0.0;
  while (done + batch <= n && (max_batches == 0 || batches < max_batches)) {
    std::vector<int64_t> idx(static_cast<size_t>(batch));
    for (int64_t i = 0; i < batch; ++i) idx[static_cast<size_t>(i)] = done + i;
    Batch b = make_pixel_batch(ds, idx);
    Tape tape;
    BatchRun run = run_batch(tape, model, b, effective, 0.0, nullptr);
    Metrics m = metrics(tape.value(run.step_logits[0]), b.labels);
    ce_sum += m.cross_entropy_nats * static_cast<double>(batch);
    acc_sum += m.accuracy * static_cast<double>(batch);
    done += batch;
    ++batches;
  }
  if (done == 0) throw DataError("evaluate_pixels: fewer examples than one batch");
  Metrics out;
  out.cross_entropy_nats = ce_sum / static_cast<double>(done);
  out.bits_per_character = out.cross_entropy_nats / std::log(2.0);
  out.accuracy = acc_sum / static_cast<double>(done);
  return out;
}

Metrics evaluate_lm(const ModelState& model, const CharCorpus& corpus, Split split,
                    int64_t length, int64_t batch, Phase phase, int64_t max_batches) {
  SegmentPlan plan = segment_corpus(corpus, split, length, 0);
  const int64_t windows = static_cast<int64_t>(plan.starts.size());
  const int64_t use = std::min<int64_t>(windows, batch);
  if (use < 1) throw DataError("evaluate_lm: no windows available");
  const Phase effective = eval_phase_for(model, phase);

  int64_t done = 0, batches = 0;
  double ce_sum = 0.0, acc_sum = 0.0;
  int64_t count = 0;
  while (done < windows && (max_batches == 0 || batches < max_batches)) {
    const int64_t take = std::min<int64_t>(windows - done, batch);
    Batch b = make_lm_batch(corpus, plan, done, take);
    Tape tape;
    BatchRun run = run_batch(tape, model, b, effective, 0.0, nullptr);
    for (size_t t = 0; t < run.step_logits.size(); ++t) {
      Metrics m = metrics(tape.value(run.step_logits[t]), b.step_targets[t]);
      ce_sum += m.cross_entropy_nats * static_cast<double>(take);
      acc_sum += m.accuracy * static_cast<double>(take);
      count += take;
    }
    done += take;
    ++batches;
  }
  Metrics out;
  out.cross_entropy_nats = ce_sum / static_cast<double>(count);
  out.bits_per_character = out.cross_entropy_nats / std::log(2.0);
  out.accuracy = acc_sum / static_cast<double>(count);
  return out;
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

namespace {

// Deterministic per-epoch stream of batches for either task family.
class BatchStream {
 public:
  BatchStream(const TaskData& data, const ExperimentConfig& config)
      : data_(data), config_(config), order_rng_(config.data_seed) {}

  Batch next() {
    if (data_.kind == TaskKind::CharLm) return next_lm();
    return next_pixels();
  }

 private:
  Batch next_pixels() {
    const int64_t n = data_.train_pixels.num_examples();
    if (n < config_.batch) throw DataError("training set smaller than one batch");
    if (cursor_ + config_.batch > n) {
      order_ = order_rng_.permutation(n);
      cursor_ = 0;
    }
    std::vector<int64_t> idx(order_.begin() + cursor_, order_.begin() + cursor_ + config_.batch);
    cursor_ += config_.batch;
    return make_pixel_batch(data_.train_pixels, idx);
  }

  Batch next_lm() {
    if (cursor_ >= static_cast<int64_t>(window_order_.size()) - config_.batch + 1 ||
        window_order_.empty()) {
      ++epoch_;
      plan_ = segment_corpus(data_.corpus, Split::Train, config_.seq_len,
                             config_.data_seed + static_cast<uint64_t>(epoch_) * 7919ULL);
      const int64_t windows = static_cast<int64_t>(plan_.starts.size());
      if (windows < config_.batch) {
        throw DataError("training split yields fewer windows than one batch");
      }
      window_order_ = order_rng_.permutation(windows);
      cursor_ = 0;
    }
    // Gather the batch's windows into a contiguous plan slice.
    SegmentPlan slice;
    slice.length = plan_.length;
    slice.offset = plan_.offset;
    for (int64_t i = 0; i < config_.batch; ++i) {
      slice.starts.push_back(plan_.starts[static_cast<size_t>(window_order_[static_cast<size_t>(cursor_ + i)])]);
    }
    cursor_ += config_.batch;
    return make_lm_batch(data_.corpus, slice, 0, config_.batch);
  }

  const TaskData& data_;
  const ExperimentConfig& config_;
  Rng order_rng_;
  std::vector<int64_t> order_;
  SegmentPlan plan_;
  std::vector<int64_t> window_order_;
  int64_t cursor_ = 1 << 30;
  int64_t epoch_ = -1;
};

void eval_and_record(const ModelState& model, const TaskData& data,
                     const ExperimentConfig& config, int64_t update, RunRecord& record,
                     const std::chrono::steady_clock::time_point& start) {
  Metrics m;
  if (data.kind == TaskKind::CharLm) {
    if (config.valid_count <= config.seq_len) return;  // no validation split configured
    m = evaluate_lm(model, data.corpus, Split::Valid, config.seq_len, config.batch, Phase::Infer,
                    config.eval_max_batches);
    record.add(update, "valid", "cross_entropy", m.cross_entropy_nats, wall_since(start));
    record.add(update, "valid", "bpc", m.bits_per_character, wall_since(start));
    record.add(update, "valid", "accuracy", m.accuracy, wall_since(start));
  } else {
    if (data.valid_pixels.num_examples() < config.batch) return;
    m = evaluate_pixels(model, data.valid_pixels, config.batch, Phase::Infer,
                        config.eval_max_batches);
    record.add(update, "valid", "cross_entropy", m.cross_entropy_nats, wall_since(start));
    record.add(update, "valid", "accuracy", m.accuracy, wall_since(start));
  }
}

}  // namespace

TrainOutput train(const ExperimentConfig& config) {
  TaskData data = load_task(config);
  return train(config, data);
}

TrainOutput train(const ExperimentConfig& config, const TaskData& data, bool throw_on_divergence,
                  double stop_threshold, int64_t stop_window) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();

  TrainOutput out;
  out.model = build_model(config, data);
  out.opt = OptimState::make(config.optim_config(), copy_params(out.model));
  out.record.config_snapshot = config.canonical();
  out.record.reference_scale = config.reference_scale_json();

  Rng noise_rng(config.noise_seed);
  BatchStream stream(data, config);
  const PopEstimator estimator = config.pop_estimator_kind();
  const bool clip_on = config.clip_mode != "none";
  const ClipConfig clip_cfg = clip_on ? config.clip_config() : ClipConfig{};
  const int64_t reset_update =
      config.popstat_reset_frac > 0.0
          ? static_cast<int64_t>(config.popstat_reset_frac * static_cast<double>(config.updates))
          : -1;

  eval_and_record(out.model, data, config, 0, out.record, start);

  std::deque<double> window;
  double window_sum = 0.0;

  for (int64_t update = 1; update <= config.updates; ++update) {
    Batch batch = stream.next();
    try {
      Tape tape;
      BatchRun run =
          run_batch(tape, out.model, batch, Phase::Train, config.noise_std, &noise_rng);
      const double loss = tape.scalar_value(run.loss);
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite training loss");
      }
      tape.backward(run.loss);

      ParamSet grads;
      for (const auto& [name, var] : run.bound.param_vars) grads.add(name, tape.grad(var));
      if (clip_on) {
        clip_gradients(grads, clip_cfg);
      } else if (!grads.all_finite()) {
        throw DivergenceError("non-finite gradient");
      }

      ParamSet params = copy_params(out.model);
      step(out.opt, params, grads);
      assign_params(out.model, params);

      if (update == reset_update) reset_model_population(out.model);
      accumulate_model_population(out.model, run.unrolled, 0, estimator, config.pop_momentum);

      out.record.add(update, "train", "cross_entropy", loss, wall_since(start));

      if (stop_threshold > 0.0) {
        window.push_back(loss);
        window_sum += loss;
        if (static_cast<int64_t>(window.size()) > stop_window) {
          window_sum -= window.front();
          window.pop_front();
        }
        if (static_cast<int64_t>(window.size()) == stop_window &&
            window_sum / static_cast<double>(stop_window) <= stop_threshold &&
            out.threshold_update < 0) {
          out.threshold_update = update;
        }
      }

      if (update % config.eval_every == 0 || update == config.updates) {
        eval_and_record(out.model, data, config, update, out.record, start);
      }
    } catch (const DivergenceError& e) {
      out.diverged = true;
      out.diverged_at = update;
      out.divergence_message =
          std::string(e.what()) + " at update " + std::to_string(update);
      if (throw_on_divergence) throw DivergenceError(out.divergence_message);
      return out;
    }

    if (out.threshold_update > 0) break;  // early stop: answer recorded
  }
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics.
// ---------------------------------------------------------------------------

std::vector<GradFlowRow> grad_flow_sweep(const ExperimentConfig& config, const TaskData& data,
                                         const std::vector<double>& gamma_grid) {
  for (double g : gamma_grid) {
    if (g <= 0.0) throw ConfigError("gamma grid values must be > 0");
  }
  // One fixed batch; the probe model is an untrained normalized tanh RNN.
  Batch batch;
  if (data.kind == TaskKind::CharLm) {
    SegmentPlan plan = segment_corpus(data.corpus, Split::Train, config.seq_len, 0);
    batch = make_lm_batch(data.corpus, plan, 0,
                          std::min<int64_t>(config.batch, static_cast<int64_t>(plan.starts.size())));
  } else {
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < std::min<int64_t>(config.batch, data.train_pixels.num_examples()); ++i) {
      idx.push_back(i);
    }
    batch = make_pixel_batch(data.train_pixels, idx);
  }

  std::vector<GradFlowRow> rows;
  for (double gamma : gamma_grid) {
    ExperimentConfig probe = config;
    probe.model = "bn-rnn";
    probe.gamma0 = gamma;
    ModelState model = build_model(probe, data);

    Rng noise_rng(config.noise_seed);
    Tape tape;
    BatchRun run = run_batch(tape, model, batch, Phase::Train, config.noise_std, &noise_rng);
    tape.backward(run.loss);

    for (size_t t = 0; t < run.unrolled.states.size(); ++t) {
      const Tensor& g = tape.grad(run.unrolled.states[t].h);
      double sq = 0.0;
      for (int64_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
      rows.push_back(GradFlowRow{gamma, static_cast<int64_t>(t) + 1, std::sqrt(sq)});
    }
  }
  return rows;
}

void write_grad_flow_csv(const std::string& path, const std::vector<GradFlowRow>& rows) {
  CsvWriter csv(path);
  csv.row({"gamma", "t", "grad_norm"});
  for (const auto& r : rows) {
    csv.row({CsvWriter::number(r.gamma), CsvWriter::number(r.t), CsvWriter::number(r.norm)});
  }
}

std::vector<TanhDerivRow> tanh_derivative_study(const std::vector<double>& sigma_grid,
                                                int64_t samples, uint64_t seed) {
  if (samples < 1) throw ConfigError("tanh-derivative requires samples >= 1");
  std::vector<TanhDerivRow> rows;
  for (size_t s = 0; s < sigma_grid.size(); ++s) {
    const double sigma = sigma_grid[s];
    if (sigma < 0.0) throw ConfigError("sigma must be >= 0");
    Rng rng(seed + 1000003ULL * static_cast<uint64_t>(s));
    std::vector<double> deriv(static_cast<size_t>(samples));
    double sum = 0.0;
    for (int64_t i = 0; i < samples; ++i) {
      const double x = sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0;
      const double th = std::tanh(x);
      deriv[static_cast<size_t>(i)] = 1.0 - th * th;
      sum += deriv[static_cast<size_t>(i)];
    }
    auto quartile = [&deriv](double q) {
      const int64_t n = static_cast<int64_t>(deriv.size());
      const int64_t idx = static_cast<int64_t>(q * static_cast<double>(n - 1) + 0.5);
      std::nth_element(deriv.begin(), deriv.begin() + idx, deriv.end());
      return deriv[static_cast<size_t>(idx)];
    };
    TanhDerivRow row;
    row.sigma = sigma;
    row.mean_derivative = sum / static_cast<double>(samples);
    row.q25 = quartile(0.25);
    row.q75 = quartile(0.75);
    rows.push_back(row);
  }
  return rows;
}

void write_tanh_csv(const std::string& path, const std::vector<TanhDerivRow>& rows) {
  CsvWriter csv(path);
  csv.row({"sigma", "mean_derivative", "q25", "q75"});
  for (const auto& r : rows) {
    csv.row({CsvWriter::number(r.sigma), CsvWriter::number(r.mean_derivative),
             CsvWriter::number(r.q25), CsvWriter::number(r.q75)});
  }
}

std::vector<PopTraceRow> popstat_trace(const ModelState& model, int64_t units_sample,
                                       uint64_t seed) {
  const PopulationStats* pop = nullptr;
  if (model.kind == ModelKind::BnRnn) pop = &model.bn_rnn.pop_h;
  if (model.kind == ModelKind::BnLstm) pop = &model.bn_lstm.pop_h;
  if (!pop || !pop->any_updated()) {
    throw DataError("model carries no population statistics to trace");
  }
  const int64_t dim = pop->dim();
  Rng rng(seed);
  auto perm = rng.permutation(dim);
  const int64_t take = std::min<int64_t>(units_sample, dim);

  std::vector<PopTraceRow> rows;
  for (int64_t u = 0; u < take; ++u) {
    const int64_t unit = perm[static_cast<size_t>(u)];
    double lo = 0.0, hi = 0.0;
    bool first = true;
    for (const auto& slot : pop->slots) {
      if (slot.count == 0) continue;
      const double v = slot.mean[unit];
      if (first) {
        lo = hi = v;
        first = false;
      } else {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    const bool degenerate = (hi - lo) < 1e-12;
    for (size_t t = 0; t < pop->slots.size(); ++t) {
      const auto& slot = pop->slots[t];
      rows.push_back(PopTraceRow{unit, static_cast<int64_t>(t) + 1, slot.mean[unit],
                                 slot.var[unit], degenerate});
    }
  }
  return rows;
}

void write_popstat_csv(const std::string& path, const std::vector<PopTraceRow>& rows) {
  CsvWriter csv(path);
  csv.row({"unit", "t", "mean", "var", "degenerate"});
  for (const auto& r : rows) {
    csv.row({CsvWriter::number(r.unit), CsvWriter::number(r.t), CsvWriter::number(r.mean),
             CsvWriter::number(r.var), r.degenerate ? "1" : "0"});
  }
}

std::vector<LengthRow> eval_lengths(const ModelState& model, const CharCorpus& corpus,
                                    const std::vector<int64_t>& lengths, Split split,
                                    int64_t batch, int64_t max_batches) {
  std::vector<LengthRow> rows;
  for (int64_t len : lengths) {
    if (len < 1) throw ConfigError("eval length must be >= 1");
    Metrics m = evaluate_lm(model, corpus, split, len, batch, Phase::Infer, max_batches);
    rows.push_back(LengthRow{len, m.bits_per_character});
  }
  return rows;
}

void write_lengths_csv(const std::string& path, const std::vector<LengthRow>& rows) {
  CsvWriter csv(path);
  csv.row({"length", "bpc"});
  for (const auto& r : rows) {
    csv.row({CsvWriter::number(r.length), CsvWriter::number(r.bpc)});
  }
}

std::vector<GammaRun> gamma_sweep(const ExperimentConfig& config, const TaskData& data,
                                  const std::vector<double>& gamma_grid) {
  std::vector<GammaRun> runs;
  for (double gamma : gamma_grid) {
    if (gamma <= 0.0) throw ConfigError("gamma grid values must be > 0");
    ExperimentConfig cfg = config;
    cfg.gamma0 = gamma;
    TrainOutput out = train(cfg, data, /*throw_on_divergence=*/false);
    GammaRun run;
    run.gamma = gamma;
    run.record = std::move(out.record);
    run.diverged = out.diverged;
    run.diverged_at = out.diverged_at;
    runs.push_back(std::move(run));
  }
  return runs;
}

void write_gamma_csv(const std::string& path, const std::vector<GammaRun>& runs) {
  CsvWriter csv(path);
  csv.row({"gamma", "update", "split", "metric", "value"});
  for (const auto& run : runs) {
    for (const auto& r : run.record.rows) {
      csv.row({CsvWriter::number(run.gamma), CsvWriter::number(r.update), r.split, r.metric,
               CsvWriter::number(r.value)});
    }
    if (run.diverged) {
      csv.row({CsvWriter::number(run.gamma), CsvWriter::number(run.diverged_at), "train",
               "diverged", "1"});
    }
  }
}

}  // namespace bnlstm
