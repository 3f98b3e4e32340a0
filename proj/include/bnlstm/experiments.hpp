#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bnlstm/model.hpp"
#include "bnlstm/optim.hpp"
#include "bnlstm/tasks.hpp"

namespace bnlstm {

enum class TaskKind { Mnist, PMnist, CharLm };
TaskKind task_kind_from_name(const std::string& name);

// Flat experiment description. Field names mirror the CLI flags; canonical()
// emits a sorted key=value listing that the CLI accepts back as a config
// file, so a recorded snapshot reproduces its run.
struct ExperimentConfig {
  std::string task = "pmnist";  // mnist | pmnist | char-lm
  std::string model = "bn-lstm";
  int64_t d_h = 64;
  int64_t batch = 16;
  int64_t seq_len = 0;  // 0 = task natural length (pixel tasks); required for char-lm
  int64_t t_max = 0;    // 0 = effective sequence length

  std::string optimizer = "rmsprop";  // sgd | rmsprop | adam
  double learning_rate = 1e-3;
  double rmsprop_momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double stabilizer = 1e-8;
  std::string clip_mode = "global-norm";  // global-norm | per-param-norm | value | none
  double clip_threshold = 1.0;

  double gamma0 = 0.1;
  double beta0 = 0.0;
  double epsilon = 1e-5;
  double noise_std = 0.1;
  std::string bn_input_mode = "per-timestep";  // per-timestep | sequencewise
  std::string pop_estimator = "cumulative";    // cumulative | ema
  double pop_momentum = 0.1;
  // Fraction of the update budget after which population statistics restart
  // from scratch, so inference statistics reflect near-final parameters.
  // 0 keeps one cumulative average over the whole run.
  double popstat_reset_frac = 0.75;

  int64_t updates = 1000;
  int64_t eval_every = 200;
  int64_t eval_max_batches = 8;

  uint64_t init_seed = 1;
  uint64_t data_seed = 2;
  uint64_t noise_seed = 3;

  std::string hidden_init;  // "" = task default (identity for pixel tasks)
  double hidden_init_gain = 1.0;
  int64_t embed_dim = 0;

  std::string images;  // IDX pair for pixel tasks
  std::string labels;
  std::string corpus;  // text file for char-lm
  int64_t train_count = 0;
  int64_t valid_count = 0;
  bool pool14 = true;
  int64_t subset_n = 0;  // 0 = all remaining after the validation carve-out
  int64_t valid_n = 512;
  uint64_t pixel_perm_seed = 2718281828ULL;

  std::string out_dir = "out";
  std::string run_name = "run";

  void validate() const;
  std::string canonical() const;
  uint64_t hash() const;
  TaskKind task_kind() const { return task_kind_from_name(task); }
  ModelKind model_kind() const { return model_kind_from_name(model); }
  OptimConfig optim_config() const;
  ClipConfig clip_config() const;
  PopEstimator pop_estimator_kind() const;
  BNMode input_mode() const;
  // Task family settings used at full scale, recorded next to every run for
  // traceability against the desk-scale values actually used.
  std::string reference_scale_json() const;
};

struct RunRecord {
  std::string config_snapshot;
  std::string reference_scale;

  struct Row {
    int64_t update;
    std::string split;
    std::string metric;
    double value;
    double wall_ms;
  };
  std::vector<Row> rows;

  void add(int64_t update, std::string split, std::string metric, double value, double wall_ms);
  // Deterministic byte serialization: config plus all rows, wall clock
  // excluded. Two runs with identical seeds compare equal on these bytes.
  std::string canonical_bytes() const;
  void write_jsonl(const std::string& path) const;
  void write_csv(const std::string& path) const;
};

// Loaded task inputs shared across runs of a sweep.
struct TaskData {
  TaskKind kind = TaskKind::PMnist;
  PixelSequenceDataset train_pixels;
  PixelSequenceDataset valid_pixels;
  CharCorpus corpus;
  int64_t input_width = 0;
  int64_t num_classes = 0;
  int64_t effective_len = 0;
};

TaskData load_task(const ExperimentConfig& config);

ModelState build_model(const ExperimentConfig& config, const TaskData& data);

// One forward pass over a batch: binds the model, builds the loss (final-
// state classification or per-step next-symbol prediction) and exposes the
// pieces needed for gradients, metrics and statistics accumulation.
struct BatchRun {
  BoundModel bound;
  UnrollResult unrolled;
  Var loss;
  std::vector<Var> step_logits;
};

BatchRun run_batch(Tape& tape, const ModelState& model, const Batch& batch, Phase phase,
                   double noise_std, Rng* noise_rng, int64_t t_offset = 0);

Metrics evaluate_pixels(const ModelState& model, const PixelSequenceDataset& ds, int64_t batch,
                        Phase phase, int64_t max_batches);
Metrics evaluate_lm(const ModelState& model, const CharCorpus& corpus, Split split,
                    int64_t length, int64_t batch, Phase phase, int64_t max_batches);

struct TrainOutput {
  RunRecord record;
  ModelState model;
  OptimState opt;
  bool diverged = false;
  std::string divergence_message;
  int64_t diverged_at = -1;
  // First update at which the trailing-window mean of training cross
  // entropy fell below stop_threshold (-1 if never).
  int64_t threshold_update = -1;
};

TrainOutput train(const ExperimentConfig& config);
// stop_threshold > 0 ends the run once the smoothed training loss reaches
// it (the sweeps use this to avoid burning budget after the answer is
// known); 0 runs the full budget.
TrainOutput train(const ExperimentConfig& config, const TaskData& data,
                  bool throw_on_divergence = true, double stop_threshold = 0.0,
                  int64_t stop_window = 25);

// ---------------------------------------------------------------------------
// Diagnostics.
// ---------------------------------------------------------------------------

struct GradFlowRow {
  double gamma;
  int64_t t;
  double norm;  // || dLoss / dh_t ||; may be inf/nan and is reported as such
};
std::vector<GradFlowRow> grad_flow_sweep(const ExperimentConfig& config, const TaskData& data,
                                         const std::vector<double>& gamma_grid);
void write_grad_flow_csv(const std::string& path, const std::vector<GradFlowRow>& rows);

struct TanhDerivRow {
  double sigma;
  double mean_derivative;
  double q25;
  double q75;
};
std::vector<TanhDerivRow> tanh_derivative_study(const std::vector<double>& sigma_grid,
                                                int64_t samples, uint64_t seed);
void write_tanh_csv(const std::string& path, const std::vector<TanhDerivRow>& rows);

struct PopTraceRow {
  int64_t unit;
  int64_t t;
  double mean;
  double var;
  bool degenerate;  // flat trace (range ~ 0), flagged rather than hidden
};
std::vector<PopTraceRow> popstat_trace(const ModelState& model, int64_t units_sample,
                                       uint64_t seed);
void write_popstat_csv(const std::string& path, const std::vector<PopTraceRow>& rows);

struct LengthRow {
  int64_t length;
  double bpc;
};
std::vector<LengthRow> eval_lengths(const ModelState& model, const CharCorpus& corpus,
                                    const std::vector<int64_t>& lengths, Split split,
                                    int64_t batch, int64_t max_batches);
void write_lengths_csv(const std::string& path, const std::vector<LengthRow>& rows);

struct GammaRun {
  double gamma;
  RunRecord record;
  bool diverged = false;
  int64_t diverged_at = -1;
};
std::vector<GammaRun> gamma_sweep(const ExperimentConfig& config, const TaskData& data,
                                  const std::vector<double>& gamma_grid);
void write_gamma_csv(const std::string& path, const std::vector<GammaRun>& runs);

}  // namespace bnlstm
