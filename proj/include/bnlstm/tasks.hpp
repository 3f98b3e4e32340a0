#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bnlstm/tape.hpp"
#include "bnlstm/tensor.hpp"

namespace bnlstm {

// ---------------------------------------------------------------------------
// Pixel-sequence classification data (MNIST-style IDX binaries).
// ---------------------------------------------------------------------------

struct PixelSequenceDataset {
  Tensor sequences;  // N x T x 1, intensities scaled to [0,1]
  std::vector<int32_t> labels;
  int64_t image_rows = 0;
  int64_t image_cols = 0;
  std::optional<std::vector<int64_t>> permutation;
  uint64_t permutation_seed = 0;

  int64_t num_examples() const { return sequences.extent(0); }
  int64_t seq_len() const { return sequences.extent(1); }
};

// Big-endian IDX pair (magic 0x00000803 images / 0x00000801 labels);
// pixel bytes scale by 1/255. Malformed headers, truncation and count
// mismatches raise DataError with distinct messages.
PixelSequenceDataset load_idx(const std::string& images_path, const std::string& labels_path);

// 2x2 average pooling (28x28 -> 14x14); rejects permuted datasets.
PixelSequenceDataset pool_2x2(const PixelSequenceDataset& ds);

// Seeded sample of n examples without replacement.
PixelSequenceDataset subset(const PixelSequenceDataset& ds, int64_t n, uint64_t seed);

// One fixed seeded pixel permutation applied to every example. Applying a
// second permutation is an error.
PixelSequenceDataset permute_pixels(const PixelSequenceDataset& ds, uint64_t seed);

// ---------------------------------------------------------------------------
// Character corpora. Byte-level symbols; the vocabulary comes from the
// training split only and the last class id is reserved for symbols unseen
// there.
// ---------------------------------------------------------------------------

struct CharCorpus {
  std::vector<uint8_t> vocabulary;  // distinct training symbols, ordered by byte value
  std::vector<int32_t> ids;
  int64_t train_end = 0;
  int64_t valid_end = 0;

  int64_t size() const { return static_cast<int64_t>(ids.size()); }
  // Class count including the reserved unknown id.
  int64_t num_classes() const { return static_cast<int64_t>(vocabulary.size()) + 1; }
  int32_t unknown_id() const { return static_cast<int32_t>(vocabulary.size()); }
};

enum class Split { Train, Valid, Test };

CharCorpus load_corpus(const std::string& path, int64_t train_count, int64_t valid_count);

std::pair<int64_t, int64_t> split_range(const CharCorpus& corpus, Split split);

// Nonoverlapping length-`length` windows with next-symbol targets. The
// training split draws the crop offset uniformly from 0..(L-1 mod length)
// per epoch seed; evaluation splits always use offset 0.
struct SegmentPlan {
  int64_t length = 0;
  int64_t offset = 0;
  std::vector<int64_t> starts;  // absolute indices into corpus.ids
};

SegmentPlan segment_corpus(const CharCorpus& corpus, Split split, int64_t length,
                           uint64_t epoch_seed);

// ---------------------------------------------------------------------------
// Batches. steps[t] is the input at timestep t+1; LM batches carry one-hot
// rows of width num_classes and per-step next-symbol targets,
// classification batches carry a label per sequence.
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<Tensor> steps;
  std::vector<std::vector<int32_t>> step_targets;
  std::vector<int32_t> labels;

  int64_t seq_len() const { return static_cast<int64_t>(steps.size()); }
  int64_t batch_size() const { return steps.empty() ? 0 : steps.front().rows(); }
};

Batch make_lm_batch(const CharCorpus& corpus, const SegmentPlan& plan, int64_t first_window,
                    int64_t count);
Batch make_pixel_batch(const PixelSequenceDataset& ds, const std::vector<int64_t>& indices);

// ---------------------------------------------------------------------------
// Prediction heads and metrics. The heads are affine maps to logits; the
// softmax lives in the loss.
// ---------------------------------------------------------------------------

Var classify_head(Tape& tape, Var h_last, Var w, Var b);
Var lm_head(Tape& tape, Var h_t, Var w, Var b);

struct Metrics {
  double cross_entropy_nats = 0.0;
  double bits_per_character = 0.0;
  double accuracy = 0.0;
};

// Log-sum-exp stabilized cross entropy; accuracy breaks argmax ties toward
// the lowest index.
Metrics metrics(const Tensor& logits, const std::vector<int32_t>& targets);

}  // namespace bnlstm
