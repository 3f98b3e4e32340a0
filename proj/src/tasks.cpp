#include "bnlstm/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "bnlstm/errors.hpp"
#include "bnlstm/rng.hpp"

namespace bnlstm {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_be32(std::ifstream& in, const std::string& path, const char* what) {
  unsigned char buf[4];
  if (!in.read(reinterpret_cast<char*>(buf), 4)) {
    throw DataError("truncated IDX file (" + std::string(what) + "): " + path);
  }
  return (static_cast<uint32_t>(buf[0]) << 24) | (static_cast<uint32_t>(buf[1]) << 16) |
         (static_cast<uint32_t>(buf[2]) << 8) | static_cast<uint32_t>(buf[3]);
}

std::string hex32(uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

}  // namespace

PixelSequenceDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError("cannot open IDX images file: " + images_path);
  const uint32_t img_magic = read_be32(img, images_path, "images magic");
  if (img_magic != kImagesMagic) {
    throw DataError("bad IDX images magic " + hex32(img_magic) + " (expected " +
                    hex32(kImagesMagic) + "): " + images_path);
  }
  const uint32_t count = read_be32(img, images_path, "image count");
  const uint32_t rows = read_be32(img, images_path, "image rows");
  const uint32_t cols = read_be32(img, images_path, "image cols");

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError("cannot open IDX labels file: " + labels_path);
  const uint32_t lab_magic = read_be32(lab, labels_path, "labels magic");
  if (lab_magic != kLabelsMagic) {
    throw DataError("bad IDX labels magic " + hex32(lab_magic) + " (expected " +
                    hex32(kLabelsMagic) + "): " + labels_path);
  }
  const uint32_t lab_count = read_be32(lab, labels_path, "label count");
  if (lab_count != count) {
    throw DataError("IDX count mismatch: " + std::to_string(count) + " images vs " +
                    std::to_string(lab_count) + " labels");
  }

  const int64_t n = count;
  const int64_t t = static_cast<int64_t>(rows) * static_cast<int64_t>(cols);
  PixelSequenceDataset ds;
  ds.image_rows = rows;
  ds.image_cols = cols;
  ds.sequences = Tensor({n, t, 1});
  ds.labels.resize(static_cast<size_t>(n));

  std::vector<unsigned char> pixel_buf(static_cast<size_t>(t));
  for (int64_t i = 0; i < n; ++i) {
    if (!img.read(reinterpret_cast<char*>(pixel_buf.data()), t)) {
      throw DataError("truncated IDX file (pixel data): " + images_path);
    }
    double* dst = ds.sequences.raw() + i * t;
    for (int64_t j = 0; j < t; ++j) dst[j] = static_cast<double>(pixel_buf[j]) / 255.0;
  }
  for (int64_t i = 0; i < n; ++i) {
    char byte;
    if (!lab.read(&byte, 1)) throw DataError("truncated IDX file (label data): " + labels_path);
    ds.labels[static_cast<size_t>(i)] = static_cast<int32_t>(static_cast<unsigned char>(byte));
  }
  return ds;
}

PixelSequenceDataset pool_2x2(const PixelSequenceDataset& ds) {
  if (ds.permutation) throw DataError("pool_2x2 must run before pixel permutation");
  if (ds.image_rows % 2 != 0 || ds.image_cols % 2 != 0) {
    throw DataError("pool_2x2 requires even image extents, got " + std::to_string(ds.image_rows) +
                    "x" + std::to_string(ds.image_cols));
  }
  const int64_t n = ds.num_examples();
  const int64_t rows = ds.image_rows / 2, cols = ds.image_cols / 2;
  PixelSequenceDataset out;
  out.image_rows = rows;
  out.image_cols = cols;
  out.labels = ds.labels;
  out.sequences = Tensor({n, rows * cols, 1});
  for (int64_t i = 0; i < n; ++i) {
    const double* src = ds.sequences.raw() + i * ds.seq_len();
    double* dst = out.sequences.raw() + i * rows * cols;
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t c = 0; c < cols; ++c) {
        const int64_t r0 = 2 * r, c0 = 2 * c;
        dst[r * cols + c] = 0.25 * (src[r0 * ds.image_cols + c0] + src[r0 * ds.image_cols + c0 + 1] +
                                    src[(r0 + 1) * ds.image_cols + c0] +
                                    src[(r0 + 1) * ds.image_cols + c0 + 1]);
      }
    }
  }
  return out;
}

PixelSequenceDataset subset(const PixelSequenceDataset& ds, int64_t n, uint64_t seed) {
  if (n < 1 || n > ds.num_examples()) {
    throw DataError("subset size " + std::to_string(n) + " out of range for " +
                    std::to_string(ds.num_examples()) + " examples");
  }
  Rng rng(seed);
  const auto order = rng.permutation(ds.num_examples());
  const int64_t t = ds.seq_len();
  PixelSequenceDataset out;
  out.image_rows = ds.image_rows;
  out.image_cols = ds.image_cols;
  out.permutation = ds.permutation;
  out.permutation_seed = ds.permutation_seed;
  out.sequences = Tensor({n, t, 1});
  out.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t src = order[static_cast<size_t>(i)];
    std::copy(ds.sequences.raw() + src * t, ds.sequences.raw() + (src + 1) * t,
              out.sequences.raw() + i * t);
    out.labels[static_cast<size_t>(i)] = ds.labels[static_cast<size_t>(src)];
  }
  return out;
}

PixelSequenceDataset permute_pixels(const PixelSequenceDataset& ds, uint64_t seed) {
  if (ds.permutation) throw DataError("dataset is already pixel-permuted");
  Rng rng(seed);
  const int64_t t = ds.seq_len();
  const auto perm = rng.permutation(t);
  PixelSequenceDataset out;
  out.image_rows = ds.image_rows;
  out.image_cols = ds.image_cols;
  out.labels = ds.labels;
  out.permutation = perm;
  out.permutation_seed = seed;
  const int64_t n = ds.num_examples();
  out.sequences = Tensor({n, t, 1});
  for (int64_t i = 0; i < n; ++i) {
    const double* src = ds.sequences.raw() + i * t;
    double* dst = out.sequences.raw() + i * t;
    for (int64_t j = 0; j < t; ++j) dst[j] = src[perm[static_cast<size_t>(j)]];
  }
  return out;
}

CharCorpus load_corpus(const std::string& path, int64_t train_count, int64_t valid_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  const int64_t n = static_cast<int64_t>(bytes.size());
  if (train_count < 1 || valid_count < 0 || train_count + valid_count > n) {
    throw DataError("corpus split counts (" + std::to_string(train_count) + "," +
                    std::to_string(valid_count) + ") do not fit corpus of " + std::to_string(n) +
                    " characters");
  }

  CharCorpus corpus;
  corpus.train_end = train_count;
  corpus.valid_end = train_count + valid_count;

  bool seen[256] = {false};
  for (int64_t i = 0; i < train_count; ++i) seen[bytes[static_cast<size_t>(i)]] = true;
  int32_t symbol_id[256];
  std::fill(std::begin(symbol_id), std::end(symbol_id), -1);
  for (int s = 0; s < 256; ++s) {
    if (seen[s]) {
      symbol_id[s] = static_cast<int32_t>(corpus.vocabulary.size());
      corpus.vocabulary.push_back(static_cast<uint8_t>(s));
    }
  }
  const int32_t unknown = corpus.unknown_id();
  corpus.ids.resize(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) {
    const int32_t id = symbol_id[bytes[i]];
    corpus.ids[i] = id >= 0 ? id : unknown;
  }
  return corpus;
}

std::pair<int64_t, int64_t> split_range(const CharCorpus& corpus, Split split) {
  switch (split) {
    case Split::Train:
      return {0, corpus.train_end};
    case Split::Valid:
      return {corpus.train_end, corpus.valid_end};
    case Split::Test:
      return {corpus.valid_end, corpus.size()};
  }
  return {0, 0};
}

SegmentPlan segment_corpus(const CharCorpus& corpus, Split split, int64_t length,
                           uint64_t epoch_seed) {
  if (length < 1) throw DataError("segment length must be >= 1");
  const auto [begin, end] = split_range(corpus, split);
  const int64_t span = end - begin;
  if (span < length + 1) {
    throw DataError("split of " + std::to_string(span) + " characters is too short for length " +
                    std::to_string(length) + " windows (need length+1)");
  }
  // The usable span is span-1 symbols of input (every window needs one
  // lookahead symbol for its targets).
  const int64_t windows = (span - 1) / length;
  const int64_t slack = (span - 1) % length;
  SegmentPlan plan;
  plan.length = length;
  if (split == Split::Train && slack > 0) {
    Rng rng(epoch_seed);
    plan.offset = rng.uniform_int(0, slack);
  } else {
    plan.offset = 0;
  }
  plan.starts.reserve(static_cast<size_t>(windows));
  for (int64_t w = 0; w < windows; ++w) {
    plan.starts.push_back(begin + plan.offset + w * length);
  }
  return plan;
}

Batch make_lm_batch(const CharCorpus& corpus, const SegmentPlan& plan, int64_t first_window,
                    int64_t count) {
  const int64_t total = static_cast<int64_t>(plan.starts.size());
  if (first_window < 0 || count < 1 || first_window + count > total) {
    throw DataError("window range [" + std::to_string(first_window) + "," +
                    std::to_string(first_window + count) + ") out of " + std::to_string(total));
  }
  const int64_t v = corpus.num_classes();
  Batch batch;
  batch.steps.reserve(static_cast<size_t>(plan.length));
  batch.step_targets.resize(static_cast<size_t>(plan.length));
  for (int64_t t = 0; t < plan.length; ++t) {
    Tensor x({count, v});
    auto& targets = batch.step_targets[static_cast<size_t>(t)];
    targets.resize(static_cast<size_t>(count));
    for (int64_t b = 0; b < count; ++b) {
      const int64_t pos = plan.starts[static_cast<size_t>(first_window + b)] + t;
      x.at(b, corpus.ids[static_cast<size_t>(pos)]) = 1.0;
      targets[static_cast<size_t>(b)] = corpus.ids[static_cast<size_t>(pos + 1)];
    }
    batch.steps.push_back(std::move(x));
  }
  return batch;
}

Batch make_pixel_batch(const PixelSequenceDataset& ds, const std::vector<int64_t>& indices) {
  if (indices.empty()) throw DataError("empty pixel batch");
  const int64_t t_len = ds.seq_len();
  const int64_t m = static_cast<int64_t>(indices.size());
  Batch batch;
  batch.steps.reserve(static_cast<size_t>(t_len));
  batch.labels.resize(static_cast<size_t>(m));
  for (int64_t b = 0; b < m; ++b) {
    batch.labels[static_cast<size_t>(b)] = ds.labels[static_cast<size_t>(indices[static_cast<size_t>(b)])];
  }
  for (int64_t t = 0; t < t_len; ++t) {
    Tensor x({m, 1});
    for (int64_t b = 0; b < m; ++b) {
      x.at(b, 0) = ds.sequences.raw()[indices[static_cast<size_t>(b)] * t_len + t];
    }
    batch.steps.push_back(std::move(x));
  }
  return batch;
}

Var classify_head(Tape& tape, Var h_last, Var w, Var b) {
  return tape.add(tape.matmul(h_last, w),
                  tape.broadcast_rows(b, tape.value(h_last).rows()));
}

Var lm_head(Tape& tape, Var h_t, Var w, Var b) { return classify_head(tape, h_t, w, b); }

Metrics metrics(const Tensor& logits, const std::vector<int32_t>& targets) {
  if (logits.ndim() != 2) {
    throw ShapeError("metrics expects [batch x classes] logits, got " + logits.shape_string());
  }
  const int64_t m = logits.rows(), k = logits.cols();
  if (static_cast<int64_t>(targets.size()) != m) {
    throw ShapeError("metrics: " + std::to_string(targets.size()) + " targets for batch " +
                     std::to_string(m));
  }
  if (!logits.all_finite()) throw DomainError("metrics: non-finite logits");

  double total_ce = 0.0;
  int64_t correct = 0;
  for (int64_t i = 0; i < m; ++i) {
    const double* row = logits.raw() + i * k;
    int64_t argmax = 0;
    double hi = row[0];
    for (int64_t j = 1; j < k; ++j) {
      if (row[j] > hi) {  // strict: ties keep the lowest index
        hi = row[j];
        argmax = j;
      }
    }
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(row[j] - hi);
    const int32_t target = targets[static_cast<size_t>(i)];
    if (target < 0 || target >= k) throw DomainError("metrics: target class out of range");
    total_ce += hi + std::log(z) - row[target];
    if (argmax == target) ++correct;
  }
  Metrics out;
  out.cross_entropy_nats = total_ce / static_cast<double>(m);
  out.bits_per_character = out.cross_entropy_nats / std::log(2.0);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(m);
  return out;
}

}  // namespace bnlstm
