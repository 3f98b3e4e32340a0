#include "bnlstm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "bnlstm/errors.hpp"

namespace bnlstm {

namespace {

constexpr uint32_t kMagic = 0x4B434E42;  // "BNCK" little-endian
constexpr uint32_t kVersion = 1;
constexpr uint32_t kEndianMark = 0x01020304;
constexpr char kGateOrder[4] = {'f', 'i', 'o', 'g'};

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i64(std::string& buf, int64_t v) { put_u64(buf, static_cast<uint64_t>(v)); }

void put_f64(std::string& buf, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u64(buf, bits);
}

void put_string(std::string& buf, const std::string& s) {
  put_u64(buf, s.size());
  buf.append(s);
}

void put_tensor(std::string& buf, const Tensor& t) {
  put_u32(buf, static_cast<uint32_t>(t.ndim()));
  for (int64_t e : t.shape()) put_i64(buf, e);
  for (int64_t i = 0; i < t.numel(); ++i) put_f64(buf, t[i]);
}

void put_popstats(std::string& buf, const PopulationStats& pop) {
  put_u32(buf, pop.mode == BNMode::PerTimestep ? 0u : 1u);
  put_i64(buf, pop.t_max);
  put_u64(buf, pop.slots.size());
  put_i64(buf, pop.dim());
  for (const auto& slot : pop.slots) {
    put_i64(buf, slot.count);
    for (int64_t i = 0; i < slot.mean.numel(); ++i) put_f64(buf, slot.mean[i]);
    for (int64_t i = 0; i < slot.var.numel(); ++i) put_f64(buf, slot.var[i]);
  }
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  uint32_t get_u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(byte()) << (8 * i);
    return v;
  }

  uint64_t get_u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(byte()) << (8 * i);
    return v;
  }

  int64_t get_i64() { return static_cast<int64_t>(get_u64()); }

  double get_f64() {
    const uint64_t bits = get_u64();
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }

  std::string get_string() {
    const uint64_t n = get_u64();
    return get_string_raw(n);
  }

  std::string get_string_raw(uint64_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  Tensor get_tensor() {
    const uint32_t ndim = get_u32();
    if (ndim > 4) throw DataError("checkpoint tensor rank out of range");
    std::vector<int64_t> shape;
    for (uint32_t i = 0; i < ndim; ++i) shape.push_back(get_i64());
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = get_f64();
    return t;
  }

  PopulationStats get_popstats() {
    PopulationStats pop;
    pop.mode = get_u32() == 0 ? BNMode::PerTimestep : BNMode::Sequencewise;
    pop.t_max = get_i64();
    const uint64_t slots = get_u64();
    const int64_t dim = get_i64();
    pop.slots.resize(slots);
    for (auto& slot : pop.slots) {
      slot.count = get_i64();
      slot.mean = Tensor({dim});
      slot.var = Tensor({dim});
      for (int64_t i = 0; i < dim; ++i) slot.mean[i] = get_f64();
      for (int64_t i = 0; i < dim; ++i) slot.var[i] = get_f64();
    }
    return pop;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  uint8_t byte() { return static_cast<uint8_t>(data_[pos_++]); }

  void need(uint64_t n) {
    if (pos_ + n > data_.size()) throw DataError("truncated checkpoint");
  }

  std::string data_;
  size_t pos_ = 0;
};

uint32_t optim_kind_code(OptimKind kind) {
  switch (kind) {
    case OptimKind::Sgd:
      return 0;
    case OptimKind::RmsProp:
      return 1;
    case OptimKind::Adam:
      return 2;
  }
  return 0;
}

OptimKind optim_kind_from_code(uint32_t code) {
  switch (code) {
    case 0:
      return OptimKind::Sgd;
    case 1:
      return OptimKind::RmsProp;
    case 2:
      return OptimKind::Adam;
  }
  throw DataError("unknown optimizer kind in checkpoint");
}

uint32_t model_kind_code(ModelKind kind) {
  switch (kind) {
    case ModelKind::Rnn:
      return 0;
    case ModelKind::BnRnn:
      return 1;
    case ModelKind::Lstm:
      return 2;
    case ModelKind::BnLstm:
      return 3;
  }
  return 0;
}

ModelKind model_kind_from_code(uint32_t code) {
  switch (code) {
    case 0:
      return ModelKind::Rnn;
    case 1:
      return ModelKind::BnRnn;
    case 2:
      return ModelKind::Lstm;
    case 3:
      return ModelKind::BnLstm;
  }
  throw DataError("unknown model kind in checkpoint");
}

void put_paramset(std::string& buf, const ParamSet& set) {
  put_u64(buf, set.size());
  for (const auto& [name, t] : set.items) {
    put_string(buf, name);
    put_tensor(buf, t);
  }
}

ParamSet get_paramset(Reader& in) {
  ParamSet set;
  const uint64_t n = in.get_u64();
  for (uint64_t i = 0; i < n; ++i) {
    std::string name = in.get_string();
    set.add(std::move(name), in.get_tensor());
  }
  return set;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelState& model, const OptimState& opt,
                     uint64_t config_hash, const std::string& config_text) {
  std::string buf;
  put_u32(buf, kMagic);
  put_u32(buf, kVersion);
  put_u32(buf, kEndianMark);
  buf.append(kGateOrder, 4);
  put_u64(buf, config_hash);
  put_string(buf, config_text);

  put_u32(buf, model_kind_code(model.kind));
  put_i64(buf, model.d_x);
  put_i64(buf, model.d_h);
  put_i64(buf, model.num_classes);
  put_i64(buf, model.t_max);
  const bool embed_on = model.embed.numel() > 0;
  put_u32(buf, embed_on ? 1u : 0u);
  put_i64(buf, embed_on ? model.embed.rows() : 0);

  put_paramset(buf, copy_params(model));

  // Normalizer metadata + statistics per kind.
  if (model.kind == ModelKind::BnRnn) {
    put_f64(buf, model.bn_rnn.epsilon);
    put_popstats(buf, model.bn_rnn.pop_h);
    put_popstats(buf, model.bn_rnn.pop_x);
  } else if (model.kind == ModelKind::BnLstm) {
    put_f64(buf, model.bn_lstm.epsilon);
    put_popstats(buf, model.bn_lstm.pop_h);
    put_popstats(buf, model.bn_lstm.pop_x);
    put_popstats(buf, model.bn_lstm.pop_c);
  }

  put_u32(buf, optim_kind_code(opt.config.kind));
  put_f64(buf, opt.config.learning_rate);
  put_f64(buf, opt.config.rmsprop_decay);
  put_f64(buf, opt.config.rmsprop_momentum);
  put_f64(buf, opt.config.adam_beta1);
  put_f64(buf, opt.config.adam_beta2);
  put_f64(buf, opt.config.stabilizer);
  put_i64(buf, opt.step_count);
  put_paramset(buf, opt.acc1);
  put_paramset(buf, opt.acc2);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint output: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data));

  if (r.get_u32() != kMagic) throw DataError("bad checkpoint magic: " + path);
  const uint32_t version = r.get_u32();
  if (version != kVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  if (r.get_u32() != kEndianMark) throw DataError("checkpoint endianness mark mismatch");

  Checkpoint ck;
  {
    std::string tag = r.get_string_raw(4);
    ck.gate_order = tag;
    if (tag != std::string(kGateOrder, 4)) {
      throw DataError("unexpected gate block order '" + tag + "'");
    }
  }
  ck.config_hash = r.get_u64();
  ck.config_text = r.get_string();

  const ModelKind kind = model_kind_from_code(r.get_u32());
  const int64_t d_x = r.get_i64();
  const int64_t d_h = r.get_i64();
  const int64_t num_classes = r.get_i64();
  const int64_t t_max = r.get_i64();
  const bool embed_on = r.get_u32() != 0;
  const int64_t embed_rows = r.get_i64();

  ModelInit init;
  init.embed_dim = embed_on ? d_x : 0;
  const int64_t input_width = embed_on ? embed_rows : d_x;
  ck.model = allocate_model(kind, input_width, d_h, num_classes, t_max, init);

  ParamSet params = get_paramset(r);
  assign_params(ck.model, params);

  if (kind == ModelKind::BnRnn) {
    ck.model.bn_rnn.epsilon = r.get_f64();
    ck.model.bn_rnn.pop_h = r.get_popstats();
    ck.model.bn_rnn.pop_x = r.get_popstats();
  } else if (kind == ModelKind::BnLstm) {
    ck.model.bn_lstm.epsilon = r.get_f64();
    ck.model.bn_lstm.pop_h = r.get_popstats();
    ck.model.bn_lstm.pop_x = r.get_popstats();
    ck.model.bn_lstm.pop_c = r.get_popstats();
  }

  ck.opt.config.kind = optim_kind_from_code(r.get_u32());
  ck.opt.config.learning_rate = r.get_f64();
  ck.opt.config.rmsprop_decay = r.get_f64();
  ck.opt.config.rmsprop_momentum = r.get_f64();
  ck.opt.config.adam_beta1 = r.get_f64();
  ck.opt.config.adam_beta2 = r.get_f64();
  ck.opt.config.stabilizer = r.get_f64();
  ck.opt.step_count = r.get_i64();
  ck.opt.acc1 = get_paramset(r);
  ck.opt.acc2 = get_paramset(r);

  if (!r.done()) throw DataError("trailing bytes in checkpoint: " + path);
  return ck;
}

}  // namespace bnlstm
