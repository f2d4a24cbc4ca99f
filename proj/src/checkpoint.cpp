#include "moby/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <ostream>
#include <sstream>

namespace moby {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host order");

namespace {

constexpr char kMagic[4] = {'M', 'B', 'C', 'K'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

std::size_t dtype_bytes(DType d) { return d == DType::kF32 ? 4 : 8; }

template <typename Scalar>
constexpr DType dtype_of() {
  return sizeof(Scalar) == 4 ? DType::kF32 : DType::kF64;
}

// Bounds-checked cursor over the raw file bytes.
class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n, const char* what) { return std::string(take(n, what), n); }

  std::uint64_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw ParseError(std::string("checkpoint truncated in ") + what, pos_);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::string bytes_;
  std::uint64_t pos_ = 0;
};

template <typename Scalar>
TensorRecord make_record(const std::string& name, const Shape& shape, const Scalar* data, Index size) {
  TensorRecord r{name, dtype_of<Scalar>(), shape, std::string(reinterpret_cast<const char*>(data), static_cast<std::size_t>(size) * sizeof(Scalar))};
  return r;
}

// A destination for one record during restore.
template <typename Scalar>
struct Slot {
  std::string name;
  Shape shape;
  Scalar* data;
};

template <typename Scalar>
void add_encoder_slots(std::vector<Slot<Scalar>>& slots, Encoder<Scalar>& encoder, const std::string& prefix) {
  for (auto& n : collect(encoder, prefix)) slots.push_back({n.name, n.value.shape(), n.value.data().data()});
}

template <typename Scalar>
std::vector<Slot<Scalar>> state_slots(TrainingState<Scalar>& state) {
  std::vector<Slot<Scalar>> slots;
  add_encoder_slots(slots, state.encoders.online, "online");
  add_encoder_slots(slots, state.encoders.target, "target");
  const auto& params = state.optimizer.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    slots.push_back({"adamw.m." + params[i].name, params[i].value.shape(), state.optimizer.first_moments()[i].data()});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    slots.push_back({"adamw.v." + params[i].name, params[i].value.shape(), state.optimizer.second_moments()[i].data()});
  }
  for (std::size_t q = 0; q < 2; ++q) {
    auto& storage = state.queues[q].storage();
    slots.push_back({"queue" + std::to_string(q), {storage.rows(), storage.cols()}, storage.data()});
  }
  return slots;
}

std::string shape_text(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + "]";
}

// Verifies every slot has a matching record; returns them in slot order.
template <typename Scalar>
std::vector<const TensorRecord*> match(const std::vector<Slot<Scalar>>& slots, const Checkpoint& ckpt) {
  std::vector<const TensorRecord*> out;
  for (const auto& slot : slots) {
    const TensorRecord* r = ckpt.find(slot.name);
    if (r == nullptr) throw ShapeError("checkpoint has no tensor '" + slot.name + "'");
    if (r->shape != slot.shape) {
      throw ShapeError("tensor '" + slot.name + "': checkpoint shape " + shape_text(r->shape) + " but model expects " +
                       shape_text(slot.shape));
    }
    if (r->dtype != dtype_of<Scalar>()) {
      throw ConfigError("tensor '" + slot.name + "' is stored as " + to_string(r->dtype) + " but the model runs in " +
                        to_string(dtype_of<Scalar>()));
    }
    out.push_back(r);
  }
  return out;
}

template <typename Scalar>
void copy_into(const std::vector<Slot<Scalar>>& slots, const std::vector<const TensorRecord*>& records) {
  for (std::size_t i = 0; i < slots.size(); ++i) std::memcpy(slots[i].data, records[i]->payload.data(), records[i]->payload.size());
}

}  // namespace

std::string to_string(DType d) { return d == DType::kF32 ? "f32" : "f64"; }

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, ckpt.seed);
  put<std::int64_t>(out, ckpt.step);
  put<std::int64_t>(out, ckpt.optimizer_steps);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config_text.size()));
  out.write(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
  for (const auto& q : ckpt.queues) {
    put<std::int64_t>(out, q.cursor);
    put<std::int64_t>(out, q.fill);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (Index d : t.shape) put<std::int64_t>(out, d);
    out.write(t.payload.data(), static_cast<std::streamsize>(t.payload.size()));
  }
  if (!out) throw Error("failed to write checkpoint");
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  // Write then rename, so an interrupted save never leaves a truncated file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp + " for writing");
    write_checkpoint(out, ckpt);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into place at " + path);
}

Checkpoint read_checkpoint(std::istream& in) {
  Reader r(std::string(std::istreambuf_iterator<char>(in), {}));
  Checkpoint c;
  const std::string magic = r.bytes(4, "magic");
  if (magic != std::string(kMagic, 4)) throw ParseError("not a checkpoint file (bad magic)", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + ", expected " +
                         std::to_string(kCheckpointVersion),
                     4);
  }
  c.seed = r.get<std::uint64_t>("seed");
  c.step = r.get<std::int64_t>("step");
  c.optimizer_steps = r.get<std::int64_t>("optimizer steps");
  const auto config_len = r.get<std::uint32_t>("config length");
  c.config_text = r.bytes(config_len, "config text");
  for (auto& q : c.queues) {
    q.cursor = r.get<std::int64_t>("queue cursor");
    q.fill = r.get<std::int64_t>("queue fill");
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    t.name = r.bytes(name_len, "tensor name");
    const std::uint64_t dtype_at = r.offset();
    const auto dtype = r.get<std::uint8_t>("tensor dtype");
    if (dtype != 1 && dtype != 2) throw ParseError("tensor '" + t.name + "' has unknown dtype " + std::to_string(dtype), dtype_at);
    t.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint8_t>("tensor rank");
    std::uint64_t elements = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint64_t dim_at = r.offset();
      const auto dim = r.get<std::int64_t>("tensor dims");
      if (dim < 0) throw ParseError("tensor '" + t.name + "' has a negative extent", dim_at);
      t.shape.push_back(dim);
      elements *= static_cast<std::uint64_t>(dim);
    }
    t.payload = r.bytes(elements * dtype_bytes(t.dtype), "tensor payload");
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint", r.offset());
  return c;
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

template <typename Scalar>
Checkpoint snapshot(TrainingState<Scalar>& state, std::uint64_t seed, const std::string& config_text) {
  Checkpoint c;
  c.seed = seed;
  c.step = state.step;
  c.optimizer_steps = state.optimizer.steps();
  c.config_text = config_text;
  for (std::size_t q = 0; q < 2; ++q) c.queues[q] = {state.queues[q].cursor(), state.queues[q].fill()};
  for (const auto& slot : state_slots(state)) {
    c.tensors.push_back(make_record<Scalar>(slot.name, slot.shape, slot.data, numel(slot.shape)));
  }
  return c;
}

template <typename Scalar>
void restore(TrainingState<Scalar>& state, const Checkpoint& ckpt) {
  const auto slots = state_slots(state);
  const auto records = match(slots, ckpt);
  if (records.size() != ckpt.tensors.size()) {
    for (const auto& t : ckpt.tensors) {
      bool used = false;
      for (const auto& s : slots) used = used || s.name == t.name;
      if (!used) throw ShapeError("checkpoint tensor '" + t.name + "' has no counterpart in the model");
    }
  }
  for (std::size_t q = 0; q < 2; ++q) {
    const auto& qs = ckpt.queues[q];
    const Index capacity = state.queues[q].capacity();
    if (qs.fill < 0 || qs.fill > capacity || qs.cursor < 0 || qs.cursor >= capacity) {
      throw ShapeError("queue" + std::to_string(q) + ": cursor " + std::to_string(qs.cursor) + " / fill " +
                       std::to_string(qs.fill) + " invalid for capacity " + std::to_string(capacity));
    }
  }
  if (ckpt.step < 0 || ckpt.optimizer_steps < 0) throw ShapeError("checkpoint has a negative step counter");
  copy_into(slots, records);
  for (std::size_t q = 0; q < 2; ++q) state.queues[q].restore(ckpt.queues[q].cursor, ckpt.queues[q].fill);
  state.optimizer.set_steps(ckpt.optimizer_steps);
  state.step = ckpt.step;
}

template <typename Scalar>
void restore_backbone(Backbone<Scalar>& backbone, const Checkpoint& ckpt) {
  std::vector<Slot<Scalar>> slots;
  backbone.visit("online.backbone", [&](const std::string& name, Tensor<Scalar>& t, TensorRole) {
    slots.push_back({name, t.shape(), t.data().data()});
  });
  copy_into(slots, match(slots, ckpt));
}

#define MOBY_INSTANTIATE_CHECKPOINT(S)                                                   \
  template Checkpoint snapshot(TrainingState<S>&, std::uint64_t, const std::string&); \
  template void restore(TrainingState<S>&, const Checkpoint&);                         \
  template void restore_backbone(Backbone<S>&, const Checkpoint&);

MOBY_INSTANTIATE_CHECKPOINT(float)
MOBY_INSTANTIATE_CHECKPOINT(double)

}  // namespace moby
