// SPDX-License-Identifier: Apache-2.0
#include "bevcon/checkpoint.hpp"

#include <cstring>
#include <stdexcept>

#include "bevcon/serialize.hpp"

namespace bevcon {

static const char kMagic[8] = {'B', 'V', 'C', 'K', 'P', 'T', '0', '1'};

namespace {

struct Writer {
  std::string buf;
  void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void i64(std::int64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void tensor(const Tensor& t) {
    u64(t.shape.size());
    for (int d : t.shape) i64(d);
    raw(t.v.data(), t.v.size() * sizeof(double));
  }
};

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void raw(void* p, size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated string");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  Tensor tensor() {
    const std::uint64_t nd = u64();
    std::vector<int> shape;
    for (std::uint64_t i = 0; i < nd; ++i) shape.push_back(static_cast<int>(i64()));
    Tensor t(shape);
    raw(t.v.data(), t.v.size() * sizeof(double));
    return t;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const EmaState& ema,
                     const AdamW& opt, long step, const std::string& config_text) {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.str(config_text);
  w.i64(step);

  const auto& params = model.store.all();
  w.u64(params.size());
  for (const auto& p : params) {
    w.str(p->name);
    w.tensor(p->value);
  }

  w.u64(ema.target.size());
  for (const auto& t : ema.target) w.tensor(t);
  w.f64(ema.momentum);

  AdamW& mut = const_cast<AdamW&>(opt);
  w.i64(opt.step_count());
  w.u64(mut.moment1().size());
  for (const auto& t : mut.moment1()) w.tensor(t);
  for (const auto& t : mut.moment2()) w.tensor(t);

  write_file_atomic(path, w.buf);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string buf = read_file(path);
  Reader r(buf);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);

  Checkpoint ck;
  ck.config_text = r.str();
  ck.step = static_cast<long>(r.i64());
  const std::uint64_t np = r.u64();
  for (std::uint64_t i = 0; i < np; ++i) {
    std::string name = r.str();
    ck.params.emplace_back(std::move(name), r.tensor());
  }
  const std::uint64_t ne = r.u64();
  for (std::uint64_t i = 0; i < ne; ++i) ck.ema_target.push_back(r.tensor());
  ck.ema_momentum = r.f64();
  ck.opt_step = static_cast<long>(r.i64());
  const std::uint64_t nm = r.u64();
  for (std::uint64_t i = 0; i < nm; ++i) ck.opt_m.push_back(r.tensor());
  for (std::uint64_t i = 0; i < nm; ++i) ck.opt_v.push_back(r.tensor());
  return ck;
}

void restore_model(const Checkpoint& ck, Model& model) {
  if (ck.params.size() != model.store.all().size())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (const auto& [name, value] : ck.params) {
    Param* p = model.store.find(name);
    if (!p) throw std::runtime_error("checkpoint: unknown parameter " + name);
    if (!p->value.same_shape(value))
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    p->value = value;
  }
}

void restore_ema(const Checkpoint& ck, EmaState& ema) {
  if (ck.ema_target.size() != ema.target.size())
    throw std::runtime_error("checkpoint: EMA tensor count mismatch");
  for (size_t i = 0; i < ema.target.size(); ++i) {
    if (!ema.target[i].same_shape(ck.ema_target[i]))
      throw std::runtime_error("checkpoint: EMA shape mismatch");
    ema.target[i] = ck.ema_target[i];
  }
  ema.momentum = ck.ema_momentum;
}

void restore_optimizer(const Checkpoint& ck, AdamW& opt) {
  if (ck.opt_m.size() != opt.moment1().size())
    throw std::runtime_error("checkpoint: optimizer tensor count mismatch");
  for (size_t i = 0; i < ck.opt_m.size(); ++i) {
    opt.moment1()[i] = ck.opt_m[i];
    opt.moment2()[i] = ck.opt_v[i];
  }
  opt.set_step_count(ck.opt_step);
}

}  // namespace bevcon
