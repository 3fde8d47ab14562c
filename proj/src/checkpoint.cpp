#include "vqr/checkpoint.hpp"

#include <cstring>

#include "vqr/image.hpp"

namespace vqr {

namespace {

void put_u8(std::vector<uint8_t>& o, uint8_t v) { o.push_back(v); }

template <typename T>
void put_le(std::vector<uint8_t>& o, T v) {
  for (size_t i = 0; i < sizeof(T); ++i) o.push_back(uint8_t(uint64_t(v) >> (8 * i)));
}

void put_f64(std::vector<uint8_t>& o, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_le<uint64_t>(o, bits);
}

void put_str(std::vector<uint8_t>& o, const std::string& s) {
  put_le<uint32_t>(o, uint32_t(s.size()));
  o.insert(o.end(), s.begin(), s.end());
}

void put_floats(std::vector<uint8_t>& o, const float* data, size_t n) {
  const size_t base = o.size();
  o.resize(base + n * 4);
  std::memcpy(o.data() + base, data, n * 4);
}

struct Reader {
  const std::vector<uint8_t>& b;
  size_t off = 0;
  const std::string& path;

  [[noreturn]] void fail(const std::string& what) const {
    throw IoError("checkpoint " + path + ": " + what + " at offset " + std::to_string(off));
  }
  void need(size_t n) const {
    if (off + n > b.size()) fail("truncated (" + std::to_string(n) + " bytes wanted)");
  }
  uint8_t u8() {
    need(1);
    return b[off++];
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= uint64_t(b[off + i]) << (8 * i);
    off += sizeof(T);
    return T(v);
  }
  double f64() {
    const uint64_t bits = le<uint64_t>();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const uint32_t n = le<uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(b.data() + off), n);
    off += n;
    return s;
  }
  void floats(float* out, size_t n) {
    need(n * 4);
    std::memcpy(out, b.data() + off, n * 4);
    off += n * 4;
  }
};

}  // namespace

void Checkpoint::add_params(const ParamMap& params) {
  for (const auto& [name, t] : params.items) tensors.emplace_back(name, t.clone());
}

void Checkpoint::add_opt(const std::string& name, const AdamState& st) {
  OptGroup g;
  g.name = name;
  g.t = st.t();
  g.m = const_cast<AdamState&>(st).m();
  g.v = const_cast<AdamState&>(st).v();
  opt_groups.push_back(std::move(g));
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string Checkpoint::config_value(const std::string& key) const {
  for (const auto& [k, v] : config_echo)
    if (k == key) return v;
  return "";
}

void Checkpoint::load_into(ParamMap& params) const {
  for (auto& [name, t] : params.items) {
    const Tensor* src = find(name);
    if (!src) throw IoError("checkpoint: missing tensor '" + name + "'");
    if (!same_shape(src->shape(), t.shape()))
      throw IoError("checkpoint: tensor '" + name + "' has shape " + shape_str(src->shape()) +
                    ", model wants " + shape_str(t.shape()));
    t.array() = src->array();
  }
}

void Checkpoint::load_opt(const std::string& name, AdamState& st) const {
  for (const auto& g : opt_groups) {
    if (g.name != name) continue;
    if (g.m.size() != st.m().size())
      throw IoError("checkpoint: optimizer group '" + name + "' has " +
                    std::to_string(g.m.size()) + " params, model wants " +
                    std::to_string(st.m().size()));
    for (size_t i = 0; i < g.m.size(); ++i) {
      if (g.m[i].size() != st.m()[i].size())
        throw IoError("checkpoint: optimizer group '" + name + "' param " + std::to_string(i) +
                      " size mismatch");
      st.m()[i] = g.m[i];
      st.v()[i] = g.v[i];
    }
    st.set_t(g.t);
    return;
  }
  throw IoError("checkpoint: missing optimizer group '" + name + "'");
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::vector<uint8_t> o;
  o.insert(o.end(), {'C', 'F', 'M', 'C'});
  put_le<uint32_t>(o, Checkpoint::kVersion);
  put_le<uint32_t>(o, ck.stage);

  put_le<uint32_t>(o, uint32_t(ck.config_echo.size()));
  for (const auto& [k, v] : ck.config_echo) {
    put_str(o, k);
    put_str(o, v);
  }

  put_le<uint32_t>(o, uint32_t(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    put_str(o, name);
    put_u8(o, 0);  // dtype: float32
    put_le<uint32_t>(o, uint32_t(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_le<uint32_t>(o, uint32_t(t.dim(i)));
    put_floats(o, t.data(), size_t(t.size()));
  }

  put_le<uint32_t>(o, uint32_t(ck.opt_groups.size()));
  for (const auto& g : ck.opt_groups) {
    put_str(o, g.name);
    put_le<uint64_t>(o, uint64_t(g.t));
    put_le<uint32_t>(o, uint32_t(g.m.size()));
    for (size_t i = 0; i < g.m.size(); ++i) {
      put_le<uint32_t>(o, uint32_t(g.m[i].size()));
      put_floats(o, g.m[i].data(), size_t(g.m[i].size()));
      put_floats(o, g.v[i].data(), size_t(g.v[i].size()));
    }
  }

  put_u8(o, ck.has_rng ? 1 : 0);
  if (ck.has_rng) {
    for (int i = 0; i < 4; ++i) put_le<uint64_t>(o, ck.rng.s[i]);
    put_f64(o, ck.rng.spare);
    put_u8(o, ck.rng.has_spare);
  }
  write_file(path, o);
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto bytes = read_file(path);
  Reader r{bytes, 0, path};
  r.need(4);
  if (std::memcmp(bytes.data(), "CFMC", 4) != 0) r.fail("bad magic");
  r.off = 4;
  const uint32_t version = r.le<uint32_t>();
  if (version != Checkpoint::kVersion)
    throw IoError("checkpoint " + path + ": unsupported format version " +
                  std::to_string(version));
  Checkpoint ck;
  ck.stage = r.le<uint32_t>();

  const uint32_t ncfg = r.le<uint32_t>();
  for (uint32_t i = 0; i < ncfg; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    ck.config_echo.emplace_back(std::move(k), std::move(v));
  }

  const uint32_t ntensors = r.le<uint32_t>();
  for (uint32_t i = 0; i < ntensors; ++i) {
    std::string name = r.str();
    const uint8_t dtype = r.u8();
    if (dtype != 0) r.fail("unsupported dtype code " + std::to_string(dtype));
    const uint32_t rank = r.le<uint32_t>();
    if (rank > 8) r.fail("absurd tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = int(r.le<uint32_t>());
    Tensor t(shape);
    r.floats(t.data(), size_t(t.size()));
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }

  const uint32_t ngroups = r.le<uint32_t>();
  for (uint32_t i = 0; i < ngroups; ++i) {
    Checkpoint::OptGroup g;
    g.name = r.str();
    g.t = int64_t(r.le<uint64_t>());
    const uint32_t nparams = r.le<uint32_t>();
    for (uint32_t p = 0; p < nparams; ++p) {
      const uint32_t n = r.le<uint32_t>();
      Eigen::ArrayXf m(n), v(n);
      r.floats(m.data(), n);
      r.floats(v.data(), n);
      g.m.push_back(std::move(m));
      g.v.push_back(std::move(v));
    }
    ck.opt_groups.push_back(std::move(g));
  }

  ck.has_rng = r.u8() != 0;
  if (ck.has_rng) {
    for (int i = 0; i < 4; ++i) ck.rng.s[i] = r.le<uint64_t>();
    ck.rng.spare = r.f64();
    ck.rng.has_spare = r.u8();
  }
  return ck;
}

}  // namespace vqr
