#include <cstring>
#include <fstream>

#include "cdef/inference.hpp"

namespace cdef {

namespace {

constexpr char kMagic[8] = {'C', 'D', 'E', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot write checkpoint " + path.string());
  }
  template <class T>
  void put(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  template <class T>
  void put_vec(const std::vector<T>& v) {
    put(static_cast<std::uint64_t>(v.size()));
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  bool ok() const { return static_cast<bool>(out_); }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("cannot open checkpoint " + path.string());
  }
  template <class T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    check();
    return v;
  }
  template <class T>
  std::vector<T> get_vec() {
    const auto n = get<std::uint64_t>();
    if (n > (std::uint64_t{1} << 36)) throw DataError(path_.string() + ": corrupt vector length");
    std::vector<T> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    check();
    return v;
  }
  void raw(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    check();
  }

 private:
  void check() {
    if (!in_) throw DataError(path_.string() + ": truncated checkpoint");
  }
  std::ifstream in_;
  std::filesystem::path path_;
};

std::vector<std::uint64_t> widen(const VariationalState& vs, bool layers) {
  std::vector<std::uint64_t> out;
  if (layers) {
    for (std::size_t l = 0; l < vs.num_layers(); ++l) out.push_back(vs.layer_size(l));
  } else {
    for (std::size_t m = 0; m < vs.num_weight_layers(); ++m) out.push_back(vs.weight_size(m));
  }
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Writer w(path);
  w.raw(kMagic, sizeof kMagic);
  w.put(kVersion);
  w.put(ckpt.seed);
  const VariationalState& vs = ckpt.state;
  w.put(static_cast<std::uint64_t>(vs.n_samples()));
  w.put_vec(widen(vs, true));
  w.put_vec(widen(vs, false));
  w.put_vec(vs.z_coords());
  w.put_vec(vs.w_coords());
  const OptimizerState& o = ckpt.optimizer;
  w.put(o.settings.step_size);
  w.put(o.settings.decay);
  w.put(o.settings.denom_floor);
  w.put(o.settings.step_halflife);
  w.put(o.iteration);
  w.put_vec(o.z_sq);
  w.put_vec(o.w_sq);
  if (!w.ok()) throw DataError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError(path.string() + ": not a checkpoint");
  if (r.get<std::uint32_t>() != kVersion) throw DataError(path.string() + ": unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.seed = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  const auto layers = r.get_vec<std::uint64_t>();
  const auto weights = r.get_vec<std::uint64_t>();
  ckpt.state = VariationalState::from_layout(n, {layers.begin(), layers.end()}, {weights.begin(), weights.end()});
  auto z = r.get_vec<double>();
  auto wc = r.get_vec<double>();
  if (z.size() != ckpt.state.z_coords().size() || wc.size() != ckpt.state.w_coords().size())
    throw DataError(path.string() + ": coordinate count does not match layout");
  ckpt.state.z_coords() = std::move(z);
  ckpt.state.w_coords() = std::move(wc);
  OptimizerState& o = ckpt.optimizer;
  o.settings.step_size = r.get<double>();
  o.settings.decay = r.get<double>();
  o.settings.denom_floor = r.get<double>();
  o.settings.step_halflife = r.get<double>();
  o.iteration = r.get<std::uint64_t>();
  o.z_sq = r.get_vec<double>();
  o.w_sq = r.get_vec<double>();
  return ckpt;
}

}  // namespace cdef
