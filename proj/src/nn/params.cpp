#include "firm/nn/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "firm/errors.hpp"

namespace firm::nn {

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (contains(name)) throw ArgumentError("duplicate parameter: " + name);
  Tensor t(std::move(shape), std::move(values), true);
  params_.push_back({name, t, false});
  return t;
}

Tensor ParamStore::add_normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return add(name, std::move(shape), std::move(v));
}

Tensor ParamStore::add_constant(const std::string& name, Shape shape, double v) {
  const auto n = numel(shape);
  return add(name, std::move(shape), std::vector<double>(n, v));
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ArgumentError("unknown parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

void ParamStore::set_frozen(const std::string& prefix, bool frozen) {
  for (auto& p : params_)
    if (p.name.rfind(prefix, 0) == 0) {
      p.frozen = frozen;
      p.tensor.set_requires_grad(!frozen);
    }
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::size_t ParamStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (!p.frozen) n += p.tensor.size();
  return n;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  for (auto& p : params_)
    for (const auto& q : other.params_)
      if (p.name == q.name) {
        if (p.tensor.shape() != q.tensor.shape()) throw ArgumentError("shape mismatch copying " + p.name);
        std::copy(q.tensor.value().begin(), q.tensor.value().end(), p.tensor.mutable_value().begin());
      }
}

std::vector<double> ParamStore::flatten(bool frozen_only) const {
  std::vector<double> out;
  for (const auto& p : params_)
    if (!frozen_only || p.frozen) out.insert(out.end(), p.tensor.value().begin(), p.tensor.value().end());
  return out;
}

void Sgd::step(ParamStore& store) const {
  for (auto& p : store.params()) {
    if (p.frozen) continue;
    const auto g = p.tensor.grad();
    if (g.empty()) continue;
    auto v = p.tensor.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr_ * g[i];
  }
}

void Adam::step(ParamStore& store) {
  auto& ps = store.params();
  if (m_.size() != ps.size()) {
    m_.assign(ps.size(), {});
    v_.assign(ps.size(), {});
    for (std::size_t i = 0; i < ps.size(); ++i) {
      m_[i].assign(ps[i].tensor.size(), 0.0);
      v_[i].assign(ps[i].tensor.size(), 0.0);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < ps.size(); ++k) {
    if (ps[k].frozen) continue;
    const auto g = ps[k].tensor.grad();
    if (g.empty()) continue;
    auto v = ps[k].tensor.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * g[i];
      v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * g[i] * g[i];
      v[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
    }
  }
}

namespace {

constexpr char kMagic[8] = {'F', 'I', 'R', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::ostream& os, const std::string& s) {
  put(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("checkpoint truncated");
  return v;
}

std::string get_str(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 26)) throw DataError("checkpoint string too long");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw DataError("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const std::string& config_json,
                     const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put(os, kVersion);
  put_str(os, kind);
  put_str(os, config_json);
  put(os, static_cast<std::uint32_t>(store.params().size()));
  for (const auto& p : store.params()) {
    put_str(os, p.name);
    put(os, static_cast<std::uint8_t>(p.frozen ? 1 : 0));
    put(os, static_cast<std::uint32_t>(p.tensor.ndim()));
    for (int d : p.tensor.shape()) put(os, static_cast<std::int32_t>(d));
    os.write(reinterpret_cast<const char*>(p.tensor.value().data()),
             static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("not a checkpoint file: " + path.string());
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.kind = get_str(is);
  ck.config_json = get_str(is);
  const auto n = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    Parameter p;
    p.name = get_str(is);
    p.frozen = get<std::uint8_t>(is) != 0;
    const auto nd = get<std::uint32_t>(is);
    if (nd > 8) throw DataError("checkpoint tensor rank too large");
    Shape shape(nd);
    for (auto& d : shape) {
      d = get<std::int32_t>(is);
      if (d < 1) throw DataError("checkpoint has non-positive dimension");
    }
    std::vector<double> values(numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double))))
      throw DataError("checkpoint truncated");
    p.tensor = Tensor(std::move(shape), std::move(values), !p.frozen);
    ck.params.push_back(std::move(p));
  }
  return ck;
}

void restore_params(ParamStore& store, const Checkpoint& ckpt) {
  if (ckpt.params.size() != store.params().size())
    throw DataError("checkpoint parameter count " + std::to_string(ckpt.params.size()) + " does not match model (" +
                    std::to_string(store.params().size()) + ")");
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    auto& dst = store.params()[i];
    const auto& src = ckpt.params[i];
    if (dst.name != src.name || dst.tensor.shape() != src.tensor.shape())
      throw DataError("checkpoint parameter mismatch at " + src.name);
    std::copy(src.tensor.value().begin(), src.tensor.value().end(), dst.tensor.mutable_value().begin());
    dst.frozen = src.frozen;
    dst.tensor.set_requires_grad(!src.frozen);
  }
}

}  // namespace firm::nn
