#include <cmath>

#include "placerec/binio.hpp"
#include "placerec/tensor_nn.hpp"

namespace placerec::nn {

namespace {
constexpr std::string_view kCheckpointMagic = "AGGW";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

Param& ParamStore::add(const std::string& name, Tensor value, double lr_multiplier) {
  if (params_.count(name)) fail(ErrorKind::ContractViolation, "duplicate parameter '" + name + "'");
  if (!(lr_multiplier > 0.0)) fail(ErrorKind::ContractViolation, "learning-rate multiplier must be positive");
  Param p;
  p.grad = Tensor(value.shape);
  p.adam_m = Tensor(value.shape);
  p.adam_v = Tensor(value.shape);
  p.value = std::move(value);
  p.lr_multiplier = lr_multiplier;
  return params_.emplace(name, std::move(p)).first->second;
}

Param& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) fail(ErrorKind::ContractViolation, "unknown parameter '" + name + "'");
  return it->second;
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) fail(ErrorKind::ContractViolation, "unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

void ParamStore::adam_step(const AdamConfig& config) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (auto& [_, p] : params_) {
    const double lr = config.learning_rate * p.lr_multiplier;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad.data[i];
      double& m = p.adam_m.data[i];
      double& v = p.adam_v.data[i];
      m = config.beta1 * m + (1.0 - config.beta1) * g;
      v = config.beta2 * v + (1.0 - config.beta2) * g * g;
      const double m_hat = m / correction1;
      const double v_hat = v / correction2;
      p.value.data[i] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

void ParamStore::set_lr_multiplier(const std::string& prefix, double multiplier) {
  if (!(multiplier > 0.0)) fail(ErrorKind::ContractViolation, "learning-rate multiplier must be positive");
  for (auto& [name, p] : params_)
    if (name.compare(0, prefix.size(), prefix) == 0) p.lr_multiplier = multiplier;
}

std::vector<std::uint8_t> ParamStore::serialize() const {
  binio::Writer w;
  w.magic(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params_.size()));
  for (const auto& [name, p] : params_) {
    w.str32(name);
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.value.data) w.f32(static_cast<float>(v));
    w.f32(static_cast<float>(p.lr_multiplier));
  }
  return w.buffer();
}

ParamStore ParamStore::deserialize(std::vector<std::uint8_t> bytes, const std::string& origin) {
  binio::Reader r(std::move(bytes), origin);
  r.expect_magic(kCheckpointMagic);
  const auto version = r.u32();
  if (version != kCheckpointVersion) r.error("unsupported checkpoint version " + std::to_string(version), 4);
  const auto count = r.u32();
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = r.offset();
    auto name = r.str32();
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) r.error("bad tensor rank " + std::to_string(rank), at);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = r.u32();
    Tensor t(shape);
    r.need(t.numel() * sizeof(float));
    for (auto& v : t.data) v = r.f32();
    const double mult = r.f32();
    if (!(mult > 0.0)) r.error("non-positive lr multiplier for '" + name + "'", r.offset() - 4);
    if (store.contains(name)) r.error("duplicate parameter '" + name + "'", at);
    store.add(name, std::move(t), mult);
  }
  if (!r.at_end()) r.error("trailing bytes after last record", r.offset());
  return store;
}

void ParamStore::save(const std::filesystem::path& path) const {
  binio::Writer w;
  const auto bytes = serialize();
  w.bytes(bytes.data(), bytes.size());
  w.write_file(path);
}

ParamStore ParamStore::load(const std::filesystem::path& path) {
  return deserialize(binio::read_file(path), path.string());
}

}  // namespace placerec::nn
