#include "cdiffdet/params.hpp"

#include <cmath>

#include "cdiffdet/backbone.hpp"
#include "cdiffdet/errors.hpp"
#include "cdiffdet/head.hpp"

namespace cdiffdet {

void ParamStore::add(const std::string& name, Tensor value) {
  if (!params_.emplace(name, std::move(value)).second) throw ContractError("duplicate parameter '" + name + "'");
}

void ParamStore::set(const std::string& name, Tensor value) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  if (it->second.shape() != value.shape()) {
    throw ShapeError("parameter '" + name + "' shape " + shape_str(it->second.shape()) + " cannot take " +
                     shape_str(value.shape()));
  }
  it->second = std::move(value);
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

void ParamStore::round_to_float() {
  for (auto& [_, t] : params_) {
    std::vector<double> v = t.values();
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
    t = Tensor(t.shape(), std::move(v));
  }
}

Tensor ParamContext::operator[](const std::string& name) const {
  auto it = watched_.find(name);
  if (it != watched_.end()) return it->second;
  if (!tape_) return store_.get(name);
  Tensor w = tape_->watch(store_.get(name));
  watched_.emplace(name, w);
  return w;
}

void ParamContext::bind(const std::string& name, Tensor watched) {
  if (!store_.contains(name)) throw ContractError("unknown parameter '" + name + "'");
  if (store_.get(name).shape() != watched.shape()) throw ShapeError("bind: shape differs for '" + name + "'");
  watched_[name] = std::move(watched);
}

std::map<std::string, Tensor> ParamContext::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : watched_) out.emplace(name, tape_->grad(t));
  return out;
}

Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  return Tensor::uniform(shape, rng, -bound, bound);
}

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore store;
  std::mt19937_64 rng(seed);
  add_backbone_params(store, cfg, rng);
  add_head_params(store, cfg, rng);
  store.round_to_float();
  return store;
}

}  // namespace cdiffdet
