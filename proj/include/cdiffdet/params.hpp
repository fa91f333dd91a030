#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cdiffdet/config.hpp"
#include "cdiffdet/tensor.hpp"

namespace cdiffdet {

// Named parameter registry. Iteration order is lexicographic by name.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  void set(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;
  std::vector<std::string> names() const;
  const std::map<std::string, Tensor>& items() const { return params_; }

  // Rounds every value to the nearest 32-bit float.
  void round_to_float();

 private:
  std::map<std::string, Tensor> params_;
};

// Binds a ParamStore to a forward pass. With a tape, each parameter is
// watched on first access so its gradient can be read after backward().
class ParamContext {
 public:
  explicit ParamContext(const ParamStore& store, GradTape* tape = nullptr) : store_(store), tape_(tape) {}
  ParamContext(const ParamContext&) = delete;
  ParamContext& operator=(const ParamContext&) = delete;

  Tensor operator[](const std::string& name) const;
  // Serves `name` from an externally watched tensor instead of the store.
  void bind(const std::string& name, Tensor watched);
  GradTape* tape() const { return tape_; }
  // Gradient of every accessed parameter. Unaccessed parameters are absent.
  std::map<std::string, Tensor> gradients() const;

 private:
  const ParamStore& store_;
  GradTape* tape_;
  mutable std::map<std::string, Tensor> watched_;
};

// U(-b, b) with b = gain * sqrt(3 / fan_in).
Tensor fan_in_uniform(const Shape& shape, std::size_t fan_in, double gain, std::mt19937_64& rng);

// Fan-in scaled uniform weights, zero biases, unit LayerNorm gains, and a
// low-prior classification bias. Values are rounded to 32-bit floats.
ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

}  // namespace cdiffdet
