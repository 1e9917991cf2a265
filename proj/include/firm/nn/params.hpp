#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "firm/nn/tensor.hpp"

namespace firm::nn {

struct Parameter {
  std::string name;
  Tensor tensor;
  bool frozen = false;
};

// Ordered, named parameter collection. Every parameter carries exactly one
// frozen flag; frozen parameters never require a gradient.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);
  Tensor add_normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng);
  Tensor add_constant(const std::string& name, Shape shape, double v);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::vector<Parameter>& params() noexcept { return params_; }
  const std::vector<Parameter>& params() const noexcept { return params_; }

  // Freezes or unfreezes every parameter whose name starts with `prefix`.
  void set_frozen(const std::string& prefix, bool frozen);
  void zero_grad();
  std::size_t trainable_count() const;

  // Overwrites values of parameters present in both stores (matched by name).
  void copy_values_from(const ParamStore& other);
  std::vector<double> flatten(bool frozen_only) const;

 private:
  std::vector<Parameter> params_;
};

class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(ParamStore& store) const;
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_;
};

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(ParamStore& store);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Versioned binary container: kind tag, JSON config string, and named
// parameters with their frozen flags.
struct Checkpoint {
  std::string kind;
  std::string config_json;
  std::vector<Parameter> params;
};

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const std::string& config_json,
                     const ParamStore& store);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Fills `store` from a checkpoint; names and shapes must match exactly.
void restore_params(ParamStore& store, const Checkpoint& ckpt);

}  // namespace firm::nn
