#pragma once

#include "detra/autodiff.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace detra {

using ag::Matrix;
using ag::Param;
using ag::Tape;
using ag::Var;

/// Named parameters in a deterministic (lexicographic) order.
class ParamStore {
 public:
  /// Creates a parameter initialized uniformly in [-bound, bound].
  Param& uniform(const std::string& name, int rows, int cols, double bound, std::mt19937_64& rng);
  Param& constant(const std::string& name, int rows, int cols, double value);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Param>& all() { return params_; }
  const std::map<std::string, Param>& all() const { return params_; }

  void zero_grad();
  std::size_t count() const;

 private:
  Param& insert(const std::string& name, Matrix value);
  std::map<std::string, Param> params_;
};

/// Splits a run seed into an independent stream via splitmix64.
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream);

struct Linear {
  Param* weight = nullptr;
  Param* bias = nullptr;

  static Linear create(ParamStore& store, const std::string& name, int in, int out,
                       std::mt19937_64& rng, double gain = 1.0);
  Var operator()(Tape& tape, const Var& x) const;
  int in_features() const { return static_cast<int>(weight->value.rows()); }
  int out_features() const { return static_cast<int>(weight->value.cols()); }
};

/// Two-layer perceptron with ReLU hidden activation.
struct Mlp {
  Linear hidden;
  Linear output;

  static Mlp create(ParamStore& store, const std::string& name, int in, int hidden_width, int out,
                    std::mt19937_64& rng, double output_gain = 1.0);
  Var operator()(Tape& tape, const Var& x) const;
};

struct LayerNorm {
  Param* gamma = nullptr;
  Param* beta = nullptr;

  static LayerNorm create(ParamStore& store, const std::string& name, int width);
  Var operator()(Tape& tape, const Var& x) const;
};

struct Conv2d {
  Param* weight = nullptr;
  Param* bias = nullptr;
  int ksize = 3;
  int stride = 1;

  static Conv2d create(ParamStore& store, const std::string& name, int in, int out, int ksize,
                       int stride, std::mt19937_64& rng, double gain = 1.0);
  Var operator()(Tape& tape, const Var& x, int height, int width) const;
};

/// Single-layer GRU cell; the recurrence is unrolled by the caller.
struct GruCell {
  Linear input;   // x -> [z, r, n]
  Linear hidden;  // h -> [z, r, n]
  int width = 0;

  static GruCell create(ParamStore& store, const std::string& name, int in, int width,
                        std::mt19937_64& rng);
  /// `x_proj` is input(x) precomputed for this step.
  Var step(Tape& tape, const Var& x_proj, const Var& h) const;
};

}  // namespace detra
