#include "detra/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace detra {

Param& ParamStore::insert(const std::string& name, Matrix value) {
  if (params_.count(name)) throw std::logic_error("duplicate parameter " + name);
  Param& p = params_[name];
  p.value = std::move(value);
  p.zero_grad();
  return p;
}

Param& ParamStore::uniform(const std::string& name, int rows, int cols, double bound,
                           std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix value(rows, cols);
  for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = dist(rng);
  return insert(name, std::move(value));
}

Param& ParamStore::constant(const std::string& name, int rows, int cols, double value) {
  return insert(name, Matrix::Constant(rows, cols, value));
}

Param& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::uint64_t split_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Linear Linear::create(ParamStore& store, const std::string& name, int in, int out,
                      std::mt19937_64& rng, double gain) {
  const double bound = gain * std::sqrt(6.0 / (in + out));
  Linear layer;
  layer.weight = &store.uniform(name + ".weight", in, out, bound, rng);
  layer.bias = &store.constant(name + ".bias", 1, out, 0.0);
  return layer;
}

Var Linear::operator()(Tape& tape, const Var& x) const {
  return ag::linear(x, tape.param(*weight), tape.param(*bias));
}

Mlp Mlp::create(ParamStore& store, const std::string& name, int in, int hidden_width, int out,
                std::mt19937_64& rng, double output_gain) {
  Mlp mlp;
  mlp.hidden = Linear::create(store, name + ".fc1", in, hidden_width, rng, std::sqrt(2.0));
  mlp.output = Linear::create(store, name + ".fc2", hidden_width, out, rng, output_gain);
  return mlp;
}

Var Mlp::operator()(Tape& tape, const Var& x) const {
  return output(tape, ag::relu(hidden(tape, x)));
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, int width) {
  LayerNorm ln;
  ln.gamma = &store.constant(name + ".gamma", 1, width, 1.0);
  ln.beta = &store.constant(name + ".beta", 1, width, 0.0);
  return ln;
}

Var LayerNorm::operator()(Tape& tape, const Var& x) const {
  return ag::layer_norm_rows(x, tape.param(*gamma), tape.param(*beta));
}

Conv2d Conv2d::create(ParamStore& store, const std::string& name, int in, int out, int ksize,
                      int stride, std::mt19937_64& rng, double gain) {
  const double fan_in = static_cast<double>(in * ksize * ksize);
  Conv2d conv;
  conv.weight = &store.uniform(name + ".weight", ksize * ksize * in, out,
                               gain * std::sqrt(3.0 / fan_in), rng);
  conv.bias = &store.constant(name + ".bias", 1, out, 0.0);
  conv.ksize = ksize;
  conv.stride = stride;
  return conv;
}

Var Conv2d::operator()(Tape& tape, const Var& x, int height, int width) const {
  return ag::conv2d(x, height, width, tape.param(*weight), tape.param(*bias), ksize, stride);
}

GruCell GruCell::create(ParamStore& store, const std::string& name, int in, int width,
                        std::mt19937_64& rng) {
  GruCell cell;
  cell.input = Linear::create(store, name + ".input", in, 3 * width, rng);
  cell.hidden = Linear::create(store, name + ".hidden", width, 3 * width, rng);
  cell.width = width;
  return cell;
}

Var GruCell::step(Tape& tape, const Var& x_proj, const Var& h) const {
  const Var h_proj = hidden(tape, h);
  const Var z = ag::sigmoid(ag::add(ag::slice_cols(x_proj, 0, width), ag::slice_cols(h_proj, 0, width)));
  const Var r =
      ag::sigmoid(ag::add(ag::slice_cols(x_proj, width, width), ag::slice_cols(h_proj, width, width)));
  const Var n = ag::tanh(ag::add(ag::slice_cols(x_proj, 2 * width, width),
                                 ag::mul(r, ag::slice_cols(h_proj, 2 * width, width))));
  // h' = n + z * (h - n)
  return ag::add(n, ag::mul(z, ag::sub(h, n)));
}

}  // namespace detra
