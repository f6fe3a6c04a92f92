#include "detra/gradcheck.hpp"

#include <algorithm>

namespace detra {

namespace {

struct Probe {
  Matrix projection;
};

double evaluate(const GraphFn& fn, const std::vector<Matrix>& inputs, Probe& probe,
                std::mt19937_64& rng) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.constant(m));
  const Var out = fn(tape, vars);
  if (probe.projection.size() == 0) {
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    probe.projection.resize(out.rows(), out.cols());
    for (Eigen::Index i = 0; i < probe.projection.size(); ++i) probe.projection.data()[i] = dist(rng);
  }
  return (out.value().array() * probe.projection.array()).sum();
}

std::vector<Eigen::Index> strided(Eigen::Index size, int max_entries) {
  std::vector<Eigen::Index> idx;
  const Eigen::Index stride = std::max<Eigen::Index>(1, size / std::max(1, max_entries));
  for (Eigen::Index i = 0; i < size && static_cast<int>(idx.size()) < max_entries; i += stride)
    idx.push_back(i);
  return idx;
}

}  // namespace

GradCheckResult gradcheck(const GraphFn& fn, std::vector<Matrix> inputs, ParamStore* store,
                          std::uint64_t seed, double step, int max_entries) {
  std::mt19937_64 rng(seed);
  Probe probe;
  evaluate(fn, inputs, probe, rng);

  // Analytic gradients.
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.leaf(m));
  if (store) store->zero_grad();
  const Var out = fn(tape, vars);
  const Var loss = ag::sum(ag::mul_const(out, probe.projection));
  tape.backward(loss);

  GradCheckResult result;
  auto check = [&](double analytic, double& slot, auto&& eval) {
    const double saved = slot;
    slot = saved + step;
    const double up = eval();
    slot = saved - step;
    const double down = eval();
    slot = saved;
    const double numeric = (up - down) / (2.0 * step);
    result.max_rel_error = std::max(result.max_rel_error, grad_rel_error(analytic, numeric));
    ++result.checked;
  };
  auto eval_inputs = [&] { return evaluate(fn, inputs, probe, rng); };

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Matrix& g = vars[k].grad();
    for (Eigen::Index i : strided(inputs[k].size(), max_entries)) {
      const double analytic = g.size() ? g.data()[i] : 0.0;
      check(analytic, inputs[k].data()[i], eval_inputs);
    }
  }
  if (store) {
    std::vector<std::pair<std::string, Matrix>> grads;
    for (auto& [name, p] : store->all()) grads.emplace_back(name, p.grad);
    for (auto& [name, g] : grads) {
      Param& p = store->get(name);
      for (Eigen::Index i : strided(p.value.size(), max_entries)) {
        check(g.data()[i], p.value.data()[i], eval_inputs);
      }
    }
  }
  return result;
}

}  // namespace detra
