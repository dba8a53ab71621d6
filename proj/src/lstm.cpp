#include "fvlm/lstm.hpp"

#include <cmath>

#include "fvlm/error.hpp"

namespace fvlm {

LstmLayer::LstmLayer(std::size_t input_dim, std::size_t hidden_dim)
    : w_xi(hidden_dim, input_dim),
      w_xf(hidden_dim, input_dim),
      w_xc(hidden_dim, input_dim),
      w_xo(hidden_dim, input_dim),
      w_hi(hidden_dim, hidden_dim),
      w_hf(hidden_dim, hidden_dim),
      w_hc(hidden_dim, hidden_dim),
      w_ho(hidden_dim, hidden_dim),
      w_ci(hidden_dim),
      w_cf(hidden_dim),
      w_co(hidden_dim),
      b_i(hidden_dim),
      b_f(hidden_dim),
      b_c(hidden_dim),
      b_o(hidden_dim) {}

void LstmLayer::append_params(ParamSet& out, const std::string& prefix) {
  out.push_back(view(prefix + ".w_xi", w_xi));
  out.push_back(view(prefix + ".w_xf", w_xf));
  out.push_back(view(prefix + ".w_xc", w_xc));
  out.push_back(view(prefix + ".w_xo", w_xo));
  out.push_back(view(prefix + ".w_hi", w_hi));
  out.push_back(view(prefix + ".w_hf", w_hf));
  out.push_back(view(prefix + ".w_hc", w_hc));
  out.push_back(view(prefix + ".w_ho", w_ho));
  out.push_back(view(prefix + ".w_ci", w_ci));
  out.push_back(view(prefix + ".w_cf", w_cf));
  out.push_back(view(prefix + ".w_co", w_co));
  out.push_back(view(prefix + ".b_i", b_i));
  out.push_back(view(prefix + ".b_f", b_f));
  out.push_back(view(prefix + ".b_c", b_c));
  out.push_back(view(prefix + ".b_o", b_o));
}

std::pair<LstmState, StepCache> cell_forward(const LstmLayer& layer,
                                             std::span<const double> x,
                                             const LstmState& prev) {
  const std::size_t n = layer.hidden_dim();
  if (x.size() != layer.input_dim()) {
    throw ShapeError("cell_forward: input has " + std::to_string(x.size()) +
                     " entries, layer expects " + std::to_string(layer.input_dim()));
  }
  if (prev.h.size() != n || prev.c.size() != n) {
    throw ShapeError("cell_forward: state width " + std::to_string(prev.h.size()) +
                     "/" + std::to_string(prev.c.size()) + ", layer hidden width " +
                     std::to_string(n));
  }

  Vector a_i = layer.b_i, a_f = layer.b_f, a_m = layer.b_c, a_o = layer.b_o;
  gemv_acc(layer.w_xi, x, a_i.span());
  gemv_acc(layer.w_xf, x, a_f.span());
  gemv_acc(layer.w_xc, x, a_m.span());
  gemv_acc(layer.w_xo, x, a_o.span());
  gemv_acc(layer.w_hi, prev.h.span(), a_i.span());
  gemv_acc(layer.w_hf, prev.h.span(), a_f.span());
  gemv_acc(layer.w_hc, prev.h.span(), a_m.span());
  gemv_acc(layer.w_ho, prev.h.span(), a_o.span());

  StepCache cache;
  cache.x = Vector(x);
  cache.h_prev = prev.h;
  cache.c_prev = prev.c;
  cache.i = Vector(n);
  cache.f = Vector(n);
  cache.m = Vector(n);
  cache.o = Vector(n);
  cache.c = Vector(n);
  cache.tanh_c = Vector(n);
  cache.h = Vector(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double i = sigmoid(a_i[k] + layer.w_ci[k] * prev.c[k]);
    const double f = sigmoid(a_f[k] + layer.w_cf[k] * prev.c[k]);
    const double m = std::tanh(a_m[k]);
    const double c = f * prev.c[k] + i * m;
    const double o = sigmoid(a_o[k] + layer.w_co[k] * c);
    const double tc = std::tanh(c);
    cache.i[k] = i;
    cache.f[k] = f;
    cache.m[k] = m;
    cache.o[k] = o;
    cache.c[k] = c;
    cache.tanh_c[k] = tc;
    cache.h[k] = o * tc;
  }
  LstmState next{cache.h, cache.c};
  return {std::move(next), std::move(cache)};
}

CellGrads cell_backward(const LstmLayer& layer, const StepCache& cache,
                        const Vector& dh, const Vector& dc, LstmLayer& grads) {
  const std::size_t n = layer.hidden_dim();
  if (dh.size() != n || dc.size() != n) {
    throw ShapeError("cell_backward: gradient width " + std::to_string(dh.size()) +
                     "/" + std::to_string(dc.size()) + ", layer hidden width " +
                     std::to_string(n));
  }
  Vector da_i(n), da_f(n), da_m(n), da_o(n);
  CellGrads out{Vector(layer.input_dim()), Vector(n), Vector(n)};
  for (std::size_t k = 0; k < n; ++k) {
    const double o = cache.o[k];
    const double tc = cache.tanh_c[k];
    const double go = dh[k] * tc * o * (1.0 - o);
    const double gc = dh[k] * o * (1.0 - tc * tc) + dc[k] + go * layer.w_co[k];
    const double i = cache.i[k];
    const double f = cache.f[k];
    const double m = cache.m[k];
    const double gi = gc * m * i * (1.0 - i);
    const double gf = gc * cache.c_prev[k] * f * (1.0 - f);
    const double gm = gc * i * (1.0 - m * m);
    da_i[k] = gi;
    da_f[k] = gf;
    da_m[k] = gm;
    da_o[k] = go;
    out.dc_prev[k] = gc * f + gi * layer.w_ci[k] + gf * layer.w_cf[k];
    grads.w_ci[k] += gi * cache.c_prev[k];
    grads.w_cf[k] += gf * cache.c_prev[k];
    grads.w_co[k] += go * cache.c[k];
    grads.b_i[k] += gi;
    grads.b_f[k] += gf;
    grads.b_c[k] += gm;
    grads.b_o[k] += go;
  }
  outer_acc(grads.w_xi, da_i.span(), cache.x.span());
  outer_acc(grads.w_xf, da_f.span(), cache.x.span());
  outer_acc(grads.w_xc, da_m.span(), cache.x.span());
  outer_acc(grads.w_xo, da_o.span(), cache.x.span());
  outer_acc(grads.w_hi, da_i.span(), cache.h_prev.span());
  outer_acc(grads.w_hf, da_f.span(), cache.h_prev.span());
  outer_acc(grads.w_hc, da_m.span(), cache.h_prev.span());
  outer_acc(grads.w_ho, da_o.span(), cache.h_prev.span());

  gemv_t_acc(layer.w_xi, da_i.span(), out.dx.span());
  gemv_t_acc(layer.w_xf, da_f.span(), out.dx.span());
  gemv_t_acc(layer.w_xc, da_m.span(), out.dx.span());
  gemv_t_acc(layer.w_xo, da_o.span(), out.dx.span());
  gemv_t_acc(layer.w_hi, da_i.span(), out.dh_prev.span());
  gemv_t_acc(layer.w_hf, da_f.span(), out.dh_prev.span());
  gemv_t_acc(layer.w_hc, da_m.span(), out.dh_prev.span());
  gemv_t_acc(layer.w_ho, da_o.span(), out.dh_prev.span());
  return out;
}

LstmStack::LstmStack(std::vector<LstmLayer> layers) : layers_(std::move(layers)) {
  for (std::size_t l = 1; l < layers_.size(); ++l) {
    if (layers_[l].input_dim() != layers_[l - 1].hidden_dim()) {
      throw ConfigError("LstmStack: layer " + std::to_string(l) + " expects input width " +
                        std::to_string(layers_[l].input_dim()) + " but layer " +
                        std::to_string(l - 1) + " emits " +
                        std::to_string(layers_[l - 1].hidden_dim()));
    }
  }
}

LstmStack::LstmStack(std::size_t input_dim, std::size_t hidden_dim, std::size_t num_layers) {
  if (num_layers == 0 || hidden_dim == 0 || input_dim == 0) {
    throw ConfigError("LstmStack: widths and layer count must be positive");
  }
  layers_.reserve(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    layers_.emplace_back(l == 0 ? input_dim : hidden_dim, hidden_dim);
  }
}

std::size_t LstmStack::input_dim() const {
  return layers_.empty() ? 0 : layers_.front().input_dim();
}

std::size_t LstmStack::output_dim() const {
  return layers_.empty() ? 0 : layers_.back().hidden_dim();
}

std::vector<LstmState> LstmStack::zero_states() const {
  std::vector<LstmState> states;
  states.reserve(layers_.size());
  for (const auto& layer : layers_) states.push_back(LstmState::zeros(layer.hidden_dim()));
  return states;
}

LstmStack LstmStack::zeros_like() const {
  std::vector<LstmLayer> layers;
  layers.reserve(layers_.size());
  for (const auto& layer : layers_) layers.emplace_back(layer.input_dim(), layer.hidden_dim());
  return LstmStack(std::move(layers));
}

void LstmStack::append_params(ParamSet& out, const std::string& prefix) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    layers_[l].append_params(out, prefix + ".layer" + std::to_string(l));
  }
}

StackCarry::StackCarry(const LstmStack& stack) {
  for (const auto& layer : stack.layers()) {
    dh.emplace_back(layer.hidden_dim());
    dc.emplace_back(layer.hidden_dim());
  }
}

Vector stack_step(const LstmStack& stack, std::span<const double> x,
                  std::vector<LstmState>& states, StackCache* cache) {
  if (states.size() != stack.size()) {
    throw ShapeError("stack_step: " + std::to_string(states.size()) + " states for " +
                     std::to_string(stack.size()) + " layers");
  }
  if (cache) cache->clear();
  std::span<const double> input = x;
  for (std::size_t l = 0; l < stack.size(); ++l) {
    auto [next, step_cache] = cell_forward(stack[l], input, states[l]);
    states[l] = std::move(next);
    if (cache) cache->push_back(std::move(step_cache));
    input = states[l].h.span();
  }
  return states.back().h;
}

Vector stack_step_backward(const LstmStack& stack, const StackCache& cache,
                           const Vector& d_top, StackCarry& carry, LstmStack& grads) {
  if (cache.size() != stack.size()) {
    throw ShapeError("stack_step_backward: cache holds " + std::to_string(cache.size()) +
                     " layers, stack has " + std::to_string(stack.size()));
  }
  Vector d_out = d_top;
  for (std::size_t l = stack.size(); l-- > 0;) {
    Vector dh = add(d_out, carry.dh[l]);
    CellGrads g = cell_backward(stack[l], cache[l], dh, carry.dc[l], grads[l]);
    carry.dh[l] = std::move(g.dh_prev);
    carry.dc[l] = std::move(g.dc_prev);
    d_out = std::move(g.dx);
  }
  return d_out;
}

SequenceOutput sequence_forward(const LstmStack& stack, const std::vector<Vector>& inputs,
                                const std::vector<LstmState>& init) {
  if (init.size() != stack.size()) {
    throw ShapeError("sequence_forward: " + std::to_string(init.size()) +
                     " initial states for " + std::to_string(stack.size()) + " layers");
  }
  SequenceOutput out;
  out.final_states = init;
  out.outputs.reserve(inputs.size());
  out.caches.reserve(inputs.size());
  for (const auto& x : inputs) {
    StackCache cache;
    out.outputs.push_back(stack_step(stack, x.span(), out.final_states, &cache));
    out.caches.push_back(std::move(cache));
  }
  return out;
}

SequenceGrads sequence_backward(const LstmStack& stack,
                                const std::vector<StackCache>& caches,
                                const std::vector<Vector>& output_grads) {
  if (caches.size() != output_grads.size()) {
    throw ShapeError("sequence_backward: " + std::to_string(caches.size()) +
                     " cached steps but " + std::to_string(output_grads.size()) +
                     " output gradients");
  }
  SequenceGrads out{stack.zeros_like(), std::vector<Vector>(caches.size())};
  StackCarry carry(stack);
  for (std::size_t t = caches.size(); t-- > 0;) {
    out.inputs[t] = stack_step_backward(stack, caches[t], output_grads[t], carry, out.params);
  }
  return out;
}

}  // namespace fvlm
