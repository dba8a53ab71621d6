#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fvlm/math.hpp"

namespace fvlm {

/// One peephole LSTM layer. Peephole weights are diagonal.
///
///   i = sigmoid(W_xi x + W_hi h' + w_ci . c' + b_i)
///   f = sigmoid(W_xf x + W_hf h' + w_cf . c' + b_f)
///   m = tanh(W_xc x + W_hc h' + b_c)
///   c = f . c' + i . m
///   o = sigmoid(W_xo x + W_ho h' + w_co . c + b_o)
///   h = o . tanh(c)
///
/// where h', c' are the previous state and the output peephole reads the new c.
struct LstmLayer {
  LstmLayer() = default;
  LstmLayer(std::size_t input_dim, std::size_t hidden_dim);

  std::size_t input_dim() const { return w_xi.cols(); }
  std::size_t hidden_dim() const { return w_xi.rows(); }

  /// Appends views of all fifteen blocks, named "<prefix>.w_xi" etc.
  void append_params(ParamSet& out, const std::string& prefix);

  Matrix w_xi, w_xf, w_xc, w_xo;
  Matrix w_hi, w_hf, w_hc, w_ho;
  Vector w_ci, w_cf, w_co;
  Vector b_i, b_f, b_c, b_o;
};

struct LstmState {
  static LstmState zeros(std::size_t hidden_dim) {
    return {Vector(hidden_dim), Vector(hidden_dim)};
  }
  Vector h;
  Vector c;
};

/// Activations kept from one forward step for the backward pass.
struct StepCache {
  Vector x;
  Vector h_prev, c_prev;
  Vector i, f, m, o;
  Vector c, tanh_c, h;
};

/// Gradients leaving a cell during backward.
struct CellGrads {
  Vector dx;
  Vector dh_prev;
  Vector dc_prev;
};

std::pair<LstmState, StepCache> cell_forward(const LstmLayer& layer,
                                             std::span<const double> x,
                                             const LstmState& prev);
inline std::pair<LstmState, StepCache> cell_forward(const LstmLayer& layer,
                                                    const Vector& x,
                                                    const LstmState& prev) {
  return cell_forward(layer, x.span(), prev);
}

/// Backward through one cell step. dh is the total gradient on this step's h
/// (output plus recurrent), dc the gradient on c arriving from the next step.
/// Parameter gradients are accumulated into grads.
CellGrads cell_backward(const LstmLayer& layer, const StepCache& cache,
                        const Vector& dh, const Vector& dc, LstmLayer& grads);

/// Layers wired bottom to top; layer l reads layer l-1's h.
class LstmStack {
 public:
  LstmStack() = default;
  /// Throws ConfigError if consecutive layers do not chain.
  explicit LstmStack(std::vector<LstmLayer> layers);
  LstmStack(std::size_t input_dim, std::size_t hidden_dim, std::size_t num_layers);

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  std::size_t input_dim() const;
  std::size_t output_dim() const;

  const LstmLayer& operator[](std::size_t l) const { return layers_[l]; }
  LstmLayer& operator[](std::size_t l) { return layers_[l]; }
  const std::vector<LstmLayer>& layers() const { return layers_; }

  std::vector<LstmState> zero_states() const;

  /// Same shapes, all zeros.
  LstmStack zeros_like() const;

  void append_params(ParamSet& out, const std::string& prefix);

 private:
  std::vector<LstmLayer> layers_;
};

/// Per-layer caches of one timestep.
using StackCache = std::vector<StepCache>;

/// Recurrent gradients flowing backward through time, one entry per layer.
struct StackCarry {
  explicit StackCarry(const LstmStack& stack);
  std::vector<Vector> dh;
  std::vector<Vector> dc;
};

/// One timestep through every layer. Updates states in place and returns the
/// top layer's h. When cache is non-null it receives one entry per layer.
Vector stack_step(const LstmStack& stack, std::span<const double> x,
                  std::vector<LstmState>& states, StackCache* cache);

/// Backward through one timestep of the stack. d_top is the gradient on the
/// top h from outside the stack; carry holds (and receives) recurrent
/// gradients. Returns the gradient on the stack input.
Vector stack_step_backward(const LstmStack& stack, const StackCache& cache,
                           const Vector& d_top, StackCarry& carry, LstmStack& grads);

struct SequenceOutput {
  std::vector<Vector> outputs;
  std::vector<StackCache> caches;
  std::vector<LstmState> final_states;
};

/// Runs the stack over inputs left to right starting from init (one state
/// per layer).
SequenceOutput sequence_forward(const LstmStack& stack, const std::vector<Vector>& inputs,
                                const std::vector<LstmState>& init);

struct SequenceGrads {
  LstmStack params;
  std::vector<Vector> inputs;
};

/// Full backpropagation through time. output_grads[t] is dL/d(top h_t).
SequenceGrads sequence_backward(const LstmStack& stack,
                                const std::vector<StackCache>& caches,
                                const std::vector<Vector>& output_grads);

}  // namespace fvlm
