#pragma once

#include <complex>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spectra/models/config.hpp"
#include "spectra/models/mixers.hpp"

// LPV realizations of trained mixers:
//   h_i = Lambda_i h_{i-1} + B_i w_i,   y_i = C_i h_i + D_i w_i,   h_{-1} = 0
// where w is the signal the mixer's dynamics act on (see LpvTrace::input).
namespace spectra::dsf {

using Complex = std::complex<double>;

/// Raised when B/C are requested for softmax attention, whose exponential
/// kernel has no finite feature map.
class NotMaterializable : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a normalizer overflows or turns non-finite.
class NonFiniteEta : public std::runtime_error {
 public:
  NonFiniteEta(std::size_t step, double value);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Norm-attention normalizer eta_i = g(w . u_i + b), floored at kNormEtaFloor.
struct NormEta {
  Eigen::VectorXd w;
  double b = 0.0;
  models::NormFn fn = models::NormFn::Softplus;
};

struct EtaTrace {
  std::vector<double> direct;       // full sum over j <= i for every i
  std::vector<double> incremental;  // running accumulation
  std::size_t clamped = 0;          // norm attention only
};

/// q, k: [L, m] per head (q already carries the attention temperature).
/// `norm` and `u` ([L, d]) are required for norm attention and ignored
/// otherwise. Softmax eta is evaluated without max subtraction so that an
/// overflow surfaces as NonFiniteEta instead of being rescaled away.
EtaTrace eta_trace(models::AttentionKind kind, const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                   const Eigen::MatrixXd& u = {}, const std::optional<NormEta>& norm = std::nullopt);

/// Lambda_i = eta_{i-1} / eta_i for i = 1..L-1 (returned at index i-1).
std::vector<double> lambda_from_eta(const std::vector<double>& eta);

struct LpvTrace {
  std::size_t layer = 0;
  std::size_t head = 0;
  models::MixerKind kind = models::MixerKind::SoftmaxAttn;
  std::size_t len = 0;
  std::size_t state_dim = 0;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  /// Attention normalizers eta_0..eta_{L-1}; empty for SSMs.
  std::vector<double> eta;
  /// Diagonal of Lambda_i for every step. Attention leaves lambda[0] NaN
  /// (eta_{-1} does not exist); it never multiplies a nonzero state.
  std::vector<Eigen::VectorXcd> lambda;
  /// First step whose transition enters the spectrum.
  std::size_t first_spectral_step = 1;
  bool time_invariant = false;
  bool materialized = false;
  std::vector<Eigen::MatrixXcd> b;  // per step [state, input]
  std::vector<Eigen::MatrixXcd> c;  // per step [output, state]
  std::vector<Eigen::MatrixXd> d;   // per step [output, input]
  /// Driving signal [L, input_dim]: the mixer input for attention, LTI and
  /// LRU; the post-convolution head slice of x for Mamba-2.
  Eigen::MatrixXd input;
  std::size_t clamped = 0;
};

enum class Materialize { Full, LambdaOnly };

/// Realization of head `head` of one mixer for a single sequence u [L, d].
/// SSMs with a shared state (LTI, LRU) have exactly one head, index 0.
LpvTrace build_realization(const models::ModelConfig& config, const models::MixerParams& params,
                           std::size_t head, const Eigen::MatrixXd& u,
                           Materialize mode = Materialize::Full);

/// Number of traces per layer for a config (heads for attention and Mamba-2).
std::size_t traces_per_layer(const models::ModelConfig& config);

/// Runs the recurrence on `input` ([L, input_dim]); returns Re(y) [L, output_dim].
Eigen::MatrixXd lpv_simulate(const LpvTrace& trace, const Eigen::MatrixXd& input);

/// Dense lower-triangular kernel, [L * output_dim, L * input_dim], acting on
/// the row-stacked input. Block (i, j) = C_i (prod_{l=j+1..i} Lambda_l) B_j,
/// diagonal C_i B_i + D_i; real part taken.
Eigen::MatrixXd build_kernel_phi(const LpvTrace& trace);

/// Row-stacks [L, n] into a vector of length L * n.
Eigen::VectorXd stack_rows(const Eigen::MatrixXd& x);

}  // namespace spectra::dsf
