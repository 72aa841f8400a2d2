#include "spectra/dsf/realization.hpp"

#include <cmath>
#include <limits>

#include "spectra/autodiff/ops.hpp"

namespace spectra::dsf {

using models::AttentionKind;
using models::MixerKind;

NonFiniteEta::NonFiniteEta(std::size_t step, double value)
    : std::runtime_error("normalizer eta is non-finite (" + std::to_string(value) + ") at step " +
                         std::to_string(step)),
      step_(step) {}

namespace {

double elu1(double x) { return x > 0.0 ? x + 1.0 : std::exp(x); }

double norm_fn_value(models::NormFn fn, double x) {
  switch (fn) {
    case models::NormFn::Exp:
      return std::exp(x);
    case models::NormFn::Sigmoid:
      return 1.0 / (1.0 + std::exp(-x));
    case models::NormFn::Softplus:
    default:
      return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
}

void check_finite(double eta, std::size_t step) {
  if (!std::isfinite(eta)) throw NonFiniteEta(step, eta);
}

ad::Tensor to_tensor(const Eigen::MatrixXd& u) {
  const auto rows = static_cast<std::size_t>(u.rows());
  const auto cols = static_cast<std::size_t>(u.cols());
  std::vector<double> v(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) v[i * cols + j] = u(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return ad::Tensor::from({1, rows, cols}, std::move(v));
}

// Slice [1, H, L, m] at head h into [L, m].
Eigen::MatrixXd head_slice(const ad::Tensor& t, std::size_t head) {
  const auto& s = t.shape();
  const std::size_t len = s[2], m = s[3];
  const auto data = t.data();
  Eigen::MatrixXd out(len, m);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t c = 0; c < m; ++c) out(i, c) = data[(head * len + i) * m + c];
  }
  return out;
}

// Columns [first, first + count) of a [1, L, w] tensor as [L, count].
Eigen::MatrixXd column_block(const ad::Tensor& t, std::size_t first, std::size_t count) {
  const auto& s = t.shape();
  const std::size_t len = s[1], w = s[2];
  const auto data = t.data();
  Eigen::MatrixXd out(len, count);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t c = 0; c < count; ++c) out(i, c) = data[i * w + first + c];
  }
  return out;
}

Eigen::MatrixXd as_matrix(const ad::Tensor& t) {
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  const auto data = t.data();
  Eigen::MatrixXd out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = data[i * cols + j];
  }
  return out;
}

Eigen::VectorXd as_vector(const ad::Tensor& t) {
  const auto data = t.data();
  Eigen::VectorXd out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out(i) = data[i];
  return out;
}

void require_sequence(const Eigen::MatrixXd& u, std::size_t d, const char* op) {
  if (u.rows() == 0 || static_cast<std::size_t>(u.cols()) != d) {
    throw ad::ShapeError(std::string(op) + ": expected input [L, " + std::to_string(d) + "], got [" +
                         std::to_string(u.rows()) + ", " + std::to_string(u.cols()) + "]");
  }
}

LpvTrace attention_realization(const models::ModelConfig& config, const models::AttentionParams& p,
                               std::size_t head, const Eigen::MatrixXd& u, Materialize mode) {
  const AttentionKind kind = models::attention_kind(config.mixer_kind);
  if (kind == AttentionKind::Softmax && mode == Materialize::Full) {
    throw NotMaterializable(
        "softmax attention: B_i and C_i require the infinite-dimensional exponential feature map; only "
        "Lambda and eta are available");
  }
  const std::size_t d = config.model_dim;
  const std::size_t m = config.head_dim();
  const std::size_t len = static_cast<std::size_t>(u.rows());

  models::AttentionProjections proj;
  {
    ad::NoGradGuard guard;
    proj = models::attention_projections(kind, p, to_tensor(u), config.heads, config.norm_fn);
  }
  Eigen::MatrixXd q = head_slice(proj.q, head);
  Eigen::MatrixXd k = head_slice(proj.k, head);

  std::optional<NormEta> norm;
  if (kind == AttentionKind::Norm) {
    const Eigen::MatrixXd w_eta = as_matrix(p.w_eta);
    norm = NormEta{w_eta.col(static_cast<Eigen::Index>(head)), p.b_eta.data()[head], config.norm_fn};
  }
  const EtaTrace eta = eta_trace(kind, q, k, u, norm);

  LpvTrace t;
  t.kind = config.mixer_kind;
  t.head = head;
  t.len = len;
  t.eta = eta.direct;
  t.clamped = eta.clamped;
  t.first_spectral_step = 1;
  t.lambda.assign(len, Eigen::VectorXcd::Constant(1, Complex(std::numeric_limits<double>::quiet_NaN(), 0.0)));
  for (std::size_t i = 1; i < len; ++i) t.lambda[i](0) = Complex(t.eta[i - 1] / t.eta[i], 0.0);
  t.input = u;
  t.input_dim = d;
  t.output_dim = m;
  if (mode == Materialize::LambdaOnly) return t;

  // Feature maps: elu + 1 for linear attention, identity for norm attention.
  if (kind == AttentionKind::Linear) {
    q = q.unaryExpr(&elu1);
    k = k.unaryExpr(&elu1);
  }
  const std::size_t n = m;  // feature dimension
  const Eigen::MatrixXd w_v = as_matrix(p.w_v);
  const Eigen::MatrixXd w_vh =
      w_v.block(0, static_cast<Eigen::Index>(head * m), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m))
          .transpose();  // [m, d]

  // Lambda_i is the scalar eta_{i-1}/eta_i on every one of the m * n states.
  const auto state = static_cast<Eigen::Index>(m * n);
  t.state_dim = m * n;
  for (std::size_t i = 0; i < len; ++i) t.lambda[i] = Eigen::VectorXcd::Constant(state, t.lambda[i](0));
  t.b.resize(len);
  t.c.resize(len);
  t.d.assign(len, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d)));
  for (std::size_t i = 0; i < len; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    Eigen::MatrixXd kron_k = Eigen::MatrixXd::Zero(state, static_cast<Eigen::Index>(m));  // I_m (x) psi(k_i)
    Eigen::MatrixXd kron_q = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), state);  // I_m (x) phi(q_i)^T
    for (std::size_t a = 0; a < m; ++a) {
      const auto ai = static_cast<Eigen::Index>(a);
      const auto off = static_cast<Eigen::Index>(a * n);
      kron_k.block(off, ai, static_cast<Eigen::Index>(n), 1) = k.row(row).transpose();
      kron_q.block(ai, off, 1, static_cast<Eigen::Index>(n)) = q.row(row);
    }
    t.b[i] = ((1.0 / t.eta[i]) * kron_k * w_vh).cast<Complex>();
    t.c[i] = kron_q.cast<Complex>();
  }
  t.materialized = true;
  return t;
}

LpvTrace diagonal_realization(const models::ModelConfig& config, const models::MixerParams& params,
                              const Eigen::MatrixXd& u, Materialize mode) {
  ad::Tensor lambda, scale, b, c, d_skip;
  {
    ad::NoGradGuard guard;
    if (config.mixer_kind == MixerKind::LtiSsm) {
      const auto& p = std::get<models::LtiParams>(params);
      lambda = models::lti_lambda(p);
      scale = models::lti_input_scale(p);
      b = p.b;
      c = p.c;
      d_skip = p.d_skip;
    } else {
      const auto& p = std::get<models::LruParams>(params);
      lambda = models::lru_lambda(p);
      scale = models::lru_input_scale(p);
      b = p.b;
      c = p.c;
      d_skip = p.d_skip;
    }
  }
  const std::size_t d = config.model_dim;
  const std::size_t n = lambda.numel() / 2;
  const std::size_t len = static_cast<std::size_t>(u.rows());
  const Eigen::VectorXd lam = as_vector(lambda);
  Eigen::VectorXcd diag(static_cast<Eigen::Index>(n));
  for (std::size_t s = 0; s < n; ++s) diag(static_cast<Eigen::Index>(s)) = Complex(lam(s), lam(n + s));

  LpvTrace t;
  t.kind = config.mixer_kind;
  t.len = len;
  t.state_dim = n;
  t.input_dim = d;
  t.output_dim = d;
  t.time_invariant = true;
  t.first_spectral_step = 0;
  t.lambda.assign(len, diag);
  t.input = u;
  if (mode == Materialize::LambdaOnly) return t;

  const Eigen::MatrixXd bm = as_matrix(b);  // [d, 2N]
  const Eigen::MatrixXd cm = as_matrix(c);  // [2N, d]
  const Eigen::VectorXd sc = as_vector(scale);
  const auto ni = static_cast<Eigen::Index>(n);
  const auto di = static_cast<Eigen::Index>(d);
  // Stacked [re, im] state: x = (u b) * scale feeds re/im of the complex state,
  // and y = [Re h, Im h] c, so C = c_re^T - i c_im^T.
  Eigen::MatrixXcd bc(ni, di);
  Eigen::MatrixXcd cc(di, ni);
  for (Eigen::Index s = 0; s < ni; ++s) {
    for (Eigen::Index k = 0; k < di; ++k) {
      bc(s, k) = Complex(sc(s) * bm(k, s), sc(ni + s) * bm(k, ni + s));
      cc(k, s) = Complex(cm(s, k), -cm(ni + s, k));
    }
  }
  const Eigen::MatrixXd dm = as_vector(d_skip).asDiagonal();
  t.b.assign(len, bc);
  t.c.assign(len, cc);
  t.d.assign(len, dm);
  t.materialized = true;
  return t;
}

LpvTrace mamba2_realization(const models::ModelConfig& config, const models::Mamba2Params& p, std::size_t head,
                            const Eigen::MatrixXd& u, Materialize mode) {
  const std::size_t hd = config.head_dim();
  const std::size_t len = static_cast<std::size_t>(u.rows());
  models::Mamba2Internals in;
  {
    ad::NoGradGuard guard;
    in = models::mamba2_internals(p, to_tensor(u), config.heads,
                                  config.mixer_kind == MixerKind::Mamba2PseudoLti);
  }
  const Eigen::MatrixXd log_lambda = column_block(in.log_lambda, head, 1);
  const Eigen::MatrixXd dt = column_block(in.dt, head, 1);
  const std::size_t n = in.b_in.dim(2);

  LpvTrace t;
  t.kind = config.mixer_kind;
  t.head = head;
  t.len = len;
  t.first_spectral_step = 1;
  t.time_invariant = config.mixer_kind == MixerKind::Mamba2PseudoLti;
  t.input = column_block(in.x, head * hd, hd);
  t.input_dim = hd;
  t.output_dim = hd;
  t.state_dim = n * hd;
  const auto state = static_cast<Eigen::Index>(n * hd);
  t.lambda.resize(len);
  for (std::size_t i = 0; i < len; ++i) {
    t.lambda[i] = Eigen::VectorXcd::Constant(state, Complex(std::exp(log_lambda(static_cast<Eigen::Index>(i), 0)), 0.0));
  }
  if (mode == Materialize::LambdaOnly) return t;

  const Eigen::MatrixXd bin = column_block(in.b_in, 0, n);
  const Eigen::MatrixXd cout = column_block(in.c_out, 0, n);
  const double skip = p.d_skip.data()[head];
  const auto m = static_cast<Eigen::Index>(hd);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(m, m);
  t.b.resize(len);
  t.c.resize(len);
  t.d.assign(len, skip * eye);
  for (std::size_t i = 0; i < len; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    Eigen::MatrixXd bi = Eigen::MatrixXd::Zero(state, m);  // dt_i (B_i (x) I_m)
    Eigen::MatrixXd ci = Eigen::MatrixXd::Zero(m, state);  // C_i^T (x) I_m
    for (std::size_t s = 0; s < n; ++s) {
      const auto off = static_cast<Eigen::Index>(s * hd);
      bi.block(off, 0, m, m) = dt(row, 0) * bin(row, static_cast<Eigen::Index>(s)) * eye;
      ci.block(0, off, m, m) = cout(row, static_cast<Eigen::Index>(s)) * eye;
    }
    t.b[i] = bi.cast<Complex>();
    t.c[i] = ci.cast<Complex>();
  }
  t.materialized = true;
  return t;
}

void require_materialized(const LpvTrace& trace, const char* op) {
  if (!trace.materialized) {
    if (trace.kind == MixerKind::SoftmaxAttn) {
      throw NotMaterializable(std::string(op) + ": softmax attention has no finite realization");
    }
    throw NotMaterializable(std::string(op) + ": trace was built without B/C matrices");
  }
}

}  // namespace

EtaTrace eta_trace(AttentionKind kind, const Eigen::MatrixXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& u,
                   const std::optional<NormEta>& norm) {
  const auto len = q.rows();
  if (len == 0 || k.rows() != len || k.cols() != q.cols()) {
    throw ad::ShapeError("eta_trace: q and k must both be [L, m] with L >= 1");
  }
  EtaTrace out;
  out.direct.resize(static_cast<std::size_t>(len));
  out.incremental.resize(static_cast<std::size_t>(len));
  switch (kind) {
    case AttentionKind::Softmax: {
      for (Eigen::Index i = 0; i < len; ++i) {
        const auto step = static_cast<std::size_t>(i);
        double direct = 0.0;
        // Online log-sum-exp over j <= i.
        double run_max = -std::numeric_limits<double>::infinity();
        double run_sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double s = q.row(i).dot(k.row(j));
          direct += std::exp(s);
          if (s > run_max) {
            run_sum = run_sum * std::exp(run_max - s) + 1.0;
            run_max = s;
          } else {
            run_sum += std::exp(s - run_max);
          }
        }
        check_finite(direct, step);
        out.direct[step] = direct;
        out.incremental[step] = std::exp(run_max) * run_sum;
        check_finite(out.incremental[step], step);
      }
      break;
    }
    case AttentionKind::Linear: {
      const Eigen::MatrixXd fq = q.unaryExpr(&elu1);
      const Eigen::MatrixXd fk = k.unaryExpr(&elu1);
      Eigen::RowVectorXd running = Eigen::RowVectorXd::Zero(k.cols());
      for (Eigen::Index i = 0; i < len; ++i) {
        const auto step = static_cast<std::size_t>(i);
        double direct = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) direct += fq.row(i).dot(fk.row(j));
        running += fk.row(i);
        check_finite(direct, step);
        out.direct[step] = direct;
        out.incremental[step] = fq.row(i).dot(running);
      }
      break;
    }
    case AttentionKind::Norm: {
      if (!norm || u.rows() != len || u.cols() != norm->w.size()) {
        throw ad::ShapeError("eta_trace: norm attention needs u [L, d] and a normalizer of width d");
      }
      for (Eigen::Index i = 0; i < len; ++i) {
        const auto step = static_cast<std::size_t>(i);
        double eta = norm_fn_value(norm->fn, u.row(i).dot(norm->w) + norm->b);
        check_finite(eta, step);
        if (eta < models::kNormEtaFloor) {
          eta = models::kNormEtaFloor;
          ++out.clamped;
        }
        out.direct[step] = eta;
        out.incremental[step] = eta;
      }
      break;
    }
  }
  return out;
}

std::vector<double> lambda_from_eta(const std::vector<double>& eta) {
  if (eta.size() < 2) throw std::invalid_argument("lambda_from_eta: need at least two normalizers");
  std::vector<double> out(eta.size() - 1);
  for (std::size_t i = 1; i < eta.size(); ++i) {
    if (eta[i] == 0.0) throw std::invalid_argument("lambda_from_eta: eta is zero at step " + std::to_string(i));
    out[i - 1] = eta[i - 1] / eta[i];
  }
  return out;
}

std::size_t traces_per_layer(const models::ModelConfig& config) {
  if (models::is_attention(config.mixer_kind) || models::is_mamba2(config.mixer_kind)) return config.heads;
  return 1;
}

LpvTrace build_realization(const models::ModelConfig& config, const models::MixerParams& params, std::size_t head,
                           const Eigen::MatrixXd& u, Materialize mode) {
  require_sequence(u, config.model_dim, "build_realization");
  if (head >= traces_per_layer(config)) {
    throw std::out_of_range("build_realization: head " + std::to_string(head) + " out of range for " +
                            std::string(models::to_string(config.mixer_kind)));
  }
  switch (config.mixer_kind) {
    case MixerKind::SoftmaxAttn:
    case MixerKind::LinearAttn:
    case MixerKind::NormAttn:
      return attention_realization(config, std::get<models::AttentionParams>(params), head, u, mode);
    case MixerKind::LtiSsm:
    case MixerKind::Lru:
      return diagonal_realization(config, params, u, mode);
    case MixerKind::Mamba2:
    case MixerKind::Mamba2PseudoLti:
      return mamba2_realization(config, std::get<models::Mamba2Params>(params), head, u, mode);
  }
  throw std::logic_error("build_realization: unknown mixer kind");
}

Eigen::MatrixXd lpv_simulate(const LpvTrace& trace, const Eigen::MatrixXd& input) {
  require_materialized(trace, "lpv_simulate");
  if (static_cast<std::size_t>(input.rows()) != trace.len ||
      static_cast<std::size_t>(input.cols()) != trace.input_dim) {
    throw ad::ShapeError("lpv_simulate: input must be [" + std::to_string(trace.len) + ", " +
                         std::to_string(trace.input_dim) + "]");
  }
  Eigen::VectorXcd h = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(trace.state_dim));
  Eigen::MatrixXd y(input.rows(), static_cast<Eigen::Index>(trace.output_dim));
  for (std::size_t i = 0; i < trace.len; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    const Eigen::VectorXd w = input.row(row).transpose();
    if (i > 0) h = trace.lambda[i].cwiseProduct(h);
    h += trace.b[i] * w.cast<Complex>();
    y.row(row) = ((trace.c[i] * h).real() + trace.d[i] * w).transpose();
  }
  return y;
}

Eigen::MatrixXd build_kernel_phi(const LpvTrace& trace) {
  require_materialized(trace, "build_kernel_phi");
  const auto len = static_cast<Eigen::Index>(trace.len);
  const auto out = static_cast<Eigen::Index>(trace.output_dim);
  const auto in = static_cast<Eigen::Index>(trace.input_dim);
  Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(len * out, len * in);
  for (Eigen::Index j = 0; j < len; ++j) {
    const auto js = static_cast<std::size_t>(j);
    phi.block(j * out, j * in, out, in) = (trace.c[js] * trace.b[js]).real() + trace.d[js];
    Eigen::VectorXcd prod = Eigen::VectorXcd::Ones(static_cast<Eigen::Index>(trace.state_dim));
    for (Eigen::Index i = j + 1; i < len; ++i) {
      const auto is = static_cast<std::size_t>(i);
      prod = prod.cwiseProduct(trace.lambda[is]);
      phi.block(i * out, j * in, out, in) = (trace.c[is] * prod.asDiagonal() * trace.b[js]).real();
    }
  }
  return phi;
}

Eigen::VectorXd stack_rows(const Eigen::MatrixXd& x) {
  Eigen::VectorXd v(x.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i) v.segment(i * x.cols(), x.cols()) = x.row(i).transpose();
  return v;
}

}  // namespace spectra::dsf
