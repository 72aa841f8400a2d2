#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "spectra/autodiff/tensor.hpp"

// Differentiable primitives. Every function validates shapes, computes the
// forward value eagerly and, when recording is active, attaches an analytic
// adjoint. Binary elementwise ops follow numpy broadcasting (right-aligned,
// size-1 axes stretch).
namespace spectra::ad {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor elu(const Tensor& a);
Tensor gelu(const Tensor& a);
/// max(a, floor) elementwise; `clamped` (optional) receives the number of
/// entries that were raised to the floor.
Tensor clamp_min(const Tensor& a, double floor, std::size_t* clamped = nullptr);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum over the last axis, keeping it as size 1.
Tensor sum_last(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, std::span<const std::size_t> order);
Tensor permute(const Tensor& a, std::initializer_list<std::size_t> order);
Tensor transpose_last2(const Tensor& a);
Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length);
Tensor concat_last(std::span<const Tensor> parts);
Tensor concat_last(std::initializer_list<Tensor> parts);

/// a: [..., M, K], b: [..., K, N] with equal batch dims, or b: [K, N] shared
/// across every batch entry of a.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Zeroes entries strictly above the diagonal of the trailing [L, L] block.
Tensor causal_mask(const Tensor& scores);
/// Row softmax over the last axis restricted to columns j <= i of the
/// trailing [L, L] block; masked entries are exactly zero.
Tensor causal_softmax(const Tensor& scores);
/// Depthwise causal convolution. u: [..., L, C], kernel: [K, C]; output at t
/// is sum_k kernel[k] * u[t - (K-1) + k] with zero left padding.
Tensor causal_conv1d(const Tensor& u, const Tensor& kernel);
/// Inclusive cumulative sum along `axis`.
Tensor cumsum(const Tensor& a, std::size_t axis);
/// log_a: [..., L] -> [..., L, L] with entry (i, j) = exp(sum_{l=j+1..i} log_a[l])
/// for j <= i and 0 above the diagonal.
Tensor causal_decay(const Tensor& log_a);
/// Complex diagonal linear recurrence h_t = lambda * h_{t-1} + x_t, h_{-1} = 0.
/// Complex vectors are stored as [re(0..N-1), im(0..N-1)] on the last axis.
/// x: [..., L, 2N], lambda: [2N] (time invariant).
Tensor complex_diag_scan(const Tensor& x, const Tensor& lambda);

/// Row lookup: table [V, D], indices of any count -> [indices.size(), D].
Tensor gather_rows(const Tensor& table, std::span<const int> indices);
/// Adjoint of gather_rows: src [n, D] rows accumulated into [rows, D].
Tensor scatter_add_rows(const Tensor& src, std::span<const int> indices, std::size_t rows);

/// Normalizes over the last axis; gamma, beta: [D].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

inline constexpr int kIgnoreIndex = -100;
/// Mean token cross-entropy. logits: [N, V] (or [..., V], flattened);
/// targets equal to ignore_index are skipped. Returns 0 when nothing counts.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     int ignore_index = kIgnoreIndex);

}  // namespace spectra::ad
