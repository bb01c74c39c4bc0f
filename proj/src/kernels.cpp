#include "cfkd/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstdint>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace cfkd::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelGrain = 1 << 15;

#if defined(_OPENMP)
std::atomic<ExecPolicy> g_policy{ExecPolicy::parallel};
#else
std::atomic<ExecPolicy> g_policy{ExecPolicy::serial};
#endif

inline void forward_row(GemmShape s, const double* in, const double* w, const double* bias, double* out) {
  std::copy(bias, bias + s.out, out);
  for (std::size_t i = 0; i < s.in; ++i) {
    const double a = in[i];
    if (a == 0.0) continue;
    const double* wr = w + i * s.out;
    for (std::size_t j = 0; j < s.out; ++j) out[j] += a * wr[j];
  }
}

inline void grad_input_row(GemmShape s, const double* gout, const double* w, double* gin) {
  for (std::size_t i = 0; i < s.in; ++i) {
    const double* wr = w + i * s.out;
    double acc = 0.0;
    for (std::size_t j = 0; j < s.out; ++j) acc += gout[j] * wr[j];
    gin[i] = acc;
  }
}

inline void grad_weights_row(GemmShape s, std::size_t i, const double* input, const double* gout, double* gw_row) {
  for (std::size_t b = 0; b < s.batch; ++b) {
    const double a = input[b * s.in + i];
    if (a == 0.0) continue;
    const double* g = gout + b * s.out;
    for (std::size_t j = 0; j < s.out; ++j) gw_row[j] += a * g[j];
  }
}

}  // namespace

namespace serial {

void linear_forward(GemmShape s, std::span<const double> input, std::span<const double> weights,
                    std::span<const double> bias, std::span<double> output) {
  for (std::size_t b = 0; b < s.batch; ++b) {
    forward_row(s, input.data() + b * s.in, weights.data(), bias.data(), output.data() + b * s.out);
  }
}

void linear_grad_input(GemmShape s, std::span<const double> grad_output, std::span<const double> weights,
                       std::span<double> grad_input) {
  for (std::size_t b = 0; b < s.batch; ++b) {
    grad_input_row(s, grad_output.data() + b * s.out, weights.data(), grad_input.data() + b * s.in);
  }
}

void linear_grad_weights(GemmShape s, std::span<const double> input, std::span<const double> grad_output,
                         std::span<double> grad_weights) {
  for (std::size_t i = 0; i < s.in; ++i) {
    grad_weights_row(s, i, input.data(), grad_output.data(), grad_weights.data() + i * s.out);
  }
}

void column_sums(std::size_t rows, std::size_t cols, std::span<const double> m, std::span<double> acc) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) acc[c] += m[r * cols + c];
  }
}

void relu_forward(std::span<const double> in, std::span<double> out) {
  for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] > 0.0 ? in[k] : 0.0;
}

void relu_backward(std::span<const double> in, std::span<const double> grad_out, std::span<double> grad_in) {
  for (std::size_t k = 0; k < in.size(); ++k) {
    if (in[k] > 0.0) grad_in[k] += grad_out[k];
  }
}

}  // namespace serial

namespace parallel {

void linear_forward(GemmShape s, std::span<const double> input, std::span<const double> weights,
                    std::span<const double> bias, std::span<double> output) {
  const auto n = static_cast<std::int64_t>(s.batch);
  const bool big = s.batch * s.in * s.out >= kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t b = 0; b < n; ++b) {
    const auto ub = static_cast<std::size_t>(b);
    forward_row(s, input.data() + ub * s.in, weights.data(), bias.data(), output.data() + ub * s.out);
  }
}

void linear_grad_input(GemmShape s, std::span<const double> grad_output, std::span<const double> weights,
                       std::span<double> grad_input) {
  const auto n = static_cast<std::int64_t>(s.batch);
  const bool big = s.batch * s.in * s.out >= kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t b = 0; b < n; ++b) {
    const auto ub = static_cast<std::size_t>(b);
    grad_input_row(s, grad_output.data() + ub * s.out, weights.data(), grad_input.data() + ub * s.in);
  }
}

void linear_grad_weights(GemmShape s, std::span<const double> input, std::span<const double> grad_output,
                         std::span<double> grad_weights) {
  const auto n = static_cast<std::int64_t>(s.in);
  const bool big = s.batch * s.in * s.out >= kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    grad_weights_row(s, ui, input.data(), grad_output.data(), grad_weights.data() + ui * s.out);
  }
}

void column_sums(std::size_t rows, std::size_t cols, std::span<const double> m, std::span<double> acc) {
  const auto n = static_cast<std::int64_t>(cols);
  const bool big = rows * cols >= kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t c = 0; c < n; ++c) {
    const auto uc = static_cast<std::size_t>(c);
    for (std::size_t r = 0; r < rows; ++r) acc[uc] += m[r * cols + uc];
  }
}

void relu_forward(std::span<const double> in, std::span<double> out) {
  const auto n = static_cast<std::int64_t>(in.size());
  const bool big = in.size() >= kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t k = 0; k < n; ++k) out[k] = in[k] > 0.0 ? in[k] : 0.0;
}

void relu_backward(std::span<const double> in, std::span<const double> grad_out, std::span<double> grad_in) {
  const auto n = static_cast<std::int64_t>(in.size());
  const bool big = in.size() >= kParallelGrain;
#pragma omp parallel for schedule(static) if (big)
  for (std::int64_t k = 0; k < n; ++k) {
    if (in[k] > 0.0) grad_in[k] += grad_out[k];
  }
}

}  // namespace parallel

ExecPolicy exec_policy() noexcept { return g_policy.load(std::memory_order_relaxed); }

void set_exec_policy(ExecPolicy p) noexcept {
#if !defined(_OPENMP)
  p = ExecPolicy::serial;
#endif
  g_policy.store(p, std::memory_order_relaxed);
}

int max_threads() noexcept {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define CFKD_DISPATCH(fn, ...)                                  \
  if (exec_policy() == ExecPolicy::parallel) {                 \
    parallel::fn(__VA_ARGS__);                                 \
  } else {                                                     \
    serial::fn(__VA_ARGS__);                                   \
  }

void linear_forward(GemmShape s, std::span<const double> input, std::span<const double> weights,
                    std::span<const double> bias, std::span<double> output) {
  CFKD_DISPATCH(linear_forward, s, input, weights, bias, output)
}

void linear_grad_input(GemmShape s, std::span<const double> grad_output, std::span<const double> weights,
                       std::span<double> grad_input) {
  CFKD_DISPATCH(linear_grad_input, s, grad_output, weights, grad_input)
}

void linear_grad_weights(GemmShape s, std::span<const double> input, std::span<const double> grad_output,
                         std::span<double> grad_weights) {
  CFKD_DISPATCH(linear_grad_weights, s, input, grad_output, grad_weights)
}

void column_sums(std::size_t rows, std::size_t cols, std::span<const double> m, std::span<double> acc) {
  CFKD_DISPATCH(column_sums, rows, cols, m, acc)
}

void relu_forward(std::span<const double> in, std::span<double> out) { CFKD_DISPATCH(relu_forward, in, out) }

void relu_backward(std::span<const double> in, std::span<const double> grad_out, std::span<double> grad_in) {
  CFKD_DISPATCH(relu_backward, in, grad_out, grad_in)
}

#undef CFKD_DISPATCH

}  // namespace cfkd::kernels
