#pragma once

// Dense kernels behind the autodiff primitives.
//
// Every kernel exists twice: `serial::` is the reference implementation kept
// for testing, `parallel::` splits the outer loop across OpenMP threads. Both
// accumulate each output element in the same order, so results agree bit for
// bit. Callers normally go through the dispatching functions at the bottom,
// which honour the process-wide execution policy.

#include <cstddef>
#include <span>

namespace cfkd::kernels {

/// Row-major matrix dimensions for `out[batch x out] = in[batch x in] * w[in x out]`.
struct GemmShape {
  std::size_t batch;
  std::size_t in;
  std::size_t out;
};

namespace serial {

void linear_forward(GemmShape s, std::span<const double> input, std::span<const double> weights,
                    std::span<const double> bias, std::span<double> output);
/// grad_input[b,i] = sum_j grad_output[b,j] * weights[i,j]  (overwrites)
void linear_grad_input(GemmShape s, std::span<const double> grad_output, std::span<const double> weights,
                       std::span<double> grad_input);
/// grad_weights[i,j] += sum_b input[b,i] * grad_output[b,j]
void linear_grad_weights(GemmShape s, std::span<const double> input, std::span<const double> grad_output,
                         std::span<double> grad_weights);
/// grad_bias[j] += sum_b grad_output[b,j]
void column_sums(std::size_t rows, std::size_t cols, std::span<const double> m, std::span<double> acc);
void relu_forward(std::span<const double> in, std::span<double> out);
/// grad_in[k] += grad_out[k] where in[k] > 0
void relu_backward(std::span<const double> in, std::span<const double> grad_out, std::span<double> grad_in);

}  // namespace serial

namespace parallel {

void linear_forward(GemmShape s, std::span<const double> input, std::span<const double> weights,
                    std::span<const double> bias, std::span<double> output);
void linear_grad_input(GemmShape s, std::span<const double> grad_output, std::span<const double> weights,
                       std::span<double> grad_input);
void linear_grad_weights(GemmShape s, std::span<const double> input, std::span<const double> grad_output,
                         std::span<double> grad_weights);
void column_sums(std::size_t rows, std::size_t cols, std::span<const double> m, std::span<double> acc);
void relu_forward(std::span<const double> in, std::span<double> out);
void relu_backward(std::span<const double> in, std::span<const double> grad_out, std::span<double> grad_in);

}  // namespace parallel

enum class ExecPolicy { serial, parallel };

/// Process-wide default. Starts as `parallel` when built with OpenMP.
ExecPolicy exec_policy() noexcept;
void set_exec_policy(ExecPolicy p) noexcept;
/// Number of threads the parallel kernels may use (1 without OpenMP).
int max_threads() noexcept;

void linear_forward(GemmShape s, std::span<const double> input, std::span<const double> weights,
                    std::span<const double> bias, std::span<double> output);
void linear_grad_input(GemmShape s, std::span<const double> grad_output, std::span<const double> weights,
                       std::span<double> grad_input);
void linear_grad_weights(GemmShape s, std::span<const double> input, std::span<const double> grad_output,
                         std::span<double> grad_weights);
void column_sums(std::size_t rows, std::size_t cols, std::span<const double> m, std::span<double> acc);
void relu_forward(std::span<const double> in, std::span<double> out);
void relu_backward(std::span<const double> in, std::span<const double> grad_out, std::span<double> grad_in);

}  // namespace cfkd::kernels
