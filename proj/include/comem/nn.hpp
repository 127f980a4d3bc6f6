#ifndef COMEM_NN_HPP
#define COMEM_NN_HPP

#include "comem/types.hpp"

#include <functional>
#include <optional>

namespace comem::nn {

// Row-wise numerically stable softmax.
Matrix softmax_rows(const Matrix& logits);

struct AttentionResult {
  Matrix output;   // Tq x dv
  Matrix weights;  // Tq x Tk, rows sum to 1
};

struct AttentionGrads {
  Matrix dq, dk, dv;
};

// Scaled dot-product attention over a single head.
// With causal=true, query row i may attend to key rows j <= i + (Tk - Tq);
// a key prefix longer than the query block is fully visible.
AttentionResult softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                  bool causal);

AttentionGrads softmax_attention_backward(const Matrix& d_out, const Matrix& q,
                                          const Matrix& k, const Matrix& v,
                                          const Matrix& weights, bool causal);

// Row-wise layer norm with per-feature affine parameters (1 x d each).
inline constexpr double kLayerNormEps = 1e-5;

Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta);

// Returns dX; accumulates dGamma/dBeta into the supplied groups.
Matrix layer_norm_backward(const Matrix& d_y, const Matrix& x, const Matrix& gamma,
                           ParamGroup* gamma_group, ParamGroup* beta_group);

// tanh-approximated GELU and its exact derivative.
Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& d_y, const Matrix& x);

// Mean cross-entropy over rows of logits against integer targets.
// d_logits (same shape) is the gradient of the mean loss.
struct CrossEntropy {
  double loss;
  Matrix d_logits;
};
CrossEntropy cross_entropy(const Matrix& logits, const std::vector<int>& targets);

// Compares the analytic gradient stored in group.grad against central
// finite differences of loss_fn, on a seeded sample of at most max_entries
// entries. Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
// loss_fn must re-evaluate the loss from current parameter values; the
// group's values are perturbed in place and restored.
// Throws InvalidInput on a bad epsilon and std::runtime_error (naming the
// group) if the loss comes back non-finite.
double grad_check(ParamGroup& group, const std::function<double()>& loss_fn,
                  double epsilon, int max_entries = 0, std::uint64_t seed = 0);

}  // namespace comem::nn

#endif  // COMEM_NN_HPP
