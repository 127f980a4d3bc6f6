#include "comem/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace comem::nn {

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (long i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  return out;
}

namespace {

// -inf entries in masked positions vanish under the stable softmax.
void apply_causal_mask(Matrix& scores, long tq, long tk) {
  const long offset = tk - tq;
  for (long i = 0; i < tq; ++i)
    for (long j = i + offset + 1; j < tk; ++j)
      scores(i, j) = -std::numeric_limits<double>::infinity();
}

}  // namespace

AttentionResult softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                  bool causal) {
  if (q.cols() != k.cols())
    throw InvalidInput("attention: query dim " + std::to_string(q.cols()) +
                       " != key dim " + std::to_string(k.cols()));
  if (k.rows() != v.rows())
    throw InvalidInput("attention: key count " + std::to_string(k.rows()) +
                       " != value count " + std::to_string(v.rows()));
  if (causal && k.rows() < q.rows())
    throw InvalidInput("attention: causal mask needs at least as many keys as queries");

  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix scores = (q * k.transpose()) * scale;
  if (causal) apply_causal_mask(scores, q.rows(), k.rows());

  AttentionResult r;
  r.weights = softmax_rows(scores);
  r.output.noalias() = r.weights * v;
  return r;
}

AttentionGrads softmax_attention_backward(const Matrix& d_out, const Matrix& q,
                                          const Matrix& k, const Matrix& v,
                                          const Matrix& weights, bool causal) {
  (void)causal;  // masked entries have zero weight, which zeroes d_scores there
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));

  AttentionGrads g;
  g.dv.noalias() = weights.transpose() * d_out;

  Matrix d_weights = d_out * v.transpose();
  // softmax backward per row: dS = W .* (dW - (W . dW) 1^T)
  Matrix d_scores(weights.rows(), weights.cols());
  for (long i = 0; i < weights.rows(); ++i) {
    const double dot = weights.row(i).cwiseProduct(d_weights.row(i)).sum();
    d_scores.row(i) = weights.row(i).cwiseProduct(
        d_weights.row(i) - Matrix::Constant(1, weights.cols(), dot));
  }

  g.dq.noalias() = d_scores * k * scale;
  g.dk.noalias() = d_scores.transpose() * q * scale;
  return g;
}

Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
  Matrix y(x.rows(), x.cols());
  const long d = x.cols();
  for (long i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().sum() / d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    y.row(i) = ((x.row(i).array() - mean) * inv) * gamma.array() + beta.array();
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& d_y, const Matrix& x, const Matrix& gamma,
                           ParamGroup* gamma_group, ParamGroup* beta_group) {
  using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;
  const long d = x.cols();
  Matrix d_x(x.rows(), x.cols());
  Matrix d_gamma = Matrix::Zero(1, d);
  Matrix d_beta = Matrix::Zero(1, d);

  for (long i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().sum() / d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    RowArray xhat = (x.row(i).array() - mean) * inv;

    d_gamma.array() += d_y.row(i).array() * xhat;
    d_beta.array() += d_y.row(i).array();

    RowArray dxhat = d_y.row(i).array() * gamma.array();
    const double sum_dxhat = dxhat.sum();
    const double sum_dxhat_xhat = (dxhat * xhat).sum();
    d_x.row(i) = (inv * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d)).matrix();
  }
  if (gamma_group) gamma_group->accumulate(d_gamma);
  if (beta_group) beta_group->accumulate(d_beta);
  return d_x;
}

namespace {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCoef = 0.044715;
}  // namespace

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluScale * (v + kGeluCoef * v * v * v)));
  });
}

Matrix gelu_backward(const Matrix& d_y, const Matrix& x) {
  Matrix d_x = x.unaryExpr([](double v) {
    const double u = kGeluScale * (v + kGeluCoef * v * v * v);
    const double t = std::tanh(u);
    const double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * v * sech2 * kGeluScale * (1.0 + 3.0 * kGeluCoef * v * v);
  });
  return d_x.cwiseProduct(d_y);
}

CrossEntropy cross_entropy(const Matrix& logits, const std::vector<int>& targets) {
  if (static_cast<long>(targets.size()) != logits.rows())
    throw InvalidInput("cross_entropy: one target per logits row required");
  CrossEntropy ce;
  ce.d_logits = softmax_rows(logits);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (long i = 0; i < logits.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) throw InvalidInput("cross_entropy: target out of range");
    loss -= std::log(std::max(ce.d_logits(i, t), 1e-300));
    ce.d_logits(i, t) -= 1.0;
  }
  ce.d_logits *= inv_n;
  ce.loss = loss * inv_n;
  return ce;
}

double grad_check(ParamGroup& group, const std::function<double()>& loss_fn,
                  double epsilon, int max_entries, std::uint64_t seed) {
  if (!(epsilon > 0.0) || epsilon > 1e-3)
    throw InvalidInput("grad_check: epsilon must lie in (0, 1e-3]");

  std::vector<long> entries(static_cast<std::size_t>(group.size()));
  std::iota(entries.begin(), entries.end(), 0L);
  if (max_entries > 0 && max_entries < group.size()) {
    Rng rng(mix_seed(seed, 0x67726164ULL));
    rng.shuffle(entries);
    entries.resize(static_cast<std::size_t>(max_entries));
    std::sort(entries.begin(), entries.end());
  }

  double* data = group.value.data();
  const double* grad = group.grad.data();
  double max_rel = 0.0;
  for (long idx : entries) {
    const double saved = data[idx];
    data[idx] = saved + epsilon;
    const double lp = loss_fn();
    data[idx] = saved - epsilon;
    const double lm = loss_fn();
    data[idx] = saved;
    if (!std::isfinite(lp) || !std::isfinite(lm))
      throw std::runtime_error("grad_check: non-finite loss while perturbing '" +
                               group.name + "'");
    const double numeric = (lp - lm) / (2.0 * epsilon);
    const double analytic = grad[idx];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
  }
  return max_rel;
}

}  // namespace comem::nn
