#include "comem/attention.hpp"

namespace comem::detail {

Matrix project_forward(const Matrix& x, const ParamGroup& w, const LoraAdapter* adapter,
                       Matrix* u_cache) {
  Matrix y = x * w.value;
  if (adapter) {
    Matrix u = x * adapter->a.value.transpose();  // T x rank
    y.noalias() += adapter->scale * (u * adapter->b.value.transpose());
    if (u_cache) *u_cache = std::move(u);
  } else if (u_cache) {
    u_cache->resize(0, 0);
  }
  return y;
}

void project_backward(const Matrix& d_y, const Matrix& x, ParamGroup& w, LoraAdapter* adapter,
                      const Matrix& u_cache, Matrix& d_x) {
  if (w.trainable) w.grad.noalias() += x.transpose() * d_y;
  d_x.noalias() += d_y * w.value.transpose();
  if (adapter) {
    adapter->b.accumulate(adapter->scale * (d_y.transpose() * u_cache));
    Matrix d_u = adapter->scale * (d_y * adapter->b.value);  // T x rank
    adapter->a.accumulate(d_u.transpose() * x);
    d_x.noalias() += d_u * adapter->a.value;
  }
}

namespace {

const LoraAdapter* find_adapter(const LoraSet* lora, const std::string& prefix,
                                const char* leaf) {
  return lora ? lora->find(prefix + leaf) : nullptr;
}

LoraAdapter* find_adapter(LoraSet* lora, const std::string& prefix, const char* leaf) {
  return lora ? lora->find(prefix + leaf) : nullptr;
}

}  // namespace

Matrix mha_forward(const Matrix& xq, const Matrix& xkv, const AttentionParams& p, int n_heads,
                   bool causal, const LoraSet* lora, const std::string& name_prefix,
                   MhaCache& cache) {
  const long d = xq.cols();
  const long hd = d / n_heads;
  cache.xq = xq;
  cache.xkv = xkv;
  cache.q = project_forward(xq, p.wq, find_adapter(lora, name_prefix, "wq"), &cache.lora_u[0]);
  cache.k = project_forward(xkv, p.wk, find_adapter(lora, name_prefix, "wk"), &cache.lora_u[1]);
  cache.v = project_forward(xkv, p.wv, find_adapter(lora, name_prefix, "wv"), &cache.lora_u[2]);

  cache.concat.resize(xq.rows(), d);
  cache.head_weights.assign(static_cast<std::size_t>(n_heads), Matrix());
  for (int h = 0; h < n_heads; ++h) {
    auto r = nn::softmax_attention(cache.q.middleCols(h * hd, hd),
                                   cache.k.middleCols(h * hd, hd),
                                   cache.v.middleCols(h * hd, hd), causal);
    cache.concat.middleCols(h * hd, hd) = r.output;
    cache.head_weights[static_cast<std::size_t>(h)] = std::move(r.weights);
  }
  return project_forward(cache.concat, p.wo, find_adapter(lora, name_prefix, "wo"),
                         &cache.lora_u[3]);
}

MhaInputGrads mha_backward(const Matrix& d_out, const MhaCache& cache, AttentionParams& p,
                           int n_heads, bool causal, LoraSet* lora,
                           const std::string& name_prefix) {
  const long d = cache.q.cols();
  const long hd = d / n_heads;

  Matrix d_concat = Matrix::Zero(cache.concat.rows(), cache.concat.cols());
  project_backward(d_out, cache.concat, p.wo, find_adapter(lora, name_prefix, "wo"),
                   cache.lora_u[3], d_concat);

  Matrix d_q = Matrix::Zero(cache.q.rows(), cache.q.cols());
  Matrix d_k = Matrix::Zero(cache.k.rows(), cache.k.cols());
  Matrix d_v = Matrix::Zero(cache.v.rows(), cache.v.cols());
  for (int h = 0; h < n_heads; ++h) {
    auto g = nn::softmax_attention_backward(
        d_concat.middleCols(h * hd, hd), cache.q.middleCols(h * hd, hd),
        cache.k.middleCols(h * hd, hd), cache.v.middleCols(h * hd, hd),
        cache.head_weights[static_cast<std::size_t>(h)], causal);
    d_q.middleCols(h * hd, hd) = g.dq;
    d_k.middleCols(h * hd, hd) = g.dk;
    d_v.middleCols(h * hd, hd) = g.dv;
  }

  MhaInputGrads grads;
  grads.d_xq = Matrix::Zero(cache.xq.rows(), cache.xq.cols());
  grads.d_xkv = Matrix::Zero(cache.xkv.rows(), cache.xkv.cols());
  project_backward(d_q, cache.xq, p.wq, find_adapter(lora, name_prefix, "wq"), cache.lora_u[0],
                   grads.d_xq);
  project_backward(d_k, cache.xkv, p.wk, find_adapter(lora, name_prefix, "wk"), cache.lora_u[1],
                   grads.d_xkv);
  project_backward(d_v, cache.xkv, p.wv, find_adapter(lora, name_prefix, "wv"), cache.lora_u[2],
                   grads.d_xkv);
  return grads;
}

}  // namespace comem::detail
