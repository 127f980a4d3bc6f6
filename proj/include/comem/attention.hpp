#ifndef COMEM_ATTENTION_HPP
#define COMEM_ATTENTION_HPP

#include "comem/backbone.hpp"

#include <string>
#include <vector>

namespace comem::detail {

// y = x W plus the adapter's low-rank delta when one is attached.
// u_cache receives x A^T for the backward pass.
Matrix project_forward(const Matrix& x, const ParamGroup& w, const LoraAdapter* adapter,
                       Matrix* u_cache);

// Accumulates weight/adapter gradients and adds the input gradient into d_x.
void project_backward(const Matrix& d_y, const Matrix& x, ParamGroup& w, LoraAdapter* adapter,
                      const Matrix& u_cache, Matrix& d_x);

// Multi-head attention with separate query and key/value inputs. Adapter
// lookups use name_prefix + {"wq","wk","wv","wo"}.
Matrix mha_forward(const Matrix& xq, const Matrix& xkv, const AttentionParams& p, int n_heads,
                   bool causal, const LoraSet* lora, const std::string& name_prefix,
                   MhaCache& cache);

struct MhaInputGrads {
  Matrix d_xq;
  Matrix d_xkv;
};

MhaInputGrads mha_backward(const Matrix& d_out, const MhaCache& cache, AttentionParams& p,
                           int n_heads, bool causal, LoraSet* lora,
                           const std::string& name_prefix);

}  // namespace comem::detail

#endif  // COMEM_ATTENTION_HPP
