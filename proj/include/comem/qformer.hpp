#ifndef COMEM_QFORMER_HPP
#define COMEM_QFORMER_HPP

#include "comem/backbone.hpp"
#include "comem/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace comem {

struct QFormerConfig {
  int k = 8;          // learnable query count = memory vectors per item
  int n_layers = 4;   // layer applications
  bool shared = true; // one parameter set applied n_layers times
  int d_model = 64;   // must match the backbone
  int n_heads = 4;
  int d_ff = 128;
  int source_layer = -1;  // backbone layer supplying the source states; -1 = last

  void validate() const;
};

// Fixed-size compression of one knowledge item: always k x d_model,
// regardless of the item's encoded length.
struct MemoryVectors {
  Matrix vectors;  // k x d_model
  std::int64_t source_item_id = -1;
};

struct QFormerLayer {
  ParamGroup ln1_gamma, ln1_beta;
  AttentionParams self_attn;
  ParamGroup ln2_gamma, ln2_beta;
  AttentionParams cross_attn;
  ParamGroup ln3_gamma, ln3_beta;
  ParamGroup ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct QFormerAppCache {
  Matrix h_in;
  Matrix ln1_out;
  MhaCache self_mha;
  Matrix h_self;
  Matrix ln2_out;
  MhaCache cross_mha;
  Matrix h_cross;
  Matrix ln3_out;
  Matrix ffn_pre, ffn_act;
};

struct QFormerCache {
  std::vector<QFormerAppCache> apps;
  Matrix h_final;  // before the output norm
};

class QFormer {
 public:
  QFormerConfig config;
  std::uint64_t init_seed = 0;

  ParamGroup queries;               // k x d_model
  std::vector<QFormerLayer> layers; // one entry when shared
  ParamGroup out_gamma, out_beta;

  static QFormer init(const QFormerConfig& cfg, std::uint64_t seed);

  void visit_params(const ParamVisitor& fn);
  void visit_params(const ConstParamVisitor& fn) const;
  void set_trainable(bool trainable);
  void zero_grads();

  // Exact trainable parameter count; independent of n_layers when shared.
  long param_count() const;

  // Queries attend to the configured source layer of the encoded item.
  MemoryVectors compress(const EncoderStates& states, std::int64_t item_id = -1,
                         QFormerCache* cache = nullptr) const;
  Matrix compress_source(const Matrix& source, QFormerCache* cache = nullptr) const;

  // Backward from d_output (k x d). Accumulates parameter gradients and,
  // when d_source is non-null, writes the gradient w.r.t. the source states.
  void backward(const QFormerCache& cache, const Matrix& source, const Matrix& d_output,
                Matrix* d_source);

 private:
  const QFormerLayer& layer_for(int app) const;
  QFormerLayer& layer_for(int app);
};

// Concatenates per-item memories in the given order (callers order by
// descending retrieval score, ties by ascending item id).
EmbeddingSequence assemble_memory(const std::vector<MemoryVectors>& memories);

// [memory; input] with origins preserved; positions are re-derived from
// final indices downstream. Throws ContextOverflow when the combined
// length exceeds max_context.
EmbeddingSequence prepend_memory(const EmbeddingSequence& memory, const EmbeddingSequence& input,
                                 int max_context);

// Memory bank file: JSON index header plus one f32 tensor per item.
void save_memory_bank(const std::string& path, const std::vector<MemoryVectors>& bank);
std::vector<MemoryVectors> load_memory_bank(const std::string& path);

void save_qformer(const std::string& path, const QFormer& model);
QFormer load_qformer(const std::string& path);
void write_qformer(std::ostream& os, const QFormer& model);
QFormer read_qformer(std::istream& is);

}  // namespace comem

#endif  // COMEM_QFORMER_HPP
