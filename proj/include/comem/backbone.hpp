#ifndef COMEM_BACKBONE_HPP
#define COMEM_BACKBONE_HPP

#include "comem/lora.hpp"
#include "comem/nn.hpp"
#include "comem/types.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace comem {

struct BackboneConfig {
  int d_model = 64;
  int n_layers = 6;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 512;
  int max_context = 512;
  int patch_side = 4;
  // Whether memory-origin rows receive learned absolute position vectors.
  // With kNone, memory rows are position-free and token/patch rows are
  // indexed as if the memory were absent.
  enum class MemoryPositions { kAbsolute, kNone };
  MemoryPositions memory_positions = MemoryPositions::kAbsolute;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct ImageGrid {
  int side = 12;
  Matrix pixels;  // side x side, grayscale in [0,1]

  static ImageGrid zero(int side) { return {side, Matrix::Zero(side, side)}; }
};

enum class Origin : std::uint8_t { kPatch, kToken, kMemory };

// Content embeddings only; learned position vectors are added inside
// encode() based on each row's final index, so sequences can be
// concatenated and re-positioned freely.
struct EmbeddingSequence {
  Matrix vectors;               // T x d_model
  std::vector<Origin> origins;  // size T
  TokenSeq token_ids;           // size T, -1 for non-token rows
  Matrix patch_raw;             // one row (patch_side^2 pixels) per patch row, in order

  long length() const { return vectors.rows(); }
  long d_model() const { return vectors.cols(); }

  static EmbeddingSequence empty(int d_model);
};

EmbeddingSequence concat_sequences(const EmbeddingSequence& a, const EmbeddingSequence& b);

struct EncoderStates {
  Matrix embeddings;                                  // T x d, position term included
  std::vector<Matrix> per_layer_hidden;               // n_layers entries of T x d
  std::vector<std::vector<Matrix>> attention_traces;  // [layer][head], Tq x Tk

  long length() const { return embeddings.rows(); }
  // idx < 0 counts from the back (-1 = final layer).
  const Matrix& layer(int idx) const;
};

// Per-layer hidden states from previously encoded items, appended to the
// key/value inputs of the given band layers during a later forward pass.
struct LayerwiseMemory {
  std::vector<int> band;       // sorted ascending
  std::vector<Matrix> states;  // per band layer: P x d, items concatenated

  long positions() const { return states.empty() ? 0 : states[0].rows(); }
  bool empty() const { return positions() == 0; }
  const Matrix* states_for(int layer) const;
};

struct AttentionParams {
  ParamGroup wq, wk, wv, wo;  // each d_model x d_model
};

struct BlockParams {
  ParamGroup ln1_gamma, ln1_beta;
  AttentionParams attn;
  ParamGroup ln2_gamma, ln2_beta;
  ParamGroup ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Multi-head attention cache shared by backbone and compressor layers.
struct MhaCache {
  Matrix xq, xkv;                    // projection inputs
  Matrix q, k, v;                    // Tq x d / Tk x d
  std::vector<Matrix> head_weights;  // per head, Tq x Tk
  Matrix concat;                     // Tq x d
  std::array<Matrix, 4> lora_u;      // x A^T per adapted projection (q,k,v,o)
};

struct BlockCache {
  Matrix x_in;
  Matrix ln1_in;   // [memory; x_in] when injected, else x_in
  Matrix ln1_out;
  MhaCache mha;
  Matrix attn_out;
  Matrix x_mid;
  Matrix ln2_out;
  Matrix ffn_pre, ffn_act;
};

struct ForwardCache {
  Matrix embedded;
  std::vector<BlockCache> blocks;
  bool causal = true;
};

class Backbone {
 public:
  BackboneConfig config;
  std::uint64_t init_seed = 0;

  ParamGroup token_embedding;     // vocab x d
  ParamGroup position_embedding;  // max_context x d
  ParamGroup patch_w;             // patch_side^2 x d
  ParamGroup patch_b;             // 1 x d
  std::vector<BlockParams> blocks;
  ParamGroup lnf_gamma, lnf_beta;
  ParamGroup lm_head;  // d x vocab

  static Backbone init(const BackboneConfig& cfg, std::uint64_t seed);

  void visit_params(const ParamVisitor& fn);
  void visit_params(const ConstParamVisitor& fn) const;
  std::vector<ParamGroup*> param_groups();
  void set_trainable(bool trainable);
  void zero_grads();
  long param_count() const;

  // Patch rows (row-major patch grid, each patch flattened row-major)
  // followed by token rows. Pass image = nullptr for text-only input.
  EmbeddingSequence embed_multimodal(const ImageGrid* image, const TokenSeq& tokens) const;

  struct EncodeOptions {
    bool causal = true;
    bool want_traces = true;
    const LoraSet* lora = nullptr;
    const LayerwiseMemory* injected = nullptr;
  };

  EncoderStates encode(const EmbeddingSequence& seq, const EncodeOptions& opt = {},
                       ForwardCache* cache = nullptr) const;

  // Next-token logits from final-layer hidden rows (applies final norm
  // and the output head). h_rows: n x d_model.
  Matrix logits_from_hidden(const Matrix& h_rows) const;

  // Greedy decoding with causal masking; stops at end_token or after
  // max_new_tokens, or early if the context budget is exhausted.
  TokenSeq decode_answer(const EmbeddingSequence& seq, int max_new_tokens, TokenId end_token,
                         const LayerwiseMemory* injected = nullptr) const;

  // Backward from a gradient on the final layer's hidden states through
  // all blocks and the embedding. Accumulates into trainable groups and
  // adapter groups. Returns the gradient w.r.t. content embeddings
  // (T x d) when want_input_grad, else an empty matrix.
  Matrix backward_from_hidden(const ForwardCache& cache, const EmbeddingSequence& seq,
                              const Matrix& d_hidden, LoraSet* lora, bool want_input_grad);

  // Position vector index per row under the configured scheme; -1 when the
  // row receives no position term.
  std::vector<long> position_indices(const EmbeddingSequence& seq) const;
};

// Checkpoint file: JSON manifest {config, seed, param group names and
// trainable flags} followed by a tensor container with all weights.
void save_backbone(const std::string& path, const Backbone& model);
Backbone load_backbone(const std::string& path);

}  // namespace comem

#endif  // COMEM_BACKBONE_HPP
