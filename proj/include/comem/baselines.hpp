#ifndef COMEM_BASELINES_HPP
#define COMEM_BASELINES_HPP

#include "comem/backbone.hpp"
#include "comem/types.hpp"

#include <vector>

namespace comem {

struct RagConcat {
  EmbeddingSequence seq;
  long truncated_items = 0;  // whole items dropped from the tail
};

// Items in retrieval order followed by the query. When the total exceeds
// position_budget, whole items are dropped tail-first (lowest score last)
// so every surviving item stays intact.
RagConcat rag_concat(const std::vector<EmbeddingSequence>& items, const EmbeddingSequence& query,
                     long position_budget);

// Mean over layers and heads of the attention mass each position receives
// (column sums of the row-stochastic traces).
std::vector<double> received_attention(const EncoderStates& states);

// Drops the lowest-scoring patch-origin positions of one item, keeping
// ceil(keep_ratio * n_patches) of them; token positions always survive.
EmbeddingSequence fastv_prune(const EncoderStates& item_states, const EmbeddingSequence& item_seq,
                              double keep_ratio);

struct SelectionMask {
  std::vector<long> kept;  // ascending
  double keep_ratio = 1.0;
};

// Keeps the top ceil(keep_ratio * N) positions by received attention,
// ties broken toward the lower index.
SelectionMask attn_select(const EncoderStates& states, double keep_ratio);

// Per-layer hidden states of the encoded items, concatenated in retrieval
// order, for injection at the given band layers. The state carried for
// band layer l is the input to layer l (the residual stream at depth l).
// keep_ratio < 1 applies attn_select per item before concatenation.
LayerwiseMemory vlm_as_memory(const Backbone& model, const std::vector<EmbeddingSequence>& items,
                              const std::vector<int>& band, double keep_ratio = 1.0);

// Runs the query forward with memory states appended to the key/value
// inputs at the band layers; queries and non-band layers are untouched.
EncoderStates inject_layerwise(const Backbone& model, const EmbeddingSequence& query,
                               const LayerwiseMemory& memory, bool causal = true);

}  // namespace comem

#endif  // COMEM_BASELINES_HPP
