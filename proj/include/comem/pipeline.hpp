#ifndef COMEM_PIPELINE_HPP
#define COMEM_PIPELINE_HPP

#include "comem/backbone.hpp"
#include "comem/baselines.hpp"
#include "comem/qformer.hpp"
#include "comem/retrieval.hpp"
#include "comem/synthworld.hpp"

#include <cstdint>
#include <vector>

namespace comem {

// Knowledge item as model input, with the language permutation applied to
// its description. text_only drops the image (for language-only models).
EmbeddingSequence embed_item(const Backbone& model, const World& world, const KnowledgeItem& item,
                             int language, bool text_only = false);

EmbeddingSequence embed_query(const Backbone& model, const ImageGrid* query_image,
                              const TokenSeq& question, bool text_only = false);

struct PromptInfo {
  EmbeddingSequence seq;
  long truncated_items = 0;
};

// Vanilla concatenation prompt: items in the given order, then the query.
PromptInfo build_rag_prompt(const Backbone& model, const World& world, const Dataset& dataset,
                            const std::vector<std::int64_t>& item_ids, int language,
                            const EmbeddingSequence& query, long position_budget,
                            bool text_only = false);

// Token-pruned variant: each item is pruned to keep_ratio of its patch
// positions before concatenation.
PromptInfo build_fastv_prompt(const Backbone& model, const World& world, const Dataset& dataset,
                              const std::vector<std::int64_t>& item_ids, int language,
                              const EmbeddingSequence& query, long position_budget,
                              double keep_ratio);

// Compresses each item through the (optionally adapted) encoder and the
// compressor; order of item_ids is preserved.
std::vector<MemoryVectors> compress_items(const Backbone& encoder, const LoraSet* lora,
                                          const QFormer& qformer, const World& world,
                                          const Dataset& dataset,
                                          const std::vector<std::int64_t>& item_ids,
                                          int language);

// Memory prefix plus query, within the inference model's context budget.
EmbeddingSequence build_comem_prompt(const std::vector<MemoryVectors>& memories,
                                     const EmbeddingSequence& query, int max_context);

// Layerwise key/value memory over the encoded items.
LayerwiseMemory build_layerwise_memory(const Backbone& model, const World& world,
                                       const Dataset& dataset,
                                       const std::vector<std::int64_t>& item_ids, int language,
                                       const std::vector<int>& band, double keep_ratio);

}  // namespace comem

#endif  // COMEM_PIPELINE_HPP
