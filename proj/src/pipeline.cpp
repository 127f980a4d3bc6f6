#include "comem/pipeline.hpp"

#include <algorithm>

namespace comem {

EmbeddingSequence embed_item(const Backbone& model, const World& world, const KnowledgeItem& item,
                             int language, bool text_only) {
  TokenSeq desc = item.description;
  if (language != item.language) {
    if (item.language != 0)
      throw InvalidInput("embed_item: item already carries a non-identity language");
    desc = permute_tokens(world, desc, language);
  }
  return model.embed_multimodal(text_only ? nullptr : &item.image, desc);
}

EmbeddingSequence embed_query(const Backbone& model, const ImageGrid* query_image,
                              const TokenSeq& question, bool text_only) {
  return model.embed_multimodal(text_only ? nullptr : query_image, question);
}

PromptInfo build_rag_prompt(const Backbone& model, const World& world, const Dataset& dataset,
                            const std::vector<std::int64_t>& item_ids, int language,
                            const EmbeddingSequence& query, long position_budget,
                            bool text_only) {
  std::vector<EmbeddingSequence> items;
  items.reserve(item_ids.size());
  for (std::int64_t id : item_ids)
    items.push_back(embed_item(model, world, dataset.item_by_id(id), language, text_only));
  auto rag = rag_concat(items, query, position_budget);
  return {std::move(rag.seq), rag.truncated_items};
}

PromptInfo build_fastv_prompt(const Backbone& model, const World& world, const Dataset& dataset,
                              const std::vector<std::int64_t>& item_ids, int language,
                              const EmbeddingSequence& query, long position_budget,
                              double keep_ratio) {
  Backbone::EncodeOptions opt;
  opt.causal = false;
  opt.want_traces = true;
  std::vector<EmbeddingSequence> items;
  items.reserve(item_ids.size());
  for (std::int64_t id : item_ids) {
    EmbeddingSequence seq = embed_item(model, world, dataset.item_by_id(id), language, false);
    EncoderStates st = model.encode(seq, opt);
    items.push_back(fastv_prune(st, seq, keep_ratio));
  }
  auto rag = rag_concat(items, query, position_budget);
  return {std::move(rag.seq), rag.truncated_items};
}

std::vector<MemoryVectors> compress_items(const Backbone& encoder, const LoraSet* lora,
                                          const QFormer& qformer, const World& world,
                                          const Dataset& dataset,
                                          const std::vector<std::int64_t>& item_ids,
                                          int language) {
  Backbone::EncodeOptions opt;
  opt.causal = false;
  opt.want_traces = false;
  opt.lora = lora;
  std::vector<MemoryVectors> memories;
  memories.reserve(item_ids.size());
  for (std::int64_t id : item_ids) {
    const auto& item = dataset.item_by_id(id);
    EncoderStates st = encoder.encode(embed_item(encoder, world, item, language, false), opt);
    memories.push_back(qformer.compress(st, item.id));
  }
  return memories;
}

EmbeddingSequence build_comem_prompt(const std::vector<MemoryVectors>& memories,
                                     const EmbeddingSequence& query, int max_context) {
  return prepend_memory(assemble_memory(memories), query, max_context);
}

LayerwiseMemory build_layerwise_memory(const Backbone& model, const World& world,
                                       const Dataset& dataset,
                                       const std::vector<std::int64_t>& item_ids, int language,
                                       const std::vector<int>& band, double keep_ratio) {
  std::vector<EmbeddingSequence> items;
  items.reserve(item_ids.size());
  for (std::int64_t id : item_ids)
    items.push_back(embed_item(model, world, dataset.item_by_id(id), language, false));
  if (items.empty()) {
    LayerwiseMemory mem;
    mem.band = band;
    std::sort(mem.band.begin(), mem.band.end());
    for (std::size_t i = 0; i < mem.band.size(); ++i)
      mem.states.emplace_back(0, model.config.d_model);
    return mem;
  }
  return vlm_as_memory(model, items, band, keep_ratio);
}

}  // namespace comem
