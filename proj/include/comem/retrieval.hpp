#ifndef COMEM_RETRIEVAL_HPP
#define COMEM_RETRIEVAL_HPP

#include "comem/synthworld.hpp"
#include "comem/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace comem {

// Frozen image embedder: patch-mean pooling into patch_side^2 features,
// a fixed seeded random linear projection (which folds in mean removal),
// then L2 normalization. Never trained.
struct ImageEmbedder {
  int d_embed = 32;
  int patch_side = 4;
  std::uint64_t seed = 0;
  Matrix projection;  // patch_side^2 x d_embed

  static ImageEmbedder init(int d_embed, int patch_side, std::uint64_t seed);
  Vector embed(const ImageGrid& image) const;
};

struct VectorIndex {
  std::vector<std::int64_t> ids;
  Matrix embeddings;  // n x d_embed, rows unit-norm
  int d_embed = 0;
  std::uint64_t embedder_seed = 0;

  long size() const { return static_cast<long>(ids.size()); }
  void add(std::int64_t id, const Vector& embedding);
};

struct RetrievalResult {
  std::vector<std::int64_t> ids;  // descending cosine, ties by ascending id
  std::vector<double> cosines;
  std::vector<double> weights;  // softmax over the returned cosines
};

VectorIndex build_index(const ImageEmbedder& embedder, const std::vector<KnowledgeItem>& items);

// Exact top-k by cosine similarity over the whole index.
RetrievalResult retrieve(const VectorIndex& index, const ImageEmbedder& embedder,
                         const ImageGrid& query_image, int k);

void save_index(const std::string& path, const VectorIndex& index);
VectorIndex load_index(const std::string& path);

}  // namespace comem

#endif  // COMEM_RETRIEVAL_HPP
