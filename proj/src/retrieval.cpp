#include "comem/retrieval.hpp"

#include "comem/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace comem {

ImageEmbedder ImageEmbedder::init(int d_embed, int patch_side, std::uint64_t seed) {
  if (d_embed < 1 || patch_side < 1) throw InvalidInput("embedder: bad dimensions");
  ImageEmbedder e;
  e.d_embed = d_embed;
  e.patch_side = patch_side;
  e.seed = seed;
  const long p2 = static_cast<long>(patch_side) * patch_side;
  Rng rng(mix_seed(seed, fnv1a64("image_embedder")));
  Matrix raw = rng.gaussian_matrix(p2, d_embed, 1.0 / std::sqrt(static_cast<double>(p2)));
  // Fold per-image mean removal into the projection: rows of (I - 11^T/p2) R.
  Matrix centering = Matrix::Identity(p2, p2) - Matrix::Constant(p2, p2, 1.0 / p2);
  e.projection = centering * raw;
  return e;
}

Vector ImageEmbedder::embed(const ImageGrid& image) const {
  if (image.side % patch_side != 0)
    throw InvalidInput("embed_image: image side not divisible by patch side");
  const long g = image.side / patch_side;
  const long p2 = static_cast<long>(patch_side) * patch_side;

  // Mean over the patch grid of each within-patch offset.
  Vector pooled = Vector::Zero(p2);
  for (long py = 0; py < g; ++py)
    for (long px = 0; px < g; ++px) {
      long c = 0;
      for (int dy = 0; dy < patch_side; ++dy)
        for (int dx = 0; dx < patch_side; ++dx)
          pooled(c++) += image.pixels(py * patch_side + dy, px * patch_side + dx);
    }
  pooled /= static_cast<double>(g * g);

  Vector v = projection.transpose() * pooled;
  const double n = v.norm();
  if (n < 1e-12)
    throw InvalidInput("embed_image: degenerate image with zero-norm embedding");
  return v / n;
}

void VectorIndex::add(std::int64_t id, const Vector& embedding) {
  for (std::int64_t existing : ids)
    if (existing == id) throw InvalidInput("index: duplicate item id " + std::to_string(id));
  if (d_embed == 0) d_embed = static_cast<int>(embedding.size());
  if (embedding.size() != d_embed) throw InvalidInput("index: embedding dimension mismatch");
  Matrix grown(ids.size() + 1, d_embed);
  if (!ids.empty()) grown.topRows(static_cast<long>(ids.size())) = embeddings;
  grown.row(static_cast<long>(ids.size())) = embedding.transpose();
  embeddings = std::move(grown);
  ids.push_back(id);
}

VectorIndex build_index(const ImageEmbedder& embedder, const std::vector<KnowledgeItem>& items) {
  if (items.empty()) throw InvalidInput("build_index: empty item list");
  VectorIndex index;
  index.d_embed = embedder.d_embed;
  index.embedder_seed = embedder.seed;
  index.ids.reserve(items.size());
  index.embeddings.resize(static_cast<long>(items.size()), embedder.d_embed);
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j)
      if (items[j].id == items[i].id)
        throw InvalidInput("build_index: duplicate item id " + std::to_string(items[i].id));
    index.ids.push_back(items[i].id);
    index.embeddings.row(static_cast<long>(i)) = embedder.embed(items[i].image).transpose();
  }
  return index;
}

RetrievalResult retrieve(const VectorIndex& index, const ImageEmbedder& embedder,
                         const ImageGrid& query_image, int k) {
  if (k < 1) throw InvalidInput("retrieve: k must be >= 1");
  if (index.size() == 0) throw InvalidInput("retrieve: empty index");

  const Vector q = embedder.embed(query_image);
  Vector sims = index.embeddings * q;

  std::vector<long> order(static_cast<std::size_t>(index.size()));
  std::iota(order.begin(), order.end(), 0L);
  std::sort(order.begin(), order.end(), [&](long a, long b) {
    if (sims(a) != sims(b)) return sims(a) > sims(b);
    return index.ids[static_cast<std::size_t>(a)] < index.ids[static_cast<std::size_t>(b)];
  });

  const long take = std::min<long>(k, index.size());
  RetrievalResult r;
  r.ids.reserve(static_cast<std::size_t>(take));
  r.cosines.reserve(static_cast<std::size_t>(take));
  for (long i = 0; i < take; ++i) {
    r.ids.push_back(index.ids[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
    r.cosines.push_back(sims(order[static_cast<std::size_t>(i)]));
  }

  // Softmax over the returned similarity scores, temperature 1.
  double m = *std::max_element(r.cosines.begin(), r.cosines.end());
  double z = 0.0;
  r.weights.resize(r.cosines.size());
  for (std::size_t i = 0; i < r.cosines.size(); ++i) {
    r.weights[i] = std::exp(r.cosines[i] - m);
    z += r.weights[i];
  }
  for (double& w : r.weights) w /= z;
  return r;
}

void save_index(const std::string& path, const VectorIndex& index) {
  nlohmann::ordered_json manifest;
  manifest["kind"] = "vector_index";
  manifest["d_embed"] = index.d_embed;
  manifest["embedder_seed"] = index.embedder_seed;
  manifest["ids"] = index.ids;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_index: cannot open '" + path + "'");
  write_json_block(os, manifest.dump());
  write_tensor_container(os, {{"embeddings", index.embeddings}});
  if (!os) throw std::runtime_error("save_index: write failed for '" + path + "'");
}

VectorIndex load_index(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_index: cannot open '" + path + "'");
  const auto manifest = nlohmann::ordered_json::parse(read_json_block(is));
  if (manifest.at("kind").get<std::string>() != "vector_index")
    throw std::runtime_error("load_index: wrong file kind");
  VectorIndex index;
  index.d_embed = manifest.at("d_embed").get<int>();
  index.embedder_seed = manifest.at("embedder_seed").get<std::uint64_t>();
  index.ids = manifest.at("ids").get<std::vector<std::int64_t>>();
  auto tensors = read_tensor_container(is);
  index.embeddings = tensors.at(0).value;
  return index;
}

}  // namespace comem
