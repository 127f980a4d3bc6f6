#ifndef COMEM_SYNTHWORLD_HPP
#define COMEM_SYNTHWORLD_HPP

#include "comem/backbone.hpp"
#include "comem/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace comem {

struct WorldConfig {
  std::uint64_t seed = 42;
  int n_entities = 100;
  int n_attributes = 4;
  int n_values = 32;
  int n_reserved_entities = 20;  // held out entirely for the unseen_entity split
  int image_side = 12;
  int patch_side = 4;
  double noise_amplitude = 0.10;  // per-pixel variant noise, <= 0.15
  double pattern_contrast = 0.40; // base pixels at 0.5 +- contrast
  int item_length = 40;           // patch positions + description tokens
  int query_length = 30;          // patch positions + question tokens
  int vocab_size = 512;
  int n_train = 2000;
  int n_unseen_question = 300;
  int n_unseen_entity = 300;
  int n_languages = 9;  // permuted vocabularies besides the identity language 0
};

// Token layout: [0]=pad, [1]=end-of-answer, [16, vocab) is the permutable
// text range holding entity names, attribute names, values and filler.
struct VocabLayout {
  TokenId pad = 0;
  TokenId end = 1;
  int text_begin = 16;
  int vocab_size = 512;
  int entity_begin = 16;
  int n_entities = 0;
  int attr_begin = 0;
  int n_attributes = 0;
  int value_begin = 0;
  int n_values = 0;
  int filler_begin = 0;
  int n_filler = 0;

  TokenId entity_token(int e) const { return entity_begin + e; }
  TokenId attr_token(int a) const { return attr_begin + a; }
  TokenId value_token(int v) const { return value_begin + v; }
  bool in_text_range(TokenId t) const { return t >= text_begin && t < vocab_size; }
};

struct KnowledgeItem {
  std::int64_t id = 0;
  int entity = 0;
  int attribute = 0;
  int value = 0;
  ImageGrid image;
  TokenSeq description;  // decodable: [entity, attribute, value, filler...]
  int language = 0;
};

enum class Split { kTrain, kUnseenQuestion, kUnseenEntity };

const char* split_name(Split s);

struct QAInstance {
  std::int64_t id = 0;
  int entity = 0;
  int attribute = 0;
  int value = 0;
  ImageGrid query_image;  // fresh variant, never shared with knowledge items
  TokenSeq question;      // [attribute, filler...]
  TokenId answer_token = 0;
  Split split = Split::kTrain;
  int language = 0;
};

struct World {
  WorldConfig config;
  VocabLayout vocab;
  std::vector<int> facts;         // entity * n_attributes + attr -> value index
  std::vector<int> holdout_attr;  // per entity; held-out attribute for train entities

  int n_train_entities() const { return config.n_entities - config.n_reserved_entities; }
  int fact(int entity, int attr) const;
  bool entity_is_reserved(int entity) const { return entity >= n_train_entities(); }
};

struct Dataset {
  std::vector<KnowledgeItem> items;  // one per (entity, attribute), id = e * n_attr + a
  std::vector<QAInstance> instances;

  const KnowledgeItem& item_by_id(std::int64_t id) const;
  std::vector<const QAInstance*> split(Split s) const;
};

World gen_world(const WorldConfig& cfg);

// Base pattern is a seeded hash of the entity id; variants add bounded
// per-pixel noise on top, clipped to [0, 1].
ImageGrid render_entity_base(const World& world, int entity);
ImageGrid render_entity(const World& world, int entity, std::uint64_t variant_seed);

Dataset make_dataset(const World& world);

// Full-vocabulary token maps for a language: identity outside the text
// range is not permitted, so maps are only defined on text tokens.
std::vector<TokenId> language_permutation(const World& world, int language);
std::vector<TokenId> language_permutation_inverse(const World& world, int language);

TokenSeq permute_tokens(const World& world, const TokenSeq& tokens, int language);
TokenSeq unpermute_tokens(const World& world, const TokenSeq& tokens, int language);
QAInstance permute_language(const World& world, const QAInstance& sample, int language);
KnowledgeItem permute_language(const World& world, const KnowledgeItem& item, int language);

// Fraction of instances whose fact is stated by some knowledge item.
double audit_answerability(const World& world, const Dataset& dataset);

// Question tokens for an attribute, padded with seeded filler to the
// configured query length (language 0).
TokenSeq make_question_tokens(const World& world, int attr, std::uint64_t seed);

void save_world(const std::string& path, const World& world, const Dataset& dataset);
struct LoadedWorld {
  World world;
  Dataset dataset;
};
LoadedWorld load_world(const std::string& path);

}  // namespace comem

#endif  // COMEM_SYNTHWORLD_HPP
