#include "comem/synthworld.hpp"

#include "comem/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace comem {

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kUnseenQuestion: return "unseen_question";
    case Split::kUnseenEntity: return "unseen_entity";
  }
  return "?";
}

int World::fact(int entity, int attr) const {
  if (entity < 0 || entity >= config.n_entities || attr < 0 || attr >= config.n_attributes)
    throw InvalidInput("fact: entity/attribute out of range");
  return facts[static_cast<std::size_t>(entity) * config.n_attributes + attr];
}

const KnowledgeItem& Dataset::item_by_id(std::int64_t id) const {
  if (id < 0 || id >= static_cast<std::int64_t>(items.size()) ||
      items[static_cast<std::size_t>(id)].id != id)
    throw InvalidInput("item_by_id: unknown item id " + std::to_string(id));
  return items[static_cast<std::size_t>(id)];
}

std::vector<const QAInstance*> Dataset::split(Split s) const {
  std::vector<const QAInstance*> out;
  for (const auto& q : instances)
    if (q.split == s) out.push_back(&q);
  return out;
}

namespace {

VocabLayout make_vocab(const WorldConfig& cfg) {
  VocabLayout v;
  v.vocab_size = cfg.vocab_size;
  v.entity_begin = v.text_begin;
  v.n_entities = cfg.n_entities;
  v.attr_begin = v.entity_begin + cfg.n_entities;
  v.n_attributes = cfg.n_attributes;
  v.value_begin = v.attr_begin + cfg.n_attributes;
  v.n_values = cfg.n_values;
  v.filler_begin = v.value_begin + cfg.n_values;
  v.n_filler = cfg.vocab_size - v.filler_begin;
  if (v.n_filler < 8)
    throw InvalidInput("world config: vocabulary too small for entities+attributes+values");
  return v;
}

TokenId random_filler(const VocabLayout& v, Rng& rng) {
  return v.filler_begin + static_cast<TokenId>(rng.next(static_cast<std::uint64_t>(v.n_filler)));
}

TokenSeq make_description(const World& w, int entity, int attr, int value, Rng& rng) {
  const auto& v = w.vocab;
  const int n_patches = (w.config.image_side / w.config.patch_side) *
                        (w.config.image_side / w.config.patch_side);
  const int n_tokens = w.config.item_length - n_patches;
  if (n_tokens < 3) throw InvalidInput("world config: item_length too small for a fact");
  TokenSeq d;
  d.reserve(static_cast<std::size_t>(n_tokens));
  d.push_back(v.entity_token(entity));
  d.push_back(v.attr_token(attr));
  d.push_back(v.value_token(value));
  while (static_cast<int>(d.size()) < n_tokens) d.push_back(random_filler(v, rng));
  return d;
}

TokenSeq make_question(const World& w, int attr, Rng& rng) {
  const auto& v = w.vocab;
  const int n_patches = (w.config.image_side / w.config.patch_side) *
                        (w.config.image_side / w.config.patch_side);
  const int n_tokens = w.config.query_length - n_patches;
  if (n_tokens < 1) throw InvalidInput("world config: query_length too small");
  TokenSeq q;
  q.reserve(static_cast<std::size_t>(n_tokens));
  q.push_back(v.attr_token(attr));
  while (static_cast<int>(q.size()) < n_tokens) q.push_back(random_filler(v, rng));
  return q;
}

}  // namespace

World gen_world(const WorldConfig& cfg) {
  if (cfg.n_entities < 2) throw InvalidInput("gen_world: need at least 2 entities");
  if (cfg.n_attributes < 1) throw InvalidInput("gen_world: need at least 1 attribute");
  if (cfg.n_values < 2) throw InvalidInput("gen_world: need at least 2 values");
  if (cfg.n_reserved_entities < 0 || cfg.n_reserved_entities >= cfg.n_entities)
    throw InvalidInput("gen_world: reserved entities must leave at least one train entity");
  if (cfg.image_side % cfg.patch_side != 0)
    throw InvalidInput("gen_world: image side not divisible by patch side");
  if (!(cfg.noise_amplitude >= 0.0 && cfg.noise_amplitude <= 0.15))
    throw InvalidInput("gen_world: noise amplitude must lie in [0, 0.15]");

  World w;
  w.config = cfg;
  w.vocab = make_vocab(cfg);

  Rng fact_rng(mix_seed(cfg.seed, fnv1a64("facts")));
  w.facts.resize(static_cast<std::size_t>(cfg.n_entities) * cfg.n_attributes);
  for (auto& f : w.facts)
    f = static_cast<int>(fact_rng.next(static_cast<std::uint64_t>(cfg.n_values)));

  w.holdout_attr.resize(static_cast<std::size_t>(cfg.n_entities));
  for (int e = 0; e < cfg.n_entities; ++e)
    w.holdout_attr[static_cast<std::size_t>(e)] = static_cast<int>(
        splitmix64(mix_seed(cfg.seed, fnv1a64("holdout"), static_cast<std::uint64_t>(e))) %
        static_cast<std::uint64_t>(cfg.n_attributes));
  return w;
}

ImageGrid render_entity_base(const World& world, int entity) {
  const auto& cfg = world.config;
  if (entity < 0 || entity >= cfg.n_entities)
    throw InvalidInput("render_entity: unknown entity " + std::to_string(entity));
  ImageGrid img;
  img.side = cfg.image_side;
  img.pixels.resize(cfg.image_side, cfg.image_side);
  const std::uint64_t base = mix_seed(cfg.seed, fnv1a64("pattern"), static_cast<std::uint64_t>(entity));
  for (int y = 0; y < cfg.image_side; ++y) {
    for (int x = 0; x < cfg.image_side; ++x) {
      const std::uint64_t h = splitmix64(base + static_cast<std::uint64_t>(y * cfg.image_side + x));
      const double level = (h & 1) ? 0.5 + cfg.pattern_contrast : 0.5 - cfg.pattern_contrast;
      img.pixels(y, x) = level;
    }
  }
  return img;
}

ImageGrid render_entity(const World& world, int entity, std::uint64_t variant_seed) {
  ImageGrid img = render_entity_base(world, entity);
  const auto& cfg = world.config;
  Rng rng(mix_seed(cfg.seed, fnv1a64("variant"),
                   mix_seed(variant_seed, static_cast<std::uint64_t>(entity))));
  for (int y = 0; y < cfg.image_side; ++y)
    for (int x = 0; x < cfg.image_side; ++x)
      img.pixels(y, x) = std::clamp(
          img.pixels(y, x) + rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude), 0.0, 1.0);
  return img;
}

Dataset make_dataset(const World& world) {
  const auto& cfg = world.config;
  const int train_entities = world.n_train_entities();
  const int train_attrs = cfg.n_attributes - 1;  // one attribute held out per train entity

  if (cfg.n_train > 0 && (train_entities < 1 || train_attrs < 1))
    throw InvalidInput("make_dataset: train split infeasible: " +
                       std::to_string(train_entities) + " train entities x " +
                       std::to_string(train_attrs) + " usable attributes");
  if (cfg.n_unseen_question > 0 && (train_entities < 1 || cfg.n_attributes < 2))
    throw InvalidInput("make_dataset: unseen_question split needs a held-out attribute; have " +
                       std::to_string(cfg.n_attributes) + " attributes");
  if (cfg.n_unseen_entity > 0 && cfg.n_reserved_entities < 1)
    throw InvalidInput("make_dataset: unseen_entity split needs reserved entities; have 0");

  Dataset ds;
  // Knowledge base: one item per (entity, attribute) pair, all entities
  // included so unseen-entity questions stay answerable.
  ds.items.reserve(static_cast<std::size_t>(cfg.n_entities) * cfg.n_attributes);
  for (int e = 0; e < cfg.n_entities; ++e) {
    for (int a = 0; a < cfg.n_attributes; ++a) {
      KnowledgeItem item;
      item.id = static_cast<std::int64_t>(e) * cfg.n_attributes + a;
      item.entity = e;
      item.attribute = a;
      item.value = world.fact(e, a);
      item.image = render_entity(world, e,
                                 mix_seed(cfg.seed, fnv1a64("item_image"),
                                          static_cast<std::uint64_t>(item.id)));
      Rng drng(mix_seed(cfg.seed, fnv1a64("item_desc"), static_cast<std::uint64_t>(item.id)));
      item.description = make_description(world, e, a, item.value, drng);
      ds.items.push_back(std::move(item));
    }
  }

  std::int64_t qa_id = 0;
  auto add_instance = [&](int e, int a, Split split, std::uint64_t stream) {
    QAInstance q;
    q.id = qa_id++;
    q.entity = e;
    q.attribute = a;
    q.value = world.fact(e, a);
    q.query_image = render_entity(world, e, mix_seed(cfg.seed, fnv1a64("query_image"), stream));
    Rng qrng(mix_seed(cfg.seed, fnv1a64("question"), stream));
    q.question = make_question(world, a, qrng);
    q.answer_token = world.vocab.value_token(q.value);
    q.split = split;
    ds.instances.push_back(std::move(q));
  };

  Rng train_rng(mix_seed(cfg.seed, fnv1a64("train_split")));
  for (int i = 0; i < cfg.n_train; ++i) {
    const int e = static_cast<int>(train_rng.next(static_cast<std::uint64_t>(train_entities)));
    int a = static_cast<int>(train_rng.next(static_cast<std::uint64_t>(train_attrs)));
    if (a >= world.holdout_attr[static_cast<std::size_t>(e)]) ++a;  // skip the held-out one
    add_instance(e, a, Split::kTrain, 0x1000000ULL + static_cast<std::uint64_t>(i));
  }
  Rng uq_rng(mix_seed(cfg.seed, fnv1a64("unseen_question_split")));
  for (int i = 0; i < cfg.n_unseen_question; ++i) {
    const int e = static_cast<int>(uq_rng.next(static_cast<std::uint64_t>(train_entities)));
    const int a = world.holdout_attr[static_cast<std::size_t>(e)];
    add_instance(e, a, Split::kUnseenQuestion, 0x2000000ULL + static_cast<std::uint64_t>(i));
  }
  Rng ue_rng(mix_seed(cfg.seed, fnv1a64("unseen_entity_split")));
  for (int i = 0; i < cfg.n_unseen_entity; ++i) {
    const int e = train_entities +
                  static_cast<int>(ue_rng.next(static_cast<std::uint64_t>(cfg.n_reserved_entities)));
    const int a = static_cast<int>(ue_rng.next(static_cast<std::uint64_t>(cfg.n_attributes)));
    add_instance(e, a, Split::kUnseenEntity, 0x3000000ULL + static_cast<std::uint64_t>(i));
  }
  return ds;
}

std::vector<TokenId> language_permutation(const World& world, int language) {
  const auto& v = world.vocab;
  if (language < 0 || language > world.config.n_languages)
    throw InvalidInput("language_permutation: language id out of range");
  std::vector<TokenId> map(static_cast<std::size_t>(v.vocab_size - v.text_begin));
  std::iota(map.begin(), map.end(), v.text_begin);
  if (language > 0) {
    Rng rng(mix_seed(world.config.seed, fnv1a64("language"), static_cast<std::uint64_t>(language)));
    rng.shuffle(map);
  }
  return map;
}

std::vector<TokenId> language_permutation_inverse(const World& world, int language) {
  const auto fwd = language_permutation(world, language);
  std::vector<TokenId> inv(fwd.size());
  const int base = world.vocab.text_begin;
  for (std::size_t i = 0; i < fwd.size(); ++i)
    inv[static_cast<std::size_t>(fwd[i] - base)] = static_cast<TokenId>(i) + base;
  return inv;
}

namespace {

TokenSeq apply_map(const World& world, const TokenSeq& tokens, const std::vector<TokenId>& map) {
  const auto& v = world.vocab;
  TokenSeq out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (!v.in_text_range(t))
      throw InvalidInput("permute_language: token " + std::to_string(t) +
                         " outside the text range");
    out.push_back(map[static_cast<std::size_t>(t - v.text_begin)]);
  }
  return out;
}

}  // namespace

TokenSeq permute_tokens(const World& world, const TokenSeq& tokens, int language) {
  return apply_map(world, tokens, language_permutation(world, language));
}

TokenSeq unpermute_tokens(const World& world, const TokenSeq& tokens, int language) {
  return apply_map(world, tokens, language_permutation_inverse(world, language));
}

QAInstance permute_language(const World& world, const QAInstance& sample, int language) {
  QAInstance out = sample;
  out.question = permute_tokens(world, sample.question, language);
  out.answer_token = permute_tokens(world, {sample.answer_token}, language)[0];
  out.language = language;
  return out;
}

KnowledgeItem permute_language(const World& world, const KnowledgeItem& item, int language) {
  KnowledgeItem out = item;
  out.description = permute_tokens(world, item.description, language);
  out.language = language;
  return out;
}

TokenSeq make_question_tokens(const World& world, int attr, std::uint64_t seed) {
  if (attr < 0 || attr >= world.config.n_attributes)
    throw InvalidInput("make_question_tokens: attribute out of range");
  Rng rng(mix_seed(world.config.seed, fnv1a64("free_question"), seed));
  return make_question(world, attr, rng);
}

double audit_answerability(const World& world, const Dataset& dataset) {
  long supported = 0;
  for (const auto& q : dataset.instances) {
    bool found = false;
    for (const auto& item : dataset.items) {
      if (item.entity == q.entity && item.attribute == q.attribute &&
          item.value == q.value && item.language == 0) {
        found = true;
        break;
      }
    }
    if (found) ++supported;
  }
  (void)world;
  return dataset.instances.empty()
             ? 1.0
             : static_cast<double>(supported) / static_cast<double>(dataset.instances.size());
}

namespace {
using json = nlohmann::ordered_json;

Matrix image_to_matrix(const ImageGrid& img) { return img.pixels; }

json world_config_json(const WorldConfig& c) {
  return json{{"seed", c.seed},
              {"n_entities", c.n_entities},
              {"n_attributes", c.n_attributes},
              {"n_values", c.n_values},
              {"n_reserved_entities", c.n_reserved_entities},
              {"image_side", c.image_side},
              {"patch_side", c.patch_side},
              {"noise_amplitude", c.noise_amplitude},
              {"pattern_contrast", c.pattern_contrast},
              {"item_length", c.item_length},
              {"query_length", c.query_length},
              {"vocab_size", c.vocab_size},
              {"n_train", c.n_train},
              {"n_unseen_question", c.n_unseen_question},
              {"n_unseen_entity", c.n_unseen_entity},
              {"n_languages", c.n_languages}};
}

WorldConfig world_config_from_json(const json& j) {
  WorldConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.n_entities = j.at("n_entities").get<int>();
  c.n_attributes = j.at("n_attributes").get<int>();
  c.n_values = j.at("n_values").get<int>();
  c.n_reserved_entities = j.at("n_reserved_entities").get<int>();
  c.image_side = j.at("image_side").get<int>();
  c.patch_side = j.at("patch_side").get<int>();
  c.noise_amplitude = j.at("noise_amplitude").get<double>();
  c.pattern_contrast = j.at("pattern_contrast").get<double>();
  c.item_length = j.at("item_length").get<int>();
  c.query_length = j.at("query_length").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.n_train = j.at("n_train").get<int>();
  c.n_unseen_question = j.at("n_unseen_question").get<int>();
  c.n_unseen_entity = j.at("n_unseen_entity").get<int>();
  c.n_languages = j.at("n_languages").get<int>();
  return c;
}

}  // namespace

void save_world(const std::string& path, const World& world, const Dataset& dataset) {
  json manifest;
  manifest["kind"] = "world";
  manifest["config"] = world_config_json(world.config);
  manifest["facts"] = world.facts;
  manifest["holdout_attr"] = world.holdout_attr;

  json items = json::array();
  for (const auto& it : dataset.items)
    items.push_back({{"id", it.id},
                     {"entity", it.entity},
                     {"attribute", it.attribute},
                     {"value", it.value},
                     {"description", it.description},
                     {"language", it.language}});
  manifest["items"] = items;

  json instances = json::array();
  for (const auto& q : dataset.instances)
    instances.push_back({{"id", q.id},
                         {"entity", q.entity},
                         {"attribute", q.attribute},
                         {"value", q.value},
                         {"question", q.question},
                         {"answer", q.answer_token},
                         {"split", split_name(q.split)},
                         {"language", q.language}});
  manifest["instances"] = instances;

  std::vector<NamedTensor> tensors;
  tensors.reserve(dataset.items.size() + dataset.instances.size());
  for (const auto& it : dataset.items)
    tensors.push_back({"item/" + std::to_string(it.id), image_to_matrix(it.image)});
  for (const auto& q : dataset.instances)
    tensors.push_back({"query/" + std::to_string(q.id), image_to_matrix(q.query_image)});

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_world: cannot open '" + path + "'");
  write_json_block(os, manifest.dump());
  write_tensor_container(os, tensors);
  if (!os) throw std::runtime_error("save_world: write failed for '" + path + "'");
}

LoadedWorld load_world(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_world: cannot open '" + path + "'");
  const json manifest = json::parse(read_json_block(is));
  if (manifest.at("kind").get<std::string>() != "world")
    throw std::runtime_error("load_world: wrong file kind");

  LoadedWorld out;
  out.world = gen_world(world_config_from_json(manifest.at("config")));
  out.world.facts = manifest.at("facts").get<std::vector<int>>();
  out.world.holdout_attr = manifest.at("holdout_attr").get<std::vector<int>>();

  auto tensors = read_tensor_container(is);
  std::size_t t = 0;
  auto next_image = [&](const std::string& expect, int side) {
    if (t >= tensors.size() || tensors[t].name != expect)
      throw std::runtime_error("load_world: image order mismatch at '" + expect + "'");
    ImageGrid img;
    img.side = side;
    img.pixels = tensors[t++].value;
    return img;
  };

  for (const auto& j : manifest.at("items")) {
    KnowledgeItem it;
    it.id = j.at("id").get<std::int64_t>();
    it.entity = j.at("entity").get<int>();
    it.attribute = j.at("attribute").get<int>();
    it.value = j.at("value").get<int>();
    it.description = j.at("description").get<TokenSeq>();
    it.language = j.at("language").get<int>();
    out.dataset.items.push_back(std::move(it));
  }
  for (const auto& j : manifest.at("instances")) {
    QAInstance q;
    q.id = j.at("id").get<std::int64_t>();
    q.entity = j.at("entity").get<int>();
    q.attribute = j.at("attribute").get<int>();
    q.value = j.at("value").get<int>();
    q.question = j.at("question").get<TokenSeq>();
    q.answer_token = j.at("answer").get<TokenId>();
    const std::string s = j.at("split").get<std::string>();
    q.split = s == "train" ? Split::kTrain
              : s == "unseen_question" ? Split::kUnseenQuestion
                                       : Split::kUnseenEntity;
    q.language = j.at("language").get<int>();
    out.dataset.instances.push_back(std::move(q));
  }
  for (auto& it : out.dataset.items)
    it.image = next_image("item/" + std::to_string(it.id), out.world.config.image_side);
  for (auto& q : out.dataset.instances)
    q.query_image = next_image("query/" + std::to_string(q.id), out.world.config.image_side);
  return out;
}

}  // namespace comem
