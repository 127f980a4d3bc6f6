#include "comem/backbone.hpp"

#include "comem/attention.hpp"
#include "comem/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace comem {

void BackboneConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0)
    throw InvalidInput("backbone config: dimensions must be positive");
  if (d_model % n_heads != 0) throw InvalidInput("backbone config: d_model % n_heads != 0");
  if (max_context < 1) throw InvalidInput("backbone config: max_context must be >= 1");
  if (patch_side <= 0) throw InvalidInput("backbone config: patch_side must be positive");
}

EmbeddingSequence EmbeddingSequence::empty(int d_model) {
  EmbeddingSequence s;
  s.vectors.resize(0, d_model);
  s.patch_raw.resize(0, 0);
  return s;
}

EmbeddingSequence concat_sequences(const EmbeddingSequence& a, const EmbeddingSequence& b) {
  if (a.length() == 0) return b;
  if (b.length() == 0) return a;
  if (a.d_model() != b.d_model())
    throw InvalidInput("concat_sequences: d_model mismatch");
  EmbeddingSequence out;
  out.vectors.resize(a.length() + b.length(), a.d_model());
  out.vectors << a.vectors, b.vectors;
  out.origins = a.origins;
  out.origins.insert(out.origins.end(), b.origins.begin(), b.origins.end());
  out.token_ids = a.token_ids;
  out.token_ids.insert(out.token_ids.end(), b.token_ids.begin(), b.token_ids.end());
  const long pa = a.patch_raw.rows(), pb = b.patch_raw.rows();
  const long pc = std::max(a.patch_raw.cols(), b.patch_raw.cols());
  out.patch_raw.resize(pa + pb, pc);
  if (pa > 0) out.patch_raw.topRows(pa) = a.patch_raw;
  if (pb > 0) out.patch_raw.bottomRows(pb) = b.patch_raw;
  return out;
}

const Matrix& EncoderStates::layer(int idx) const {
  const long n = static_cast<long>(per_layer_hidden.size());
  long i = idx < 0 ? n + idx : idx;
  if (i < 0 || i >= n) throw InvalidInput("EncoderStates: layer index out of range");
  return per_layer_hidden[static_cast<std::size_t>(i)];
}

const Matrix* LayerwiseMemory::states_for(int layer) const {
  for (std::size_t i = 0; i < band.size(); ++i)
    if (band[i] == layer) return &states[i];
  return nullptr;
}

namespace {

Rng tensor_rng(std::uint64_t seed, const std::string& name) {
  return Rng(mix_seed(seed, fnv1a64(name)));
}

Matrix xavier(std::uint64_t seed, const std::string& name, long rows, long cols) {
  Rng rng = tensor_rng(seed, name);
  const double stddev = std::sqrt(2.0 / static_cast<double>(rows + cols));
  return rng.gaussian_matrix(rows, cols, stddev);
}

Matrix gaussian_init(std::uint64_t seed, const std::string& name, long rows, long cols,
                     double stddev) {
  Rng rng = tensor_rng(seed, name);
  return rng.gaussian_matrix(rows, cols, stddev);
}

}  // namespace

Backbone Backbone::init(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Backbone m;
  m.config = cfg;
  m.init_seed = seed;
  const long d = cfg.d_model;
  const long p2 = static_cast<long>(cfg.patch_side) * cfg.patch_side;

  m.token_embedding = ParamGroup("tok_embed",
                                 gaussian_init(seed, "tok_embed", cfg.vocab_size, d, 0.1));
  m.position_embedding = ParamGroup("pos_embed",
                                    gaussian_init(seed, "pos_embed", cfg.max_context, d, 0.02));
  m.patch_w = ParamGroup("patch_w", xavier(seed, "patch_w", p2, d));
  m.patch_b = ParamGroup("patch_b", Matrix::Zero(1, d));

  m.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "blocks." + std::to_string(l) + ".";
    auto& b = m.blocks[static_cast<std::size_t>(l)];
    b.ln1_gamma = ParamGroup(pre + "ln1.gamma", Matrix::Ones(1, d));
    b.ln1_beta = ParamGroup(pre + "ln1.beta", Matrix::Zero(1, d));
    b.attn.wq = ParamGroup(pre + "attn.wq", xavier(seed, pre + "attn.wq", d, d));
    b.attn.wk = ParamGroup(pre + "attn.wk", xavier(seed, pre + "attn.wk", d, d));
    b.attn.wv = ParamGroup(pre + "attn.wv", xavier(seed, pre + "attn.wv", d, d));
    b.attn.wo = ParamGroup(pre + "attn.wo", xavier(seed, pre + "attn.wo", d, d));
    b.ln2_gamma = ParamGroup(pre + "ln2.gamma", Matrix::Ones(1, d));
    b.ln2_beta = ParamGroup(pre + "ln2.beta", Matrix::Zero(1, d));
    b.ffn_w1 = ParamGroup(pre + "ffn.w1", xavier(seed, pre + "ffn.w1", d, cfg.d_ff));
    b.ffn_b1 = ParamGroup(pre + "ffn.b1", Matrix::Zero(1, cfg.d_ff));
    b.ffn_w2 = ParamGroup(pre + "ffn.w2", xavier(seed, pre + "ffn.w2", cfg.d_ff, d));
    b.ffn_b2 = ParamGroup(pre + "ffn.b2", Matrix::Zero(1, d));
  }
  m.lnf_gamma = ParamGroup("lnf.gamma", Matrix::Ones(1, d));
  m.lnf_beta = ParamGroup("lnf.beta", Matrix::Zero(1, d));
  m.lm_head = ParamGroup("lm_head", xavier(seed, "lm_head", d, cfg.vocab_size));
  return m;
}

void Backbone::visit_params(const ParamVisitor& fn) {
  fn(token_embedding);
  fn(position_embedding);
  fn(patch_w);
  fn(patch_b);
  for (auto& b : blocks) {
    fn(b.ln1_gamma);
    fn(b.ln1_beta);
    fn(b.attn.wq);
    fn(b.attn.wk);
    fn(b.attn.wv);
    fn(b.attn.wo);
    fn(b.ln2_gamma);
    fn(b.ln2_beta);
    fn(b.ffn_w1);
    fn(b.ffn_b1);
    fn(b.ffn_w2);
    fn(b.ffn_b2);
  }
  fn(lnf_gamma);
  fn(lnf_beta);
  fn(lm_head);
}

void Backbone::visit_params(const ConstParamVisitor& fn) const {
  const_cast<Backbone*>(this)->visit_params(
      ParamVisitor([&](ParamGroup& g) { fn(g); }));
}

std::vector<ParamGroup*> Backbone::param_groups() {
  std::vector<ParamGroup*> out;
  visit_params([&](ParamGroup& g) { out.push_back(&g); });
  return out;
}

void Backbone::set_trainable(bool trainable) {
  visit_params([&](ParamGroup& g) { g.trainable = trainable; });
}

void Backbone::zero_grads() {
  visit_params([](ParamGroup& g) { g.zero_grad(); });
}

long Backbone::param_count() const {
  long n = 0;
  visit_params(ConstParamVisitor([&](const ParamGroup& g) { n += g.size(); }));
  return n;
}

EmbeddingSequence Backbone::embed_multimodal(const ImageGrid* image,
                                             const TokenSeq& tokens) const {
  const int ps = config.patch_side;
  long n_patches = 0;
  if (image) {
    if (image->side % ps != 0)
      throw InvalidInput("embed_multimodal: image side " + std::to_string(image->side) +
                         " not divisible by patch side " + std::to_string(ps));
    if (image->pixels.rows() != image->side || image->pixels.cols() != image->side)
      throw InvalidInput("embed_multimodal: pixel grid does not match declared side");
    const long g = image->side / ps;
    n_patches = g * g;
  }
  for (TokenId t : tokens)
    if (t < 0 || t >= config.vocab_size)
      throw InvalidInput("embed_multimodal: token id " + std::to_string(t) +
                         " outside vocabulary");

  const long total = n_patches + static_cast<long>(tokens.size());
  EmbeddingSequence seq;
  seq.vectors.resize(total, config.d_model);
  seq.origins.resize(static_cast<std::size_t>(total));
  seq.token_ids.assign(static_cast<std::size_t>(total), -1);
  seq.patch_raw.resize(n_patches, static_cast<long>(ps) * ps);

  if (image) {
    const long g = image->side / ps;
    long row = 0;
    for (long py = 0; py < g; ++py) {
      for (long px = 0; px < g; ++px) {
        long c = 0;
        for (int dy = 0; dy < ps; ++dy)
          for (int dx = 0; dx < ps; ++dx)
            seq.patch_raw(row, c++) = image->pixels(py * ps + dy, px * ps + dx);
        ++row;
      }
    }
    seq.vectors.topRows(n_patches) =
        (seq.patch_raw * patch_w.value).rowwise() + patch_b.value.row(0);
    std::fill(seq.origins.begin(), seq.origins.begin() + n_patches, Origin::kPatch);
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const long r = n_patches + static_cast<long>(i);
    seq.vectors.row(r) = token_embedding.value.row(tokens[i]);
    seq.origins[static_cast<std::size_t>(r)] = Origin::kToken;
    seq.token_ids[static_cast<std::size_t>(r)] = tokens[i];
  }
  return seq;
}

std::vector<long> Backbone::position_indices(const EmbeddingSequence& seq) const {
  std::vector<long> idx(static_cast<std::size_t>(seq.length()), -1);
  const bool absolute = config.memory_positions == BackboneConfig::MemoryPositions::kAbsolute;
  long next = 0;
  for (long i = 0; i < seq.length(); ++i) {
    const bool is_memory = seq.origins[static_cast<std::size_t>(i)] == Origin::kMemory;
    if (absolute) {
      idx[static_cast<std::size_t>(i)] = std::min<long>(i, config.max_context - 1);
    } else if (!is_memory) {
      idx[static_cast<std::size_t>(i)] = std::min<long>(next++, config.max_context - 1);
    }
  }
  return idx;
}

EncoderStates Backbone::encode(const EmbeddingSequence& seq, const EncodeOptions& opt,
                               ForwardCache* cache) const {
  if (seq.length() > config.max_context)
    throw ContextOverflow(seq.length(), config.max_context);
  if (seq.d_model() != config.d_model)
    throw InvalidInput("encode: sequence d_model mismatch");
  if (opt.injected && !opt.injected->empty()) {
    for (int l : opt.injected->band)
      if (l < 0 || l >= config.n_layers)
        throw InvalidInput("encode: injected band layer out of range");
    if (opt.injected->states[0].cols() != config.d_model)
      throw InvalidInput("encode: injected memory d_model mismatch");
  }

  const long t = seq.length();
  EncoderStates states;
  states.embeddings = seq.vectors;
  const auto pos = position_indices(seq);
  for (long i = 0; i < t; ++i)
    if (pos[static_cast<std::size_t>(i)] >= 0)
      states.embeddings.row(i) += position_embedding.value.row(pos[static_cast<std::size_t>(i)]);

  states.per_layer_hidden.reserve(static_cast<std::size_t>(config.n_layers));
  if (opt.want_traces) states.attention_traces.resize(static_cast<std::size_t>(config.n_layers));
  if (cache) {
    cache->embedded = states.embeddings;
    cache->blocks.assign(static_cast<std::size_t>(config.n_layers), BlockCache());
    cache->causal = opt.causal;
  }

  Matrix x = states.embeddings;
  for (int l = 0; l < config.n_layers; ++l) {
    const auto& b = blocks[static_cast<std::size_t>(l)];
    const std::string prefix = "blocks." + std::to_string(l) + ".attn.";
    BlockCache local;
    BlockCache& bc = cache ? cache->blocks[static_cast<std::size_t>(l)] : local;
    bc.x_in = x;

    const Matrix* mem = (opt.injected && !opt.injected->empty())
                            ? opt.injected->states_for(l)
                            : nullptr;
    if (mem && mem->rows() > 0) {
      bc.ln1_in.resize(mem->rows() + t, config.d_model);
      bc.ln1_in << *mem, x;
    } else {
      bc.ln1_in = x;
    }
    bc.ln1_out = nn::layer_norm(bc.ln1_in, b.ln1_gamma.value, b.ln1_beta.value);

    const Matrix xq = bc.ln1_out.bottomRows(t);
    bc.attn_out = detail::mha_forward(xq, bc.ln1_out, b.attn, config.n_heads, opt.causal,
                                      opt.lora, prefix, bc.mha);
    bc.x_mid = bc.x_in + bc.attn_out;

    bc.ln2_out = nn::layer_norm(bc.x_mid, b.ln2_gamma.value, b.ln2_beta.value);
    bc.ffn_pre = (bc.ln2_out * b.ffn_w1.value).rowwise() + b.ffn_b1.value.row(0);
    bc.ffn_act = nn::gelu(bc.ffn_pre);
    Matrix ffn_out = (bc.ffn_act * b.ffn_w2.value).rowwise() + b.ffn_b2.value.row(0);
    x = bc.x_mid + ffn_out;

    states.per_layer_hidden.push_back(x);
    if (opt.want_traces)
      states.attention_traces[static_cast<std::size_t>(l)] = bc.mha.head_weights;
  }
  return states;
}

Matrix Backbone::logits_from_hidden(const Matrix& h_rows) const {
  Matrix normed = nn::layer_norm(h_rows, lnf_gamma.value, lnf_beta.value);
  return normed * lm_head.value;
}

TokenSeq Backbone::decode_answer(const EmbeddingSequence& seq, int max_new_tokens,
                                 TokenId end_token, const LayerwiseMemory* injected) const {
  if (max_new_tokens < 1) throw InvalidInput("decode_answer: max_new_tokens must be >= 1");
  EmbeddingSequence cur = seq;
  TokenSeq out;
  EncodeOptions opt;
  opt.causal = true;
  opt.want_traces = false;
  opt.injected = injected;
  for (int step = 0; step < max_new_tokens; ++step) {
    if (cur.length() >= config.max_context) break;  // no room left to generate
    EncoderStates st = encode(cur, opt);
    Matrix logits = logits_from_hidden(st.per_layer_hidden.back().bottomRows(1));
    long best = 0;
    for (long j = 1; j < logits.cols(); ++j)
      if (logits(0, j) > logits(0, best)) best = j;
    const TokenId tok = static_cast<TokenId>(best);
    out.push_back(tok);
    if (tok == end_token) break;

    EmbeddingSequence next;
    next.vectors = token_embedding.value.row(tok);
    next.origins = {Origin::kToken};
    next.token_ids = {tok};
    next.patch_raw.resize(0, cur.patch_raw.cols());
    cur = concat_sequences(cur, next);
  }
  return out;
}

Matrix Backbone::backward_from_hidden(const ForwardCache& cache, const EmbeddingSequence& seq,
                                      const Matrix& d_hidden, LoraSet* lora,
                                      bool want_input_grad) {
  const long t = cache.embedded.rows();
  Matrix d_x = d_hidden;
  for (int l = config.n_layers - 1; l >= 0; --l) {
    auto& b = blocks[static_cast<std::size_t>(l)];
    const auto& bc = cache.blocks[static_cast<std::size_t>(l)];
    const std::string prefix = "blocks." + std::to_string(l) + ".attn.";

    // x_out = x_mid + ffn(ln2(x_mid))
    Matrix d_ffn_out = d_x;
    if (b.ffn_b2.trainable) b.ffn_b2.grad += d_ffn_out.colwise().sum();
    b.ffn_w2.accumulate(bc.ffn_act.transpose() * d_ffn_out);
    Matrix d_ffn_act = d_ffn_out * b.ffn_w2.value.transpose();
    Matrix d_ffn_pre = nn::gelu_backward(d_ffn_act, bc.ffn_pre);
    if (b.ffn_b1.trainable) b.ffn_b1.grad += d_ffn_pre.colwise().sum();
    b.ffn_w1.accumulate(bc.ln2_out.transpose() * d_ffn_pre);
    Matrix d_ln2_out = d_ffn_pre * b.ffn_w1.value.transpose();
    Matrix d_x_mid = d_x;  // residual branch
    d_x_mid += nn::layer_norm_backward(d_ln2_out, bc.x_mid, b.ln2_gamma.value, &b.ln2_gamma,
                                       &b.ln2_beta);

    // x_mid = x_in + attn(ln1([mem; x_in]))
    auto mha_grads = detail::mha_backward(d_x_mid, bc.mha, b.attn, config.n_heads, cache.causal,
                                          lora, prefix);
    const long ext = bc.ln1_in.rows();
    Matrix d_ln1_out = mha_grads.d_xkv;
    d_ln1_out.bottomRows(t) += mha_grads.d_xq;
    Matrix d_ln1_in = nn::layer_norm_backward(d_ln1_out, bc.ln1_in, b.ln1_gamma.value,
                                              &b.ln1_gamma, &b.ln1_beta);
    d_x = d_x_mid;  // residual branch
    d_x += d_ln1_in.bottomRows(t);
    (void)ext;  // gradient into injected memory rows is discarded
  }

  // Embedding-level gradients.
  const auto pos = position_indices(seq);
  for (long i = 0; i < t; ++i) {
    const long p = pos[static_cast<std::size_t>(i)];
    if (p >= 0 && position_embedding.trainable) position_embedding.grad.row(p) += d_x.row(i);
  }
  long patch_row = 0;
  for (long i = 0; i < t; ++i) {
    switch (seq.origins[static_cast<std::size_t>(i)]) {
      case Origin::kToken: {
        const TokenId id = seq.token_ids[static_cast<std::size_t>(i)];
        if (token_embedding.trainable) token_embedding.grad.row(id) += d_x.row(i);
        break;
      }
      case Origin::kPatch: {
        patch_w.accumulate(seq.patch_raw.row(patch_row).transpose() * d_x.row(i));
        if (patch_b.trainable) patch_b.grad += d_x.row(i);
        ++patch_row;
        break;
      }
      case Origin::kMemory:
        break;  // flows out through the returned input gradient
    }
  }
  if (want_input_grad) return d_x;
  return Matrix();
}

namespace {
using json = nlohmann::ordered_json;
}

void save_backbone(const std::string& path, const Backbone& model) {
  json manifest;
  manifest["kind"] = "backbone";
  manifest["seed"] = model.init_seed;
  json cfg;
  cfg["d_model"] = model.config.d_model;
  cfg["n_layers"] = model.config.n_layers;
  cfg["n_heads"] = model.config.n_heads;
  cfg["d_ff"] = model.config.d_ff;
  cfg["vocab_size"] = model.config.vocab_size;
  cfg["max_context"] = model.config.max_context;
  cfg["patch_side"] = model.config.patch_side;
  cfg["memory_positions"] =
      model.config.memory_positions == BackboneConfig::MemoryPositions::kAbsolute ? "absolute"
                                                                                  : "none";
  manifest["config"] = cfg;

  std::vector<NamedTensor> tensors;
  json groups = json::array();
  model.visit_params(ConstParamVisitor([&](const ParamGroup& g) {
    groups.push_back({{"name", g.name}, {"trainable", g.trainable}});
    tensors.push_back({g.name, g.value});
  }));
  manifest["param_groups"] = groups;

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_backbone: cannot open '" + path + "'");
  write_json_block(os, manifest.dump());
  write_tensor_container(os, tensors);
  if (!os) throw std::runtime_error("save_backbone: write failed for '" + path + "'");
}

Backbone load_backbone(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_backbone: cannot open '" + path + "'");
  const json manifest = json::parse(read_json_block(is));
  if (manifest.at("kind").get<std::string>() != "backbone")
    throw std::runtime_error("load_backbone: not a backbone checkpoint");

  BackboneConfig cfg;
  const auto& c = manifest.at("config");
  cfg.d_model = c.at("d_model").get<int>();
  cfg.n_layers = c.at("n_layers").get<int>();
  cfg.n_heads = c.at("n_heads").get<int>();
  cfg.d_ff = c.at("d_ff").get<int>();
  cfg.vocab_size = c.at("vocab_size").get<int>();
  cfg.max_context = c.at("max_context").get<int>();
  cfg.patch_side = c.at("patch_side").get<int>();
  cfg.memory_positions = c.at("memory_positions").get<std::string>() == "none"
                             ? BackboneConfig::MemoryPositions::kNone
                             : BackboneConfig::MemoryPositions::kAbsolute;

  Backbone model = Backbone::init(cfg, manifest.at("seed").get<std::uint64_t>());
  auto tensors = read_tensor_container(is);
  std::size_t idx = 0;
  model.visit_params([&](ParamGroup& g) {
    if (idx >= tensors.size() || tensors[idx].name != g.name)
      throw std::runtime_error("load_backbone: tensor order mismatch at '" + g.name + "'");
    if (tensors[idx].value.rows() != g.value.rows() ||
        tensors[idx].value.cols() != g.value.cols())
      throw std::runtime_error("load_backbone: shape mismatch for '" + g.name + "'");
    g.value = tensors[idx].value;
    ++idx;
  });
  for (const auto& entry : manifest.at("param_groups")) {
    const std::string name = entry.at("name").get<std::string>();
    const bool trainable = entry.at("trainable").get<bool>();
    model.visit_params([&](ParamGroup& g) {
      if (g.name == name) g.trainable = trainable;
    });
  }
  return model;
}

}  // namespace comem
