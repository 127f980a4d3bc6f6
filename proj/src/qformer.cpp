#include "comem/qformer.hpp"

#include "comem/attention.hpp"
#include "comem/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

namespace comem {

void QFormerConfig::validate() const {
  if (k < 1) throw InvalidInput("qformer config: k must be >= 1");
  if (n_layers < 1) throw InvalidInput("qformer config: n_layers must be >= 1");
  if (d_model <= 0 || d_ff <= 0 || n_heads <= 0)
    throw InvalidInput("qformer config: dimensions must be positive");
  if (d_model % n_heads != 0) throw InvalidInput("qformer config: d_model % n_heads != 0");
}

namespace {

Matrix seeded_xavier(std::uint64_t seed, const std::string& name, long rows, long cols) {
  Rng rng(mix_seed(seed, fnv1a64(name)));
  const double stddev = std::sqrt(2.0 / static_cast<double>(rows + cols));
  return rng.gaussian_matrix(rows, cols, stddev);
}

}  // namespace

QFormer QFormer::init(const QFormerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  QFormer m;
  m.config = cfg;
  m.init_seed = seed;
  const long d = cfg.d_model;

  Rng qrng(mix_seed(seed, fnv1a64("qformer.queries")));
  m.queries = ParamGroup("qformer.queries", qrng.gaussian_matrix(cfg.k, d, 0.1));

  const int stored = cfg.shared ? 1 : cfg.n_layers;
  m.layers.resize(static_cast<std::size_t>(stored));
  for (int l = 0; l < stored; ++l) {
    const std::string pre = "qformer.layer." + std::to_string(l) + ".";
    auto& lay = m.layers[static_cast<std::size_t>(l)];
    lay.ln1_gamma = ParamGroup(pre + "ln1.gamma", Matrix::Ones(1, d));
    lay.ln1_beta = ParamGroup(pre + "ln1.beta", Matrix::Zero(1, d));
    lay.self_attn.wq = ParamGroup(pre + "self.wq", seeded_xavier(seed, pre + "self.wq", d, d));
    lay.self_attn.wk = ParamGroup(pre + "self.wk", seeded_xavier(seed, pre + "self.wk", d, d));
    lay.self_attn.wv = ParamGroup(pre + "self.wv", seeded_xavier(seed, pre + "self.wv", d, d));
    lay.self_attn.wo = ParamGroup(pre + "self.wo", seeded_xavier(seed, pre + "self.wo", d, d));
    lay.ln2_gamma = ParamGroup(pre + "ln2.gamma", Matrix::Ones(1, d));
    lay.ln2_beta = ParamGroup(pre + "ln2.beta", Matrix::Zero(1, d));
    lay.cross_attn.wq = ParamGroup(pre + "cross.wq", seeded_xavier(seed, pre + "cross.wq", d, d));
    lay.cross_attn.wk = ParamGroup(pre + "cross.wk", seeded_xavier(seed, pre + "cross.wk", d, d));
    lay.cross_attn.wv = ParamGroup(pre + "cross.wv", seeded_xavier(seed, pre + "cross.wv", d, d));
    lay.cross_attn.wo = ParamGroup(pre + "cross.wo", seeded_xavier(seed, pre + "cross.wo", d, d));
    lay.ln3_gamma = ParamGroup(pre + "ln3.gamma", Matrix::Ones(1, d));
    lay.ln3_beta = ParamGroup(pre + "ln3.beta", Matrix::Zero(1, d));
    lay.ffn_w1 = ParamGroup(pre + "ffn.w1", seeded_xavier(seed, pre + "ffn.w1", d, cfg.d_ff));
    lay.ffn_b1 = ParamGroup(pre + "ffn.b1", Matrix::Zero(1, cfg.d_ff));
    lay.ffn_w2 = ParamGroup(pre + "ffn.w2", seeded_xavier(seed, pre + "ffn.w2", cfg.d_ff, d));
    lay.ffn_b2 = ParamGroup(pre + "ffn.b2", Matrix::Zero(1, d));
  }
  m.out_gamma = ParamGroup("qformer.out.gamma", Matrix::Ones(1, d));
  m.out_beta = ParamGroup("qformer.out.beta", Matrix::Zero(1, d));
  return m;
}

void QFormer::visit_params(const ParamVisitor& fn) {
  fn(queries);
  for (auto& lay : layers) {
    fn(lay.ln1_gamma);
    fn(lay.ln1_beta);
    fn(lay.self_attn.wq);
    fn(lay.self_attn.wk);
    fn(lay.self_attn.wv);
    fn(lay.self_attn.wo);
    fn(lay.ln2_gamma);
    fn(lay.ln2_beta);
    fn(lay.cross_attn.wq);
    fn(lay.cross_attn.wk);
    fn(lay.cross_attn.wv);
    fn(lay.cross_attn.wo);
    fn(lay.ln3_gamma);
    fn(lay.ln3_beta);
    fn(lay.ffn_w1);
    fn(lay.ffn_b1);
    fn(lay.ffn_w2);
    fn(lay.ffn_b2);
  }
  fn(out_gamma);
  fn(out_beta);
}

void QFormer::visit_params(const ConstParamVisitor& fn) const {
  const_cast<QFormer*>(this)->visit_params(ParamVisitor([&](ParamGroup& g) { fn(g); }));
}

void QFormer::set_trainable(bool trainable) {
  visit_params([&](ParamGroup& g) { g.trainable = trainable; });
}

void QFormer::zero_grads() {
  visit_params([](ParamGroup& g) { g.zero_grad(); });
}

long QFormer::param_count() const {
  long n = 0;
  visit_params(ConstParamVisitor([&](const ParamGroup& g) { n += g.size(); }));
  return n;
}

const QFormerLayer& QFormer::layer_for(int app) const {
  return layers[static_cast<std::size_t>(config.shared ? 0 : app)];
}

QFormerLayer& QFormer::layer_for(int app) {
  return layers[static_cast<std::size_t>(config.shared ? 0 : app)];
}

Matrix QFormer::compress_source(const Matrix& source, QFormerCache* cache) const {
  if (source.cols() != config.d_model)
    throw InvalidInput("qformer compress: source d_model " + std::to_string(source.cols()) +
                       " != " + std::to_string(config.d_model));
  if (source.rows() < 1) throw InvalidInput("qformer compress: empty source");

  QFormerCache local;
  QFormerCache& qc = cache ? *cache : local;
  qc.apps.assign(static_cast<std::size_t>(config.n_layers), QFormerAppCache());

  Matrix h = queries.value;
  for (int app = 0; app < config.n_layers; ++app) {
    const auto& lay = layer_for(app);
    auto& ac = qc.apps[static_cast<std::size_t>(app)];
    ac.h_in = h;

    ac.ln1_out = nn::layer_norm(h, lay.ln1_gamma.value, lay.ln1_beta.value);
    Matrix self_out = detail::mha_forward(ac.ln1_out, ac.ln1_out, lay.self_attn,
                                          config.n_heads, /*causal=*/false, nullptr, "",
                                          ac.self_mha);
    ac.h_self = h + self_out;

    ac.ln2_out = nn::layer_norm(ac.h_self, lay.ln2_gamma.value, lay.ln2_beta.value);
    Matrix cross_out = detail::mha_forward(ac.ln2_out, source, lay.cross_attn, config.n_heads,
                                           /*causal=*/false, nullptr, "", ac.cross_mha);
    ac.h_cross = ac.h_self + cross_out;

    ac.ln3_out = nn::layer_norm(ac.h_cross, lay.ln3_gamma.value, lay.ln3_beta.value);
    ac.ffn_pre = (ac.ln3_out * lay.ffn_w1.value).rowwise() + lay.ffn_b1.value.row(0);
    ac.ffn_act = nn::gelu(ac.ffn_pre);
    Matrix ffn_out = (ac.ffn_act * lay.ffn_w2.value).rowwise() + lay.ffn_b2.value.row(0);
    h = ac.h_cross + ffn_out;
  }
  qc.h_final = h;
  return nn::layer_norm(h, out_gamma.value, out_beta.value);
}

MemoryVectors QFormer::compress(const EncoderStates& states, std::int64_t item_id,
                                QFormerCache* cache) const {
  MemoryVectors mv;
  mv.source_item_id = item_id;
  mv.vectors = compress_source(states.layer(config.source_layer), cache);
  return mv;
}

void QFormer::backward(const QFormerCache& cache, const Matrix& source, const Matrix& d_output,
                       Matrix* d_source) {
  if (d_source) *d_source = Matrix::Zero(source.rows(), source.cols());

  Matrix d_h = nn::layer_norm_backward(d_output, cache.h_final, out_gamma.value, &out_gamma,
                                       &out_beta);
  for (int app = config.n_layers - 1; app >= 0; --app) {
    auto& lay = layer_for(app);
    const auto& ac = cache.apps[static_cast<std::size_t>(app)];

    // h_out = h_cross + ffn(ln3(h_cross))
    Matrix d_ffn_out = d_h;
    if (lay.ffn_b2.trainable) lay.ffn_b2.grad += d_ffn_out.colwise().sum();
    lay.ffn_w2.accumulate(ac.ffn_act.transpose() * d_ffn_out);
    Matrix d_ffn_act = d_ffn_out * lay.ffn_w2.value.transpose();
    Matrix d_ffn_pre = nn::gelu_backward(d_ffn_act, ac.ffn_pre);
    if (lay.ffn_b1.trainable) lay.ffn_b1.grad += d_ffn_pre.colwise().sum();
    lay.ffn_w1.accumulate(ac.ln3_out.transpose() * d_ffn_pre);
    Matrix d_ln3 = d_ffn_pre * lay.ffn_w1.value.transpose();
    Matrix d_h_cross = d_h;
    d_h_cross += nn::layer_norm_backward(d_ln3, ac.h_cross, lay.ln3_gamma.value, &lay.ln3_gamma,
                                         &lay.ln3_beta);

    // h_cross = h_self + cross(ln2(h_self), source)
    auto cross_grads = detail::mha_backward(d_h_cross, ac.cross_mha, lay.cross_attn,
                                            config.n_heads, false, nullptr, "");
    if (d_source) *d_source += cross_grads.d_xkv;
    Matrix d_h_self = d_h_cross;
    d_h_self += nn::layer_norm_backward(cross_grads.d_xq, ac.h_self, lay.ln2_gamma.value,
                                        &lay.ln2_gamma, &lay.ln2_beta);

    // h_self = h + self(ln1(h))
    auto self_grads = detail::mha_backward(d_h_self, ac.self_mha, lay.self_attn, config.n_heads,
                                           false, nullptr, "");
    Matrix d_ln1 = self_grads.d_xq + self_grads.d_xkv;
    d_h = d_h_self;
    d_h += nn::layer_norm_backward(d_ln1, ac.h_in, lay.ln1_gamma.value, &lay.ln1_gamma,
                                   &lay.ln1_beta);
  }
  queries.accumulate(d_h);
}

EmbeddingSequence assemble_memory(const std::vector<MemoryVectors>& memories) {
  if (memories.empty()) return EmbeddingSequence::empty(0);
  const long d = memories.front().vectors.cols();
  long total = 0;
  for (const auto& m : memories) {
    if (m.vectors.cols() != d) throw InvalidInput("assemble_memory: d_model mismatch");
    total += m.vectors.rows();
  }
  EmbeddingSequence seq;
  seq.vectors.resize(total, d);
  seq.origins.assign(static_cast<std::size_t>(total), Origin::kMemory);
  seq.token_ids.assign(static_cast<std::size_t>(total), -1);
  seq.patch_raw.resize(0, 0);
  long row = 0;
  for (const auto& m : memories) {
    seq.vectors.middleRows(row, m.vectors.rows()) = m.vectors;
    row += m.vectors.rows();
  }
  return seq;
}

EmbeddingSequence prepend_memory(const EmbeddingSequence& memory, const EmbeddingSequence& input,
                                 int max_context) {
  const long total = memory.length() + input.length();
  if (total > max_context) throw ContextOverflow(total, max_context);
  if (memory.length() == 0) return input;
  return concat_sequences(memory, input);
}

namespace {
using json = nlohmann::ordered_json;

json qformer_config_json(const QFormerConfig& cfg) {
  json c;
  c["k"] = cfg.k;
  c["n_layers"] = cfg.n_layers;
  c["shared"] = cfg.shared;
  c["d_model"] = cfg.d_model;
  c["n_heads"] = cfg.n_heads;
  c["d_ff"] = cfg.d_ff;
  c["source_layer"] = cfg.source_layer;
  return c;
}

QFormerConfig qformer_config_from_json(const json& c) {
  QFormerConfig cfg;
  cfg.k = c.at("k").get<int>();
  cfg.n_layers = c.at("n_layers").get<int>();
  cfg.shared = c.at("shared").get<bool>();
  cfg.d_model = c.at("d_model").get<int>();
  cfg.n_heads = c.at("n_heads").get<int>();
  cfg.d_ff = c.at("d_ff").get<int>();
  cfg.source_layer = c.at("source_layer").get<int>();
  return cfg;
}

}  // namespace

void write_qformer(std::ostream& os, const QFormer& model) {
  json manifest;
  manifest["kind"] = "qformer";
  manifest["seed"] = model.init_seed;
  manifest["config"] = qformer_config_json(model.config);
  std::vector<NamedTensor> tensors;
  model.visit_params(ConstParamVisitor(
      [&](const ParamGroup& g) { tensors.push_back({g.name, g.value}); }));
  write_json_block(os, manifest.dump());
  write_tensor_container(os, tensors);
}

QFormer read_qformer(std::istream& is) {
  const json manifest = json::parse(read_json_block(is));
  if (manifest.at("kind").get<std::string>() != "qformer")
    throw std::runtime_error("read_qformer: wrong checkpoint kind");
  QFormer model = QFormer::init(qformer_config_from_json(manifest.at("config")),
                                manifest.at("seed").get<std::uint64_t>());
  auto tensors = read_tensor_container(is);
  std::size_t idx = 0;
  model.visit_params([&](ParamGroup& g) {
    if (idx >= tensors.size() || tensors[idx].name != g.name)
      throw std::runtime_error("read_qformer: tensor order mismatch at '" + g.name + "'");
    g.value = tensors[idx].value;
    ++idx;
  });
  return model;
}

void save_qformer(const std::string& path, const QFormer& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_qformer: cannot open '" + path + "'");
  write_qformer(os, model);
  if (!os) throw std::runtime_error("save_qformer: write failed for '" + path + "'");
}

QFormer load_qformer(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_qformer: cannot open '" + path + "'");
  return read_qformer(is);
}

void save_memory_bank(const std::string& path, const std::vector<MemoryVectors>& bank) {
  json index;
  index["kind"] = "memory_bank";
  json items = json::array();
  std::vector<NamedTensor> tensors;
  for (const auto& m : bank) {
    items.push_back({{"id", m.source_item_id},
                     {"k", m.vectors.rows()},
                     {"d_model", m.vectors.cols()}});
    tensors.push_back({"m" + std::to_string(m.source_item_id), m.vectors});
  }
  index["items"] = items;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_memory_bank: cannot open '" + path + "'");
  write_json_block(os, index.dump());
  write_tensor_container(os, tensors);
}

std::vector<MemoryVectors> load_memory_bank(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_memory_bank: cannot open '" + path + "'");
  const json index = json::parse(read_json_block(is));
  if (index.at("kind").get<std::string>() != "memory_bank")
    throw std::runtime_error("load_memory_bank: wrong file kind");
  auto tensors = read_tensor_container(is);
  std::vector<MemoryVectors> bank;
  bank.reserve(tensors.size());
  std::size_t idx = 0;
  for (const auto& item : index.at("items")) {
    MemoryVectors m;
    m.source_item_id = item.at("id").get<std::int64_t>();
    m.vectors = tensors.at(idx++).value;
    bank.push_back(std::move(m));
  }
  return bank;
}

}  // namespace comem
