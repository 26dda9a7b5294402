#include "midilm/align/model.h"

#include <cmath>
#include <cstring>

#include "midilm/align/engine.h"
#include "midilm/align/rng.h"

namespace midilm::align {

namespace {

Mat normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = stddev * rng.normal();
  }
  return m;
}

Mat uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(-bound, bound);
  }
  return m;
}

std::string layer_name(std::size_t l, const char* part) { return "lm.layer" + std::to_string(l) + "." + part; }

}  // namespace

void AlignConfig::validate() const {
  auto fail = [](const std::string& what) { throw AlignError(AlignErrc::InvalidConfig, what); };
  if (encoder_dim <= 0 || lm_dim <= 0 || lm_layers <= 0 || lm_heads <= 0 || vocab_size <= 0 || prefix_count <= 0 ||
      max_seq <= 0 || lora_rank <= 0) {
    fail("all model dimensions must be positive");
  }
  if (lm_dim % lm_heads != 0) fail("lm_dim must be divisible by lm_heads");
  if (!(lora_alpha > 0.0)) fail("lora_alpha must be positive");
  if (prefix_count >= max_seq) fail("prefix_count must be below max_seq");
  if (lora_rank > lm_dim) fail("lora_rank must not exceed lm_dim");
  for (int s : field_sizes) {
    if (s <= 0) fail("field sizes must be positive");
  }
}

void StubEncoder::init(const AlignConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const double sd = 1.0 / std::sqrt(8.0);
  for (std::size_t f = 0; f < 8; ++f) tables[f] = normal_matrix(rng, cfg.field_sizes[f], cfg.encoder_dim, sd);
  loaded = false;
}

void Projection::init(const AlignConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.encoder_dim));
  W = uniform_matrix(rng, cfg.prefix_count * cfg.lm_dim, cfg.encoder_dim, bound);
  b = uniform_matrix(rng, cfg.prefix_count * cfg.lm_dim, 1, bound);
  prefix_count = cfg.prefix_count;
}

void TinyLm::init(const AlignConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const int T = cfg.lm_dim;
  const double sd = 0.02;
  const double sd_out = sd / std::sqrt(2.0 * cfg.lm_layers);
  tok_emb = normal_matrix(rng, cfg.vocab_size, T, sd);
  pos_emb = normal_matrix(rng, cfg.max_seq, T, sd);
  layers.assign(static_cast<std::size_t>(cfg.lm_layers), LmLayer{});
  for (auto& L : layers) {
    L.ln1_g = Mat::Ones(T, 1);
    L.ln1_b = Mat::Zero(T, 1);
    L.wq = normal_matrix(rng, T, T, sd);
    L.wk = normal_matrix(rng, T, T, sd);
    L.wv = normal_matrix(rng, T, T, sd);
    L.wo = normal_matrix(rng, T, T, sd_out);
    L.ln2_g = Mat::Ones(T, 1);
    L.ln2_b = Mat::Zero(T, 1);
    L.w1 = normal_matrix(rng, 4 * T, T, sd);
    L.b1 = Mat::Zero(4 * T, 1);
    L.w2 = normal_matrix(rng, T, 4 * T, sd_out);
    L.b2 = Mat::Zero(T, 1);
  }
  lnf_g = Mat::Ones(T, 1);
  lnf_b = Mat::Zero(T, 1);
  head = normal_matrix(rng, cfg.vocab_size, T, sd);
  heads = cfg.lm_heads;
}

void LoraSet::init(const AlignConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const int T = cfg.lm_dim;
  const double bound = 1.0 / std::sqrt(static_cast<double>(T));
  adapters.clear();
  for (int l = 0; l < cfg.lm_layers; ++l) {
    for (const char* target : {"wq", "wv"}) {
      LoraAdapter a;
      a.rank = cfg.lora_rank;
      a.alpha = cfg.lora_alpha;
      a.A = uniform_matrix(rng, cfg.lora_rank, T, bound);
      a.B = Mat::Zero(T, cfg.lora_rank);
      a.target = layer_name(static_cast<std::size_t>(l), target);
      adapters.push_back(std::move(a));
    }
  }
}

AlignModel AlignModel::create(const AlignConfig& cfg) {
  cfg.validate();
  AlignModel m;
  m.config = cfg;
  m.encoder.init(cfg, mix_seed(cfg.seed, 1));
  m.projection.init(cfg, mix_seed(cfg.seed, 2));
  m.lm.init(cfg, mix_seed(cfg.seed, 3));
  return m;
}

void AlignModel::attach_lora() {
  if (lora.empty()) lora.init(config, mix_seed(config.seed, 4));
}

std::vector<ParamRef> AlignModel::encoder_params() {
  std::vector<ParamRef> out;
  for (std::size_t f = 0; f < 8; ++f) out.emplace_back(std::string("encoder.") + octuple::kFieldNames[f], &encoder.tables[f]);
  return out;
}

std::vector<ParamRef> AlignModel::projection_params() { return {{"proj.W", &projection.W}, {"proj.b", &projection.b}}; }

std::vector<ParamRef> AlignModel::lm_params() {
  std::vector<ParamRef> out{{"lm.tok_emb", &lm.tok_emb}, {"lm.pos_emb", &lm.pos_emb}};
  for (std::size_t l = 0; l < lm.layers.size(); ++l) {
    LmLayer& L = lm.layers[l];
    std::pair<const char*, Mat*> parts[] = {{"ln1_g", &L.ln1_g}, {"ln1_b", &L.ln1_b}, {"wq", &L.wq},  {"wk", &L.wk},
                                            {"wv", &L.wv},       {"wo", &L.wo},       {"ln2_g", &L.ln2_g},
                                            {"ln2_b", &L.ln2_b}, {"w1", &L.w1},       {"b1", &L.b1},
                                            {"w2", &L.w2},       {"b2", &L.b2}};
    for (auto& [name, ptr] : parts) out.emplace_back(layer_name(l, name), ptr);
  }
  out.emplace_back("lm.lnf_g", &lm.lnf_g);
  out.emplace_back("lm.lnf_b", &lm.lnf_b);
  out.emplace_back("lm.head", &lm.head);
  return out;
}

std::vector<ParamRef> AlignModel::lora_params() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < lora.adapters.size(); ++i) {
    std::string base = "lora.layer" + std::to_string(i / 2) + (i % 2 == 0 ? ".q." : ".v.");
    out.emplace_back(base + "A", &lora.adapters[i].A);
    out.emplace_back(base + "B", &lora.adapters[i].B);
  }
  return out;
}

std::vector<ParamRef> AlignModel::all_params() {
  std::vector<ParamRef> out = encoder_params();
  for (auto&& more : {projection_params(), lm_params(), lora_params()}) out.insert(out.end(), more.begin(), more.end());
  return out;
}

std::vector<ConstParamRef> AlignModel::all_params() const {
  std::vector<ConstParamRef> out;
  for (auto& [name, ptr] : const_cast<AlignModel*>(this)->all_params()) out.emplace_back(name, ptr);
  return out;
}

Mat encode(const std::vector<octuple::OctupleToken>& tokens, const StubEncoder& enc) {
  if (tokens.empty()) throw AlignError(AlignErrc::EmptySequence, "cannot encode an empty token list");
  Mat h = Mat::Zero(static_cast<Eigen::Index>(tokens.size()), enc.dim());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto fields = tokens[i].fields();
    for (std::size_t f = 0; f < 8; ++f) {
      if (fields[f] < 0 || fields[f] >= enc.tables[f].rows()) {
        throw AlignError(AlignErrc::FieldOutOfRange, std::string("token ") + std::to_string(i) + " field " +
                                                         octuple::kFieldNames[f] + " = " + std::to_string(fields[f]) +
                                                         " outside the encoder table");
      }
      h.row(static_cast<Eigen::Index>(i)) += enc.tables[f].row(fields[f]);
    }
  }
  return h;
}

Vec mean_pool(const Mat& hidden) {
  if (hidden.rows() == 0) throw AlignError(AlignErrc::EmptySequence, "cannot pool zero rows");
  return hidden.colwise().mean().transpose();
}

Mat project(const Vec& pooled, const Projection& proj) {
  if (pooled.size() != proj.W.cols() || proj.b.rows() != proj.W.rows() || proj.prefix_count <= 0 ||
      proj.W.rows() % proj.prefix_count != 0) {
    throw AlignError(AlignErrc::ShapeMismatch, "pooled vector of size " + std::to_string(pooled.size()) +
                                                   " does not fit a projection with " + std::to_string(proj.W.cols()) +
                                                   " inputs");
  }
  Vec y = proj.W * pooled + proj.b.col(0);
  const Eigen::Index T = proj.W.rows() / proj.prefix_count;
  Mat out(proj.prefix_count, T);
  for (Eigen::Index r = 0; r < proj.prefix_count; ++r) out.row(r) = y.segment(r * T, T).transpose();
  return out;
}

Mat forward_lm(const Mat& prefix, const std::vector<int>& text_ids, const TinyLm& lm, const LoraSet* adapters) {
  BatchEngine engine(lm);
  SeqView view{&prefix, &text_ids, nullptr, adapters};
  return engine.logits(view);
}

Mat softmax_rows(const Mat& logits) {
  Mat p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp().matrix();
  Vec sums = p.rowwise().sum();
  return (p.array().colwise() / sums.array()).matrix();
}

double masked_cross_entropy(const Mat& logits, const std::vector<int>& text_ids,
                            const std::vector<std::uint8_t>& answer_mask) {
  if (answer_mask.size() != text_ids.size()) throw AlignError(AlignErrc::ShapeMismatch, "mask length != text length");
  const auto n = static_cast<Eigen::Index>(text_ids.size());
  const Eigen::Index k = logits.rows() - n;
  if (k < 0) throw AlignError(AlignErrc::ShapeMismatch, "fewer logits rows than text tokens");
  double total = 0.0;
  std::size_t count = 0;
  for (Eigen::Index p = 0; p < n; ++p) {
    if (answer_mask[static_cast<std::size_t>(p)] == 0) continue;
    const Eigen::Index row = k + p - 1;
    if (row < 0) throw AlignError(AlignErrc::EmptyMask, "first row has no predecessor");
    double mx = logits.row(row).maxCoeff();
    double lse = mx + std::log((logits.row(row).array() - mx).exp().sum());
    total += lse - logits(row, text_ids[static_cast<std::size_t>(p)]);
    ++count;
  }
  if (count == 0) throw AlignError(AlignErrc::EmptyMask, "answer mask selects no positions");
  return total / static_cast<double>(count);
}

std::uint64_t checksum(const std::vector<ConstParamRef>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, m] : params) {
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(m->data());
    const std::size_t n = static_cast<std::size_t>(m->size()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::uint64_t checksum(const std::vector<ParamRef>& params) {
  std::vector<ConstParamRef> c;
  for (const auto& [name, m] : params) c.emplace_back(name, m);
  return checksum(c);
}

}  // namespace midilm::align
