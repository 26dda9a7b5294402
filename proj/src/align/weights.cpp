#include "midilm/align/weights.h"

#include <cstring>
#include <set>

#include "midilm/io.h"

namespace midilm::align {

namespace {

constexpr char kMagic[] = "SMAW1";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xFF);
}

void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Cursor {
 public:
  explicit Cursor(const std::string& s) : s_(s) {}
  bool done() const { return pos_ == s_.size(); }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw AlignError(AlignErrc::BadWeights, "weights file is truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw AlignError(AlignErrc::InvalidConfig, std::string(what) + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (known.count(k) == 0) throw AlignError(AlignErrc::InvalidConfig, std::string("unknown key '") + k + "' in " + what);
  }
}

}  // namespace

std::string serialize_weights(const std::vector<ConstParamRef>& params) {
  std::string out(kMagic, 5);
  for (const auto& [name, m] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    if (m->cols() == 1) {
      put_u32(out, 1);
      put_u32(out, static_cast<std::uint32_t>(m->rows()));
    } else {
      put_u32(out, 2);
      put_u32(out, static_cast<std::uint32_t>(m->rows()));
      put_u32(out, static_cast<std::uint32_t>(m->cols()));
    }
    for (Eigen::Index r = 0; r < m->rows(); ++r) {
      for (Eigen::Index c = 0; c < m->cols(); ++c) put_f32(out, static_cast<float>((*m)(r, c)));
    }
  }
  return out;
}

std::map<std::string, Mat> parse_weights(const std::string& bytes) {
  if (bytes.size() < 5 || bytes.compare(0, 5, kMagic) != 0) throw AlignError(AlignErrc::BadWeights, "missing SMAW1 magic");
  std::string body = bytes.substr(5);
  Cursor cur(body);
  std::map<std::string, Mat> out;
  while (!cur.done()) {
    std::uint32_t len = cur.u32();
    std::string name = cur.bytes(len);
    std::uint32_t rank = cur.u32();
    if (rank != 1 && rank != 2) throw AlignError(AlignErrc::BadWeights, name + ": unsupported rank " + std::to_string(rank));
    Eigen::Index rows = cur.u32();
    Eigen::Index cols = rank == 2 ? static_cast<Eigen::Index>(cur.u32()) : 1;
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = cur.f32();
    }
    if (!out.emplace(name, std::move(m)).second) throw AlignError(AlignErrc::BadWeights, "duplicate block " + name);
  }
  return out;
}

void apply_weights(AlignModel& model, const std::map<std::string, Mat>& blocks) {
  bool has_lora = false;
  for (const auto& [name, m] : blocks) has_lora = has_lora || name.rfind("lora.", 0) == 0;
  if (has_lora) model.attach_lora();
  std::map<std::string, Mat*> targets;
  for (auto& [name, ptr] : model.all_params()) targets[name] = ptr;
  for (const auto& [name, m] : blocks) {
    auto it = targets.find(name);
    if (it == targets.end()) throw AlignError(AlignErrc::BadWeights, "unknown block " + name);
    if (it->second->rows() != m.rows() || it->second->cols() != m.cols()) {
      throw AlignError(AlignErrc::BadWeights, name + ": shape " + std::to_string(m.rows()) + "x" +
                                                  std::to_string(m.cols()) + " does not match the model");
    }
    *it->second = m;
    if (name.rfind("encoder.", 0) == 0) model.encoder.loaded = true;
  }
}

void to_json(nlohmann::json& j, const AlignConfig& c) {
  j = nlohmann::json{{"encoder_dim", c.encoder_dim}, {"lm_dim", c.lm_dim},       {"lm_layers", c.lm_layers},
                     {"lm_heads", c.lm_heads},       {"vocab_size", c.vocab_size}, {"prefix_count", c.prefix_count},
                     {"max_seq", c.max_seq},         {"lora_rank", c.lora_rank}, {"lora_alpha", c.lora_alpha},
                     {"field_sizes", c.field_sizes}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AlignConfig& c) {
  reject_unknown(j,
                 {"encoder_dim", "lm_dim", "lm_layers", "lm_heads", "vocab_size", "prefix_count", "max_seq",
                  "lora_rank", "lora_alpha", "field_sizes", "seed"},
                 "align config");
  read_key(j, "encoder_dim", c.encoder_dim);
  read_key(j, "lm_dim", c.lm_dim);
  read_key(j, "lm_layers", c.lm_layers);
  read_key(j, "lm_heads", c.lm_heads);
  read_key(j, "vocab_size", c.vocab_size);
  read_key(j, "prefix_count", c.prefix_count);
  read_key(j, "max_seq", c.max_seq);
  read_key(j, "lora_rank", c.lora_rank);
  read_key(j, "lora_alpha", c.lora_alpha);
  read_key(j, "field_sizes", c.field_sizes);
  read_key(j, "seed", c.seed);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"max_lr", c.max_lr},
                     {"warmup_ratio", c.warmup_ratio},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"total_steps", c.total_steps},
                     {"weight_decay", c.weight_decay},
                     {"adam_betas", {c.beta1, c.beta2}},
                     {"adam_eps", c.adam_eps},
                     {"stage", stage_name(c.stage)},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"max_lr", "warmup_ratio", "batch_size", "epochs", "total_steps", "weight_decay", "adam_betas",
                  "adam_eps", "stage", "seed"},
                 "train config");
  read_key(j, "max_lr", c.max_lr);
  read_key(j, "warmup_ratio", c.warmup_ratio);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "epochs", c.epochs);
  read_key(j, "total_steps", c.total_steps);
  read_key(j, "weight_decay", c.weight_decay);
  if (j.contains("adam_betas")) {
    auto b = j.at("adam_betas").get<std::vector<double>>();
    if (b.size() != 2) throw AlignError(AlignErrc::InvalidConfig, "adam_betas needs two values");
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  read_key(j, "adam_eps", c.adam_eps);
  if (j.contains("stage")) c.stage = parse_stage(j.at("stage").get<std::string>());
  read_key(j, "seed", c.seed);
}

void save_checkpoint(const std::string& dir, const AlignModel& model, const TextVocab& vocab) {
  io::write_file_atomic(dir + "/weights.smaw", serialize_weights(model.all_params()));
  nlohmann::json cfg;
  cfg["format"] = "midilm-checkpoint-1";
  cfg["align"] = model.config;
  cfg["lora_attached"] = !model.lora.empty();
  cfg["encoder_loaded"] = model.encoder.loaded;
  io::write_file_atomic(dir + "/config.json", cfg.dump(2) + "\n");
  io::write_file_atomic(dir + "/vocab.json", vocab.to_json() + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(io::read_file(dir + "/config.json"));
  } catch (const nlohmann::json::exception& e) {
    throw AlignError(AlignErrc::BadWeights, dir + "/config.json: " + e.what());
  }
  Checkpoint ck;
  AlignConfig ac;
  try {
    ac = cfg.at("align").get<AlignConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw AlignError(AlignErrc::BadWeights, dir + "/config.json: " + e.what());
  }
  ck.model = AlignModel::create(ac);
  apply_weights(ck.model, parse_weights(io::read_file(dir + "/weights.smaw")));
  ck.model.encoder.loaded = cfg.value("encoder_loaded", false);
  ck.vocab = TextVocab::from_json(io::read_file(dir + "/vocab.json"));
  return ck;
}

}  // namespace midilm::align
