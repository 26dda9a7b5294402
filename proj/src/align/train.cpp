#include "midilm/align/train.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "midilm/align/engine.h"
#include "midilm/align/rng.h"

namespace midilm::align {

namespace {

enum class Trainable { Projection, ProjectionAndLora, BaseLm };

Vec flatten_rows(const Mat& m) {
  Vec v(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r) v.segment(r * m.cols(), m.cols()) = m.row(r).transpose();
  return v;
}

void add_projection_grads(const std::vector<Mat>& dprefix, const std::vector<const TrainExample*>& batch,
                          std::map<std::string, Mat>& grads, const Projection& proj) {
  Mat dW = Mat::Zero(proj.W.rows(), proj.W.cols());
  Mat db = Mat::Zero(proj.b.rows(), 1);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Vec dy = flatten_rows(dprefix[i]);
    dW.noalias() += dy * batch[i]->pooled.transpose();
    db.col(0) += dy;
  }
  grads["proj.W"] = std::move(dW);
  grads["proj.b"] = std::move(db);
}

struct Prepared {
  std::vector<Mat> prefixes;
  std::vector<SeqView> views;
};

/// [begin, end) of the context ids averaged into prefix row r.
std::pair<std::size_t, std::size_t> context_chunk(std::size_t n, std::size_t k, std::size_t r) {
  return {r * n / k, (r + 1) * n / k};
}

Mat context_prefix(const TinyLm& lm, const std::vector<int>& ids, std::size_t k) {
  Mat out = Mat::Zero(static_cast<Eigen::Index>(k), lm.dim());
  for (std::size_t r = 0; r < k; ++r) {
    auto [b, e] = context_chunk(ids.size(), k, r);
    for (std::size_t i = b; i < e; ++i) out.row(static_cast<Eigen::Index>(r)) += lm.tok_emb.row(ids[i]);
    if (e > b) out.row(static_cast<Eigen::Index>(r)) /= static_cast<double>(e - b);
  }
  return out;
}

Prepared prepare(const AlignModel& model, const std::vector<const TrainExample*>& batch, bool text_prefix,
                 const LoraSet* lora) {
  Prepared p;
  p.prefixes.reserve(batch.size());
  for (const auto* ex : batch) {
    if (text_prefix) {
      p.prefixes.push_back(context_prefix(model.lm, ex->context_ids, static_cast<std::size_t>(model.config.prefix_count)));
    } else {
      p.prefixes.push_back(project(ex->pooled, model.projection));
    }
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    p.views.push_back(SeqView{&p.prefixes[i], &batch[i]->ids, &batch[i]->mask, lora});
  }
  return p;
}

std::map<std::string, Mat> batch_gradients(const AlignModel& model, const std::vector<const TrainExample*>& batch,
                                           Trainable which, double* loss_out) {
  const bool use_lora = which == Trainable::ProjectionAndLora;
  const LoraSet* lora = model.lora.empty() ? nullptr : &model.lora;
  Prepared prep = prepare(model, batch, which == Trainable::BaseLm, which == Trainable::BaseLm ? nullptr : lora);
  BatchEngine engine(model.lm);
  double loss = engine.forward(prep.views, true);
  if (loss_out != nullptr) *loss_out = loss;
  BackwardRequest req;
  req.prefix = true;
  req.lora = use_lora;
  req.base = which == Trainable::BaseLm;
  BatchGrads g = engine.backward(req);
  std::map<std::string, Mat> out = std::move(g.blocks);
  if (which != Trainable::BaseLm) {
    add_projection_grads(g.prefix, batch, out, model.projection);
    return out;
  }
  // The context prefix is a mean of token embeddings.
  Mat& te = out.at("lm.tok_emb");
  const auto k = static_cast<std::size_t>(model.config.prefix_count);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ids = batch[i]->context_ids;
    for (std::size_t r = 0; r < k; ++r) {
      auto [b, e] = context_chunk(ids.size(), k, r);
      for (std::size_t j = b; j < e; ++j) {
        te.row(ids[j]) += g.prefix[i].row(static_cast<Eigen::Index>(r)) / static_cast<double>(e - b);
      }
    }
  }
  return out;
}

std::vector<ParamRef> trainable_params(AlignModel& model, Trainable which) {
  switch (which) {
    case Trainable::Projection:
      return model.projection_params();
    case Trainable::ProjectionAndLora: {
      auto p = model.projection_params();
      auto l = model.lora_params();
      p.insert(p.end(), l.begin(), l.end());
      return p;
    }
    case Trainable::BaseLm:
      return model.lm_params();
  }
  return {};
}

TrainResult run_training(AlignModel& model, const std::vector<TrainExample>& data, const TrainConfig& cfg_in,
                         Trainable which, const LossSink& sink) {
  if (data.empty()) throw AlignError(AlignErrc::EmptyDataset, "training set is empty");
  const TrainConfig cfg = cfg_in.resolved(data.size());
  auto params = trainable_params(model, which);
  AdamState state;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch_size = static_cast<std::size_t>(cfg.batch_size);
  std::size_t cursor = data.size();
  TrainResult result;
  for (int step = 1; step <= cfg.total_steps; ++step) {
    if (cursor >= data.size()) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      cursor = 0;
    }
    std::vector<const TrainExample*> batch;
    for (std::size_t i = cursor; i < std::min(cursor + batch_size, data.size()); ++i) batch.push_back(&data[order[i]]);
    cursor += batch.size();
    double loss = 0.0;
    auto grads = batch_gradients(model, batch, which, &loss);
    const double lr = lr_schedule(step, cfg);
    adamw_step(params, grads, state, lr, cfg);
    LossPoint point{step, lr, loss};
    result.curve.push_back(point);
    if (sink) sink(point);
  }
  return result;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw AlignError(AlignErrc::InvalidConfig, what); };
  if (!(max_lr > 0.0)) fail("max_lr must be positive");
  if (!(warmup_ratio > 0.0 && warmup_ratio < 1.0)) fail("warmup_ratio must be in (0, 1)");
  if (batch_size <= 0) fail("batch_size must be positive");
  if (epochs <= 0 && total_steps <= 0) fail("epochs must be positive");
  if (total_steps < 0) fail("total_steps must not be negative");
  if (weight_decay < 0.0) fail("weight_decay must not be negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
}

TrainConfig TrainConfig::resolved(std::size_t n) const {
  validate();
  TrainConfig c = *this;
  if (c.total_steps == 0) {
    const std::size_t per_epoch = (n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
    c.total_steps = static_cast<int>(per_epoch) * epochs;
  }
  return c;
}

const char* stage_name(Stage stage) { return stage == Stage::Alignment ? "alignment" : "instruction-tuning"; }

Stage parse_stage(const std::string& text) {
  if (text == "1" || text == "alignment") return Stage::Alignment;
  if (text == "2" || text == "instruction-tuning") return Stage::InstructionTuning;
  throw AlignError(AlignErrc::InvalidConfig, "unknown stage '" + text + "' (expected 1 or 2)");
}

int warmup_steps(const TrainConfig& cfg) {
  const double x = cfg.warmup_ratio * static_cast<double>(cfg.total_steps);
  const double nearest = std::round(x);
  // Products such as 0.03 * 100 land a hair above the integer they denote.
  if (std::abs(x - nearest) <= 1e-9 * std::max(1.0, x)) return static_cast<int>(nearest);
  return static_cast<int>(std::ceil(x));
}

double lr_schedule(int step, const TrainConfig& cfg) {
  if (cfg.total_steps <= 0) throw AlignError(AlignErrc::StepOutOfRange, "total_steps is not set");
  if (step < 0 || step > cfg.total_steps) {
    throw AlignError(AlignErrc::StepOutOfRange,
                     "step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  }
  const int w = warmup_steps(cfg);
  if (step <= w) return cfg.max_lr * (static_cast<double>(step) / static_cast<double>(w));
  const double progress = static_cast<double>(step - w) / static_cast<double>(cfg.total_steps - w);
  return cfg.max_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void adamw_step(const std::vector<ParamRef>& params, const std::map<std::string, Mat>& grads, AdamState& state,
                double lr, const TrainConfig& cfg) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw AlignError(AlignErrc::ShapeMismatch, "no gradient for " + name);
    if (it->second.rows() != p->rows() || it->second.cols() != p->cols()) {
      throw AlignError(AlignErrc::ShapeMismatch, "gradient shape mismatch for " + name);
    }
    if (!it->second.allFinite()) throw AlignError(AlignErrc::NonFiniteGradient, "non-finite gradient in " + name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, p] : params) {
    const Mat& g = grads.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, Mat::Zero(p->rows(), p->cols()));
    auto [vit, v_new] = state.v.try_emplace(name, Mat::Zero(p->rows(), p->cols()));
    Mat& m = mit->second;
    Mat& v = vit->second;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    Mat update = ((m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps)).matrix();
    *p -= lr * (update + cfg.weight_decay * *p);
  }
}

TrainResult train_stage1(AlignModel& model, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                         const LossSink& sink) {
  if (cfg.stage != Stage::Alignment) throw AlignError(AlignErrc::WrongStage, "stage 1 needs stage = alignment");
  return run_training(model, data, cfg, Trainable::Projection, sink);
}

TrainResult train_stage2(AlignModel& model, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                         const LossSink& sink) {
  if (cfg.stage != Stage::InstructionTuning) {
    throw AlignError(AlignErrc::WrongStage, "stage 2 needs stage = instruction-tuning");
  }
  model.attach_lora();
  return run_training(model, data, cfg, Trainable::ProjectionAndLora, sink);
}

TrainResult pretrain_lm(AlignModel& model, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                        const LossSink& sink) {
  return run_training(model, data, cfg, Trainable::BaseLm, sink);
}

double dataset_loss(const AlignModel& model, const std::vector<TrainExample>& data, std::size_t batch) {
  if (data.empty()) throw AlignError(AlignErrc::EmptyDataset, "dataset is empty");
  const LoraSet* lora = model.lora.empty() ? nullptr : &model.lora;
  double total = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<const TrainExample*> chunk;
    for (std::size_t i = start; i < std::min(start + batch, data.size()); ++i) chunk.push_back(&data[i]);
    Prepared prep = prepare(model, chunk, false, lora);
    BatchEngine engine(model.lm);
    engine.forward(prep.views, false);
    for (double l : engine.sequence_losses()) total += l;
  }
  return total / static_cast<double>(data.size());
}

std::vector<int> greedy_decode(const Mat& prefix, const std::vector<int>& prompt_ids, const TinyLm& lm,
                               const LoraSet* adapters, int max_new, int eos_id) {
  if (prefix.rows() + static_cast<Eigen::Index>(prompt_ids.size()) > lm.max_seq()) {
    throw AlignError(AlignErrc::SequenceTooLong, "prompt does not fit in max_seq");
  }
  std::vector<int> ids = prompt_ids;
  std::vector<int> out;
  BatchEngine engine(lm);
  for (int i = 0; i < max_new; ++i) {
    if (prefix.rows() + static_cast<Eigen::Index>(ids.size()) >= lm.max_seq()) break;
    Mat logits = engine.logits(SeqView{&prefix, &ids, nullptr, adapters});
    const Eigen::Index last = logits.rows() - 1;
    int best = 0;
    for (Eigen::Index j = 1; j < logits.cols(); ++j) {
      if (logits(last, j) > logits(last, best)) best = static_cast<int>(j);
    }
    if (best == eos_id) break;
    out.push_back(best);
    ids.push_back(best);
  }
  return out;
}

std::map<std::string, Mat> trainable_gradients(const AlignModel& model, const std::vector<TrainExample>& batch,
                                               Stage stage) {
  if (batch.empty()) throw AlignError(AlignErrc::EmptyDataset, "empty batch");
  if (stage == Stage::InstructionTuning && model.lora.empty()) {
    throw AlignError(AlignErrc::WrongStage, "stage 2 gradients need attached adapters");
  }
  std::vector<const TrainExample*> ptrs;
  for (const auto& ex : batch) ptrs.push_back(&ex);
  return batch_gradients(model, ptrs,
                         stage == Stage::Alignment ? Trainable::Projection : Trainable::ProjectionAndLora, nullptr);
}

Vec lora_singular_values(const LoraAdapter& a) {
  const Eigen::Index n = std::min(a.B.rows(), a.A.cols());
  const Eigen::Index r = a.A.rows();
  Eigen::HouseholderQR<Mat> qb(a.B);
  Eigen::HouseholderQR<Mat> qa(a.A.transpose());
  Mat rb = qb.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  Mat ra = qa.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  Mat core = a.scale() * rb * ra.transpose();
  Eigen::JacobiSVD<Mat> svd(core);
  Vec out = Vec::Zero(n);
  out.head(std::min(n, r)) = svd.singularValues().head(std::min(n, r));
  return out;
}

}  // namespace midilm::align
