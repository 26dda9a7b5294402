#include <algorithm>
#include <cmath>

#include "midilm/align/engine.h"
#include "midilm/align/train.h"

namespace midilm::align {

namespace {

struct Coordinate {
  std::string block;
  Eigen::Index index = 0;  // column-major linear index
};

/// One perturbed copy of the trainable state.
struct Variant {
  Projection projection;
  LoraSet lora;
  std::vector<Mat> prefixes;
};

Mat* locate(Variant& v, const std::string& block) {
  if (block == "proj.W") return &v.projection.W;
  if (block == "proj.b") return &v.projection.b;
  // lora.layer<l>.<q|v>.<A|B>
  const auto l = static_cast<std::size_t>(std::stoul(block.substr(10)));
  const bool is_v = block[block.size() - 3] == 'v';
  LoraAdapter& a = v.lora.adapters[2 * l + (is_v ? 1 : 0)];
  return block.back() == 'A' ? &a.A : &a.B;
}

}  // namespace

GradCheckResult grad_check(const AlignModel& model, const std::vector<TrainExample>& batch, Stage stage,
                           const GradCheckOptions& opts) {
  GradCheckResult result;
  result.analytic = trainable_gradients(model, batch, stage);

  std::vector<Coordinate> coords;
  for (const auto& [name, g] : result.analytic) {
    for (Eigen::Index i = 0; i < g.size(); ++i) coords.push_back({name, i});
  }
  const LoraSet* base_lora = stage == Stage::InstructionTuning ? &model.lora : nullptr;
  const std::size_t chunk = std::max<std::size_t>(1, opts.chunk);

  std::vector<Variant> variants(2 * chunk);
  for (std::size_t start = 0; start < coords.size(); start += chunk) {
    const std::size_t count = std::min(chunk, coords.size() - start);
    std::vector<SeqView> views;
    for (std::size_t c = 0; c < count; ++c) {
      const Coordinate& co = coords[start + c];
      for (int sign = 0; sign < 2; ++sign) {
        Variant& v = variants[2 * c + static_cast<std::size_t>(sign)];
        v.projection = model.projection;
        if (base_lora != nullptr && co.block.rfind("lora.", 0) == 0) v.lora = *base_lora;
        Mat* target = locate(v, co.block);
        target->data()[co.index] += sign == 0 ? opts.epsilon : -opts.epsilon;
        v.prefixes.clear();
        for (const auto& ex : batch) v.prefixes.push_back(project(ex.pooled, v.projection));
      }
    }
    for (std::size_t vi = 0; vi < 2 * count; ++vi) {
      Variant& v = variants[vi];
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const bool lora_perturbed = coords[start + vi / 2].block.rfind("lora.", 0) == 0;
        const LoraSet* lora = base_lora == nullptr ? nullptr : (lora_perturbed ? &v.lora : base_lora);
        views.push_back(SeqView{&v.prefixes[i], &batch[i].ids, &batch[i].mask, lora});
      }
    }
    BatchEngine engine(model.lm);
    engine.forward(views, false);
    const auto& losses = engine.sequence_losses();
    for (std::size_t c = 0; c < count; ++c) {
      double plus = 0.0;
      double minus = 0.0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        plus += losses[(2 * c) * batch.size() + i];
        minus += losses[(2 * c + 1) * batch.size() + i];
      }
      plus /= static_cast<double>(batch.size());
      minus /= static_cast<double>(batch.size());
      const double numeric = (plus - minus) / (2.0 * opts.epsilon);
      const Coordinate& co = coords[start + c];
      const double analytic = result.analytic.at(co.block).data()[co.index];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      double& block_max = result.block_max_rel_error[co.block];
      block_max = std::max(block_max, rel);
      if (result.checked == 0 || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_block = co.block;
        result.worst_index = co.index;
      }
      ++result.checked;
    }
  }
  return result;
}

}  // namespace midilm::align
