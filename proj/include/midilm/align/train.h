#pragma once

// Two-stage training (projection only, then projection plus LoRA), the
// learning-rate schedule, AdamW, greedy decoding and gradient checking.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "midilm/align/model.h"

namespace midilm::align {

/// One supervised sequence: [BOS question SEP answer EOS] with the answer
/// and EOS positions masked in.
struct TrainExample {
  std::string id;
  Vec pooled;  // mean-pooled encoder output of the clip
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  /// Language-model pretraining only: text whose mean token embedding fills
  /// the prefix rows (split into k consecutive chunks). Empty means zero rows.
  std::vector<int> context_ids;
};

int warmup_steps(const TrainConfig& cfg);

/// Linear warmup to max_lr, then cosine decay to 0 at total_steps.
double lr_schedule(int step, const TrainConfig& cfg);

struct AdamState {
  std::map<std::string, Mat> m;
  std::map<std::string, Mat> v;
  long step = 0;
};

/// Decoupled weight decay, bias-corrected moments. Every parameter needs a
/// gradient of the same shape; nothing is modified when any entry is
/// non-finite.
void adamw_step(const std::vector<ParamRef>& params, const std::map<std::string, Mat>& grads, AdamState& state,
                double lr, const TrainConfig& cfg);

struct LossPoint {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;  // batch loss before the update of this step
};

struct TrainResult {
  std::vector<LossPoint> curve;
};

using LossSink = std::function<void(const LossPoint&)>;

/// Updates only the projection. cfg.stage must be Alignment.
TrainResult train_stage1(AlignModel& model, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                         const LossSink& sink = {});

/// Attaches LoRA if needed and updates projection and adapters. cfg.stage
/// must be InstructionTuning.
TrainResult train_stage2(AlignModel& model, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                         const LossSink& sink = {});

/// Full-parameter language-model training on the text of `data`, producing
/// the frozen LM of both stages. Prefix rows hold the mean token embedding of
/// each example's context_ids, so the LM learns to read the prefix slot as
/// text-embedding-space input.
TrainResult pretrain_lm(AlignModel& model, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                        const LossSink& sink = {});

/// Mean per-example loss of the current model (adapters included when attached).
double dataset_loss(const AlignModel& model, const std::vector<TrainExample>& data, std::size_t batch = 32);

/// Argmax decoding after [prefix; prompt]; ties go to the lowest id. Stops at
/// eos_id (not returned), after max_new tokens, or when max_seq is reached.
std::vector<int> greedy_decode(const Mat& prefix, const std::vector<int>& prompt_ids, const TinyLm& lm,
                               const LoraSet* adapters, int max_new, int eos_id);

/// Gradients of the mean batch loss for the parameters trained in `stage`
/// (projection; plus LoRA A/B in stage 2). Frozen blocks are absent.
std::map<std::string, Mat> trainable_gradients(const AlignModel& model, const std::vector<TrainExample>& batch,
                                               Stage stage);

struct GradCheckOptions {
  double epsilon = 1e-4;
  /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Parameters perturbed per stacked forward pass.
  std::size_t chunk = 32;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_block;
  Eigen::Index worst_index = 0;
  std::size_t checked = 0;
  std::map<std::string, double> block_max_rel_error;
  std::map<std::string, Mat> analytic;
};

/// Compares trainable_gradients against central differences of the loss for
/// every trainable parameter.
GradCheckResult grad_check(const AlignModel& model, const std::vector<TrainExample>& batch, Stage stage,
                           const GradCheckOptions& opts = {});

/// Singular values of (alpha / r) * B * A, largest first, min(d_out, d_in) of
/// them. Values past the rank are structurally zero.
Vec lora_singular_values(const LoraAdapter& adapter);

}  // namespace midilm::align
