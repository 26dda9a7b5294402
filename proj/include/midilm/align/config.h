#pragma once

// Model and optimizer settings for the music-to-text alignment trainer.

#include <array>
#include <cstdint>
#include <string>

#include "midilm/error.h"

namespace midilm::align {

enum class AlignErrc {
  InvalidConfig,
  EmptySequence,
  FieldOutOfRange,
  ShapeMismatch,
  SequenceTooLong,
  EmptyMask,
  StepOutOfRange,
  NonFiniteGradient,
  BadWeights,
  EmptyDataset,
  WrongStage,
};
using AlignError = KindedError<AlignErrc>;

struct AlignConfig {
  int encoder_dim = 64;  // M
  int lm_dim = 128;      // T
  int lm_layers = 2;
  int lm_heads = 4;
  int vocab_size = 512;
  int prefix_count = 1;  // k music tokens per clip
  int max_seq = 96;
  int lora_rank = 8;
  double lora_alpha = 16.0;
  /// Vocabulary size of each token field (bar, position, instrument, pitch,
  /// duration, velocity, tempo, time signature).
  std::array<int, 8> field_sizes{256, 128, 129, 128, 128, 32, 49, 254};
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const AlignConfig&) const = default;
};

enum class Stage { Alignment, InstructionTuning };

struct TrainConfig {
  double max_lr = 5e-4;
  double warmup_ratio = 0.03;
  int batch_size = 16;
  int epochs = 1;
  /// 0 means epochs * ceil(dataset size / batch_size).
  int total_steps = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  Stage stage = Stage::Alignment;
  std::uint64_t seed = 0;

  void validate() const;
  /// Copy with total_steps filled in for a dataset of `n` examples.
  TrainConfig resolved(std::size_t n) const;
  bool operator==(const TrainConfig&) const = default;
};

const char* stage_name(Stage stage);
Stage parse_stage(const std::string& text);

}  // namespace midilm::align
