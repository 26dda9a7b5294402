#pragma once

// "SMAW1" weights files and checkpoints (weights + JSON config + vocabulary).

#include <map>
#include <string>

#include "json.hpp"
#include "midilm/align/model.h"
#include "midilm/align/vocab.h"

namespace midilm::align {

/// Magic "SMAW1", then per block: u32 name length, name bytes, u32 rank,
/// rank u32 dims, row-major f32 values; all little-endian. n x 1 blocks are
/// written with rank 1.
std::string serialize_weights(const std::vector<ConstParamRef>& params);
std::map<std::string, Mat> parse_weights(const std::string& bytes);

/// Copies matching blocks into the model (attaching adapters when the file
/// has them). Unknown names and shape mismatches are errors.
void apply_weights(AlignModel& model, const std::map<std::string, Mat>& blocks);

void to_json(nlohmann::json& j, const AlignConfig& c);
void from_json(const nlohmann::json& j, AlignConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct Checkpoint {
  AlignModel model;
  TextVocab vocab;
};

/// Writes <dir>/weights.smaw, <dir>/config.json and <dir>/vocab.json.
void save_checkpoint(const std::string& dir, const AlignModel& model, const TextVocab& vocab);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace midilm::align
