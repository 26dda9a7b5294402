#pragma once

// The midilm command-line tool: pipeline configuration and subcommands.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "midilm/align/config.h"
#include "midilm/error.h"
#include "midilm/llm.h"
#include "midilm/octuple.h"

namespace midilm::cli {

enum class CliErrc { UnknownSubcommand, ConfigParse, Usage };
using CliError = KindedError<CliErrc>;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 1;
inline constexpr int kExitInternal = 2;

struct PretrainConfig {
  int epochs = 40;
  double max_lr = 1e-3;
  std::uint64_t seed = 1;

  bool operator==(const PretrainConfig&) const = default;
};

struct PipelineConfig {
  std::string input_dir;
  std::string output_dir;
  std::string cache_dir;
  octuple::QuantConfig quant;
  align::AlignConfig align;
  align::TrainConfig train;
  PretrainConfig pretrain;
  std::uint64_t split_seed = 0;
  std::uint64_t qa_seed = 0;
  llm::EndpointConfig llm;

  /// Non-empty paths must be pairwise distinct; nested configs must be valid.
  void validate() const;
  /// Pretty-printed JSON; from_json(to_json()) reproduces every field.
  std::string to_json() const;
  /// Unknown keys and wrong types raise ConfigParse. Missing keys keep
  /// their defaults.
  static PipelineConfig from_json(const std::string& text);
  static PipelineConfig load(const std::string& path);
};

bool operator==(const octuple::QuantConfig& a, const octuple::QuantConfig& b);
bool operator==(const llm::EndpointConfig& a, const llm::EndpointConfig& b);
bool operator==(const PipelineConfig& a, const PipelineConfig& b);

/// Runs one invocation. Data goes to `out`, logs and errors to `err`.
/// Returns 0 on success, 1 on input errors, 2 on internal errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Built-in oracle checks; one line per check on `out`. True when all pass.
bool selftest(std::ostream& out);

}  // namespace midilm::cli
