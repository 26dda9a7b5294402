#pragma once

// Annotation and instruction-tuning data pipeline: LLM prompt construction
// and response parsing with the "Not Enough Information" sentinel, template
// Q&A and caption generation, and piece-level train/test assembly.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "midilm/error.h"
#include "midilm/features.h"
#include "midilm/segment.h"

namespace midilm::annotate {

enum class AnnotateErrc { MalformedResponse, NoContent, IdMismatch, InvalidInput };
using AnnotateError = KindedError<AnnotateErrc>;

inline constexpr const char* kSentinel = "Not Enough Information";
inline constexpr std::array<const char*, 5> kTagFields = {"genre", "style", "background", "expressive_intent",
                                                          "perceived_emotion"};
/// Bumped whenever prompt, question, answer or caption wording changes.
inline constexpr const char* kTemplateVersion = "midilm-templates-1";
inline constexpr const char* kCaptionQuestion = "Describe this music.";

enum class TagSource { Genre, Style, Background, ExpressiveIntent, PerceivedEmotion, Tempo, Key, TimeSignature };
enum class Grounding { Piece, Clip };

const char* tag_source_name(TagSource s);
TagSource parse_tag_source(const std::string& name);
const char* grounding_name(Grounding g);
Grounding parse_grounding(const std::string& name);

struct AnnotationRecord {
  std::string piece_id;
  std::string genre = kSentinel;
  std::string style = kSentinel;
  std::string background = kSentinel;
  std::string expressive_intent = kSentinel;
  std::string perceived_emotion = kSentinel;
  std::optional<features::FeatureSummary> features;
  std::string source_digest;

  /// At least one of the five tag fields is not the sentinel.
  bool valid_tagged() const;
  /// Tag text for one of the five annotation sources.
  const std::string& tag(TagSource source) const;
  std::string& tag(TagSource source);

  std::string to_json() const;
  static AnnotationRecord from_json(const std::string& line);
};

struct QaPair {
  std::string clip_id;
  std::string question;
  std::string answer;
  TagSource tag_source = TagSource::Genre;
  Grounding grounding = Grounding::Piece;

  std::string to_json() const;
  static QaPair from_json(const std::string& line);
};

struct LlmRequest {
  std::string prompt;
  double temperature = 0.0;
  int max_tokens = 512;
};

/// Prompt asking for the five fields as one JSON object, with the sentinel
/// for anything the source does not support. The source is quoted verbatim.
LlmRequest build_annotation_prompt(const std::string& title, const std::string& composer,
                                   const std::string& source_text);

/// Parses the first balanced {...} span of the response. Missing, empty or
/// non-string values become the sentinel; values are whitespace-trimmed.
AnnotationRecord parse_annotation_response(const std::string& text, const std::string& piece_id,
                                           const std::optional<features::FeatureSummary>& features,
                                           const std::string& source_digest = {});

/// Lowercase hex SHA-256.
std::string sha256_hex(const std::string& data);

/// Digest identifying one annotation request's inputs.
std::string source_digest(const std::string& title, const std::string& composer, const std::string& source_text);

/// One pair per clip for every non-sentinel tag and, when features are
/// known, for tempo, key and time signature. Question wording is one of
/// several paraphrases chosen by a seeded hash of (clip id, field).
/// clip_features, when given, grounds the feature answers in the clip.
std::vector<QaPair> gen_qa(const AnnotationRecord& record, const std::vector<std::string>& clip_ids,
                           std::uint64_t seed = 0,
                           const std::map<std::string, features::FeatureSummary>* clip_features = nullptr);

/// Number of question paraphrases available for a field.
std::size_t question_template_count(TagSource source);

/// One paragraph with every non-sentinel tag value and the features.
std::string gen_caption_target(const AnnotationRecord& record);

struct DatasetEntry {
  std::string clip_id;
  std::string piece_id;
  std::string task;  // "qa" or "caption"
  std::string question;
  std::string answer;
  std::optional<TagSource> tag_source;  // absent for captions
  Grounding grounding = Grounding::Piece;

  std::string to_json() const;
  static DatasetEntry from_json(const std::string& line);
};

struct Dataset {
  std::vector<DatasetEntry> train;
  std::vector<DatasetEntry> test;
  std::vector<std::string> train_pieces;
  std::vector<std::string> test_pieces;
  std::uint64_t split_seed = 0;

  std::string manifest_json() const;
};

/// Piece-level split: pieces are shuffled with split_seed and
/// round(0.1 * pieces) of them form the test split. Entries are ordered by
/// piece id, clip index, then caption before Q&A in input order.
Dataset assemble_dataset(const std::vector<AnnotationRecord>& records, const std::vector<segment::Clip>& clips,
                         const std::vector<QaPair>& qa, std::uint64_t split_seed);

/// Writes train.jsonl, test.jsonl and manifest.json into `dir`.
void write_dataset(const Dataset& dataset, const std::string& dir);

}  // namespace midilm::annotate
