#pragma once

// MIDI to ABC notation (text-only baseline representation) with an explicit
// report of what the conversion had to change.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "midilm/error.h"
#include "midilm/features.h"
#include "midilm/midi.h"

namespace midilm::abc {

enum class AbcErrc { EmptyPiece };
using AbcError = KindedError<AbcErrc>;

struct LossReport {
  std::size_t quantized_notes = 0;          // onset or offset moved onto the 1/32 grid
  std::size_t dropped_tempo_changes = 0;    // only one Q: field is written
  std::size_t dropped_timesig_changes = 0;  // only one M: field is written

  bool is_zero() const { return quantized_notes == 0 && dropped_tempo_changes == 0 && dropped_timesig_changes == 0; }
};

struct AbcVoice {
  std::string id;
  std::string body;
};

struct AbcDocument {
  /// (field letter, value) in the order X, T, M, L, Q, K.
  std::vector<std::pair<char, std::string>> header;
  std::vector<AbcVoice> voices;
  LossReport loss_report;

  /// UTF-8, LF line endings; "V:<id>" precedes each voice body.
  std::string render() const;
};

struct Violation {
  int line = 0;    // 1-based, in the rendered text
  int column = 0;  // 1-based
  std::string message;
};

/// One voice per track with notes; unit length 1/8; durations on the 1/32
/// grid; overlapping notes sliced into chords joined by ties; spelling
/// follows the key signature (key_hint or the estimated key).
AbcDocument to_abc(const midi::MidiPiece& piece, std::optional<features::Key> key_hint = std::nullopt);

std::vector<Violation> validate_abc(const AbcDocument& doc);
std::vector<Violation> validate_abc_text(const std::string& text);

/// ABC K: value for a key ("C", "Am", "F#m", "Bb").
std::string key_field(const features::Key& key);

}  // namespace midilm::abc
