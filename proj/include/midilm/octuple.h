#pragma once

// OctupleMIDI tokenization: one 8-field token per note with explicit
// quantization tables.

#include <array>
#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "midilm/error.h"
#include "midilm/midi.h"

namespace midilm::octuple {

enum class OctupleErrc {
  EmptyPiece,
  UnsupportedTimeSignature,
  TokenOutOfRange,
  InvalidConfig,
  ParseError,
};

using OctupleError = KindedError<OctupleErrc>;

/// All signatures n/d with d in {1, 2, ..., 64} and 1 <= n <= 2d, ordered by
/// denominator then numerator.
std::vector<midi::TimeSignature> default_timesig_vocab();

struct QuantConfig {
  int positions_per_bar_unit = 64;  // grid = 1/64 note
  int duration_bins = 128;          // in grid units, clamped
  int velocity_bins = 32;
  int tempo_bins = 49;  // bin i <-> 16 * 2^(i/12) BPM
  int max_bars = 256;
  std::vector<midi::TimeSignature> timesig_vocab = default_timesig_vocab();
  int instrument_vocab_size = 129;  // 128 programs + drums
  /// When false every note is tokenized as program 0 (piano).
  bool keep_programs = false;

  void validate() const;
  int velocity_bin_width() const;
  /// Vocab index of `sig`, or -1.
  int timesig_index(const midi::TimeSignature& sig) const;
  /// Nearest vocab entry by bar-length ratio; ties go to the earlier entry.
  int nearest_timesig_index(const midi::TimeSignature& sig) const;
  /// Grid positions in a full bar of `sig`.
  int positions_in_bar(const midi::TimeSignature& sig) const;
};

inline constexpr double kTempoBinBaseBpm = 16.0;
inline constexpr int kDrumInstrument = 128;

int velocity_to_bin(int velocity, const QuantConfig& cfg);
int bin_to_velocity(int bin, const QuantConfig& cfg);
int bpm_to_tempo_bin(double bpm, const QuantConfig& cfg);
double tempo_bin_to_bpm(int bin);

struct OctupleToken {
  int bar = 0;
  int position = 0;
  int instrument = 0;
  int pitch = 0;
  int duration = 0;
  int velocity = 0;
  int tempo = 0;
  int timesig = 0;

  std::array<int, 8> fields() const { return {bar, position, instrument, pitch, duration, velocity, tempo, timesig}; }
  static OctupleToken from_fields(const std::array<int, 8>& f) {
    return OctupleToken{f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7]};
  }
  auto operator<=>(const OctupleToken&) const = default;
};

/// Field names in serialization order.
inline constexpr std::array<const char*, 8> kFieldNames = {"bar",      "position", "instrument", "pitch",
                                                           "duration", "velocity", "tempo",      "timesig"};

/// Exclusive upper bound of each field under `cfg` (bar uses max_bars,
/// position the largest bar in the vocab).
std::array<int, 8> field_vocab_sizes(const QuantConfig& cfg);

struct TokenizeResult {
  std::vector<OctupleToken> tokens;
  std::size_t truncated = 0;          // notes beyond max_bars
  std::size_t remapped_timesigs = 0;  // map entries not in the vocab
  std::vector<std::string> warnings;
};

/// Bar layout used by the tokenizer: the piece timeline with every time
/// signature replaced by its vocab entry.
class BarLayout {
 public:
  BarLayout(const midi::Timeline& timeline, const QuantConfig& cfg);

  midi::Tick bar_start(int bar) const;
  midi::Tick bar_length(int bar) const { return bar_start(bar + 1) - bar_start(bar); }
  /// Index of the bar containing `tick`.
  int bar_of(midi::Tick tick) const;
  int timesig_index(int bar) const;
  /// Tick of a grid position in a bar (rounded down).
  midi::Tick position_tick(int bar, int position) const;
  const midi::Timeline& timeline() const { return timeline_; }
  std::size_t remapped() const { return remapped_; }

 private:
  midi::Timeline timeline_;
  std::vector<midi::Tick> grid_;
  std::vector<int> grid_sig_;
  int ppu_;
  std::size_t remapped_ = 0;
  // Bars past the grid continue the last signature segment.
  midi::Tick tail_start_ = 0;
  int tail_first_bar_ = 0;
  midi::TimeSignature tail_sig_;
};

TokenizeResult tokenize(const midi::MidiPiece& piece, const QuantConfig& cfg);

/// Inverse at bin centers, 480 ticks per quarter. Tokens must be sorted,
/// in range, and consistent (one signature per bar, one tempo per onset).
midi::MidiPiece detokenize(const std::vector<OctupleToken>& tokens, const QuantConfig& cfg);

/// Throws TokenOutOfRange naming the first offending field.
void check_token(const OctupleToken& token, const QuantConfig& cfg);

/// Line format: 8 space-separated integers per token.
void write_tokens(std::ostream& out, const std::vector<OctupleToken>& tokens);
std::vector<OctupleToken> read_tokens(std::istream& in);

}  // namespace midilm::octuple
