#pragma once

// Standard MIDI File ingestion: note events plus the musical timeline
// (tempo map, time-signature map, bar grid).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "midilm/error.h"

namespace midilm::midi {

using Tick = std::int64_t;

enum class MidiErrc {
  MalformedHeader,
  UnsupportedFormat,
  TruncatedTrack,
  MalformedTrack,
  TickOutOfRange,
  InvalidPiece,
};

using MidiError = KindedError<MidiErrc>;

inline constexpr int kDefaultUsPerQuarter = 500000;  // 120 BPM
inline constexpr int kDrumChannel = 9;

struct NoteEvent {
  int pitch = 60;
  int velocity = 64;
  Tick onset_tick = 0;
  Tick duration_tick = 1;
  int track = 0;
  int channel = 0;
  int program = 0;

  Tick end_tick() const { return onset_tick + duration_tick; }
  bool operator==(const NoteEvent&) const = default;
};

struct TempoPoint {
  Tick tick = 0;
  int us_per_quarter = kDefaultUsPerQuarter;

  double bpm() const { return 60'000'000.0 / us_per_quarter; }
  bool operator==(const TempoPoint&) const = default;
};

struct TimeSignature {
  int numerator = 4;
  int denominator = 4;

  bool operator==(const TimeSignature&) const = default;
  auto operator<=>(const TimeSignature&) const = default;
};

struct TimeSigPoint {
  Tick tick = 0;
  TimeSignature sig;

  bool operator==(const TimeSigPoint&) const = default;
};

struct Timeline {
  int ticks_per_quarter = 480;
  std::vector<TempoPoint> tempo_map;     // strictly increasing ticks, first at 0
  std::vector<TimeSigPoint> timesig_map;  // strictly increasing ticks, first at 0
  Tick end_tick = 0;

  bool operator==(const Timeline&) const = default;
};

struct MidiPiece {
  std::vector<NoteEvent> notes;  // sorted by (onset_tick, track, pitch)
  Timeline timeline;
  std::optional<std::string> title;
  std::optional<std::string> composer;
  /// Recoverable defects found while parsing (dangling note-ons, dropped
  /// zero-length notes, ignored malformed meta events).
  std::vector<std::string> warnings;
};

/// Parses a format 0 or 1 Standard MIDI File with PPQ division.
MidiPiece parse_smf(std::span<const std::uint8_t> bytes);

/// Reads and parses a file. Throws MidiError on I/O failure as well.
MidiPiece read_smf(const std::string& path);

/// Piecewise-linear integration of the tempo map. Throws TickOutOfRange
/// outside [0, end_tick].
double ticks_to_seconds(const Timeline& timeline, Tick tick);

/// Same integration without the range check; extrapolates with the last
/// tempo past end_tick.
double ticks_to_seconds_unchecked(const Timeline& timeline, double tick);

/// Exact (fractional) inverse of ticks_to_seconds_unchecked.
double seconds_to_ticks_exact(const Timeline& timeline, double seconds);

/// Largest tick in [0, end_tick] whose time does not exceed `seconds`
/// (binary search over ticks_to_seconds).
Tick seconds_to_tick(const Timeline& timeline, double seconds);

/// Bar length in ticks for a signature; exact as a rational, rounded down.
Tick bar_length_ticks(int ticks_per_quarter, const TimeSignature& sig);

/// Bar start ticks covering [0, end_tick]. The grid restarts at every
/// time-signature change.
std::vector<Tick> bar_grid(const Timeline& timeline);

/// Time signature active at `tick`.
TimeSignature timesig_at(const Timeline& timeline, Tick tick);

/// Tempo (µs per quarter) active at `tick`.
int tempo_at(const Timeline& timeline, Tick tick);

/// Sorts notes canonically, normalizes the maps (defaults at tick 0, one
/// entry per tick, consecutive duplicates collapsed) and checks every
/// NoteEvent invariant. Throws MidiError{InvalidPiece} on violation.
void normalize(MidiPiece& piece);

/// Duration of the piece in seconds.
double duration_seconds(const MidiPiece& piece);

}  // namespace midilm::midi
