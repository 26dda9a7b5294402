#pragma once

// Basic musical features attached to annotation tags: tempo, key, meter.

#include <array>
#include <string>

#include "midilm/error.h"
#include "midilm/midi.h"

namespace midilm::features {

enum class FeatureErrc { EmptyPiece, InvalidKey };
using FeatureError = KindedError<FeatureErrc>;

enum class Mode { Major, Minor };

struct Key {
  int tonic = 0;  // pitch class, C = 0
  Mode mode = Mode::Major;
  double confidence = 0.0;  // winning Pearson correlation

  bool same_key(const Key& other) const { return tonic == other.tonic && mode == other.mode; }
};

/// Krumhansl-Kessler probe-tone profiles, tonic first.
inline constexpr std::array<double, 12> kMajorProfile = {6.3500, 2.2300, 3.4800, 2.3300, 4.3800, 4.0900,
                                                         2.5200, 5.1900, 2.3900, 3.6600, 2.2900, 2.8800};
inline constexpr std::array<double, 12> kMinorProfile = {6.3300, 2.6800, 3.5200, 5.3800, 2.6000, 3.5300,
                                                         2.5400, 4.7500, 3.9800, 2.6900, 3.3400, 3.1700};

struct FeatureSummary {
  double tempo_bpm = 120.0;
  Key key;
  midi::TimeSignature timesig;
  double duration_s = 0.0;
};

/// Mean BPM weighted by the wall-clock duration of each tempo segment.
double estimate_tempo(const midi::Timeline& timeline);

/// Duration-weighted pitch-class histogram.
std::array<double, 12> pitch_class_histogram(const midi::MidiPiece& piece);

/// Pearson correlation of a histogram against a profile rotated to `tonic`.
double key_correlation(const std::array<double, 12>& histogram, int tonic, Mode mode);

/// Krumhansl-Schmuckler key finding. Ties: major before minor, then lowest tonic.
Key estimate_key(const midi::MidiPiece& piece);

/// Signature active for the most ticks; ties go to the earliest.
midi::TimeSignature dominant_time_signature(const midi::Timeline& timeline);

FeatureSummary summarize(const midi::MidiPiece& piece);

/// "C", "F#", "Bb", ... Sharps and flats chosen like a key signature.
std::string tonic_name(int pitch_class, Mode mode);
/// "C major", "F# minor".
std::string key_name(const Key& key);
/// Inverse of key_name; accepts "C major", "Am", "Bbm", "F#".
Key parse_key(const std::string& text);

}  // namespace midilm::features
