#pragma once

// Non-overlapping, bar-aligned fixed-duration clips.

#include <string>
#include <vector>

#include "midilm/error.h"
#include "midilm/midi.h"
#include "midilm/octuple.h"

namespace midilm::segment {

enum class SegmentErrc { EmptyPiece, InvalidArgument, ParseError };
using SegmentError = KindedError<SegmentErrc>;

enum class Region { Begin, Middle, Late };

const char* region_name(Region region);
Region parse_region(const std::string& name);

struct Clip {
  std::string piece_id;
  int index = 0;  // position in the piece's clip list
  midi::Tick start_tick = 0;
  midi::Tick end_tick = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  Region region = Region::Begin;
  bool bar_aligned = false;

  std::string clip_id() const;
  double duration_s() const { return end_s - start_s; }
  bool operator==(const Clip&) const = default;
};

/// Anchors at 0, (L - target)/2 and L - target seconds (evenly spaced for
/// other counts). Starts snap back to the previous bar line, ends to the last
/// bar line within start + target when that keeps at least 90% of the target,
/// else to start + target exactly. Overlapping candidates shift right to the
/// first free bar line, or start where the previous clip ended when that bar
/// line lies past their anchor. Candidates that no longer fit are dropped. A
/// piece shorter than the target yields one whole-piece clip. bar_aligned is
/// true when both ends sit on bar lines.
std::vector<Clip> select_clips(const midi::MidiPiece& piece, const std::string& piece_id, double target_s = 20.0,
                               int count = 3);

/// Tokens whose (snapped) onset lies in [start_tick, end_tick), with bars
/// rebased so the bar containing start_tick becomes bar 0.
std::vector<octuple::OctupleToken> slice_tokens(const std::vector<octuple::OctupleToken>& tokens,
                                                const midi::Timeline& timeline, const Clip& clip,
                                                const octuple::QuantConfig& cfg);

/// Notes starting inside the clip, rebased to tick 0 and cut at the clip end,
/// with the maps restricted to the clip.
midi::MidiPiece clip_piece(const midi::MidiPiece& piece, const Clip& clip);

/// One JSON object per line: {clip_id, piece_id, start_tick, end_tick,
/// start_s, end_s, region, bar_aligned}.
std::string clip_to_json(const Clip& clip);
Clip clip_from_json(const std::string& line);

}  // namespace midilm::segment
