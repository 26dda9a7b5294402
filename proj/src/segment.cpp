#include "midilm/segment.h"

#include <algorithm>
#include <cmath>
#include "json.hpp"

namespace midilm::segment {

using midi::Tick;

namespace {

constexpr double kEps = 1e-9;
// A bar-aligned end must keep at least this share of the target; with long
// bars the clip ends unaligned at start + target instead.
constexpr double kMinAlignedFill = 0.9;

}  // namespace

const char* region_name(Region region) {
  switch (region) {
    case Region::Begin: return "Begin";
    case Region::Middle: return "Middle";
    case Region::Late: return "Late";
  }
  return "Begin";
}

Region parse_region(const std::string& name) {
  if (name == "Begin") return Region::Begin;
  if (name == "Middle") return Region::Middle;
  if (name == "Late") return Region::Late;
  throw SegmentError(SegmentErrc::ParseError, "unknown region '" + name + "'");
}

std::string Clip::clip_id() const { return piece_id + "_clip" + std::to_string(index); }

std::vector<Clip> select_clips(const midi::MidiPiece& piece, const std::string& piece_id, double target_s,
                               int count) {
  if (piece.notes.empty()) throw SegmentError(SegmentErrc::EmptyPiece, "piece '" + piece_id + "' has no notes");
  if (!(target_s > 0.0) || count < 1) throw SegmentError(SegmentErrc::InvalidArgument, "target and count must be positive");

  const auto& tl = piece.timeline;
  const double length = midi::duration_seconds(piece);
  const std::vector<Tick> grid = midi::bar_grid(tl);
  std::vector<double> grid_s;
  grid_s.reserve(grid.size());
  for (Tick t : grid) grid_s.push_back(midi::ticks_to_seconds(tl, t));

  std::vector<Clip> clips;
  if (length < target_s - kEps) {
    Clip whole{piece_id, 0, 0, tl.end_tick, 0.0, length, Region::Begin,
               std::binary_search(grid.begin(), grid.end(), tl.end_tick)};
    clips.push_back(whole);
    return clips;
  }

  for (int i = 0; i < count; ++i) {
    double anchor = count == 1 ? 0.0 : (length - target_s) * i / (count - 1);
    // last bar line at or before the anchor
    auto at_or_before = std::upper_bound(grid_s.begin(), grid_s.end(), anchor + kEps);
    std::size_t start_idx = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, at_or_before - grid_s.begin() - 1));
    Tick start = grid[start_idx];
    double start_s = grid_s[start_idx];
    bool start_aligned = true;
    if (!clips.empty() && start < clips.back().end_tick) {
      auto free = std::lower_bound(grid.begin(), grid.end(), clips.back().end_tick);
      std::size_t free_idx = static_cast<std::size_t>(free - grid.begin());
      if (free != grid.end() && grid_s[free_idx] <= anchor + kEps) {
        start_idx = free_idx;
        start = *free;
        start_s = grid_s[free_idx];
      } else {
        // Starting no later than the anchor keeps room for the later clips.
        start = clips.back().end_tick;
        start_s = clips.back().end_s;
        start_aligned = false;
      }
    }
    if (start_s + target_s > length + kEps) continue;

    Clip clip;
    clip.piece_id = piece_id;
    clip.start_tick = start;
    clip.start_s = start_s;
    clip.region = i == 0 ? Region::Begin : (i == count - 1 ? Region::Late : Region::Middle);
    auto after = std::upper_bound(grid_s.begin(), grid_s.end(), start_s + kEps);
    auto within = std::upper_bound(grid_s.begin(), grid_s.end(), start_s + target_s + kEps);
    if (within != after && *(within - 1) - start_s >= kMinAlignedFill * target_s - kEps) {
      std::size_t end_idx = static_cast<std::size_t>(within - grid_s.begin()) - 1;
      clip.end_tick = grid[end_idx];
      clip.end_s = grid_s[end_idx];
      clip.bar_aligned = start_aligned;
    } else {
      double exact = midi::seconds_to_ticks_exact(tl, start_s + target_s);
      // round down so the clip never runs past the target
      clip.end_tick = std::min<Tick>(tl.end_tick, static_cast<Tick>(std::floor(exact + kEps)));
      clip.end_s = midi::ticks_to_seconds(tl, clip.end_tick);
      clip.bar_aligned = false;
    }
    if (clip.end_tick <= clip.start_tick) continue;
    clip.index = static_cast<int>(clips.size());
    clips.push_back(clip);
  }
  return clips;
}

std::vector<octuple::OctupleToken> slice_tokens(const std::vector<octuple::OctupleToken>& tokens,
                                                const midi::Timeline& timeline, const Clip& clip,
                                                const octuple::QuantConfig& cfg) {
  octuple::BarLayout layout(timeline, cfg);
  const int first_bar = layout.bar_of(clip.start_tick);
  std::vector<octuple::OctupleToken> out;
  for (const auto& t : tokens) {
    Tick onset = layout.position_tick(t.bar, t.position);
    if (onset < clip.start_tick || onset >= clip.end_tick) continue;
    auto rebased = t;
    rebased.bar -= first_bar;
    out.push_back(rebased);
  }
  return out;
}

midi::MidiPiece clip_piece(const midi::MidiPiece& piece, const Clip& clip) {
  const auto& tl = piece.timeline;
  midi::MidiPiece out;
  out.title = piece.title;
  out.composer = piece.composer;
  out.timeline.ticks_per_quarter = tl.ticks_per_quarter;
  out.timeline.end_tick = clip.end_tick - clip.start_tick;
  out.timeline.tempo_map.push_back({0, midi::tempo_at(tl, clip.start_tick)});
  for (const auto& p : tl.tempo_map) {
    if (p.tick > clip.start_tick && p.tick < clip.end_tick) out.timeline.tempo_map.push_back({p.tick - clip.start_tick, p.us_per_quarter});
  }
  out.timeline.timesig_map.push_back({0, midi::timesig_at(tl, clip.start_tick)});
  for (const auto& p : tl.timesig_map) {
    if (p.tick > clip.start_tick && p.tick < clip.end_tick) out.timeline.timesig_map.push_back({p.tick - clip.start_tick, p.sig});
  }
  for (const auto& n : piece.notes) {
    if (n.onset_tick < clip.start_tick || n.onset_tick >= clip.end_tick) continue;
    auto m = n;
    m.onset_tick -= clip.start_tick;
    m.duration_tick = std::min(m.duration_tick, out.timeline.end_tick - m.onset_tick);
    out.notes.push_back(m);
  }
  midi::normalize(out);
  return out;
}

std::string clip_to_json(const Clip& clip) {
  nlohmann::ordered_json j;
  j["clip_id"] = clip.clip_id();
  j["piece_id"] = clip.piece_id;
  j["start_tick"] = clip.start_tick;
  j["end_tick"] = clip.end_tick;
  j["start_s"] = clip.start_s;
  j["end_s"] = clip.end_s;
  j["region"] = region_name(clip.region);
  j["bar_aligned"] = clip.bar_aligned;
  return j.dump();
}

Clip clip_from_json(const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    Clip c;
    c.piece_id = j.at("piece_id").get<std::string>();
    c.start_tick = j.at("start_tick").get<Tick>();
    c.end_tick = j.at("end_tick").get<Tick>();
    c.start_s = j.at("start_s").get<double>();
    c.end_s = j.at("end_s").get<double>();
    c.region = parse_region(j.at("region").get<std::string>());
    c.bar_aligned = j.at("bar_aligned").get<bool>();
    std::string id = j.value("clip_id", std::string{});
    auto pos = id.rfind("_clip");
    if (pos != std::string::npos) c.index = std::stoi(id.substr(pos + 5));
    return c;
  } catch (const std::exception& e) {
    throw SegmentError(SegmentErrc::ParseError, std::string("bad clip record: ") + e.what());
  }
}

}  // namespace midilm::segment
