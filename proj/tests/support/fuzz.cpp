#include "fuzz.h"

#include <algorithm>
#include <cmath>
#include <map>

namespace midilm::testing {

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  // Modulo bias is irrelevant for test generation.
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

}  // namespace

midi::MidiPiece fuzz_piece(std::mt19937_64& rng, const FuzzOptions& opts) {
  static const int kTpq[] = {96, 120, 384, 480, 960};
  static const midi::TimeSignature kSigs[] = {{4, 4}, {3, 4}, {2, 4}, {6, 8}, {2, 2}, {5, 4}, {7, 8}, {12, 16}};
  midi::MidiPiece p;
  auto& tl = p.timeline;
  tl.ticks_per_quarter = kTpq[uniform_int(rng, 0, 4)];
  const int tpq = tl.ticks_per_quarter;
  const std::int64_t span = static_cast<std::int64_t>(opts.quarters) * tpq;
  const int grid = opts.on_grid ? tpq / 8 : 1;

  tl.tempo_map.push_back({0, uniform_int(rng, 250000, 1500000)});
  for (int i = uniform_int(rng, 0, opts.max_tempo_changes); i > 0; --i) {
    std::int64_t tick = uniform_int(rng, 1, static_cast<int>(span - 1));
    if (std::none_of(tl.tempo_map.begin(), tl.tempo_map.end(), [&](auto& t) { return t.tick == tick; }))
      tl.tempo_map.push_back({tick, uniform_int(rng, 250000, 1500000)});
  }
  std::sort(tl.tempo_map.begin(), tl.tempo_map.end(), [](auto& a, auto& b) { return a.tick < b.tick; });

  tl.timesig_map.push_back({0, kSigs[uniform_int(rng, 0, 7)]});
  for (int i = uniform_int(rng, 0, opts.max_timesig_changes); i > 0; --i) {
    std::int64_t tick = static_cast<std::int64_t>(uniform_int(rng, 1, opts.quarters - 1)) * tpq;
    if (std::none_of(tl.timesig_map.begin(), tl.timesig_map.end(), [&](auto& t) { return t.tick == tick; }))
      tl.timesig_map.push_back({tick, kSigs[uniform_int(rng, 0, 7)]});
  }
  std::sort(tl.timesig_map.begin(), tl.timesig_map.end(), [](auto& a, auto& b) { return a.tick < b.tick; });

  const int tracks = uniform_int(rng, 1, opts.max_tracks);
  std::map<std::tuple<int, int, int>, std::vector<std::pair<std::int64_t, std::int64_t>>> busy;
  const int n = uniform_int(rng, opts.min_notes, opts.max_notes);
  for (int attempts = 0; static_cast<int>(p.notes.size()) < n && attempts < 20 * n; ++attempts) {
    midi::NoteEvent e;
    e.track = uniform_int(rng, 0, tracks - 1);
    e.channel = e.track;
    e.pitch = uniform_int(rng, 21, 108);
    e.velocity = uniform_int(rng, 1, 127);
    e.onset_tick = static_cast<std::int64_t>(uniform_int(rng, 0, static_cast<int>(span / grid) - 1)) * grid;
    e.duration_tick = static_cast<std::int64_t>(uniform_int(rng, 1, 4 * tpq / grid)) * grid;
    auto& spans = busy[{e.track, e.channel, e.pitch}];
    const bool clash = std::any_of(spans.begin(), spans.end(), [&](auto& s) {
      return e.onset_tick < s.second && s.first < e.end_tick();
    });
    if (clash) continue;
    spans.push_back({e.onset_tick, e.end_tick()});
    p.notes.push_back(e);
  }
  std::sort(p.notes.begin(), p.notes.end(), [](auto& a, auto& b) {
    return std::tie(a.onset_tick, a.track, a.pitch) < std::tie(b.onset_tick, b.track, b.pitch);
  });
  tl.end_tick = span;
  for (const auto& e : p.notes) tl.end_tick = std::max(tl.end_tick, e.end_tick());
  return p;
}

midi::MidiPiece timed_piece(double seconds, int bpm, midi::TimeSignature sig, int tpq) {
  midi::MidiPiece p;
  p.timeline.ticks_per_quarter = tpq;
  p.timeline.tempo_map = {{0, static_cast<int>(std::lround(60'000'000.0 / bpm))}};
  p.timeline.timesig_map = {{0, sig}};
  const auto quarters = static_cast<std::int64_t>(std::llround(seconds * bpm / 60.0));
  const std::int64_t beat = 4LL * tpq / sig.denominator;
  for (std::int64_t t = 0; t + beat <= quarters * tpq; t += beat)
    p.notes.push_back({60 + static_cast<int>((t / beat) % 12), 80, t, beat, 0, 0, 0});
  p.timeline.end_tick = quarters * tpq;
  return p;
}

}  // namespace midilm::testing
