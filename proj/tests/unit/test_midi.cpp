#include <cmath>
#include <random>

#include "doctest.h"
#include "fuzz.h"
#include "midilm/midi.h"
#include "smf_writer.h"

using namespace midilm;
using namespace midilm::testing;
using midi::MidiErrc;

namespace {

midi::MidiErrc parse_error(const Bytes& bytes) {
  try {
    midi::parse_smf(bytes);
  } catch (const midi::MidiError& e) {
    return e.kind();
  }
  FAIL("expected a MidiError");
  return MidiErrc::InvalidPiece;
}

midi::Timeline timeline(int tpq, std::vector<midi::TempoPoint> tempos, std::vector<midi::TimeSigPoint> sigs,
                        midi::Tick end) {
  midi::Timeline t;
  t.ticks_per_quarter = tpq;
  t.tempo_map = std::move(tempos);
  t.timesig_map = std::move(sigs);
  t.end_tick = end;
  return t;
}

/// Seconds by summing whole ticks one at a time.
double seconds_by_summation(const midi::Timeline& t, midi::Tick tick) {
  double s = 0.0;
  std::size_t seg = 0;
  for (midi::Tick k = 0; k < tick; ++k) {
    while (seg + 1 < t.tempo_map.size() && t.tempo_map[seg + 1].tick <= k) ++seg;
    s += t.tempo_map[seg].us_per_quarter / 1e6 / t.ticks_per_quarter;
  }
  return s;
}

/// Bar starts by walking each signature segment bar by bar.
std::vector<midi::Tick> bars_by_walking(const midi::Timeline& t) {
  std::vector<midi::Tick> out;
  for (std::size_t i = 0; i < t.timesig_map.size(); ++i) {
    const midi::Tick from = t.timesig_map[i].tick;
    const midi::Tick to = i + 1 < t.timesig_map.size() ? t.timesig_map[i + 1].tick : t.end_tick + 1;
    const auto& sig = t.timesig_map[i].sig;
    const midi::Tick len = sig.numerator * 4 * t.ticks_per_quarter / sig.denominator;
    for (midi::Tick b = from; b < to; b += len) out.push_back(b);
  }
  return out;
}

}  // namespace

TEST_CASE("a single C4 note written by the reference writer parses field by field") {
  const Bytes bytes = smf_file(0, 480, {{note_on(0, 0, 60, 80), note_off(480, 0, 60)}});
  const auto p = midi::parse_smf(bytes);
  REQUIRE(p.notes.size() == 1);
  const auto& n = p.notes[0];
  CHECK(n.pitch == 60);
  CHECK(n.velocity == 80);
  CHECK(n.onset_tick == 0);
  CHECK(n.duration_tick == 480);
  CHECK(n.track == 0);
  CHECK(n.channel == 0);
  CHECK(p.timeline.ticks_per_quarter == 480);
  REQUIRE(p.timeline.tempo_map.size() == 1);
  CHECK(p.timeline.tempo_map[0] == midi::TempoPoint{0, 500000});
  REQUIRE(p.timeline.timesig_map.size() == 1);
  CHECK(p.timeline.timesig_map[0].sig == midi::TimeSignature{4, 4});
}

TEST_CASE("note-on with velocity 0 ends the note") {
  const Bytes bytes = smf_file(0, 480, {{note_on(0, 0, 60, 80), note_on(240, 0, 60, 0)}});
  const auto p = midi::parse_smf(bytes);
  REQUIRE(p.notes.size() == 1);
  CHECK(p.notes[0].duration_tick == 240);
}

TEST_CASE("running status is honoured") {
  Bytes body = {0x00, 0x90, 60, 80, 0x00, 64, 80, 0x83, 0x60, 60, 0, 0x00, 64, 0, 0x00, 0xFF, 0x2F, 0x00};
  Bytes bytes = {'M', 'T', 'h', 'd', 0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0, 'M', 'T', 'r', 'k', 0, 0, 0,
                 static_cast<std::uint8_t>(body.size())};
  bytes.insert(bytes.end(), body.begin(), body.end());
  const auto p = midi::parse_smf(bytes);
  REQUIRE(p.notes.size() == 2);
  CHECK(p.notes[0].pitch == 60);
  CHECK(p.notes[1].pitch == 64);
  CHECK(p.notes[1].duration_tick == 480);
}

TEST_CASE("overlapping same-pitch notes are matched first in, first out") {
  const Bytes bytes =
      smf_file(0, 480, {{note_on(0, 0, 60, 80), note_on(100, 0, 60, 90), note_off(200, 0, 60), note_off(400, 0, 60)}});
  const auto p = midi::parse_smf(bytes);
  REQUIRE(p.notes.size() == 2);
  CHECK(p.notes[0].velocity == 80);
  CHECK(p.notes[0].duration_tick == 200);
  CHECK(p.notes[1].velocity == 90);
  CHECK(p.notes[1].duration_tick == 300);
}

TEST_CASE("header and format errors") {
  CHECK(parse_error({'R', 'I', 'F', 'F', 0, 0, 0, 6, 0, 0, 0, 1, 1, 0xE0}) == MidiErrc::MalformedHeader);
  CHECK(parse_error({}) == MidiErrc::MalformedHeader);
  CHECK(parse_error({'M', 'T', 'h', 'd', 0, 0, 0, 5, 0, 0, 0, 1, 1}) == MidiErrc::MalformedHeader);
  Bytes format2 = smf_file(2, 480, {{note_on(0, 0, 60, 80), note_off(10, 0, 60)}});
  CHECK(parse_error(format2) == MidiErrc::UnsupportedFormat);
  Bytes smpte = smf_file(0, 480, {{note_on(0, 0, 60, 80), note_off(10, 0, 60)}});
  smpte[12] = 0xE7;  // -25 fps
  smpte[13] = 40;
  CHECK(parse_error(smpte) == MidiErrc::UnsupportedFormat);
  Bytes truncated = smf_file(0, 480, {{note_on(0, 0, 60, 80), note_off(480, 0, 60)}});
  truncated.resize(truncated.size() - 5);
  CHECK(parse_error(truncated) == MidiErrc::TruncatedTrack);
}

TEST_CASE("a dangling note-on is closed at the end of its track with a warning") {
  const Bytes bytes = smf_file(0, 480, {{note_on(0, 0, 60, 80)}}, {960});
  const auto p = midi::parse_smf(bytes);
  REQUIRE(p.notes.size() == 1);
  CHECK(p.notes[0].duration_tick == 960);
  CHECK_FALSE(p.warnings.empty());
}

TEST_CASE("tempo, meter, title and program events reach the piece") {
  const Bytes bytes = smf_file(
      1, 480,
      {{track_name(0, "Etude"), tempo_event(0, 600000), timesig_event(0, 3, 4), tempo_event(960, 400000)},
       {program_change(0, 1, 5), note_on(0, 1, 67, 70), note_off(240, 1, 67)}});
  const auto p = midi::parse_smf(bytes);
  CHECK(p.title == std::optional<std::string>("Etude"));
  REQUIRE(p.timeline.tempo_map.size() == 2);
  CHECK(p.timeline.tempo_map[1] == midi::TempoPoint{960, 400000});
  CHECK(p.timeline.timesig_map[0].sig == midi::TimeSignature{3, 4});
  REQUIRE(p.notes.size() == 1);
  CHECK(p.notes[0].program == 5);
  CHECK(p.notes[0].track == 1);
  CHECK(p.notes[0].channel == 1);
}

TEST_CASE("ticks_to_seconds") {
  const auto constant = timeline(480, {{0, 500000}}, {{0, {4, 4}}}, 1920);
  CHECK(midi::ticks_to_seconds(constant, 0) == 0.0);
  CHECK(midi::ticks_to_seconds(constant, 480) == doctest::Approx(0.5).epsilon(1e-12));
  const auto two = timeline(480, {{0, 500000}, {480, 1000000}}, {{0, {4, 4}}}, 1920);
  const double expected = seconds_by_summation(two, 960);
  CHECK(expected == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(midi::ticks_to_seconds(two, 960) == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(midi::ticks_to_seconds(two, 1921), midi::MidiError);
  CHECK_THROWS_AS(midi::ticks_to_seconds(two, -1), midi::MidiError);
}

TEST_CASE("bar_grid") {
  CHECK(midi::bar_grid(timeline(480, {{0, 500000}}, {{0, {4, 4}}}, 3840)) == std::vector<midi::Tick>{0, 1920, 3840});
  CHECK(midi::bar_grid(timeline(480, {{0, 500000}}, {{0, {3, 4}}}, 2880)) == std::vector<midi::Tick>{0, 1440, 2880});
  const auto mixed = timeline(480, {{0, 500000}}, {{0, {4, 4}}, {1920, {3, 4}}}, 6240);
  const auto grid = midi::bar_grid(mixed);
  CHECK(grid == bars_by_walking(mixed));
  CHECK(std::vector<midi::Tick>(grid.begin(), grid.begin() + 3) == std::vector<midi::Tick>{0, 1920, 3360});
}

TEST_CASE("writer round trip on fuzzed pieces") {
  std::mt19937_64 rng(101);
  for (int i = 0; i < 300; ++i) {
    auto piece = fuzz_piece(rng);
    const auto parsed = midi::parse_smf(write_piece(piece));
    midi::normalize(piece);
    REQUIRE(parsed.notes == piece.notes);
    REQUIRE(parsed.timeline == piece.timeline);
  }
}

TEST_CASE("ticks_to_seconds is strictly monotone and seconds_to_tick inverts it") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    auto piece = fuzz_piece(rng);
    midi::normalize(piece);
    const auto& tl = piece.timeline;
    double prev = -1.0;
    for (midi::Tick t = 0; t <= tl.end_tick; t += std::max<midi::Tick>(1, tl.end_tick / 200)) {
      const double s = midi::ticks_to_seconds(tl, t);
      REQUIRE(s > prev);
      prev = s;
      const midi::Tick back = midi::seconds_to_tick(tl, s);
      REQUIRE(std::llabs(back - t) <= 1);
      REQUIRE(midi::ticks_to_seconds(tl, back) <= s + 1e-12);
    }
  }
}

TEST_CASE("parsed notes satisfy the note invariants and arbitrary bytes never crash the parser") {
  std::mt19937_64 rng(99);
  std::size_t parsed = 0;
  for (int i = 0; i < 2000; ++i) {
    Bytes bytes = write_piece(fuzz_piece(rng));
    const int flips = 1 + static_cast<int>(rng() % 6);
    for (int f = 0; f < flips; ++f) bytes[rng() % bytes.size()] = static_cast<std::uint8_t>(rng());
    if (rng() % 4 == 0) bytes.resize(rng() % bytes.size());
    try {
      const auto p = midi::parse_smf(bytes);
      ++parsed;
      for (const auto& n : p.notes) {
        REQUIRE(n.pitch >= 0);
        REQUIRE(n.pitch <= 127);
        REQUIRE(n.velocity >= 1);
        REQUIRE(n.velocity <= 127);
        REQUIRE(n.duration_tick > 0);
        REQUIRE(n.onset_tick >= 0);
        REQUIRE(n.end_tick() <= p.timeline.end_tick);
      }
    } catch (const midilm::Error&) {
    }
  }
  CHECK(parsed > 0);
}

TEST_CASE("normalize rejects invalid notes") {
  midi::MidiPiece p;
  p.notes.push_back({60, 0, 0, 10, 0, 0, 0});
  CHECK_THROWS_AS(midi::normalize(p), midi::MidiError);
  p.notes[0] = {128, 80, 0, 10, 0, 0, 0};
  CHECK_THROWS_AS(midi::normalize(p), midi::MidiError);
  p.notes[0] = {60, 80, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(midi::normalize(p), midi::MidiError);
}
