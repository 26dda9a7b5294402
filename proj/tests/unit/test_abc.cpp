#include <algorithm>
#include <map>
#include <random>
#include <tuple>

#include "abc_checker.h"
#include "doctest.h"
#include "fuzz.h"
#include "midilm/abc.h"

using namespace midilm;
using namespace midilm::testing;

namespace {

midi::MidiPiece base_piece(midi::TimeSignature sig = {4, 4}) {
  midi::MidiPiece p;
  p.timeline.tempo_map = {{0, 500000}};
  p.timeline.timesig_map = {{0, sig}};
  p.timeline.end_tick = 1920;
  return p;
}

std::string header_value(const abc::AbcDocument& doc, char field) {
  for (const auto& [f, v] : doc.header)
    if (f == field) return v;
  return {};
}

bool piece_on_grid(const midi::MidiPiece& p) {
  const auto tpq = p.timeline.ticks_per_quarter;
  return std::all_of(p.notes.begin(), p.notes.end(), [&](const auto& n) {
    return (n.onset_tick * 8) % tpq == 0 && (n.end_tick() * 8) % tpq == 0;
  });
}

using Event = std::tuple<std::size_t, std::int64_t, std::int64_t, int>;  // voice, onset, duration, pitch

}  // namespace

TEST_CASE("single quarter note") {
  auto p = base_piece();
  p.notes.push_back({60, 80, 0, 480, 0, 0, 0});
  auto doc = abc::to_abc(p, features::Key{0, features::Mode::Major, 1.0});
  REQUIRE(doc.voices.size() == 1);
  CHECK(doc.voices[0].body.rfind("C2", 0) == 0);
  CHECK(header_value(doc, 'M') == "4/4");
  CHECK(header_value(doc, 'L') == "1/8");
  CHECK(header_value(doc, 'Q') == "1/4=120");
  CHECK(header_value(doc, 'K') == "C");
  std::string fields;
  for (const auto& [f, v] : doc.header) fields += f;
  CHECK(fields == "XTMLQK");

  auto r = read_abc(doc.render());
  REQUIRE(r.errors.empty());
  REQUIRE(r.notes.size() == 1);
  CHECK(r.notes[0].pitch == 60);
  CHECK(r.notes[0].duration == 8);
  CHECK(doc.loss_report.is_zero());
}

TEST_CASE("simultaneous triad becomes a chord") {
  auto p = base_piece();
  for (int pitch : {60, 64, 67}) p.notes.push_back({pitch, 80, 0, 480, 0, 0, 0});
  auto doc = abc::to_abc(p, features::Key{0, features::Mode::Major, 1.0});
  CHECK(doc.voices[0].body.rfind("[C2E2G2]", 0) == 0);
  auto r = read_abc(doc.render());
  REQUIRE(r.errors.empty());
  CHECK(r.notes.size() == 3);
}

TEST_CASE("meter and key fields") {
  auto p = base_piece({3, 4});
  p.notes.push_back({69, 80, 0, 480, 0, 0, 0});
  auto doc = abc::to_abc(p, features::Key{9, features::Mode::Minor, 1.0});
  CHECK(header_value(doc, 'M') == "3/4");
  CHECK(header_value(doc, 'K') == "Am");
  CHECK(doc.render().find("M:3/4\n") != std::string::npos);
  CHECK(abc::key_field({6, features::Mode::Major, 0}) == "F#");
  CHECK(abc::key_field({10, features::Mode::Minor, 0}) == "Bbm");
}

TEST_CASE("empty piece is rejected") {
  CHECK_THROWS_AS(abc::to_abc(base_piece()), abc::AbcError);
}

TEST_CASE("validator flags grammar violations") {
  const std::string head = "X:1\nT:t\nM:4/4\nL:1/8\nQ:1/4=120\nK:C\nV:1\n";
  CHECK(abc::validate_abc_text(head + "C2 E2 |\n").empty());
  CHECK(abc::validate_abc_text(head + "[C2E2G2] z2 ^F,2- F,2 |\n").empty());

  auto bad_letter = abc::validate_abc_text(head + "H9\n");
  REQUIRE(bad_letter.size() == 1);
  CHECK(bad_letter[0].line == 8);
  CHECK(bad_letter[0].column == 1);

  CHECK(abc::validate_abc_text(head + "[C2E2\n").size() == 1);
  CHECK(abc::validate_abc_text(head + "C2]\n").size() == 1);
  CHECK(!abc::validate_abc_text("T:t\nX:1\nM:4/4\nL:1/8\nQ:1/4=120\nK:C\nV:1\nC2\n").empty());
  CHECK(!abc::validate_abc_text(head + "- C2\n").empty());
}

TEST_CASE("spelling follows the key signature") {
  auto p = base_piece();
  p.notes.push_back({66, 80, 0, 480, 0, 0, 0});  // F#4 / Gb4
  auto sharp = abc::to_abc(p, features::Key{7, features::Mode::Major, 1.0});  // G major: F is sharp already
  CHECK(sharp.voices[0].body.rfind("F2", 0) == 0);
  auto flat = abc::to_abc(p, features::Key{5, features::Mode::Major, 1.0});  // F major
  CHECK(flat.voices[0].body.rfind("_G2", 0) == 0);
  for (const auto& doc : {sharp, flat}) {
    auto r = read_abc(doc.render());
    REQUIRE(r.errors.empty());
    CHECK(r.notes.at(0).pitch == 66);
  }
}

TEST_CASE("closure on fuzzed pieces") {
  std::mt19937_64 rng(101);
  for (int i = 0; i < 300; ++i) {
    auto p = fuzz_piece(rng);
    auto doc = abc::to_abc(p);
    auto violations = abc::validate_abc(doc);
    CHECK(violations.empty());
    CHECK(read_abc(doc.render()).errors.empty());
  }
}

TEST_CASE("pitch and duration conservation on the grid") {
  std::mt19937_64 rng(202);
  FuzzOptions opts;
  opts.on_grid = true;
  for (int i = 0; i < 300; ++i) {
    auto p = fuzz_piece(rng, opts);
    REQUIRE(piece_on_grid(p));
    auto doc = abc::to_abc(p);
    auto r = read_abc(doc.render());
    REQUIRE(r.errors.empty());

    std::map<int, std::size_t> voice_of;
    for (const auto& n : p.notes) voice_of.emplace(n.track, 0);
    std::size_t v = 0;
    for (auto& [track, idx] : voice_of) idx = v++;
    REQUIRE(r.voice_lengths.size() == voice_of.size());

    const auto tpq = p.timeline.ticks_per_quarter;
    std::vector<Event> want, got;
    std::vector<std::int64_t> ends(voice_of.size(), 0);
    for (const auto& n : p.notes) {
      auto voice = voice_of[n.track];
      want.emplace_back(voice, n.onset_tick * 8 / tpq, n.duration_tick * 8 / tpq, n.pitch);
      ends[voice] = std::max<std::int64_t>(ends[voice], n.end_tick() * 8 / tpq);
    }
    for (const auto& n : r.notes) got.emplace_back(n.voice, n.onset, n.duration, n.pitch);
    std::sort(want.begin(), want.end());
    std::sort(got.begin(), got.end());
    CHECK(got == want);
    CHECK(r.voice_lengths == ends);

    auto sig = features::dominant_time_signature(p.timeline);
    const std::int64_t bar = 32LL * sig.numerator / sig.denominator;
    for (const auto& bars : r.bars) {
      for (std::size_t b = 0; b + 1 < bars.size(); ++b) CHECK(bars[b] == bar);
      if (!bars.empty()) CHECK(bars.back() <= bar);
    }
    CHECK(doc.loss_report.quantized_notes == 0);
  }
}

TEST_CASE("loss report is zero exactly for on-grid single-map pieces") {
  std::mt19937_64 rng(303);
  int zero = 0, nonzero = 0;
  for (int i = 0; i < 400; ++i) {
    FuzzOptions opts;
    opts.on_grid = i % 2 == 0;
    opts.max_tempo_changes = i % 3 == 0 ? 0 : 2;
    opts.max_timesig_changes = i % 5 == 0 ? 0 : 2;
    auto p = fuzz_piece(rng, opts);
    bool expect_zero =
        piece_on_grid(p) && p.timeline.tempo_map.size() <= 1 && p.timeline.timesig_map.size() <= 1;
    auto doc = abc::to_abc(p);
    CHECK(doc.loss_report.is_zero() == expect_zero);
    (expect_zero ? zero : nonzero)++;
  }
  CHECK(zero > 10);
  CHECK(nonzero > 10);
}
