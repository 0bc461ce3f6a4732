#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <csignal>
#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "rlab/codec.hpp"
#include "rlab/domain.hpp"
#include "rlab/storage.hpp"

using namespace rlab;
using rlab::testing::Harness;
using rlab::testing::TempDir;

namespace {

SessionRecord eight_trial_session() {
  Harness h;
  const auto plan = protocol::plan_session(h.stimuli.manifest, 1, 7);
  SessionRecord s;
  s.session_id = "sess-1";
  s.subject_id = "p01";
  s.seed = 7;
  s.created_at = "2026-01-01T00:00:00Z";
  return protocol::run_session(plan, {}, h.ctx, s, nullptr).record;
}

}  // namespace

TEST(Rating, RemapGridIsExact) {
  EXPECT_EQ(remap_rating(5), 0.0);
  EXPECT_EQ(remap_rating(1), -2.0);
  EXPECT_EQ(remap_rating(9), 2.0);
  for (int raw = 1; raw <= 9; ++raw) {
    EXPECT_EQ(remap_rating(raw), -2.0 + 0.5 * (raw - 1));
    if (raw > 1) EXPECT_GT(remap_rating(raw), remap_rating(raw - 1));
  }
}

TEST(Rating, OutOfRangeIsValidationError) {
  for (int raw : {0, 10, -3}) {
    try {
      remap_rating(raw);
      FAIL() << raw;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Validation);
    }
  }
}

TEST(Condition, EightDistinctLabelsRoundTrip) {
  std::set<std::string> labels;
  for (const auto& c : Condition::all()) {
    labels.insert(c.label());
    EXPECT_EQ(Condition::parse(c.label()), c);
    EXPECT_EQ(Condition::from_index(c.index()), c);
  }
  EXPECT_EQ(labels, (std::set<std::string>{"Neg-D", "Neg-DAI", "Neg-R", "Neg-RAI", "Neu-D", "Neu-DAI", "Neu-R", "Neu-RAI"}));
  EXPECT_THROW(Condition::parse("Pos-R"), Error);
}

TEST(Transcript, WordCountIsWhitespaceTokens) {
  EXPECT_EQ(whitespace_word_count(""), 0);
  EXPECT_EQ(whitespace_word_count("  a  b\tc\nd "), 4);
  EXPECT_EQ(whitespace_word_count("don't stop-now"), 2);
}

TEST(Codec, Sha256AndBase64) {
  EXPECT_EQ(codec::sha256_hex(std::string_view("abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const std::vector<std::uint8_t> raw{0, 1, 2, 250, 255, 'x'};
  EXPECT_EQ(codec::base64_decode(codec::base64_encode(raw)), raw);
  EXPECT_EQ(codec::base64_encode(codec::as_bytes("hi")), "aGk=");
}

TEST(Serialization, SessionRoundTripIsByteIdentical) {
  const auto s = eight_trial_session();
  const auto text = encode_session(s);
  const auto back = decode_session(text);
  EXPECT_EQ(back, s);
  EXPECT_EQ(encode_session(back), text);
}

TEST(Serialization, RemappedIsRecomputedNotTrusted) {
  auto s = eight_trial_session();
  auto text = encode_session(s);
  const auto pos = text.find("\"remapped\":");
  ASSERT_NE(pos, std::string::npos);
  const auto end = text.find_first_of(",}", pos);
  text.replace(pos, end - pos, "\"remapped\":1.75");
  const auto back = decode_session(text);
  EXPECT_EQ(back.trials[0].rating->remapped(), (back.trials[0].rating->raw() - 5) / 2.0);
}

TEST(Validation, WellFormedSessionHasNoViolations) {
  const auto s = eight_trial_session();
  ASSERT_EQ(s.trials.size(), 8u);
  EXPECT_TRUE(validate_session(s).empty());
}

TEST(Validation, AiTrialWithoutGenerationNamesTheTrial) {
  auto s = eight_trial_session();
  auto it = std::find_if(s.trials.begin(), s.trials.end(), [](const TrialRecord& t) { return t.condition.is_ai(); });
  ASSERT_NE(it, s.trials.end());
  it->generation.reset();
  it->phase_timestamps.erase(it->phase_timestamps.begin() + 3);  // keep the phase order consistent
  const auto v = validate_session(s);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].trial_index, it->trial_index);
  EXPECT_NE(v[0].message.find("no generation"), std::string::npos);
}

TEST(Validation, DuplicateTrialIndex) {
  auto s = eight_trial_session();
  s.trials[3].trial_index = 2;
  const auto v = validate_session(s);
  ASSERT_FALSE(v.empty());
  EXPECT_NE(v[0].message.find("duplicate trial_index"), std::string::npos);
}

TEST(Validation, AlteredEnglishTranscript) {
  auto s = eight_trial_session();
  s.trials[0].transcript->english_text += " indeed";
  s.trials[0].transcript->word_count += 1;
  const auto v = validate_session(s);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].message.find("altered"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::string manifest_text(int neg, int neu) {
  json arr = json::array();
  for (int i = 0; i < neg + neu; ++i) {
    const bool n = i < neg;
    arr.push_back({{"stimulus_id", (n ? "n" : "u") + std::to_string(i)},
                   {"valence_class", n ? "Negative" : "Neutral"},
                   {"image_path", "img" + std::to_string(i) + ".png"}});
  }
  return json{{"version", 1}, {"stimuli", arr}}.dump(2);
}

}  // namespace

TEST(Manifest, LoadsAndCountsValences) {
  const auto m = storage::parse_manifest(manifest_text(80, 80));
  EXPECT_EQ(m.entries.size(), 160u);
  EXPECT_EQ(m.count(Emotion::Negative), 80u);
  EXPECT_EQ(m.count(Emotion::Neutral), 80u);
}

TEST(Manifest, DuplicateIdNamesIdAndLine) {
  const std::string text = R"({
  "version": 1,
  "stimuli": [
    {"stimulus_id": "a", "valence_class": "Negative", "image_path": "a.png"},
    {"stimulus_id": "b", "valence_class": "Neutral", "image_path": "b.png"},
    {"stimulus_id": "a", "valence_class": "Neutral", "image_path": "c.png"}
  ]
})";
  try {
    storage::parse_manifest(text);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Parse);
    EXPECT_NE(std::string(e.what()).find("'a'"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 6"), std::string::npos);
  }
}

TEST(Manifest, BadValenceHasLineNumber) {
  const std::string text =
      "{\"stimuli\": [\n {\"stimulus_id\": \"a\", \"valence_class\": \"Negative\", \"image_path\": \"a\"},\n"
      " {\"stimulus_id\": \"b\", \"valence_class\": \"Happy\", \"image_path\": \"b\"}\n]}";
  try {
    storage::parse_manifest(text);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Parse);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Manifest, EmptyFileIsError) {
  EXPECT_THROW(storage::parse_manifest(""), Error);
  EXPECT_THROW(storage::parse_manifest("  \n"), Error);
}

TEST(Manifest, ImageScaleOverrideRange) {
  auto entry = [](double a) {
    return json{{"stimuli", {{{"stimulus_id", "x"}, {"valence_class", "Negative"}, {"image_path", "x"},
                              {"image_scale_override", a}}}}}
        .dump();
  };
  EXPECT_DOUBLE_EQ(*storage::parse_manifest(entry(0.3)).entries[0].image_scale_override, 0.3);
  EXPECT_DOUBLE_EQ(*storage::parse_manifest(entry(0.7)).entries[0].image_scale_override, 0.7);
  EXPECT_THROW(storage::parse_manifest(entry(0.8)), Error);
  EXPECT_THROW(storage::parse_manifest(entry(0.1)), Error);
}

TEST(Manifest, MissingImagesAreWarningsAndPathsResolveAgainstManifestDir) {
  TempDir dir;
  std::ofstream(dir / "img0.png") << "x";
  storage::write_file_atomic(dir / "manifest.json", manifest_text(1, 1));
  const auto load = storage::load_manifest(dir / "manifest.json");
  EXPECT_EQ(load.manifest.entries[0].image_path, (dir / "img0.png").string());
  ASSERT_EQ(load.warnings.size(), 1u);
  EXPECT_NE(load.warnings[0].find("u1"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Session files

TEST(SessionWriter, AppendThenReloadGivesIdenticalTrials) {
  TempDir dir;
  const auto s = eight_trial_session();
  SessionRecord header = s;
  header.trials.clear();
  {
    auto w = storage::SessionWriter::create(dir / "s.jsonl", header);
    for (const auto& t : s.trials) w.append_trial(t);
    EXPECT_EQ(w.trials_written(), 8u);
  }
  const auto f = storage::read_session_file(dir / "s.jsonl");
  EXPECT_EQ(f.record, s);
  EXPECT_FALSE(f.torn_tail);
  EXPECT_EQ(storage::read_file(dir / "s.jsonl"), encode_session(s));
}

TEST(SessionWriter, SecondHandleIsRefused) {
  TempDir dir;
  SessionRecord header;
  header.session_id = "x";
  auto w = storage::SessionWriter::create(dir / "s.jsonl", header);
  try {
    storage::SessionWriter::resume(dir / "s.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Lock);
  }
  EXPECT_THROW(storage::SessionWriter::create(dir / "s.jsonl", header), Error);
}

TEST(SessionWriter, LockIsReleasedWhenWriterCloses) {
  TempDir dir;
  SessionRecord header;
  header.session_id = "x";
  { auto w = storage::SessionWriter::create(dir / "s.jsonl", header); }
  EXPECT_NO_THROW(storage::SessionWriter::resume(dir / "s.jsonl"));
}

TEST(SessionWriter, KillBetweenTrialsLeavesParseablePrefix) {
  TempDir dir;
  const auto s = eight_trial_session();
  SessionRecord header = s;
  header.trials.clear();
  const auto path = dir / "s.jsonl";
  const pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    auto w = storage::SessionWriter::create(path, header);
    for (int i = 0; i < 3; ++i) w.append_trial(s.trials[i]);
    ::kill(::getpid(), SIGKILL);
    ::_exit(0);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFSIGNALED(status));
  const auto f = storage::read_session_file(path);
  ASSERT_EQ(f.record.trials.size(), 3u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(f.record.trials[i], s.trials[i]);
}

TEST(SessionWriter, TornTailIsIgnoredThenTrimmedOnResume) {
  TempDir dir;
  const auto s = eight_trial_session();
  const auto full = encode_session(s);
  // Cut in the middle of the fourth trial line.
  std::size_t cut = 0;
  for (int i = 0; i < 4; ++i) cut = full.find('\n', cut) + 1;
  const std::string partial = full.substr(0, cut + 40);
  storage::write_file_atomic(dir / "s.jsonl", partial);

  const auto f = storage::read_session_file(dir / "s.jsonl");
  EXPECT_TRUE(f.torn_tail);
  EXPECT_EQ(f.record.trials.size(), 3u);
  EXPECT_EQ(f.warnings.size(), 1u);

  storage::SessionFile loaded;
  {
    auto w = storage::SessionWriter::resume(dir / "s.jsonl", &loaded);
    EXPECT_EQ(w.trials_written(), 3u);
    w.append_trial(s.trials[3]);
  }
  const auto g = storage::read_session_file(dir / "s.jsonl");
  EXPECT_FALSE(g.torn_tail);
  ASSERT_EQ(g.record.trials.size(), 4u);
  EXPECT_EQ(g.record.trials[3], s.trials[3]);
}

TEST(SessionWriter, CorruptMiddleLineIsParseError) {
  TempDir dir;
  auto text = encode_session(eight_trial_session());
  const auto nl = text.find('\n');
  text.insert(nl + 1, "{not json\n");
  storage::write_file_atomic(dir / "s.jsonl", text);
  EXPECT_THROW(storage::read_session_file(dir / "s.jsonl"), Error);
}

// ---------------------------------------------------------------------------
// Artifacts

TEST(Artifacts, ContentAddressedAndDeduplicated) {
  TempDir dir;
  storage::FileArtifactStore store(dir / "artifacts");
  const auto a = store.put(codec::as_bytes("image-bytes"));
  const auto b = store.put(codec::as_bytes("image-bytes"));
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.artifact_id, codec::sha256_hex(std::string_view("image-bytes")));
  EXPECT_EQ(a.path, "artifacts/" + a.artifact_id + ".bin");
  EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir / "artifacts"), {}), 1);
  EXPECT_EQ(*store.get(a), rlab::testing::bytes("image-bytes"));
  EXPECT_FALSE(store.get({"0000", "artifacts/0000.bin"}).has_value());
}

// ---------------------------------------------------------------------------
// CSV

TEST(Csv, TwoSessionsOfEightTrials) {
  auto s1 = eight_trial_session();
  auto s2 = s1;
  s2.session_id = "sess-2";
  s2.subject_id = "p02";
  std::ostringstream out;
  EXPECT_EQ(storage::write_csv(out, {s1, s2}), 16u);
  const auto text = out.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 17);
  EXPECT_EQ(text.substr(0, text.find("\r\n")),
            "subject_id,session_id,trial_index,condition,stimulus_id,raw_rating,remapped_rating,sentiment,alignment,"
            "word_count,reading_ease,transcript,flags");
}

TEST(Csv, QuotesFieldsWithCommasAndQuotes) {
  EXPECT_EQ(storage::csv_field("plain"), "plain");
  EXPECT_EQ(storage::csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(storage::csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(storage::csv_field("two\nlines"), "\"two\nlines\"");

  auto s = eight_trial_session();
  s.subject_id = "doe, jane";
  std::ostringstream out;
  storage::write_csv(out, {s});
  EXPECT_NE(out.str().find("\r\n\"doe, jane\",sess-1,0,"), std::string::npos);
}

TEST(Csv, EmptySessionListIsHeaderOnly) {
  TempDir dir;
  EXPECT_EQ(storage::export_csv({}, dir / "out.csv"), 0u);
  const auto text = storage::read_file(dir / "out.csv");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
}
