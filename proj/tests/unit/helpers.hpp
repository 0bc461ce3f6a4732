#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>

#include "rlab/mock_clients.hpp"
#include "rlab/protocol.hpp"
#include "rlab/storage.hpp"

namespace rlab::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("rlab_test_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

// n stimuli per valence, images held in memory.
struct SmallStimuli {
  std::vector<Stimulus> manifest;
  storage::MemoryStimulusLoader loader;

  explicit SmallStimuli(int per_valence = 4) {
    for (auto e : {Emotion::Negative, Emotion::Neutral}) {
      for (int i = 0; i < per_valence; ++i) {
        Stimulus s;
        s.stimulus_id = std::string(e == Emotion::Negative ? "neg" : "neu") + std::to_string(i);
        s.valence_class = e;
        s.image_path = "img/" + s.stimulus_id + ".txt";
        manifest.push_back(s);
        loader.add(s.image_path, e == Emotion::Negative ? "a man is injured on the road" : "a chair in a room");
      }
    }
  }
};

inline std::vector<std::uint8_t> bytes(std::string_view s) { return {s.begin(), s.end()}; }

// Every trial speaks "fixture:recover" and rates 6 after 1500 ms.
inline protocol::ScriptedUi default_ui() {
  return protocol::ScriptedUi([](int) { return bytes("fixture:recover"); },
                              [](const TrialRecord&) { return std::make_optional(std::make_pair(6, std::int64_t{1500})); });
}

struct Harness {
  mock::MockBackends mocks;
  clients::ServiceSuite services;
  SmallStimuli stimuli;
  storage::MemoryArtifactStore artifacts;
  VirtualClock clock;
  protocol::ScriptedUi ui;
  protocol::EngineContext ctx;

  explicit Harness(mock::MockSuiteOptions opts = {}, int per_valence = 4)
      : mocks(mock::make_mock_backends(opts)),
        services(mock::make_suite(mocks, opts.client_config)),
        stimuli(per_valence),
        ui(default_ui()),
        ctx{services, stimuli.loader, artifacts, clock, ui} {
    ctx.session_seed = 11;
  }

  protocol::PlannedTrial planned(const std::string& label, int stim = 0) const {
    const auto c = Condition::parse(label);
    const int offset = c.emotion == Emotion::Negative ? 0 : static_cast<int>(stimuli.manifest.size() / 2);
    return {c, stimuli.manifest[offset + stim]};
  }
};

}  // namespace rlab::testing
