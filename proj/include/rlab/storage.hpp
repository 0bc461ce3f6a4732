#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rlab/codec.hpp"
#include "rlab/domain.hpp"
#include "rlab/error.hpp"
#include "rlab/text_metrics.hpp"

namespace rlab::storage {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  const auto s = read_file(path);
  return {s.begin(), s.end()};
}

// Writes via a temporary file and rename so readers never see a torn file.
inline void write_file_atomic(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) fail(ErrorKind::Io, "short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Stimulus manifest

inline constexpr double kMinImageScaleOverride = 0.3;
inline constexpr double kMaxImageScaleOverride = 0.7;

struct StimulusManifest {
  int version = 1;
  std::vector<Stimulus> entries;

  std::size_t count(Emotion valence) const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                  [&](const Stimulus& s) { return s.valence_class == valence; }));
  }
};

struct ManifestLoad {
  StimulusManifest manifest;
  std::vector<std::string> warnings;  // e.g. missing image files
};

namespace detail {

// Line numbers of the objects inside the top-level "stimuli" array, in order.
inline std::vector<int> entry_lines(std::string_view text) {
  std::vector<int> lines;
  int line = 1;
  int depth = 0;
  bool in_string = false;
  bool escape = false;
  for (char c : text) {
    if (c == '\n') ++line;
    if (in_string) {
      if (escape) escape = false;
      else if (c == '\\') escape = true;
      else if (c == '"') in_string = false;
      continue;
    }
    switch (c) {
      case '"': in_string = true; break;
      case '{':
      case '[':
        if (c == '{' && depth == 2) lines.push_back(line);
        ++depth;
        break;
      case '}':
      case ']': --depth; break;
      default: break;
    }
  }
  return lines;
}

}  // namespace detail

inline StimulusManifest parse_manifest(std::string_view text, const fs::path& base_dir = {}) {
  require(!text.empty() && text.find_first_not_of(" \t\r\n") != std::string_view::npos, ErrorKind::Parse,
          "manifest is empty");
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Parse, std::string("manifest is not valid JSON: ") + e.what());
  }
  require(j.is_object() && j.contains("stimuli") && j["stimuli"].is_array(), ErrorKind::Parse,
          "manifest must be an object with a \"stimuli\" array");
  const auto lines = detail::entry_lines(text);
  auto where = [&](std::size_t i) {
    return i < lines.size() ? "line " + std::to_string(lines[i]) : "entry " + std::to_string(i);
  };

  StimulusManifest m;
  m.version = j.value("version", 1);
  std::set<std::string> ids;
  const auto& arr = j["stimuli"];
  for (std::size_t i = 0; i < arr.size(); ++i) {
    Stimulus s;
    try {
      s = arr[i].get<Stimulus>();
    } catch (const Error& e) {
      fail(ErrorKind::Parse, where(i) + ": " + e.what());
    } catch (const json::exception& e) {
      fail(ErrorKind::Parse, where(i) + ": " + e.what());
    }
    require(!s.stimulus_id.empty(), ErrorKind::Parse, where(i) + ": empty stimulus_id");
    require(ids.insert(s.stimulus_id).second, ErrorKind::Parse,
            where(i) + ": duplicate stimulus_id '" + s.stimulus_id + "'");
    if (s.image_scale_override) {
      const double a = *s.image_scale_override;
      require(a >= kMinImageScaleOverride && a <= kMaxImageScaleOverride, ErrorKind::Parse,
              where(i) + ": image_scale_override " + std::to_string(a) + " outside [0.3, 0.7]");
    }
    if (!base_dir.empty() && fs::path(s.image_path).is_relative()) s.image_path = (base_dir / s.image_path).string();
    m.entries.push_back(std::move(s));
  }
  return m;
}

inline ManifestLoad load_manifest(const fs::path& path) {
  require(fs::exists(path), ErrorKind::Io, "manifest '" + path.string() + "' does not exist");
  ManifestLoad out;
  out.manifest = parse_manifest(read_file(path), path.parent_path());
  for (const auto& s : out.manifest.entries) {
    if (!fs::exists(s.image_path)) out.warnings.push_back("image for '" + s.stimulus_id + "' not found: " + s.image_path);
  }
  return out;
}

inline json manifest_json(const StimulusManifest& m) {
  return json{{"version", m.version}, {"stimuli", m.entries}};
}

// ---------------------------------------------------------------------------
// Stimulus images and generated artifacts

class StimulusLoader {
 public:
  virtual ~StimulusLoader() = default;
  virtual std::optional<std::vector<std::uint8_t>> load(const Stimulus& s) const = 0;
  virtual bool exists(const Stimulus& s) const { return load(s).has_value(); }
};

class FileStimulusLoader final : public StimulusLoader {
 public:
  std::optional<std::vector<std::uint8_t>> load(const Stimulus& s) const override {
    if (!fs::exists(s.image_path)) return std::nullopt;
    return read_bytes(s.image_path);
  }
  bool exists(const Stimulus& s) const override { return fs::exists(s.image_path); }
};

class MemoryStimulusLoader final : public StimulusLoader {
 public:
  void add(const std::string& image_path, std::string content) { images_[image_path] = std::move(content); }

  std::optional<std::vector<std::uint8_t>> load(const Stimulus& s) const override {
    auto it = images_.find(s.image_path);
    if (it == images_.end()) return std::nullopt;
    return std::vector<std::uint8_t>(it->second.begin(), it->second.end());
  }

  const std::map<std::string, std::string>& images() const { return images_; }

 private:
  std::map<std::string, std::string> images_;
};

// Content-addressed: an artifact's id is the sha256 of its bytes.
class ArtifactStore {
 public:
  virtual ~ArtifactStore() = default;
  virtual ArtifactRef put(std::span<const std::uint8_t> bytes) = 0;
  virtual std::optional<std::vector<std::uint8_t>> get(const ArtifactRef& ref) const = 0;
};

// Recorded paths are relative ("artifacts/<sha256>.bin") so session files
// do not depend on where the output directory lives.
inline std::string artifact_relative_path(const std::string& artifact_id) { return "artifacts/" + artifact_id + ".bin"; }

class FileArtifactStore final : public ArtifactStore {
 public:
  explicit FileArtifactStore(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  ArtifactRef put(std::span<const std::uint8_t> bytes) override {
    ArtifactRef ref{codec::sha256_hex(bytes), {}};
    ref.path = artifact_relative_path(ref.artifact_id);
    const fs::path path = dir_ / (ref.artifact_id + ".bin");
    std::lock_guard lock(mu_);
    if (!fs::exists(path)) {
      write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    }
    return ref;
  }

  std::optional<std::vector<std::uint8_t>> get(const ArtifactRef& ref) const override {
    const fs::path path = dir_ / (ref.artifact_id + ".bin");
    if (!fs::exists(path)) return std::nullopt;
    return read_bytes(path);
  }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  mutable std::mutex mu_;
};

class MemoryArtifactStore final : public ArtifactStore {
 public:
  ArtifactRef put(std::span<const std::uint8_t> bytes) override {
    ArtifactRef ref{codec::sha256_hex(bytes), {}};
    ref.path = artifact_relative_path(ref.artifact_id);
    std::lock_guard lock(mu_);
    blobs_.try_emplace(ref.artifact_id, bytes.begin(), bytes.end());
    return ref;
  }

  std::optional<std::vector<std::uint8_t>> get(const ArtifactRef& ref) const override {
    std::lock_guard lock(mu_);
    auto it = blobs_.find(ref.artifact_id);
    if (it == blobs_.end()) return std::nullopt;
    return it->second;
  }

  std::map<std::string, std::vector<std::uint8_t>> snapshot() const {
    std::lock_guard lock(mu_);
    return blobs_;
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::vector<std::uint8_t>> blobs_;
};

// ---------------------------------------------------------------------------
// Session files: JSON Lines, header line then one line per trial.

enum class Durability { Flush, Sync };

class FileDescriptor {
 public:
  FileDescriptor() = default;
  explicit FileDescriptor(int fd) : fd_(fd) {}
  FileDescriptor(const FileDescriptor&) = delete;
  FileDescriptor& operator=(const FileDescriptor&) = delete;
  FileDescriptor(FileDescriptor&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  FileDescriptor& operator=(FileDescriptor&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~FileDescriptor() { reset(); }

  int get() const { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

struct SessionFile {
  SessionRecord record;
  std::vector<std::string> warnings;
  bool torn_tail = false;          // last line was incomplete and ignored
  std::size_t valid_bytes = 0;     // length of the parseable prefix
};

inline SessionFile parse_session_text(std::string_view text) {
  SessionFile out;
  std::optional<SessionRecord> header;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const bool complete = nl != std::string_view::npos;
    const auto line = text.substr(pos, complete ? nl - pos : std::string_view::npos);
    ++line_no;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      if (!complete) {
        out.torn_tail = true;
        out.warnings.push_back("ignored incomplete final line " + std::to_string(line_no));
        break;
      }
      fail(ErrorKind::Parse, "session line " + std::to_string(line_no) + " is not valid JSON");
    }
    try {
      if (!header) header = session_header_from_json(j);
      else header->trials.push_back(j.get<TrialRecord>());
    } catch (const json::exception& e) {
      fail(ErrorKind::Parse, "session line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      fail(ErrorKind::Parse, "session line " + std::to_string(line_no) + ": " + e.what());
    }
    pos = complete ? nl + 1 : text.size();
    out.valid_bytes = pos;
  }
  require(header.has_value(), ErrorKind::Parse, "session file has no header line");
  out.record = std::move(*header);
  return out;
}

inline SessionFile read_session_file(const fs::path& path) { return parse_session_text(read_file(path)); }

// Single writer per session file, enforced with an advisory flock. Each
// trial line is written with one write(2) before append_trial returns, so a
// crash leaves a readable prefix of complete trials.
class SessionWriter {
 public:
  static SessionWriter create(const fs::path& path, const SessionRecord& header, Durability d = Durability::Flush) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    FileDescriptor fd(::open(path.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_APPEND | O_CLOEXEC, 0644));
    if (fd.get() < 0) fail(ErrorKind::Io, "cannot create session file '" + path.string() + "': " + std::strerror(errno));
    SessionWriter w(path, std::move(fd), d);
    w.lock();
    w.write_line(encode_header_line(header));
    return w;
  }

  // Reopens an existing file for appending; a torn final line is cut off.
  static SessionWriter resume(const fs::path& path, SessionFile* loaded = nullptr, Durability d = Durability::Flush) {
    FileDescriptor fd(::open(path.c_str(), O_RDWR | O_APPEND | O_CLOEXEC));
    if (fd.get() < 0) fail(ErrorKind::Io, "cannot open session file '" + path.string() + "': " + std::strerror(errno));
    SessionWriter w(path, std::move(fd), d);
    w.lock();
    auto file = read_session_file(path);
    if (file.torn_tail && ::ftruncate(w.fd_.get(), static_cast<off_t>(file.valid_bytes)) != 0) {
      fail(ErrorKind::Io, "cannot trim torn tail of '" + path.string() + "'");
    }
    w.trials_ = file.record.trials.size();
    if (loaded) *loaded = std::move(file);
    return w;
  }

  void append_trial(const TrialRecord& trial) {
    write_line(encode_trial_line(trial));
    ++trials_;
  }

  std::size_t trials_written() const { return trials_; }
  const fs::path& path() const { return path_; }

 private:
  SessionWriter(fs::path path, FileDescriptor fd, Durability d) : path_(std::move(path)), fd_(std::move(fd)), durability_(d) {}

  void lock() {
    if (::flock(fd_.get(), LOCK_EX | LOCK_NB) != 0) {
      fail(ErrorKind::Lock, "session file '" + path_.string() + "' is locked by another writer");
    }
  }

  void write_line(std::string line) {
    line.push_back('\n');
    const char* p = line.data();
    std::size_t left = line.size();
    while (left > 0) {
      const ssize_t n = ::write(fd_.get(), p, left);
      if (n < 0) {
        if (errno == EINTR) continue;
        fail(ErrorKind::Io, "write to '" + path_.string() + "' failed: " + std::strerror(errno));
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
    if (durability_ == Durability::Sync && ::fdatasync(fd_.get()) != 0) {
      fail(ErrorKind::Io, "fdatasync on '" + path_.string() + "' failed");
    }
  }

  fs::path path_;
  FileDescriptor fd_;
  Durability durability_;
  std::size_t trials_ = 0;
};

inline void write_session_file(const fs::path& path, const SessionRecord& s, Durability d = Durability::Flush) {
  auto w = SessionWriter::create(path, s, d);
  for (const auto& t : s.trials) w.append_trial(t);
}

// ---------------------------------------------------------------------------
// CSV export (RFC 4180)

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

// Shortest round-trip decimal form.
inline std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline const std::vector<std::string>& csv_header() {
  static const std::vector<std::string> h{"subject_id", "session_id", "trial_index", "condition", "stimulus_id",
                                          "raw_rating", "remapped_rating", "sentiment", "alignment", "word_count",
                                          "reading_ease", "transcript", "flags"};
  return h;
}

inline std::size_t write_csv(std::ostream& out, const std::vector<SessionRecord>& sessions) {
  const auto& header = csv_header();
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\r\n";
  std::size_t rows = 0;
  for (const auto& s : sessions) {
    for (const auto& t : s.trials) {
      std::string flags;
      for (auto f : t.flags) {
        if (!flags.empty()) flags += ';';
        flags += to_string(f);
      }
      std::vector<std::string> row{
          s.subject_id,
          s.session_id,
          std::to_string(t.trial_index),
          t.condition.label(),
          t.stimulus.stimulus_id,
          t.rating ? std::to_string(t.rating->raw()) : "",
          t.rating ? format_number(t.rating->remapped()) : "",
          t.sentiment ? format_number(text::sentiment_score(*t.sentiment)) : "",
          t.alignment ? format_number(*t.alignment) : "",
          t.transcript ? std::to_string(t.transcript->word_count) : "",
          t.transcript && t.transcript->reading_ease ? format_number(*t.transcript->reading_ease) : "",
          t.transcript ? t.transcript->english_text : "",
          flags};
      for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_field(row[i]);
      out << "\r\n";
      ++rows;
    }
  }
  return rows;
}

inline std::size_t export_csv(const std::vector<SessionRecord>& sessions, const fs::path& path) {
  std::ostringstream ss;
  const auto rows = write_csv(ss, sessions);
  write_file_atomic(path, ss.str());
  return rows;
}

// All *.jsonl files of a directory, in lexicographic path order.
inline std::vector<fs::path> session_files_in(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::Io, "'" + dir.string() + "' is not a directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".jsonl") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace rlab::storage
