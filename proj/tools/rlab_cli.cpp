// rlab: serve | simulate | analyze | replay | export
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
// error.

#include <csignal>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <stop_token>
#include <string>

#include "CLI11.hpp"
#include "rlab/analysis.hpp"
#include "rlab/mock_clients.hpp"
#include "rlab/protocol.hpp"
#include "rlab/remote_transport.hpp"
#include "rlab/replay.hpp"
#include "rlab/simulator.hpp"
#include "rlab/storage.hpp"
#include "rlab/version.hpp"
#include "rlab/ws_server.hpp"

namespace fs = std::filesystem;
using namespace rlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Validation:
    case ErrorKind::Parse:
    case ErrorKind::Planning:
    case ErrorKind::Shape:
      return kExitConfig;
    default:
      return kExitRuntime;
  }
}

std::string utc_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json load_json_file(const std::string& path, const char* what) {
  std::string text;
  try {
    text = storage::read_file(path);
  } catch (const Error&) {
    fail(ErrorKind::Validation, std::string("cannot read ") + what + " '" + path + "'");
  }
  auto j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::Parse, std::string(what) + " '" + path + "' is not valid JSON");
  return j;
}

// --config overrides: keys use the flag names with '-' replaced by '_'.
template <typename T>
void override_from(const json& cfg, const char* key, T& target) {
  if (auto it = cfg.find(key); it != cfg.end()) {
    try {
      target = it->get<T>();
    } catch (const json::exception&) {
      fail(ErrorKind::Validation, std::string("config key '") + key + "' has the wrong type");
    }
  }
}

// ---------------------------------------------------------------------------
// Service backends

const std::vector<std::string> kServices{"asr", "translate", "generate", "caption", "caption_fallback", "embed",
                                         "sentiment"};

std::string env_name(const std::string& service, const char* suffix) {
  static const std::map<std::string, std::string> kEnvStem{
      {"asr", "ASR"},         {"translate", "TRANSLATE"}, {"generate", "GEN"},          {"caption", "CAPTION"},
      {"caption_fallback", "CAPTION_FALLBACK"}, {"embed", "EMBED"}, {"sentiment", "SENTIMENT"}};
  return "RLAB_" + kEnvStem.at(service) + "_" + suffix;
}

// Remote endpoints come from config "clients".<service> or RLAB_<STEM>_ENDPOINT
// (RLAB_ASR_ENDPOINT, RLAB_GEN_ENDPOINT, ...); the bearer token is read from
// RLAB_<STEM>_TOKEN unless the config names another variable.
clients::ServiceSuite remote_suite(const json& clients_cfg) {
  std::map<std::string, clients::ClientConfig> cfgs;
  std::vector<std::string> missing;
  for (const auto& s : kServices) {
    clients::ClientConfig c;
    c.auth_token_env = env_name(s, "TOKEN");
    if (const char* url = std::getenv(env_name(s, "ENDPOINT").c_str())) c.endpoint = url;
    if (clients_cfg.contains(s)) from_json(clients_cfg.at(s), c);
    if (c.endpoint.empty()) missing.push_back(env_name(s, "ENDPOINT"));
    c.validate();
    cfgs[s] = c;
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    fail(ErrorKind::Validation, "remote backend needs endpoints: " + list);
  }
  using clients::ServiceClient;
  auto t = [&](const std::string& s) { return std::make_shared<clients::HttpTransport>(cfgs[s]); };
  return clients::ServiceSuite{
      clients::SpeechClient(ServiceClient("asr", t("asr"), cfgs["asr"])),
      clients::TranslationClient(ServiceClient("translate", t("translate"), cfgs["translate"])),
      clients::GenerationClient(ServiceClient("generate", t("generate"), cfgs["generate"])),
      clients::CaptionClient(ServiceClient("caption", t("caption"), cfgs["caption"]),
                             ServiceClient("caption_fallback", t("caption_fallback"), cfgs["caption_fallback"])),
      clients::EmbeddingClient(ServiceClient("embed", t("embed"), cfgs["embed"])),
      clients::SentimentClient(ServiceClient("sentiment", t("sentiment"), cfgs["sentiment"])),
  };
}

std::vector<SessionRecord> load_sessions(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::Validation, "sessions directory '" + dir.string() + "' does not exist");
  std::vector<SessionRecord> out;
  for (const auto& p : storage::session_files_in(dir)) {
    auto f = storage::read_session_file(p);
    for (const auto& w : f.warnings) std::cerr << "warning: " << p.filename().string() << ": " << w << "\n";
    out.push_back(std::move(f.record));
  }
  if (out.empty()) fail(ErrorKind::Validation, "no session files in '" + dir.string() + "'");
  return out;
}

// ---------------------------------------------------------------------------
// serve

struct ServeArgs {
  std::string manifest;
  int trials_per_cell = protocol::kDefaultTrialsPerCell;
  std::uint64_t seed = 0;
  std::string schedule_json;
  std::string backend = "mock";
  std::string out = "run";
  std::string subject = "p01";
  std::string session_id;
  std::string language = "EN";
  std::string address = "127.0.0.1";
  int port = 8765;
  std::optional<int> max_trials;
  std::string resume;
  double image_scale = kDefaultImageScale;
};

int cmd_serve(ServeArgs a, const json& cfg) {
  override_from(cfg, "manifest", a.manifest);
  override_from(cfg, "trials_per_cell", a.trials_per_cell);
  override_from(cfg, "seed", a.seed);
  override_from(cfg, "backend", a.backend);
  override_from(cfg, "out", a.out);
  override_from(cfg, "subject", a.subject);
  override_from(cfg, "language", a.language);
  override_from(cfg, "port", a.port);
  override_from(cfg, "image_scale", a.image_scale);

  if (a.manifest.empty()) fail(ErrorKind::Validation, "--manifest is required");
  if (!fs::exists(a.manifest)) fail(ErrorKind::Validation, "manifest '" + a.manifest + "' not found");
  if (a.backend != "mock" && a.backend != "remote") fail(ErrorKind::Validation, "--backend must be mock or remote");
  require(a.port >= 0 && a.port <= 65535, ErrorKind::Validation, "--port out of range");

  protocol::PhaseSchedule schedule;
  if (cfg.contains("schedule")) schedule = cfg.at("schedule").get<protocol::PhaseSchedule>();
  if (!a.schedule_json.empty()) schedule = load_json_file(a.schedule_json, "schedule").get<protocol::PhaseSchedule>();
  schedule.validate();
  const auto language = parse_language(a.language);

  const auto loaded = storage::load_manifest(a.manifest);
  for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << "\n";
  const auto plan = protocol::plan_session(loaded.manifest.entries, a.trials_per_cell, a.seed);

  std::optional<mock::MockBackends> mocks;
  std::optional<clients::ServiceSuite> suite;
  if (a.backend == "mock") {
    mocks.emplace(mock::make_mock_backends());
    suite.emplace(mock::make_suite(*mocks));
  } else {
    suite.emplace(remote_suite(cfg.value("clients", json::object())));
  }

  const json config{{"mode", "serve"},
                    {"manifest_sha256", codec::sha256_hex(storage::read_file(a.manifest))},
                    {"trials_per_cell", a.trials_per_cell},
                    {"schedule", schedule},
                    {"backend", a.backend},
                    {"language", a.language},
                    {"image_scale", a.image_scale}};
  const auto stamp = make_stamp(config, a.seed);

  const fs::path out(a.out);
  storage::FileArtifactStore artifacts(out / "artifacts");
  storage::FileStimulusLoader stimuli;

  SessionRecord session;
  std::optional<storage::SessionWriter> writer;
  if (!a.resume.empty()) {
    storage::SessionFile file;
    writer.emplace(storage::SessionWriter::resume(a.resume, &file));
    for (const auto& w : file.warnings) std::cerr << "warning: " << w << "\n";
    session = std::move(file.record);
    require(session.seed == a.seed, ErrorKind::Validation,
            "--seed " + std::to_string(a.seed) + " does not match the session seed " + std::to_string(session.seed));
  } else {
    session.session_id = a.session_id.empty() ? a.subject + "-" + std::to_string(a.seed) : a.session_id;
    session.subject_id = a.subject;
    session.language = language;
    session.seed = a.seed;
    session.created_at = utc_now();
    session.stamp = stamp;
    writer.emplace(storage::SessionWriter::create(out / "sessions" / (session.session_id + ".jsonl"), session));
  }

  SteadyClock clock;
  server::ParticipantChannel channel(clock, stimuli, artifacts);
  channel.set_session_info({{"session_id", session.session_id}, {"trials", plan.trials.size()},
                            {"next_trial", session.trials.size()}, {"stamp", stamp}});
  server::SessionServer srv({a.address, static_cast<unsigned short>(a.port)}, channel);

  std::stop_source stop;
  server::net::signal_set signals(srv.io(), SIGINT, SIGTERM);
  signals.async_wait([&](const boost::system::error_code& ec, int) {
    if (ec) return;
    stop.request_stop();
    clock.interrupt();
  });
  srv.start();
  std::cout << "listening on " << a.address << ":" << srv.port() << "\n"
            << "session " << session.session_id << " file " << writer->path().string() << "\n"
            << std::flush;

  protocol::EngineContext ctx{*suite, stimuli, artifacts, clock, channel};
  ctx.language = session.language;
  ctx.session_seed = session.seed;
  ctx.generation.image_scale = a.image_scale;
  ctx.stop = stop.get_token();

  const auto outcome = server::serve_session(plan, schedule, ctx, channel, std::move(session), *writer, stop.get_token(),
                                             a.max_trials);
  signals.cancel();
  srv.stop();
  std::cout << (outcome.completed ? "completed" : "paused") << " at trial " << outcome.next_trial << " of "
            << plan.trials.size();
  if (!outcome.completed) std::cout << " (" << outcome.pause_reason << "); resume with --resume " << writer->path().string();
  std::cout << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  int subjects = 20;
  int trials_per_cell = protocol::kDefaultTrialsPerCell;
  std::string model = "effect";
  std::uint64_t seed = 0;
  std::string out = "sim";
  unsigned threads = 0;
};

sim::ModelTemplate load_model(const std::string& model) {
  if (model == "effect") return sim::effect_template();
  if (model == "null") return sim::null_template();
  auto t = load_json_file(model, "model").get<sim::ModelTemplate>();
  t.model.validate();
  return t;
}

int cmd_simulate(SimulateArgs a, const json& cfg) {
  override_from(cfg, "subjects", a.subjects);
  override_from(cfg, "trials_per_cell", a.trials_per_cell);
  override_from(cfg, "model", a.model);
  override_from(cfg, "seed", a.seed);
  override_from(cfg, "out", a.out);
  require(a.subjects >= 2, ErrorKind::Validation, "--subjects must be >= 2");
  require(a.trials_per_cell >= 1, ErrorKind::Validation, "--trials-per-cell must be >= 1");
  const auto tmpl = load_model(a.model);

  sim::CohortOptions opts;
  opts.threads = a.threads;
  if (cfg.contains("schedule")) opts.schedule = cfg.at("schedule").get<protocol::PhaseSchedule>();
  override_from(cfg, "image_scale", opts.generation.image_scale);

  const fs::path out(a.out);
  const auto sessions_dir = out / "sessions";
  if (fs::exists(sessions_dir) && !fs::is_empty(sessions_dir)) {
    fail(ErrorKind::Validation, "output '" + sessions_dir.string() + "' already has sessions");
  }
  fs::create_directories(sessions_dir);
  storage::FileArtifactStore artifacts(out / "artifacts");
  const auto cohort = sim::simulate_cohort(a.subjects, a.trials_per_cell, tmpl, a.seed, opts, artifacts, sessions_dir);
  sim::write_stimulus_set(cohort.stimuli, out);
  storage::write_file_atomic(
      out / "simulation.json",
      json{{"stamp", cohort.stamp}, {"config", sim::cohort_config_json(a.subjects, a.trials_per_cell, tmpl, opts)}}.dump(2) +
          "\n");
  std::cout << "simulated " << cohort.sessions.size() << " sessions into " << sessions_dir.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::string sessions;
  std::optional<int> family_size;
  std::string out = "report.json";
  std::string plot_dir;
  bool emit_plot_data = false;
};

int cmd_analyze(AnalyzeArgs a, const json& cfg) {
  override_from(cfg, "sessions", a.sessions);
  override_from(cfg, "out", a.out);
  if (a.sessions.empty()) fail(ErrorKind::Validation, "--sessions is required");
  analysis::AnalysisConfig acfg;
  if (cfg.contains("analysis")) from_json(cfg.at("analysis"), acfg);
  if (cfg.contains("family_size")) acfg.posthoc_family_size = cfg.at("family_size").get<int>();
  if (a.family_size) acfg.posthoc_family_size = *a.family_size;
  acfg.validate();

  const auto sessions = load_sessions(a.sessions);
  auto report = analysis::analyze_sessions(sessions, acfg);
  std::uint64_t seed = 0;
  for (const auto& s : sessions) seed = derive_seed(seed, {s.seed});
  json inputs = json::array();
  for (const auto& p : storage::session_files_in(a.sessions)) inputs.push_back(codec::sha256_hex(storage::read_file(p)));
  report.stamp = make_stamp(json{{"mode", "analyze"}, {"analysis", analysis::config_json(acfg)}, {"inputs", inputs}}, seed);

  fs::path json_path(a.out);
  if (json_path.extension() != ".json") json_path /= "report.json";
  if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
  storage::write_file_atomic(json_path, analysis::report_json_text(report));
  auto md_path = json_path;
  md_path.replace_extension(".md");
  storage::write_file_atomic(md_path, analysis::to_markdown(report));
  if (a.emit_plot_data) {
    const fs::path dir = a.plot_dir.empty() ? json_path.parent_path() / "plot_data" : fs::path(a.plot_dir);
    fs::create_directories(dir);
    analysis::write_plot_data(sessions, acfg, dir);
    storage::write_file_atomic(dir / "stamp.json", report.stamp.dump(2) + "\n");
  }
  std::cout << "analyzed " << report.n_subjects << " subjects; wrote " << json_path.string() << " and "
            << md_path.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// replay

struct ReplayArgs {
  std::string session;
  std::string root;  // directory that holds artifacts/
  std::string out;
  bool recaption = false;
};

int cmd_replay(ReplayArgs a, const json& cfg) {
  if (!fs::exists(a.session)) fail(ErrorKind::Validation, "session file '" + a.session + "' not found");
  const fs::path session_path(a.session);
  const fs::path root = a.root.empty() ? session_path.parent_path().parent_path() : fs::path(a.root);
  storage::FileArtifactStore artifacts(root / "artifacts");

  sim::CohortOptions defaults;
  override_from(cfg, "embedding_dim", defaults.services.embedding_dim);
  // The simulator's backend carries the prompt-bank sentiment fixtures;
  // other text goes through the mock lexicon.
  sim::SimBackend backend(defaults.bank, defaults.services);

  replay::ReplayOptions opts;
  opts.recaption = a.recaption;
  const auto text = storage::read_file(session_path);
  const auto report = replay::replay_session(text, backend.services, artifacts, opts);
  json j = replay::to_json(report);
  j["stamp"] = make_stamp(json{{"mode", "replay"}, {"session_sha256", codec::sha256_hex(text)},
                              {"recaption", a.recaption}, {"embedding_dim", defaults.services.embedding_dim}},
                         storage::parse_session_text(text).record.seed);
  const auto dumped = j.dump(2) + "\n";
  if (!a.out.empty()) storage::write_file_atomic(a.out, dumped);
  std::cout << dumped;
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  if (!report.mismatches.empty() || !report.violations.empty()) {
    std::cerr << report.mismatches.size() << " mismatch(es), " << report.violations.size() << " violation(s)\n";
    return kExitRuntime;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// export

int cmd_export(const std::string& sessions_dir, const std::string& out) {
  const auto sessions = load_sessions(sessions_dir);
  const auto rows = storage::export_csv(sessions, out);
  json inputs = json::array();
  for (const auto& p : storage::session_files_in(sessions_dir)) inputs.push_back(codec::sha256_hex(storage::read_file(p)));
  storage::write_file_atomic(out + ".stamp.json", make_stamp(json{{"mode", "export"}, {"inputs", inputs}}, 0).dump(2) + "\n");
  std::cout << "exported " << rows << " rows to " << out << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rlab: timed reappraisal sessions, simulation and analysis"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON file whose keys override flags");

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "host one participant session over WebSocket");
  s->add_option("--manifest", serve.manifest, "stimulus manifest.json");
  s->add_option("--trials-per-cell", serve.trials_per_cell);
  s->add_option("--seed", serve.seed);
  s->add_option("--schedule-json", serve.schedule_json, "phase durations in ms");
  s->add_option("--backend", serve.backend, "mock|remote");
  s->add_option("--out", serve.out, "output root (sessions/, artifacts/)");
  s->add_option("--subject", serve.subject);
  s->add_option("--session-id", serve.session_id);
  s->add_option("--language", serve.language, "EN|IT|DE|FR");
  s->add_option("--address", serve.address);
  s->add_option("--port", serve.port, "0 picks a free port");
  s->add_option("--max-trials", serve.max_trials, "pause after this many trials");
  s->add_option("--resume", serve.resume, "session file to continue");
  s->add_option("--image-scale", serve.image_scale);

  SimulateArgs simulate;
  auto* m = app.add_subcommand("simulate", "run a synthetic cohort through the protocol");
  m->add_option("--subjects", simulate.subjects);
  m->add_option("--trials-per-cell", simulate.trials_per_cell);
  m->add_option("--model", simulate.model, "model JSON, or 'effect' / 'null'");
  m->add_option("--seed", simulate.seed);
  m->add_option("--out", simulate.out);
  m->add_option("--threads", simulate.threads);

  AnalyzeArgs analyze;
  auto* an = app.add_subcommand("analyze", "ANOVA, post-hoc tests, correlations and regressions");
  an->add_option("--sessions", analyze.sessions, "directory of session .jsonl files");
  an->add_option("--family-size", analyze.family_size, "Bonferroni family size for post-hoc tests");
  an->add_option("--out", analyze.out, "report.json path or directory");
  an->add_flag("--emit-plot-data", analyze.emit_plot_data, "write per-figure CSVs");
  an->add_option("--plot-dir", analyze.plot_dir);

  ReplayArgs rep;
  auto* r = app.add_subcommand("replay", "recompute derived fields of a session and flag mismatches");
  r->add_option("session", rep.session)->required();
  r->add_option("--root", rep.root, "directory containing artifacts/");
  r->add_option("--out", rep.out);
  r->add_flag("--recaption", rep.recaption);

  std::string export_sessions, export_out = "export.csv";
  auto* e = app.add_subcommand("export", "flatten sessions to CSV");
  e->add_option("--sessions", export_sessions)->required();
  e->add_option("--out", export_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    json cfg = json::object();
    if (!config_path.empty()) {
      cfg = load_json_file(config_path, "config");
      require(cfg.is_object(), ErrorKind::Validation, "config must be a JSON object");
    }
    if (s->parsed()) return cmd_serve(serve, cfg);
    if (m->parsed()) return cmd_simulate(simulate, cfg);
    if (an->parsed()) return cmd_analyze(analyze, cfg);
    if (r->parsed()) return cmd_replay(rep, cfg);
    if (e->parsed()) return cmd_export(export_sessions, export_out);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return exit_code_for(err.kind());
  } catch (const json::exception& err) {
    std::cerr << "error: invalid configuration: " << err.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
