#pragma once

// Session-control server: one participant at a time over a WebSocket.
//
// Server -> client: hello, phase_enter {phase, deadline_ms, trial_index,
// server_ms, payload}, rating_ack, session {state}, clock_sync, warning,
// error. Client -> client: audio_chunk {seq, pcm_b64}, rating {raw},
// session_pause, session_resume, clock_sync {client_ms}.
//
// The network runs on its own io thread; the protocol engine runs on the
// caller's thread and talks to the participant through ParticipantChannel.

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stop_token>
#include <string>
#include <thread>
#include <vector>

#include "rlab/codec.hpp"
#include "rlab/domain.hpp"
#include "rlab/protocol.hpp"
#include "rlab/storage.hpp"

namespace rlab::server {

namespace beast = boost::beast;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

class Connection : public std::enable_shared_from_this<Connection> {
 public:
  using MessageFn = std::function<void(const std::shared_ptr<Connection>&, const std::string&)>;
  using CloseFn = std::function<void(const std::shared_ptr<Connection>&)>;

  Connection(tcp::socket socket, MessageFn on_message, CloseFn on_close)
      : ws_(std::move(socket)), on_message_(std::move(on_message)), on_close_(std::move(on_close)) {}

  void start(std::function<void(const std::shared_ptr<Connection>&)> on_open) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept([self = shared_from_this(), on_open = std::move(on_open)](beast::error_code ec) {
      if (ec) return self->finish();
      on_open(self);
      self->read();
    });
  }

  // Thread-safe; messages are written in order.
  void send(std::string text) {
    net::post(ws_.get_executor(), [self = shared_from_this(), text = std::move(text)]() mutable {
      if (self->closed_) return;
      self->outbox_.push_back(std::move(text));
      if (self->outbox_.size() == 1) self->write();
    });
  }

  void close() {
    net::post(ws_.get_executor(), [self = shared_from_this()] {
      if (self->closed_) return;
      self->ws_.async_close(websocket::close_code::normal, [self](beast::error_code) { self->finish(); });
    });
  }

 private:
  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->finish();
      const auto text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->on_message_(self, text);
      self->read();
    });
  }

  void write() {
    ws_.text(true);
    ws_.async_write(net::buffer(outbox_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->finish();
      self->outbox_.pop_front();
      if (!self->outbox_.empty()) self->write();
    });
  }

  void finish() {
    if (closed_) return;
    closed_ = true;
    outbox_.clear();
    on_close_(shared_from_this());
  }

  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  std::deque<std::string> outbox_;
  MessageFn on_message_;
  CloseFn on_close_;
  bool closed_ = false;
};

// The engine-facing side of the participant connection.
class ParticipantChannel final : public protocol::UiChannel {
 public:
  ParticipantChannel(Clock& clock, const storage::StimulusLoader& stimuli, const storage::ArtifactStore& artifacts)
      : clock_(clock), stimuli_(stimuli), artifacts_(artifacts) {}

  void set_session_info(json info) {
    std::lock_guard lock(mu_);
    session_info_ = std::move(info);
  }

  // --- network side (io thread) ---

  // Returns false when another participant is already connected.
  bool attach(const std::shared_ptr<Connection>& conn) {
    {
      std::lock_guard lock(mu_);
      if (conn_) return false;
      conn_ = conn;
      ++generation_;
      json hello{{"type", "hello"}, {"server_ms", clock_.now_ms()}, {"session", session_info_}};
      conn_->send(hello.dump());
    }
    cv_.notify_all();
    return true;
  }

  // Drops the connection without a close handshake; used once the io loop
  // has stopped, so the socket never outlives its io_context.
  void release() {
    std::shared_ptr<Connection> old;
    {
      std::lock_guard lock(mu_);
      old = std::move(conn_);
      ++generation_;
      in_rating_ = false;
    }
    cv_.notify_all();
  }

  void detach(const std::shared_ptr<Connection>& conn) {
    {
      std::lock_guard lock(mu_);
      if (conn_ != conn) return;
      conn_.reset();
      ++generation_;
      in_rating_ = false;
    }
    cv_.notify_all();
  }

  void on_message(const std::shared_ptr<Connection>& conn, const std::string& text) {
    const auto msg = json::parse(text, nullptr, false);
    std::unique_lock lock(mu_);
    if (conn != conn_) return;
    auto reply = [&](json j) { conn_->send(j.dump()); };
    if (msg.is_discarded() || !msg.is_object() || !msg.contains("type") || !msg["type"].is_string()) {
      reply({{"type", "error"}, {"reason", "malformed message"}});
      return;
    }
    const auto type = msg["type"].get<std::string>();
    if (type == "audio_chunk") {
      if (phase_ != Phase::Speak || trial_ < 0) {
        ++dropped_audio_chunks_;
        reply({{"type", "warning"}, {"reason", "audio_chunk outside Speak phase dropped"}});
        return;
      }
      try {
        const auto seq = msg.at("seq").get<std::int64_t>();
        audio_[trial_][seq] = codec::base64_decode(msg.at("pcm_b64").get<std::string>());
        ++accepted_audio_chunks_;
      } catch (const std::exception&) {
        reply({{"type", "error"}, {"reason", "audio_chunk needs integer seq and base64 pcm_b64"}});
      }
    } else if (type == "rating") {
      if (!in_rating_) {
        ++rejected_ratings_;
        reply({{"type", "error"}, {"reason", "rating outside Rating phase rejected"}});
        return;
      }
      if (rating_) {
        reply({{"type", "warning"}, {"reason", "duplicate rating ignored"}});
        return;
      }
      const auto raw = msg.value("raw", json());
      if (!raw.is_number_integer() || raw.get<int>() < 1 || raw.get<int>() > 9) {
        ++rejected_ratings_;
        reply({{"type", "error"}, {"reason", "rating raw must be an integer 1..9"}});
        return;
      }
      rating_ = protocol::RatingResponse{raw.get<int>(), clock_.now_ms()};
      reply({{"type", "rating_ack"}, {"trial_index", trial_}, {"raw", raw}});
      lock.unlock();
      cv_.notify_all();
    } else if (type == "session_pause") {
      pause_requested_ = true;
      reply({{"type", "session"}, {"state", "pause_pending"}});
    } else if (type == "session_resume") {
      pause_requested_ = false;
      reply({{"type", "session"}, {"state", "resumed"}});
      lock.unlock();
      cv_.notify_all();
    } else if (type == "clock_sync") {
      reply({{"type", "clock_sync"}, {"client_ms", msg.value("client_ms", json())}, {"server_ms", clock_.now_ms()}});
    } else {
      reply({{"type", "error"}, {"reason", "unknown message type '" + type + "'"}});
    }
  }

  // --- engine side ---

  bool connected() const override {
    std::lock_guard lock(mu_);
    return conn_ != nullptr;
  }

  void announce(const protocol::PhaseAnnouncement& a) override {
    json payload = json::object();
    switch (a.phase) {
      case Phase::View:
      case Phase::Speak: {
        payload["stimulus_id"] = a.stimulus.stimulus_id;
        payload["instruction"] = a.condition.instruction == Instruction::Describe ? "Describe" : "Reappraise";
        if (auto bytes = stimuli_.load(a.stimulus)) payload["image_b64"] = codec::base64_encode(*bytes);
        break;
      }
      case Phase::GeneratedImage:
        if (a.artifact) {
          payload["artifact_id"] = a.artifact->artifact_id;
          if (auto bytes = artifacts_.get(*a.artifact)) payload["image_b64"] = codec::base64_encode(*bytes);
        }
        break;
      case Phase::Rating:
        payload["scale"] = {{"min", 1}, {"max", 9}, {"anchors", {1, 3, 5, 7, 9}}};
        break;
      case Phase::Gray: break;
    }
    json msg{{"type", "phase_enter"},
             {"phase", to_string(a.phase)},
             {"trial_index", a.trial_index},
             {"server_ms", a.start_ms},
             {"deadline_ms", a.deadline_ms ? json(*a.deadline_ms) : json()},
             {"payload", payload}};
    std::lock_guard lock(mu_);
    phase_ = a.phase;
    trial_ = a.trial_index;
    in_rating_ = a.phase == Phase::Rating;
    if (in_rating_) rating_.reset();
    if (a.phase == Phase::View) trial_generation_ = generation_;
    phase_log_.push_back(msg);
    if (conn_) conn_->send(msg.dump());
  }

  std::vector<std::uint8_t> take_audio(int trial_index) override {
    std::lock_guard lock(mu_);
    if (phase_ == Phase::Speak) phase_ = Phase::Gray;  // later chunks for this window are late
    std::vector<std::uint8_t> pcm;
    auto it = audio_.find(trial_index);
    if (it == audio_.end()) return pcm;
    for (const auto& [seq, bytes] : it->second) pcm.insert(pcm.end(), bytes.begin(), bytes.end());
    audio_.erase(it);
    return pcm;
  }

  std::optional<protocol::RatingResponse> await_rating(const TrialRecord&, std::optional<std::int64_t> deadline_ms,
                                                       Clock& clock) override {
    std::unique_lock lock(mu_);
    for (;;) {
      if (rating_) {
        in_rating_ = false;
        return rating_;
      }
      // A quick reconnect still counts: the new client never saw this trial.
      if (!conn_ || generation_ != trial_generation_) {
        in_rating_ = false;
        fail(ErrorKind::Disconnected, "participant disconnected during the trial");
      }
      if (stop_.stop_requested()) fail(ErrorKind::Interrupted, "session interrupted");
      const auto now = clock.now_ms();
      if (deadline_ms && now >= *deadline_ms) {
        in_rating_ = false;
        return std::nullopt;
      }
      const auto wait = deadline_ms ? std::min<std::int64_t>(*deadline_ms - now, 50) : 50;
      cv_.wait_for(lock, std::chrono::milliseconds(wait));
    }
  }

  // Blocks until a participant is connected and no pause is pending.
  // Returns false if stopped first.
  bool wait_ready(const std::stop_token& stop) {
    std::unique_lock lock(mu_);
    while (!(conn_ && !pause_requested_)) {
      if (stop.stop_requested()) return false;
      cv_.wait_for(lock, std::chrono::milliseconds(50));
    }
    return true;
  }

  void broadcast_state(const std::string& state, int next_trial) {
    std::lock_guard lock(mu_);
    if (conn_) conn_->send(json{{"type", "session"}, {"state", state}, {"next_trial", next_trial}}.dump());
  }

  void set_stop_token(std::stop_token stop) { stop_ = std::move(stop); }
  bool pause_requested() const {
    std::lock_guard lock(mu_);
    return pause_requested_;
  }
  int dropped_audio_chunks() const {
    std::lock_guard lock(mu_);
    return dropped_audio_chunks_;
  }
  int accepted_audio_chunks() const {
    std::lock_guard lock(mu_);
    return accepted_audio_chunks_;
  }
  int rejected_ratings() const {
    std::lock_guard lock(mu_);
    return rejected_ratings_;
  }
  std::vector<json> phase_log() const {
    std::lock_guard lock(mu_);
    return phase_log_;
  }
  std::shared_ptr<Connection> connection() const {
    std::lock_guard lock(mu_);
    return conn_;
  }

 private:
  Clock& clock_;
  const storage::StimulusLoader& stimuli_;
  const storage::ArtifactStore& artifacts_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::shared_ptr<Connection> conn_;
  std::uint64_t generation_ = 0;        // bumped on every attach/detach
  std::uint64_t trial_generation_ = 0;  // generation when the current trial's View began
  json session_info_ = json::object();
  Phase phase_ = Phase::View;
  int trial_ = -1;
  bool in_rating_ = false;
  bool pause_requested_ = false;
  std::optional<protocol::RatingResponse> rating_;
  std::map<int, std::map<std::int64_t, std::vector<std::uint8_t>>> audio_;
  int dropped_audio_chunks_ = 0;
  int accepted_audio_chunks_ = 0;
  int rejected_ratings_ = 0;
  std::vector<json> phase_log_;
  std::stop_token stop_;
};

struct ServeOptions {
  std::string address = "127.0.0.1";
  unsigned short port = 8765;  // 0 picks a free port
};

// Accepts WebSocket connections and hands the first one to the channel;
// further connections get an error and are closed.
class SessionServer {
 public:
  SessionServer(ServeOptions opts, ParticipantChannel& channel) : channel_(channel), acceptor_(ioc_) {
    beast::error_code ec;
    const tcp::endpoint ep(net::ip::make_address(opts.address, ec), opts.port);
    if (ec) fail(ErrorKind::Validation, "bad listen address '" + opts.address + "'");
    acceptor_.open(ep.protocol(), ec);
    if (!ec) acceptor_.set_option(net::socket_base::reuse_address(true), ec);
    if (!ec) acceptor_.bind(ep, ec);
    if (!ec) acceptor_.listen(net::socket_base::max_listen_connections, ec);
    if (ec) fail(ErrorKind::Io, "cannot listen on " + opts.address + ":" + std::to_string(opts.port) + ": " + ec.message());
  }

  ~SessionServer() { stop(); }

  unsigned short port() const { return acceptor_.local_endpoint().port(); }

  void start() {
    accept();
    thread_ = std::thread([this] { ioc_.run(); });
  }

  void stop() {
    if (!thread_.joinable()) return;
    if (auto c = channel_.connection()) c->close();
    net::post(ioc_, [this] {
      beast::error_code ec;
      acceptor_.close(ec);
    });
    // Give the close handshake a moment, then stop the loop.
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    ioc_.stop();
    thread_.join();
    channel_.release();
  }

  net::io_context& io() { return ioc_; }

 private:
  void accept() {
    acceptor_.async_accept(net::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;  // acceptor closed
      auto conn = std::make_shared<Connection>(
          std::move(socket),
          [this](const std::shared_ptr<Connection>& c, const std::string& text) { channel_.on_message(c, text); },
          [this](const std::shared_ptr<Connection>& c) { channel_.detach(c); });
      conn->start([this](const std::shared_ptr<Connection>& c) {
        if (!channel_.attach(c)) {
          c->send(json{{"type", "error"}, {"reason", "a participant session is already active"}}.dump());
          c->close();
        }
      });
      accept();
    });
  }

  ParticipantChannel& channel_;
  net::io_context ioc_;
  tcp::acceptor acceptor_;
  std::thread thread_;
};

// Runs the plan against the connected participant, waiting out
// disconnects and pauses, until it completes or `stop` is requested.
inline protocol::SessionOutcome serve_session(const protocol::TrialPlan& plan, const protocol::PhaseSchedule& schedule,
                                              protocol::EngineContext& ctx, ParticipantChannel& channel,
                                              SessionRecord session, storage::SessionWriter& writer,
                                              const std::stop_token& stop, std::optional<int> max_trials = std::nullopt) {
  channel.set_stop_token(stop);
  protocol::RunOptions opts;
  opts.pause_requested = [&] { return channel.pause_requested(); };
  int remaining = max_trials.value_or(-1);
  for (;;) {
    const int next = static_cast<int>(session.trials.size());
    if (!channel.wait_ready(stop)) {
      protocol::SessionOutcome out;
      out.record = std::move(session);
      out.next_trial = next;
      out.pause_reason = "interrupted";
      return out;
    }
    channel.broadcast_state("running", next);
    if (max_trials) opts.max_trials = remaining;
    const std::size_t before = session.trials.size();
    auto out = protocol::run_session(plan, schedule, ctx, std::move(session), &writer, opts);
    if (max_trials) remaining -= static_cast<int>(out.record.trials.size() - before);
    if (out.completed || stop.stop_requested() || (max_trials && remaining <= 0)) {
      channel.broadcast_state(out.completed ? "completed" : "paused", out.next_trial);
      return out;
    }
    channel.broadcast_state("paused", out.next_trial);
    session = std::move(out.record);
  }
}

}  // namespace rlab::server
