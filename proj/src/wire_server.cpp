#include <sys/socket.h>
#include <poll.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <iostream>
#include <thread>

#include "net.hpp"
#include "reqsentry/chunkwire.hpp"

namespace reqsentry {

struct WireServer::Impl {
  ServerConfig config;
  RequestHandler handler;
  ReassemblyBuffer buffer;
  net::Socket listener;
  std::uint16_t bound_port = 0;
  std::atomic<bool> running{false};
  std::thread acceptor;

  struct Conn {
    int fd = -1;
    std::thread thread;
  };
  std::mutex conns_mu;
  std::map<std::uint64_t, Conn> conns;
  std::vector<std::uint64_t> finished;
  std::uint64_t next_conn = 0;

  Impl(ServerConfig c, RequestHandler h)
      : config(std::move(c)), handler(std::move(h)), buffer(config.deadline) {}

  void send_reply(const net::Socket& s, std::uint64_t task, FrameKind kind,
                  std::string_view payload) {
    std::string out;
    for (const auto& f : chunk(task, kind, payload, config.cap)) out += encode_frame(f);
    net::send_all(s, out);
  }

  void send_error(const net::Socket& s, std::uint64_t task, ErrorCode code, std::string_view why) {
    send_reply(s, task, FrameKind::Error, encode_error(code, why));
  }

  void process(const net::Socket& s, const Frame& f) {
    if (f.kind == FrameKind::Result || f.kind == FrameKind::Error) {
      send_error(s, f.task_id, ErrorCode::Unsupported,
                 std::string("server does not accept ") + std::string(kind_name(f.kind)) + " frames");
      return;
    }
    std::optional<std::string> payload;
    try {
      payload = buffer.add(f);
    } catch (const TaskExpired& e) {
      send_error(s, f.task_id, ErrorCode::Expired, e.what());
      return;
    } catch (const ProtocolError& e) {
      send_error(s, f.task_id, ErrorCode::Protocol, e.what());
      return;
    }
    if (!payload) return;

    Reply reply;
    try {
      reply = handler(f.kind, std::move(*payload));
    } catch (const RemoteError& e) {
      send_error(s, f.task_id, e.code(), e.reason());
      return;
    } catch (const InvalidInput& e) {
      send_error(s, f.task_id, ErrorCode::MalformedPayload, e.what());
      return;
    } catch (const std::exception& e) {
      send_error(s, f.task_id, ErrorCode::Internal, e.what());
      return;
    }
    send_reply(s, f.task_id, reply.kind, reply.payload);
  }

  void serve_connection(net::Socket s) {
    FrameReader reader;
    std::string in;
    try {
      while (running.load()) {
        in.clear();
        if (!net::recv_some(s, in)) break;
        reader.feed(in);
        for (;;) {
          std::optional<Frame> f;
          try {
            f = reader.next();
          } catch (const Error& e) {
            send_error(s, 0, ErrorCode::Protocol, e.what());
            if (!reader.aligned()) return;
            continue;
          }
          if (!f) break;
          process(s, *f);
        }
      }
    } catch (const std::exception& e) {
      // Peer went away mid-reply; anything half-received expires on its own.
      if (running.load()) std::cerr << "warning: connection closed: " << e.what() << '\n';
    }
  }

  void reap() {
    std::vector<std::thread> done;
    {
      std::lock_guard lock(conns_mu);
      for (const auto id : finished) {
        auto it = conns.find(id);
        if (it == conns.end()) continue;
        done.push_back(std::move(it->second.thread));
        conns.erase(it);
      }
      finished.clear();
    }
    for (auto& t : done) t.join();
  }

  void accept_loop() {
    while (running.load()) {
      pollfd p{listener.fd(), POLLIN, 0};
      const int rc = ::poll(&p, 1, 250);
      reap();
      for (const auto id : buffer.expire()) {
        std::cerr << "warning: dropped expired task " << id << '\n';
      }
      if (rc <= 0 || !running.load()) continue;
      const int fd = ::accept4(listener.fd(), nullptr, nullptr, SOCK_CLOEXEC);
      if (fd < 0) continue;
      std::lock_guard lock(conns_mu);
      const auto id = next_conn++;
      auto& c = conns[id];
      c.fd = fd;
      c.thread = std::thread([this, id, fd] {
        serve_connection(net::Socket(fd));
        std::lock_guard inner(conns_mu);
        // Socket is closed by now; keep stop() from touching a reused fd.
        conns[id].fd = -1;
        finished.push_back(id);
      });
    }
  }
};

WireServer::WireServer(ServerConfig config, RequestHandler handler)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(handler))) {
  if (impl_->config.cap == 0 || impl_->config.cap > kPieceCap) {
    throw InvalidConfig("piece cap must be in [1, 1000000]");
  }
}

WireServer::~WireServer() { stop(); }

void WireServer::start() {
  if (impl_->running.load()) return;
  impl_->listener = net::listen_on(impl_->config.listen);
  impl_->bound_port = net::local_port(impl_->listener);
  impl_->running = true;
  impl_->acceptor = std::thread([this] { impl_->accept_loop(); });
}

void WireServer::stop() {
  if (!impl_ || !impl_->running.exchange(false)) return;
  impl_->listener.shutdown();
  impl_->acceptor.join();
  impl_->listener.close();
  {
    std::lock_guard lock(impl_->conns_mu);
    for (auto& [id, c] : impl_->conns) {
      if (c.fd >= 0) ::shutdown(c.fd, SHUT_RDWR);
    }
  }
  // Connection threads take conns_mu on exit, so join outside the lock.
  for (;;) {
    std::thread t;
    {
      std::lock_guard lock(impl_->conns_mu);
      auto it = impl_->conns.begin();
      if (it == impl_->conns.end()) break;
      t = std::move(it->second.thread);
      impl_->conns.erase(it);
    }
    if (t.joinable()) t.join();
  }
  impl_->finished.clear();
}

std::uint16_t WireServer::port() const { return impl_->bound_port; }

Endpoint WireServer::endpoint() const {
  Endpoint e = impl_->config.listen;
  if (e.host.empty() || e.host == "0.0.0.0") e.host = "127.0.0.1";
  e.port = impl_->bound_port;
  return e;
}

// Model hosting.

struct ModelServer::Impl {
  BatchPolicy policy;
  mutable std::mutex model_mu;
  std::shared_ptr<const Model> model;
  mutable std::mutex train_mu;
  std::vector<Example> training;

  struct Job {
    std::vector<std::string> inputs;
    std::promise<std::vector<float>> done;
  };
  std::mutex batch_mu;
  std::condition_variable batch_cv;
  std::deque<std::pair<std::chrono::steady_clock::time_point, Job>> queue;
  std::size_t queued_inputs = 0;
  bool batch_stop = false;
  std::thread batcher;

  std::unique_ptr<WireServer> wire;

  std::shared_ptr<const Model> snapshot() const {
    std::lock_guard lock(model_mu);
    return model;
  }

  static std::vector<float> run(const std::shared_ptr<const Model>& m,
                                const std::vector<std::string>& inputs) {
    if (!m) throw RemoteError(ErrorCode::NoModel, "no model loaded");
    std::vector<float> out;
    out.reserve(inputs.size());
    for (const auto& s : inputs) out.push_back(m->predict(s));
    return out;
  }

  std::vector<float> infer(std::vector<std::string> inputs) {
    if (policy.mode == BatchPolicy::Mode::Immediate) return run(snapshot(), inputs);
    auto fut = [&] {
      std::lock_guard lock(batch_mu);
      Job job{std::move(inputs), {}};
      auto f = job.done.get_future();
      queued_inputs += job.inputs.size();
      queue.emplace_back(std::chrono::steady_clock::now(), std::move(job));
      batch_cv.notify_all();
      return f;
    }();
    return fut.get();
  }

  // Flushes whole tasks once N inputs are waiting or the oldest has waited
  // max_wait. One model snapshot serves a whole flush.
  void batch_loop() {
    std::unique_lock lock(batch_mu);
    for (;;) {
      batch_cv.wait(lock, [&] { return batch_stop || !queue.empty(); });
      if (queue.empty()) return;
      const auto oldest = queue.front().first;
      batch_cv.wait_until(lock, oldest + policy.max_wait,
                          [&] { return batch_stop || queued_inputs >= policy.size; });
      std::vector<Job> jobs;
      std::size_t taken = 0;
      while (!queue.empty() && (jobs.empty() || taken < policy.size)) {
        taken += queue.front().second.inputs.size();
        jobs.push_back(std::move(queue.front().second));
        queue.pop_front();
      }
      queued_inputs -= taken;
      lock.unlock();
      const auto m = snapshot();
      for (auto& j : jobs) {
        try {
          j.done.set_value(run(m, j.inputs));
        } catch (...) {
          j.done.set_exception(std::current_exception());
        }
      }
      lock.lock();
    }
  }

  Reply handle(FrameKind kind, std::string payload) {
    switch (kind) {
      case FrameKind::InferData: {
        std::vector<std::string> inputs;
        try {
          inputs = decode_inference(payload);
        } catch (const InvalidInput& e) {
          throw RemoteError(ErrorCode::MalformedPayload, e.what());
        }
        const auto probs = infer(std::move(inputs));
        return {FrameKind::Result, encode_results(probs)};
      }
      case FrameKind::TrainData: {
        std::vector<Example> examples;
        try {
          examples = decode_training(payload);
        } catch (const InvalidInput& e) {
          throw RemoteError(ErrorCode::MalformedPayload, e.what());
        }
        std::lock_guard lock(train_mu);
        training.insert(training.end(), std::make_move_iterator(examples.begin()),
                        std::make_move_iterator(examples.end()));
        std::string ack(4, '\0');
        const auto n = static_cast<std::uint32_t>(training.size());
        for (int i = 0; i < 4; ++i) ack[i] = static_cast<char>((n >> (24 - 8 * i)) & 0xFF);
        return {FrameKind::Result, ack};
      }
      case FrameKind::ModelChunk: {
        std::shared_ptr<const Model> next;
        try {
          next = std::make_shared<const Model>(deserialize_model(payload));
        } catch (const Error& e) {
          throw RemoteError(ErrorCode::BadModel, e.what());
        }
        std::lock_guard lock(model_mu);
        model = std::move(next);
        return {FrameKind::Result, {}};
      }
      default:
        throw RemoteError(ErrorCode::Unsupported, "unsupported request kind");
    }
  }
};

ModelServer::ModelServer(ServerConfig config, BatchPolicy policy,
                         std::shared_ptr<const Model> initial)
    : impl_(std::make_unique<Impl>()) {
  policy.validate();
  impl_->policy = policy;
  impl_->model = std::move(initial);
  impl_->wire = std::make_unique<WireServer>(
      std::move(config), [this](FrameKind k, std::string p) { return impl_->handle(k, std::move(p)); });
}

ModelServer::~ModelServer() { stop(); }

void ModelServer::start() {
  if (impl_->policy.mode == BatchPolicy::Mode::Batch && !impl_->batcher.joinable()) {
    impl_->batch_stop = false;
    impl_->batcher = std::thread([this] { impl_->batch_loop(); });
  }
  impl_->wire->start();
}

void ModelServer::stop() {
  impl_->wire->stop();
  if (impl_->batcher.joinable()) {
    {
      std::lock_guard lock(impl_->batch_mu);
      impl_->batch_stop = true;
    }
    impl_->batch_cv.notify_all();
    impl_->batcher.join();
  }
}

std::uint16_t ModelServer::port() const { return impl_->wire->port(); }
Endpoint ModelServer::endpoint() const { return impl_->wire->endpoint(); }

std::shared_ptr<const Model> ModelServer::model() const { return impl_->snapshot(); }

void ModelServer::swap_model(std::shared_ptr<const Model> next) {
  std::lock_guard lock(impl_->model_mu);
  impl_->model = std::move(next);
}

std::vector<Example> ModelServer::training_buffer() const {
  std::lock_guard lock(impl_->train_mu);
  return impl_->training;
}

Reply ModelServer::handle(FrameKind kind, std::string payload) {
  return impl_->handle(kind, std::move(payload));
}

}  // namespace reqsentry
