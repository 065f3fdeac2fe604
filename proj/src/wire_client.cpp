#include "net.hpp"
#include "reqsentry/chunkwire.hpp"

namespace reqsentry {

std::string invoke(const Endpoint& endpoint, FrameKind kind, std::string_view payload,
                   std::chrono::milliseconds timeout, std::size_t cap) {
  if (kind == FrameKind::Result || kind == FrameKind::Error) {
    throw InvalidInput("invoke sends request kinds only");
  }
  const auto deadline = net::Clock::now() + timeout;
  const auto task = next_task_id();
  const auto frames = chunk(task, kind, payload, cap);

  auto sock = net::connect_to(endpoint, deadline);
  for (const auto& f : frames) net::send_all(sock, encode_frame(f), deadline);

  FrameReader reader;
  ReassemblyBuffer pieces(timeout);
  std::string in;
  for (;;) {
    while (auto f = reader.next()) {
      if (f->task_id != task) {
        if (f->kind == FrameKind::Error && f->task_id == 0) {
          auto [code, reason] = decode_error(f->payload);
          throw RemoteError(code, reason);
        }
        throw ProtocolError("reply for task " + std::to_string(f->task_id) + ", expected " +
                            std::to_string(task));
      }
      if (f->kind != FrameKind::Result && f->kind != FrameKind::Error) {
        throw ProtocolError("unexpected " + std::string(kind_name(f->kind)) + " frame in reply");
      }
      if (auto whole = pieces.add(*f)) {
        if (f->kind == FrameKind::Error) {
          auto [code, reason] = decode_error(*whole);
          throw RemoteError(code, reason);
        }
        return std::move(*whole);
      }
    }
    in.clear();
    if (!net::recv_some(sock, in, deadline)) {
      if (reader.buffered() > 0) throw FramingError("connection closed inside a frame");
      throw ProtocolError("connection closed before a reply arrived");
    }
    reader.feed(in);
  }
}

std::future<std::string> invoke_async(Endpoint endpoint, FrameKind kind, std::string payload,
                                      std::chrono::milliseconds timeout, std::size_t cap) {
  return std::async(std::launch::async,
                    [endpoint = std::move(endpoint), kind, payload = std::move(payload), timeout,
                     cap] { return invoke(endpoint, kind, payload, timeout, cap); });
}

std::vector<float> infer_remote(const Endpoint& endpoint, std::span<const std::string> requests,
                                std::chrono::milliseconds timeout) {
  auto out = decode_results(invoke(endpoint, FrameKind::InferData, encode_inference(requests), timeout));
  if (out.size() != requests.size()) {
    throw ProtocolError("server returned " + std::to_string(out.size()) + " results for " +
                        std::to_string(requests.size()) + " requests");
  }
  return out;
}

}  // namespace reqsentry
