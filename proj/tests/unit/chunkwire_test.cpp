#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <random>
#include <thread>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "models.hpp"
#include "reqsentry/chunkwire.hpp"

using namespace reqsentry;
using namespace std::chrono_literals;

namespace {

std::string random_bytes(std::mt19937_64& rng, std::size_t n) {
  std::string s(n, '\0');
  for (auto& c : s) c = static_cast<char>(rng() & 0xFF);
  return s;
}

Frame random_frame(std::mt19937_64& rng) {
  Frame f;
  f.kind = static_cast<FrameKind>(1 + rng() % 5);
  f.task_id = rng();
  f.piece_count = 1 + static_cast<std::uint32_t>(rng() % 1000);
  f.piece_index = static_cast<std::uint32_t>(rng() % f.piece_count);
  f.payload = random_bytes(rng, rng() % 300);
  return f;
}

Reply echo(FrameKind, std::string payload) { return {FrameKind::Result, std::move(payload)}; }

struct EchoServer {
  explicit EchoServer(RequestHandler h = echo, std::size_t cap = kPieceCap)
      : server(ServerConfig{{"127.0.0.1", 0}, kDefaultDeadline, cap}, std::move(h)) {
    server.start();
  }
  WireServer server;
};

}  // namespace

TEST(Frame, EmptyPayloadIsTwentyOneBytes) {
  Frame f{FrameKind::Result, 0x0102030405060708ULL, 0, 1, ""};
  const auto bytes = encode_frame(f);
  ASSERT_EQ(bytes.size(), 21u);
  // Big-endian length, then kind and task id.
  EXPECT_EQ(bytes.substr(0, 4), std::string("\0\0\0\x15", 4));
  EXPECT_EQ(bytes[4], 4);
  EXPECT_EQ(bytes.substr(5, 8), std::string("\x01\x02\x03\x04\x05\x06\x07\x08", 8));
  EXPECT_EQ(bytes.substr(13, 8), std::string("\0\0\0\0\0\0\0\x01", 8));
}

TEST(Frame, RoundTripRandom) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto f = random_frame(rng);
    const auto bytes = encode_frame(f);
    ASSERT_EQ(decode_frame(bytes), f);
    ASSERT_EQ(encode_frame(decode_frame(bytes)), bytes);
  }
}

TEST(Frame, TruncatedAndLengthMismatch) {
  const auto bytes = encode_frame({FrameKind::InferData, 7, 0, 1, "hello"});
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    EXPECT_THROW(decode_frame(std::string_view(bytes).substr(0, n)), FramingError) << n;
  }
  EXPECT_THROW(decode_frame(bytes + "x"), FramingError);
  std::string short_len = bytes;
  short_len[3] = 3;
  EXPECT_THROW(decode_frame(short_len), FramingError);
}

TEST(Frame, ProtocolViolations) {
  auto bytes = encode_frame({FrameKind::InferData, 7, 0, 1, ""});
  bytes[4] = 9;
  EXPECT_THROW(decode_frame(bytes), ProtocolError);
  bytes[4] = 1;
  bytes[20] = 0;  // piece_count 0
  EXPECT_THROW(decode_frame(bytes), ProtocolError);

  std::string big(kFrameHeaderBytes, '\0');
  const std::uint32_t total = kFrameHeaderBytes + kPieceCap + 1;
  for (int i = 0; i < 4; ++i) big[i] = static_cast<char>(total >> (24 - 8 * i));
  big[4] = 1;
  big[20] = 1;
  FrameReader r;
  r.feed(big);
  EXPECT_THROW(r.next(), ProtocolError);
  EXPECT_FALSE(r.aligned());

  EXPECT_THROW(encode_frame({FrameKind::Result, 1, 0, 1, std::string(kPieceCap + 1, 'x')}),
               ProtocolError);
  EXPECT_THROW(encode_frame({FrameKind::Result, 1, 2, 2, ""}), ProtocolError);
}

TEST(FrameReader, SplitsStreamAtArbitraryBoundaries) {
  std::mt19937_64 rng(2);
  std::vector<Frame> frames;
  std::string stream;
  for (int i = 0; i < 50; ++i) {
    frames.push_back(random_frame(rng));
    stream += encode_frame(frames.back());
  }
  FrameReader r;
  std::vector<Frame> got;
  std::size_t pos = 0;
  while (pos < stream.size()) {
    const auto n = std::min<std::size_t>(1 + rng() % 97, stream.size() - pos);
    r.feed(std::string_view(stream).substr(pos, n));
    pos += n;
    while (auto f = r.next()) got.push_back(*f);
  }
  EXPECT_EQ(got, frames);
  EXPECT_EQ(r.buffered(), 0u);
}

TEST(FrameReader, BadKindKeepsAlignment) {
  auto bad = encode_frame({FrameKind::InferData, 1, 0, 1, "a"});
  bad[4] = 42;
  const auto good = encode_frame({FrameKind::InferData, 2, 0, 1, "b"});
  FrameReader r;
  r.feed(bad + good);
  EXPECT_THROW(r.next(), ProtocolError);
  EXPECT_TRUE(r.aligned());
  EXPECT_EQ(r.next()->task_id, 2u);
}

TEST(Chunk, CeilingDivisionSizes) {
  const std::string p(2'500'000, 'z');
  const auto frames = chunk(5, FrameKind::InferData, p);
  ASSERT_EQ(frames.size(), 3u);
  EXPECT_EQ(frames[0].payload.size(), 1'000'000u);
  EXPECT_EQ(frames[1].payload.size(), 1'000'000u);
  EXPECT_EQ(frames[2].payload.size(), 500'000u);
  for (const auto& f : frames) EXPECT_EQ(f.piece_count, 3u);
}

TEST(Chunk, CapacityVectors) {
  EXPECT_EQ(chunk(1, FrameKind::InferData, std::string(1200 * 784, 'm')).size(), 1u);
  EXPECT_EQ(chunk(1, FrameKind::InferData, std::string(6 * 224 * 224 * 3, 'i')).size(), 1u);
  EXPECT_EQ(chunk(1, FrameKind::InferData, std::string(7 * 224 * 224 * 3, 'i')).size(), 2u);
  EXPECT_EQ(chunk(1, FrameKind::InferData, std::string(kPieceCap, 'x')).size(), 1u);
  EXPECT_EQ(chunk(1, FrameKind::InferData, std::string(kPieceCap + 1, 'x')).size(), 2u);
}

TEST(Chunk, EmptyPayloadIsOnePiece) {
  const auto frames = chunk(9, FrameKind::TrainData, "");
  ASSERT_EQ(frames.size(), 1u);
  EXPECT_EQ(frames[0].piece_count, 1u);
  EXPECT_TRUE(frames[0].payload.empty());
  EXPECT_THROW(chunk(9, FrameKind::TrainData, "x", 0), InvalidInput);
}

TEST(Chunk, PieceCountLaw) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 300; ++i) {
    const std::size_t n = rng() % 5000;
    const std::size_t cap = 1 + rng() % 700;
    const auto frames = chunk(1, FrameKind::InferData, std::string(n, 'q'), cap);
    ASSERT_EQ(frames.size(), std::max<std::size_t>(1, (n + cap - 1) / cap));
    for (std::size_t j = 0; j + 1 < frames.size(); ++j) ASSERT_EQ(frames[j].payload.size(), cap);
  }
}

TEST(Reassembly, OutOfOrderAndDuplicates) {
  const std::string p = "abcdefghij";
  auto frames = chunk(4, FrameKind::InferData, p, 4);
  ReassemblyBuffer buf;
  EXPECT_FALSE(buf.add(frames[2]));
  EXPECT_FALSE(buf.add(frames[2]));  // identical duplicate
  EXPECT_FALSE(buf.add(frames[0]));
  const auto done = buf.add(frames[1]);
  ASSERT_TRUE(done);
  EXPECT_EQ(*done, p);
  EXPECT_EQ(buf.pending(), 0u);
}

TEST(Reassembly, InterleavedFuzzAgainstConcatenation) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int tasks = 1 + static_cast<int>(rng() % 5);
    std::vector<std::string> payloads;
    std::vector<Frame> all;
    for (int t = 0; t < tasks; ++t) {
      payloads.push_back(random_bytes(rng, rng() % 3000));
      const auto frames = chunk(static_cast<std::uint64_t>(t), FrameKind::InferData, payloads.back(),
                                1 + rng() % 400);
      all.insert(all.end(), frames.begin(), frames.end());
    }
    std::shuffle(all.begin(), all.end(), rng);
    ReassemblyBuffer buf;
    std::map<std::uint64_t, std::string> got;
    for (const auto& f : all) {
      if (auto done = buf.add(f)) got[f.task_id] = *done;
    }
    ASSERT_EQ(got.size(), payloads.size());
    for (int t = 0; t < tasks; ++t) ASSERT_EQ(got[static_cast<std::uint64_t>(t)], payloads[t]);
  }
}

TEST(Reassembly, SameTaskDifferentKindsAreSeparate) {
  const auto a = chunk(1, FrameKind::InferData, "aaaa", 2);
  const auto b = chunk(1, FrameKind::TrainData, "bbbb", 2);
  ReassemblyBuffer buf;
  buf.add(a[0]);
  buf.add(b[0]);
  EXPECT_EQ(*buf.add(b[1]), "bbbb");
  EXPECT_EQ(*buf.add(a[1]), "aaaa");
}

TEST(Reassembly, Errors) {
  ReassemblyBuffer buf;
  buf.add({FrameKind::InferData, 1, 0, 3, "x"});
  EXPECT_THROW(buf.add({FrameKind::InferData, 1, 1, 4, "y"}), ProtocolError);
  buf.add({FrameKind::InferData, 2, 0, 2, "x"});
  EXPECT_THROW(buf.add({FrameKind::InferData, 2, 0, 2, "z"}), ProtocolError);
  EXPECT_EQ(buf.pending(), 0u);
}

TEST(Reassembly, DeadlineExpires) {
  ReassemblyBuffer buf(100ms);
  const auto t0 = ReassemblyBuffer::Clock::now();
  buf.add({FrameKind::InferData, 1, 0, 2, "x"}, t0);
  EXPECT_THROW(buf.add({FrameKind::InferData, 1, 1, 2, "y"}, t0 + 200ms), TaskExpired);
  EXPECT_EQ(buf.pending(), 0u);
  buf.add({FrameKind::InferData, 2, 0, 2, "x"}, t0);
  EXPECT_EQ(buf.expire(t0 + 50ms).size(), 0u);
  EXPECT_EQ(buf.expire(t0 + 150ms), std::vector<std::uint64_t>{2});
}

TEST(Payloads, RoundTrips) {
  const std::vector<std::string> reqs = {"GET /a", "", std::string("\0\xff", 2)};
  EXPECT_EQ(decode_inference(encode_inference(reqs)), reqs);
  const std::vector<float> probs = {0.0f, 1.0f, 0.25f, std::nextafter(1.0f, 0.0f)};
  const auto back = decode_results(encode_results(probs));
  for (std::size_t i = 0; i < probs.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint32_t>(back[i]), std::bit_cast<std::uint32_t>(probs[i]));
  }
  const std::vector<Example> ex = {{"a", 1}, {"bb", 0}};
  const auto eb = decode_training(encode_training(ex));
  ASSERT_EQ(eb.size(), 2u);
  EXPECT_EQ(eb[1].text, "bb");
  EXPECT_EQ(eb[0].label, 1);
  const auto [code, why] = decode_error(encode_error(ErrorCode::BadModel, "nope"));
  EXPECT_EQ(code, ErrorCode::BadModel);
  EXPECT_EQ(why, "nope");
}

TEST(Payloads, MalformedInference) {
  auto p = encode_inference(std::vector<std::string>{"a", "b", "c", "d"});
  p[3] = 5;  // declares five strings, carries four
  EXPECT_THROW(decode_inference(p), InvalidInput);
  EXPECT_THROW(decode_inference(p + "zz"), InvalidInput);
  EXPECT_THROW(decode_inference("\xff\xff\xff\xff"), InvalidInput);
  const std::vector<float> bad = {1.5f};
  EXPECT_THROW(decode_results(encode_results(bad)), InvalidInput);
}

TEST(Endpoint, Parse) {
  const auto e = Endpoint::parse("10.0.0.2:9000");
  EXPECT_EQ(e.host, "10.0.0.2");
  EXPECT_EQ(e.port, 9000);
  EXPECT_EQ(Endpoint::parse(":81").host, "127.0.0.1");
  EXPECT_THROW(Endpoint::parse("nohost"), InvalidConfig);
  EXPECT_THROW(Endpoint::parse("h:99999"), InvalidConfig);
  EXPECT_THROW(Endpoint::parse("h:12x"), InvalidConfig);
}

TEST(Invoke, EchoRandomPayloadsUpToFiveMB) {
  EchoServer s;
  std::mt19937_64 rng(5);
  for (const std::size_t n : {0ul, 1ul, 999'999ul, 1'000'000ul, 1'000'001ul, 5'000'000ul}) {
    const auto p = random_bytes(rng, n);
    EXPECT_EQ(invoke(s.server.endpoint(), FrameKind::InferData, p, 10s), p) << n;
  }
  for (int i = 0; i < 20; ++i) {
    const auto p = random_bytes(rng, rng() % 200'000);
    EXPECT_EQ(invoke(s.server.endpoint(), FrameKind::TrainData, p, 10s, 1 + rng() % 50'000), p);
  }
}

TEST(Invoke, SmallServerCapChunksReplies) {
  EchoServer s(echo, 1000);
  std::mt19937_64 rng(6);
  const auto p = random_bytes(rng, 12'345);
  EXPECT_EQ(invoke(s.server.endpoint(), FrameKind::InferData, p, 10s), p);
}

TEST(Invoke, HundredConcurrentCallsKeepTheirOwnBytes) {
  EchoServer s([](FrameKind, std::string p) {
    std::this_thread::sleep_for(std::chrono::milliseconds(p.size() % 7));
    return Reply{FrameKind::Result, "reply:" + p};
  });
  std::vector<std::future<std::string>> futs;
  for (int i = 0; i < 100; ++i) {
    futs.push_back(invoke_async(s.server.endpoint(), FrameKind::InferData,
                                "task-" + std::to_string(i) + std::string(i * 97, 'x'), 20s));
  }
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(futs[i].get(), "reply:task-" + std::to_string(i) + std::string(i * 97, 'x'));
  }
}

TEST(Invoke, ZeroTimeoutAgainstSlowServer) {
  EchoServer s([](FrameKind, std::string p) {
    std::this_thread::sleep_for(300ms);
    return Reply{FrameKind::Result, p};
  });
  EXPECT_THROW(invoke(s.server.endpoint(), FrameKind::InferData, "x", 0ms), TimeoutError);
  EXPECT_THROW(invoke(s.server.endpoint(), FrameKind::InferData, "x", 50ms), TimeoutError);
}

TEST(Invoke, HandlerErrorsBecomeRemoteErrors) {
  EchoServer s([](FrameKind k, std::string p) -> Reply {
    if (k == FrameKind::TrainData) throw RemoteError(ErrorCode::NoModel, "nothing here");
    if (p == "boom") throw std::runtime_error("kaput");
    return {FrameKind::Result, p};
  });
  try {
    invoke(s.server.endpoint(), FrameKind::TrainData, "x", 5s);
    FAIL();
  } catch (const RemoteError& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoModel);
    EXPECT_EQ(e.reason(), "nothing here");
  }
  try {
    invoke(s.server.endpoint(), FrameKind::InferData, "boom", 5s);
    FAIL();
  } catch (const RemoteError& e) {
    EXPECT_EQ(e.code(), ErrorCode::Internal);
  }
  EXPECT_EQ(invoke(s.server.endpoint(), FrameKind::InferData, "fine", 5s), "fine");
}

TEST(Invoke, UnreachableEndpoint) {
  Endpoint dead;
  {
    EchoServer s;
    dead = s.server.endpoint();
  }
  EXPECT_THROW(invoke(dead, FrameKind::InferData, "x", 2s), Error);
}

namespace {

struct ModelFixture : ::testing::Test {
  std::shared_ptr<const Model> a = fixtures::random_model(11);
  std::shared_ptr<const Model> b = fixtures::random_model(12, 300);

  static std::vector<std::uint32_t> bits(const std::vector<float>& v) {
    std::vector<std::uint32_t> out;
    for (const float x : v) out.push_back(std::bit_cast<std::uint32_t>(x));
    return out;
  }
  static std::vector<std::uint32_t> local(const Model& m, const std::vector<std::string>& in) {
    std::vector<float> out;
    for (const auto& s : in) out.push_back(m.predict(s));
    return bits(out);
  }
};

}  // namespace

TEST_F(ModelFixture, ServedMatchesInProcessBitForBit) {
  ModelServer server({{"127.0.0.1", 0}}, BatchPolicy::immediate(), a);
  server.start();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto batch = fixtures::canonical_batch(seed, 10);
    EXPECT_EQ(bits(infer_remote(server.endpoint(), batch, 10s)), local(*a, batch));
  }
}

TEST_F(ModelFixture, HotSwapViaModelChunks) {
  ModelServer server({{"127.0.0.1", 0}}, BatchPolicy::immediate(), a);
  server.start();
  const auto batch = fixtures::canonical_batch(3, 10);
  ASSERT_NE(local(*a, batch), local(*b, batch));
  // Push B in small pieces to exercise reassembly on the server.
  invoke(server.endpoint(), FrameKind::ModelChunk, serialize_model(*b), 10s, 4096);
  EXPECT_EQ(bits(infer_remote(server.endpoint(), batch, 10s)), local(*b, batch));
}

TEST_F(ModelFixture, BadModelKeepsPreviousLive) {
  ModelServer server({{"127.0.0.1", 0}}, BatchPolicy::immediate(), a);
  server.start();
  auto bytes = serialize_model(*b);
  bytes.resize(bytes.size() - 3);
  try {
    invoke(server.endpoint(), FrameKind::ModelChunk, bytes, 10s);
    FAIL();
  } catch (const RemoteError& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadModel);
  }
  const auto batch = fixtures::canonical_batch(4, 5);
  EXPECT_EQ(bits(infer_remote(server.endpoint(), batch, 10s)), local(*a, batch));
}

TEST_F(ModelFixture, MalformedCountGivesErrorAndConnectionStaysUsable) {
  ModelServer server({{"127.0.0.1", 0}}, BatchPolicy::immediate(), a);
  server.start();
  auto p = encode_inference(std::vector<std::string>{"a", "b", "c", "d"});
  p[3] = 5;

  // Both requests on one raw connection.
  const auto ep = server.endpoint();
  std::string stream = encode_frame({FrameKind::InferData, 77, 0, 1, p}) +
                       encode_frame({FrameKind::InferData, 78, 0, 1,
                                     encode_inference(std::vector<std::string>{"GET /"})});
  FrameReader reader;
  {
    // Reuse the client plumbing through a tiny echo of frames.
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(ep.port);
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)), 0);
    ASSERT_EQ(::send(fd, stream.data(), stream.size(), 0), static_cast<ssize_t>(stream.size()));
    std::vector<Frame> got;
    char buf[4096];
    while (got.size() < 2) {
      const auto n = ::recv(fd, buf, sizeof(buf), 0);
      ASSERT_GT(n, 0);
      reader.feed(std::string_view(buf, static_cast<std::size_t>(n)));
      while (auto f = reader.next()) got.push_back(*f);
    }
    ::close(fd);
    EXPECT_EQ(got[0].task_id, 77u);
    EXPECT_EQ(got[0].kind, FrameKind::Error);
    EXPECT_EQ(decode_error(got[0].payload).first, ErrorCode::MalformedPayload);
    EXPECT_EQ(got[1].task_id, 78u);
    EXPECT_EQ(got[1].kind, FrameKind::Result);
    EXPECT_EQ(decode_results(got[1].payload).size(), 1u);
  }
}

TEST_F(ModelFixture, NoModelIsAnError) {
  ModelServer server({{"127.0.0.1", 0}}, BatchPolicy::immediate(), nullptr);
  server.start();
  const auto batch = fixtures::canonical_batch(1, 2);
  try {
    infer_remote(server.endpoint(), batch, 5s);
    FAIL();
  } catch (const RemoteError& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoModel);
  }
  invoke(server.endpoint(), FrameKind::ModelChunk, serialize_model(*a), 5s);
  EXPECT_EQ(bits(infer_remote(server.endpoint(), batch, 5s)), local(*a, batch));
}

TEST_F(ModelFixture, TrainingDataAccumulates) {
  ModelServer server({{"127.0.0.1", 0}}, BatchPolicy::immediate(), a);
  server.start();
  const std::vector<Example> ex = {{"GET /x", 0}, {"GET /y' OR 1=1", 1}};
  invoke(server.endpoint(), FrameKind::TrainData, encode_training(ex), 5s);
  const auto ack = invoke(server.endpoint(), FrameKind::TrainData, encode_training(ex), 5s);
  EXPECT_EQ(ack, std::string("\0\0\0\x04", 4));
  const auto buf = server.training_buffer();
  ASSERT_EQ(buf.size(), 4u);
  EXPECT_EQ(buf[3].text, "GET /y' OR 1=1");
}

TEST_F(ModelFixture, BatchModeParityAndSwapAtomicity) {
  ModelServer server({{"127.0.0.1", 0}}, BatchPolicy::batch(16, 20ms), a);
  server.start();
  std::vector<std::vector<std::string>> batches;
  for (std::uint64_t s = 0; s < 24; ++s) batches.push_back(fixtures::canonical_batch(100 + s, 1 + s % 5));
  std::vector<std::future<std::vector<float>>> futs;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    if (i == 12) server.swap_model(b);
    futs.push_back(std::async(std::launch::async, [&, i] {
      return infer_remote(server.endpoint(), batches[i], 10s);
    }));
  }
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto got = bits(futs[i].get());
    const bool is_a = got == local(*a, batches[i]);
    const bool is_b = got == local(*b, batches[i]);
    EXPECT_TRUE(is_a || is_b) << "response " << i << " mixes models";
  }
}

TEST(BatchPolicy, Validation) {
  EXPECT_THROW(BatchPolicy::batch(0, 1ms).validate(), InvalidConfig);
  EXPECT_NO_THROW(BatchPolicy::immediate().validate());
}

TEST(ModelChunks, RoundTripAndMissingIndex) {
  std::mt19937_64 rng(7);
  const auto model = random_bytes(rng, 2'300'000);
  ModelChunkTable table;
  const auto ids = table.store("m1", model);
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_EQ(table.load(ids), model);
  EXPECT_EQ(table.load("m1"), model);

  const auto small = random_bytes(rng, 1000);
  const auto sid = table.store("m2", small);
  ASSERT_EQ(sid.size(), 1u);
  EXPECT_EQ(table.load(sid), small);

  ASSERT_TRUE(table.erase(ids[1]));
  try {
    table.load(ids);
    FAIL();
  } catch (const IncompleteModel& e) {
    EXPECT_EQ(e.missing_index(), 1u);
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
  }
  EXPECT_THROW(table.load("m1"), IncompleteModel);
  EXPECT_THROW(table.load("nope"), IncompleteModel);
}
