#include <gtest/gtest.h>

#include <cstdlib>
#include <random>

#include "seek/protocol/backend.hpp"
#include "seek/protocol/session.hpp"
#include "seek/protocol/socket.hpp"
#include "seek/protocol/wire.hpp"
#include "support.hpp"

using namespace seek;
using namespace seek::protocol;
using namespace seek::testing;

namespace {

const char* kArch = "conv4x3x3-mpr2-conv4x3x3-r-fc8-r-fc4";
const char* kInput = "2x6x6";

struct LocalRun {
  std::shared_ptr<ServerConnection> server;
  Transcript transcript;
  std::size_t label = 0;
};

LocalRun run_local(std::shared_ptr<const ModelGraph> m, const QueryInput& q, std::uint64_t seed) {
  LocalRun r;
  r.server = std::make_shared<ServerConnection>(m, SeedPolicy{seed, true}, kDefaultMaskBound);
  ClientConnection client(std::make_unique<InMemoryTransport>(r.server));
  r.label = client.infer(q.x0, {q.shifts}, seed, &r.transcript);
  return r;
}

// What the server emits, with payload values stripped.
std::vector<std::tuple<Tag, LayerId, std::size_t>> server_skeleton(const Transcript& t) {
  std::vector<std::tuple<Tag, LayerId, std::size_t>> out;
  for (const auto& e : t.entries) {
    if (e.direction == Direction::ServerToClient) out.emplace_back(e.frame.tag, e.frame.layer, e.frame.payload.size());
  }
  return out;
}

}  // namespace

TEST(Wire, EncodingIsBitExact) {
  const Frame f{Tag::MaskedPre, 0x01020304u, {1.0, -0.0}};
  const auto bytes = encode(f);
  ASSERT_EQ(bytes.size(), kHeaderBytes + 16);
  EXPECT_EQ(bytes[0], 0x11);
  EXPECT_EQ((std::vector<std::uint8_t>(bytes.begin() + 1, bytes.begin() + 9)),
            (std::vector<std::uint8_t>{0x04, 0x03, 0x02, 0x01, 16, 0, 0, 0}));
  // 1.0 = 0x3FF0000000000000, little-endian.
  EXPECT_EQ((std::vector<std::uint8_t>(bytes.begin() + 9, bytes.begin() + 17)),
            (std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0xF0, 0x3F}));
  EXPECT_EQ(bytes[24], 0x80);
  EXPECT_EQ(decode(bytes), f);
}

TEST(Wire, RejectsCorruptFrames) {
  auto bytes = encode(Frame{Tag::EncPost, 3, {1.0, 2.0}});
  auto bad_tag = bytes;
  bad_tag[0] = 0x55;
  EXPECT_THROW(decode(bad_tag), ProtocolError);
  auto bad_len = bytes;
  bad_len[5] = 7;
  EXPECT_THROW(decode(bad_len), ProtocolError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode(truncated), ProtocolError);
  EXPECT_THROW(decode(std::vector<std::uint8_t>{0x11, 0}), ProtocolError);
}

TEST(Session, EmptyPlanIsPlainInference) {
  std::mt19937_64 rng(1);
  const auto m = shared_random(kArch, kInput, 2);
  for (int k = 0; k < 10; ++k) {
    const Tensor x = random_tensor(m->input_shape(), rng);
    EXPECT_EQ(run_session(m, x, {}, k).label, forward_label(*m, {x, {}}));
  }
}

TEST(Session, LabelsMatchInProcessOnRandomPlans) {
  std::mt19937_64 rng(2);
  const auto m = shared_random(kArch, kInput, 3);
  for (int k = 0; k < 100; ++k) {
    const QueryInput q{random_tensor(m->input_shape(), rng), random_shifts(*m, rng)};
    EXPECT_EQ(run_session(m, q.x0, {q.shifts}, 1000 + k).label, forward_label(*m, q)) << k;
  }
}

TEST(Session, ForcedTieFlipsWithProbe) {
  const auto m = zero_model(3);
  QueryInput tie = with_logits(*m, {1, 1, 0});
  for (std::size_t c : {0u, 1u}) {
    QueryInput probe = tie;
    probe.shifts.add_at(m->output_id(), Side::Pre, c, kDefaultProbeEpsilon);
    EXPECT_EQ(run_session(m, probe.x0, {probe.shifts}, 5).label, c);
  }
}

TEST(Session, SharesReconstructToTrace) {
  std::mt19937_64 rng(4);
  const auto m = shared_random(kArch, kInput, 4);
  for (int k = 0; k < 20; ++k) {
    const QueryInput q{random_tensor(m->input_shape(), rng), random_shifts(*m, rng)};
    const LocalRun run = run_local(m, q, 50 + k);
    const Trace trace = forward_trace(*m, q);
    const auto& masks = run.server->session()->pre_masks();
    std::size_t checked = 0;
    for (const auto& e : run.transcript.entries) {
      const Frame& f = e.frame;
      const bool masked_pre = f.tag == Tag::MaskedPre;
      const bool client_share = f.tag == Tag::NonlinearShare && e.direction == Direction::ClientToServer;
      if (!masked_pre && !client_share) continue;
      const auto& r = masks.at(f.layer);
      const Tensor& y = trace.y(f.layer);
      const auto shift = q.shifts.materialize(f.layer, Side::Pre, y.size());
      for (std::size_t i = 0; i < y.size(); ++i) {
        const double expect = masked_pre ? y[i] : y[i] + shift[i];
        EXPECT_NEAR(f.payload[i] + r[i], expect, 1e-12);
      }
      ++checked;
    }
    // MaskedPre and the client share for each of the three ReLU-type layers and the Argmax.
    EXPECT_EQ(checked, 8u);
  }
}

TEST(Session, MasksAreFreshPerSeed) {
  std::mt19937_64 rng(5);
  const auto m = shared_random(kArch, kInput, 5);
  const QueryInput q{random_tensor(m->input_shape(), rng), {}};
  const auto a = run_session(m, q.x0, {}, 1), b = run_session(m, q.x0, {}, 2);
  EXPECT_EQ(a.label, b.label);
  ASSERT_EQ(a.transcript.entries.size(), b.transcript.entries.size());
  std::size_t compared = 0;
  for (std::size_t i = 0; i < a.transcript.entries.size(); ++i) {
    const Frame& fa = a.transcript.entries[i].frame;
    if (fa.tag != Tag::MaskedPre) continue;
    EXPECT_NE(fa.payload, b.transcript.entries[i].frame.payload);
    ++compared;
  }
  EXPECT_EQ(compared, 4u);
}

TEST(Session, MaskBoundFromEnvironment) {
  ::setenv("SEEK_MASK_BOUND", "2.5", 1);
  EXPECT_EQ(default_mask_bound(), 2.5);
  ::setenv("SEEK_MASK_BOUND", "garbage", 1);
  EXPECT_EQ(default_mask_bound(), kDefaultMaskBound);
  ::unsetenv("SEEK_MASK_BOUND");
  EXPECT_EQ(default_mask_bound(), kDefaultMaskBound);

  const auto m = shared_random(kArch, kInput, 5);
  const QueryInput q{Tensor(m->input_shape()), {}};
  ServerSession s(m, 3, 2.5);
  s.handle(ClientSession(q.x0, {}, 0.0).start());
  for (const auto& [id, r] : s.pre_masks()) {
    for (double v : r) EXPECT_LE(std::abs(v), 2.5);
  }
}

TEST(Session, ServerIsObliviousToShifts) {
  std::mt19937_64 rng(6);
  const auto m = shared_random(kArch, kInput, 6);
  for (int k = 0; k < 10; ++k) {
    const Tensor x = random_tensor(m->input_shape(), rng);
    const auto plain = run_session(m, x, {}, 7);
    const auto shifted = run_session(m, x, {random_shifts(*m, rng, 5.0)}, 7);
    EXPECT_EQ(server_skeleton(plain.transcript), server_skeleton(shifted.transcript));
  }
}

TEST(Session, TranscriptReplayGivesSameLabel) {
  std::mt19937_64 rng(7);
  const auto m = shared_random(kArch, kInput, 7);
  for (int k = 0; k < 10; ++k) {
    const QueryInput q{random_tensor(m->input_shape(), rng), random_shifts(*m, rng)};
    const auto r = run_session(m, q.x0, {q.shifts}, 300 + k);
    EXPECT_EQ(replay(m, r.transcript), r.label);
  }
}

TEST(Session, OneMaskedPreAndEncPostPerLayerInOrder) {
  const auto m = shared_random(kArch, kInput, 7);
  const auto r = run_session(m, Tensor(m->input_shape()), {}, 1);
  std::vector<LayerId> pre, post;
  for (const auto& e : r.transcript.entries) {
    if (e.frame.tag == Tag::MaskedPre) pre.push_back(e.frame.layer);
    if (e.frame.tag == Tag::EncPost) post.push_back(e.frame.layer);
  }
  std::vector<LayerId> nonlinear;
  for (LayerId id : m->topo_order()) {
    if (is_nonlinear(m->layer(id).kind)) nonlinear.push_back(id);
  }
  EXPECT_EQ(pre, nonlinear);
  nonlinear.pop_back();  // the Argmax answers with the label instead
  EXPECT_EQ(post, nonlinear);
  EXPECT_EQ(r.transcript.entries.back().frame.tag, Tag::LabelResult);
}

TEST(Connection, MalformedFramesAreRejectedAndConnectionSurvives) {
  const auto m = shared_random(kArch, kInput, 8);
  ServerConnection conn(m, SeedPolicy{1, false}, kDefaultMaskBound);
  // Before the handshake.
  EXPECT_EQ(conn.handle(Frame{Tag::EncInput, 0, {}}).at(0).tag, Tag::Error);
  // Version mismatch.
  auto reply = conn.handle(Frame{Tag::Hello, 0, {2.0}});
  EXPECT_EQ(reply.at(0).tag, Tag::Error);
  EXPECT_EQ(reply.at(0).payload.at(0), double(ErrorCode::VersionMismatch));
  EXPECT_EQ(conn.handle(Frame{Tag::Hello, 0, {1.0}}).at(0).tag, Tag::HelloAck);
  // Wrong input length.
  EXPECT_EQ(conn.handle(Frame{Tag::EncInput, 0, {0.0, 1.0}}).at(0).tag, Tag::Error);
  // Start a valid session, then answer with a share of the wrong size.
  ClientSession c(Tensor(m->input_shape()), {}, 9.0);
  const Frame first = conn.handle(c.start()).at(0);
  ASSERT_EQ(first.tag, Tag::MaskedPre);
  reply = conn.handle(Frame{Tag::NonlinearShare, first.layer, {1.0}});
  EXPECT_EQ(reply.at(0).tag, Tag::Error);
  EXPECT_EQ(reply.at(0).layer, first.layer);
  // A wrong nonce in EncPost is a protocol error too.
  ClientSession d(Tensor(m->input_shape()), {}, 9.0);
  auto out = d.handle(conn.handle(d.start()).at(0));
  Frame share = conn.handle(out.at(0)).at(0);
  Frame post = d.handle(share).at(0);
  post.payload[0] = 10.0;
  EXPECT_EQ(conn.handle(post).at(0).tag, Tag::Error);
  // A full session still works afterwards.
  ClientSession e(Tensor(m->input_shape()), {}, 4.0);
  std::vector<Frame> pending{e.start()};
  while (!e.done()) {
    std::vector<Frame> next;
    for (const Frame& f : pending) {
      for (const Frame& r : conn.handle(f)) {
        for (const Frame& n : e.handle(r)) next.push_back(n);
      }
    }
    pending = std::move(next);
  }
  EXPECT_EQ(e.label(), forward_label(*m, {Tensor(m->input_shape()), {}}));
  EXPECT_GE(conn.rejected(), 3u);
}

TEST(Endpoint, Parsing) {
  EXPECT_EQ(parse_endpoint("127.0.0.1:7000").port, 7000);
  EXPECT_EQ(parse_endpoint("[::1]:80").host, "::1");
  EXPECT_EQ(parse_endpoint("localhost:0").host, "localhost");
  EXPECT_THROW(parse_endpoint("nohost"), StructuralError);
  EXPECT_THROW(parse_endpoint("host:99999"), StructuralError);
  EXPECT_THROW(parse_endpoint("host:12x"), StructuralError);
}

TEST(Socket, LoopbackMatchesInMemory) {
  std::mt19937_64 rng(9);
  const auto m = shared_random(kArch, kInput, 9);
  ProtocolServer server(m, parse_endpoint("127.0.0.1:0"), SeedPolicy{77, true});
  auto client = connect(Endpoint{"127.0.0.1", server.port()});
  EXPECT_EQ(client->info().input_shape, m->input_shape());
  EXPECT_EQ(client->info().num_classes, 4u);
  for (int k = 0; k < 20; ++k) {
    const QueryInput q{random_tensor(m->input_shape(), rng), random_shifts(*m, rng)};
    Transcript remote;
    const std::size_t label = client->infer(q.x0, {q.shifts}, 77, &remote);
    const auto local = run_session(m, q.x0, {q.shifts}, 77);
    EXPECT_EQ(label, local.label);
    ASSERT_EQ(remote.entries.size(), local.transcript.entries.size());
    for (std::size_t i = 0; i < remote.entries.size(); ++i) {
      EXPECT_EQ(remote.entries[i].frame, local.transcript.entries[i].frame);
    }
  }
}

TEST(Socket, SurvivesMalformedFramesAndServesNextSession) {
  const auto m = shared_random(kArch, kInput, 10);
  ProtocolServer server(m, parse_endpoint("127.0.0.1:0"), SeedPolicy{1, false});
  const Endpoint ep{"127.0.0.1", server.port()};
  {
    auto raw = SocketTransport::connect(ep);
    raw->send_bytes({0x99, 0, 0, 0, 0, 0, 0, 0, 0});
    const Frame reply = raw->receive();
    EXPECT_EQ(reply.tag, Tag::Error);
  }
  {
    auto c = connect(ep);
    c->transport().send(Frame{Tag::MaskedPre, 3, {1.0}});
    EXPECT_EQ(c->transport().receive().tag, Tag::Error);
    // Same connection, next session.
    EXPECT_EQ(c->infer(Tensor(m->input_shape()), {}, 0), forward_label(*m, {Tensor(m->input_shape()), {}}));
  }
  EXPECT_EQ(connect_and_infer(ep, Tensor(m->input_shape()), {}), forward_label(*m, {Tensor(m->input_shape()), {}}));
  EXPECT_GE(server.frames_rejected(), 2u);
}

TEST(Socket, ConcurrentConnectionsGetDistinctSeeds) {
  const auto m = shared_random(kArch, kInput, 11);
  ProtocolServer server(m, parse_endpoint("127.0.0.1:0"), SeedPolicy{5, false});
  const Endpoint ep{"127.0.0.1", server.port()};
  std::vector<std::thread> threads;
  std::vector<Transcript> ts(4);
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] { connect(ep)->infer(Tensor(m->input_shape()), {}, 0, &ts[t]); });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(server.sessions_started(), 4u);
  for (int a = 0; a < 4; ++a) {
    for (int b = a + 1; b < 4; ++b) EXPECT_NE(ts[a].entries.at(1).frame.payload, ts[b].entries.at(1).frame.payload);
  }
}

TEST(Socket, ConnectFailureIsTransportError) {
  std::uint16_t port = 0;
  {
    ProtocolServer s(shared_random(kArch, kInput, 1), parse_endpoint("127.0.0.1:0"), SeedPolicy{});
    port = s.port();
  }
  EXPECT_THROW(connect(Endpoint{"127.0.0.1", port}), TransportError);
}

TEST(Backend, EndpointReconnectsAfterFailure) {
  const auto m = shared_random(kArch, kInput, 12);
  auto server = std::make_unique<ProtocolServer>(m, parse_endpoint("127.0.0.1:0"), SeedPolicy{});
  const std::uint16_t port = server->port();
  OracleHandle o(std::make_shared<EndpointBackend>(Endpoint{"127.0.0.1", port}), m->output_id());
  const QueryInput q{Tensor(m->input_shape()), {}};
  const std::size_t expect = forward_label(*m, q);
  EXPECT_EQ(o.query(q), expect);
  server.reset();
  EXPECT_THROW(o.query(q), TransportError);
  EXPECT_EQ(o.count(), 2u);
  server = std::make_unique<ProtocolServer>(m, Endpoint{"127.0.0.1", port}, SeedPolicy{});
  EXPECT_EQ(o.query(q), expect);
}
