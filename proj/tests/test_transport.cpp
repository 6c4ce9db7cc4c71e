#include "support.hpp"

#include "vfl/protocol.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <future>
#include <limits>
#include <thread>

using namespace vfl;
using namespace std::chrono_literals;
using vfl::test::bitwise_equal;
using vfl::test::random_labels;
using vfl::test::random_matrix;
using vfl::test::random_vector;

namespace {

Message make(MessageKind kind, std::uint32_t t, std::uint16_t id, std::vector<Vec> payload = {}) {
  Message m;
  m.kind = kind;
  m.iteration = t;
  m.party_id = id;
  m.payload = std::move(payload);
  return m;
}

struct Fixture {
  Problem problem;
  std::vector<Mat> test_blocks;
  HyperParams hyper;
};

Fixture fixture(std::vector<Eigen::Index> widths, std::size_t epochs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Fixture f;
  const Eigen::Index n = 40;
  for (std::size_t m = 0; m < widths.size(); ++m) {
    f.problem.shards.emplace_back(m, random_matrix(n, widths[m], rng) / std::sqrt(double(n)));
    f.test_blocks.push_back(random_matrix(7, widths[m], rng));
  }
  f.problem.labels = random_labels(n, rng);
  f.hyper.rho = 0.9;
  f.hyper.lambda = 0.6;
  f.hyper.max_epochs = epochs;
  return f;
}

struct Distributed {
  std::vector<DiagnosticsRecord> trace;
  std::vector<Vec> test_scores;
  std::vector<PartyOutcome> outcomes;
  std::vector<std::vector<std::vector<std::uint8_t>>> party_frames;
};

enum class Link { InProcess, Tcp };

Distributed run_distributed(const Fixture& f, Link link, std::optional<double> sigma = {}, std::uint64_t noise_seed = 0,
                            bool shuffle = false) {
  const std::size_t parties = f.problem.parties();
  std::vector<std::unique_ptr<Channel>> coordinator_side;
  std::vector<std::unique_ptr<Channel>> party_side;
  std::unique_ptr<TcpListener> listener;
  if (link == Link::InProcess) {
    for (std::size_t m = 0; m < parties; ++m) {
      auto [a, b] = make_channel_pair();
      coordinator_side.push_back(std::move(a));
      party_side.push_back(std::make_unique<RecordingChannel>(std::move(b)));
    }
  } else {
    listener = std::make_unique<TcpListener>(Endpoint{"127.0.0.1", 0});
    for (std::size_t m = 0; m < parties; ++m) {
      auto client = tcp_connect(Endpoint{"127.0.0.1", listener->port()}, 5000ms);
      coordinator_side.push_back(listener->accept(5000ms));
      party_side.push_back(std::make_unique<RecordingChannel>(std::move(client)));
    }
  }
  if (shuffle) std::reverse(coordinator_side.begin(), coordinator_side.end());

  std::vector<std::future<PartyOutcome>> futures;
  for (std::size_t m = 0; m < parties; ++m) {
    PartyContext ctx;
    ctx.party_id = static_cast<std::uint16_t>(m + 1);
    ctx.shard = &f.problem.shards[m];
    ctx.test_block = &f.test_blocks[m];
    ctx.hyper = f.hyper;
    ctx.sigma = sigma;
    ctx.noise_seed = noise_seed;
    futures.push_back(std::async(std::launch::async, [&channel = *party_side[m], ctx] {
      return party_serve(channel, ctx, ProtocolOptions{10000ms});
    }));
  }
  Distributed out;
  out.trace = coordinator_serve(coordinator_side, f.problem.labels, f.hyper, ProtocolOptions{10000ms},
                                [&](const DiagnosticsRecord&, const Vec& scores) { out.test_scores.push_back(scores); });
  for (auto& fut : futures) out.outcomes.push_back(fut.get());
  for (auto& ch : party_side) out.party_frames.push_back(static_cast<RecordingChannel&>(*ch).frames());
  return out;
}

struct Local {
  std::vector<DiagnosticsRecord> trace;
  std::vector<EngineState> states;
  std::vector<Vec> test_scores;
};

Local run_local(const Fixture& f, SharePerturber* perturber = nullptr) {
  Engine engine(f.problem, f.hyper, perturber);
  Local out;
  out.trace = engine.run([&](const EngineState& s, const DiagnosticsRecord&) {
    out.states.push_back(s);
    std::vector<Vec> parts;
    for (std::size_t m = 0; m < s.x.size(); ++m) {
      Vec scores = f.test_blocks[m] * s.x[m];
      parts.push_back(scores);
    }
    out.test_scores.push_back(sum_shares(parts));
  });
  return out;
}

void check_equivalent(const Local& local, const Distributed& dist) {
  REQUIRE(local.trace.size() == dist.trace.size());
  for (std::size_t k = 0; k < local.trace.size(); ++k) {
    const auto& a = local.trace[k];
    const auto& b = dist.trace[k];
    CHECK(a.epoch == b.epoch);
    CHECK(bitwise_equal(a.lagrangian, b.lagrangian));
    CHECK(bitwise_equal(a.objective, b.objective));
    CHECK(bitwise_equal(a.lyapunov, b.lyapunov));
    CHECK(bitwise_equal(a.stationarity, b.stationarity));
    CHECK(bitwise_equal(a.primal_residual, b.primal_residual));
    CHECK(bitwise_equal(local.test_scores[k], dist.test_scores[k]));
    CHECK(a.descent_ok == b.descent_ok);
    CHECK(a.dual_gap <= 1e-8);
  }
  const auto& last = local.states.back();
  for (std::size_t m = 0; m < dist.outcomes.size(); ++m) {
    CHECK(dist.outcomes[m].epochs == local.trace.size());
    CHECK(bitwise_equal(dist.outcomes[m].x, last.x[m]));
  }
}

bool contains_bytes(const std::vector<std::uint8_t>& haystack, const Vec& needle) {
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(needle.size()) * 8);
  for (Eigen::Index i = 0; i < needle.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(needle[i]);
    for (int b = 0; b < 8; ++b) bytes[static_cast<std::size_t>(i) * 8 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return std::search(haystack.begin(), haystack.end(), bytes.begin(), bytes.end()) != haystack.end();
}

}  // namespace

TEST_SUITE("transport") {
  TEST_CASE("frame byte layout") {
    auto frame = encode(make(MessageKind::PushShare, 0x01020304u, 0x0506, {Vec::Constant(1, 1.0)}));
    std::vector<std::uint8_t> expected{0x56, 0x41, 0x01, 0x04, 0x04, 0x03, 0x02, 0x01, 0x06, 0x05,
                                       0x08, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F};
    CHECK(frame == expected);
    auto bye = encode(make(MessageKind::Shutdown, 3, 0));
    CHECK(bye.size() == kHeaderSize);
    CHECK(bye[3] == 5);
    CHECK(to_string(MessageKind::Broadcast) == "BROADCAST");
  }

  TEST_CASE("round trips") {
    std::mt19937_64 rng(1);
    auto push = make(MessageKind::PushShare, 7, 2, {random_vector(33, rng)});
    CHECK(decode(encode(push)) == push);
    auto cast = make(MessageKind::Broadcast, 8, 0, {random_vector(5, rng), random_vector(5, rng)});
    CHECK(decode(encode(cast)) == cast);
    auto empty = make(MessageKind::Register, 0, 1, {Vec()});
    CHECK(decode(encode(empty)) == empty);

    Vec special(5);
    special << std::numeric_limits<double>::quiet_NaN(), -0.0, std::numeric_limits<double>::infinity(),
        std::numeric_limits<double>::denorm_min(), -std::numeric_limits<double>::max();
    special[0] = std::bit_cast<double>(std::uint64_t{0x7FF8DEADBEEF0001});
    auto odd = make(MessageKind::Ack, 1, 3, {special});
    auto back = decode(encode(odd));
    CHECK(bitwise_equal(back.payload[0], special));
  }

  TEST_CASE("encode rejects inconsistent messages") {
    CHECK_THROWS_AS(encode(make(MessageKind::Broadcast, 1, 0, {Vec::Zero(2), Vec::Zero(3)})), ProtocolError);
    CHECK_THROWS_AS(encode(make(MessageKind::PushShare, 1, 1, {})), ProtocolError);
    CHECK_THROWS_AS(encode(make(MessageKind::Shutdown, 1, 0, {Vec::Zero(1)})), ProtocolError);
  }

  TEST_CASE("malformed and partial frames") {
    auto frame = encode(make(MessageKind::PushShare, 1, 1, {Vec::Ones(3)}));
    for (std::size_t cut = 0; cut < frame.size(); ++cut)
      CHECK_FALSE(try_decode(std::span(frame.data(), cut)).has_value());
    CHECK_THROWS_AS(decode(std::span(frame.data(), frame.size() - 1)), ProtocolError);
    auto trailing = frame;
    trailing.push_back(0);
    CHECK_THROWS_AS(decode(trailing), ProtocolError);
    auto two = frame;
    two.insert(two.end(), frame.begin(), frame.end());
    auto first = try_decode(two);
    REQUIRE(first);
    CHECK(first->consumed == frame.size());

    auto corrupt = [&](std::size_t index, std::uint8_t value) {
      auto bad = frame;
      bad[index] = value;
      return bad;
    };
    CHECK_THROWS_AS(try_decode(corrupt(0, 'X')), ProtocolError);
    CHECK_THROWS_AS(try_decode(corrupt(1, 'X')), ProtocolError);
    CHECK_THROWS_AS(try_decode(corrupt(2, 2)), ProtocolError);
    CHECK_THROWS_AS(try_decode(corrupt(3, 0)), ProtocolError);
    CHECK_THROWS_AS(try_decode(corrupt(3, 9)), ProtocolError);
    CHECK_THROWS_AS(try_decode(corrupt(10, 7)), ProtocolError);
    auto huge = corrupt(13, 0x50);
    CHECK_THROWS_AS(try_decode(huge), ProtocolError);
    // A bad prefix is reported before the header is complete.
    CHECK_THROWS_AS(try_decode(std::span(corrupt(0, 'X').data(), 1)), ProtocolError);

    auto bye = encode(make(MessageKind::Shutdown, 1, 0));
    bye[10] = 8;
    CHECK_THROWS_AS(try_decode(bye), ProtocolError);
    auto cast = encode(make(MessageKind::Broadcast, 1, 0, {Vec::Ones(1), Vec::Ones(1)}));
    cast[10] = 24;
    CHECK_THROWS_AS(try_decode(cast), ProtocolError);
  }

  TEST_CASE("random bytes never crash the decoder") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> byte(0, 255), length(0, 64);
    for (int trial = 0; trial < 5000; ++trial) {
      std::vector<std::uint8_t> junk(static_cast<std::size_t>(length(rng)));
      for (auto& b : junk) b = static_cast<std::uint8_t>(byte(rng));
      if (trial % 2 && junk.size() >= 4) {
        junk[0] = 0x56;
        junk[1] = 0x41;
        junk[2] = 1;
        junk[3] = static_cast<std::uint8_t>(1 + trial % 5);
      }
      try {
        auto d = try_decode(junk);
        if (d) CHECK(d->consumed <= junk.size());
      } catch (const ProtocolError&) {
      }
    }
  }

  TEST_CASE("in-process channel") {
    auto [a, b] = make_channel_pair();
    auto msg = make(MessageKind::PushShare, 4, 1, {Vec::Ones(3)});
    a->send(msg);
    CHECK(b->receive(100ms) == msg);
    CHECK_THROWS_AS(b->receive(20ms), TimeoutError);
    a.reset();
    CHECK_THROWS_AS(b->receive(100ms), ProtocolError);
    CHECK_THROWS_AS(b->send(msg), ProtocolError);
  }

  TEST_CASE("TCP loopback") {
    TcpListener listener(Endpoint{"127.0.0.1", 0});
    CHECK(listener.port() != 0);
    auto client = tcp_connect(Endpoint{"127.0.0.1", listener.port()}, 2000ms);
    auto server = listener.accept(2000ms);
    std::mt19937_64 rng(3);
    auto big = make(MessageKind::PushShare, 1, 1, {random_vector(200000, rng)});
    std::thread sender([&] { client->send(big); });
    CHECK(server->receive(5000ms) == big);
    sender.join();
    server->send(make(MessageKind::Shutdown, 9, 0));
    CHECK(client->receive(1000ms).iteration == 9);
    CHECK_THROWS_AS(server->receive(30ms), TimeoutError);
    client.reset();
    CHECK_THROWS_AS(server->receive(1000ms), ProtocolError);
    CHECK_THROWS_AS(listener.accept(30ms), TimeoutError);
  }

  TEST_CASE("connecting to a closed port times out") {
    std::uint16_t port = 0;
    {
      TcpListener probe(Endpoint{"127.0.0.1", 0});
      port = probe.port();
    }
    CHECK_THROWS_AS(tcp_connect(Endpoint{"127.0.0.1", port}, 200ms), TimeoutError);
  }

  TEST_CASE("endpoint parsing") {
    auto e = parse_endpoint("127.0.0.1:5000");
    CHECK(e.host == "127.0.0.1");
    CHECK(e.port == 5000);
    CHECK(parse_endpoint(":7").host.empty());
    CHECK_THROWS_AS(parse_endpoint("localhost"), ConfigError);
    CHECK_THROWS_AS(parse_endpoint("h:70000"), ConfigError);
    CHECK_THROWS_AS(parse_endpoint("h:12x"), ConfigError);
  }

  TEST_CASE("single party protocol matches the engine") {
    auto f = fixture({4}, 12, 4);
    check_equivalent(run_local(f), run_distributed(f, Link::InProcess));
  }

  TEST_CASE("two party protocol matches the engine in any connection order") {
    auto f = fixture({3, 5}, 15, 5);
    auto local = run_local(f);
    check_equivalent(local, run_distributed(f, Link::InProcess));
    check_equivalent(local, run_distributed(f, Link::InProcess, {}, 0, true));
  }

  TEST_CASE("perturbed protocol over TCP matches the engine") {
    auto f = fixture({3, 2, 4}, 10, 6);
    const double sigma = 0.05;
    GaussianPerturber perturber(77, {sigma, sigma, sigma});
    auto local = run_local(f, &perturber);
    auto dist = run_distributed(f, Link::Tcp, sigma, 77);
    check_equivalent(local, dist);

    // Frames leaving a party never contain its raw share, and have the expected sizes.
    const std::size_t n = f.problem.samples();
    for (std::size_t m = 0; m < 3; ++m) {
      const auto& frames = dist.party_frames[m];
      REQUIRE(frames.size() == 1 + 2 * f.hyper.max_epochs);
      CHECK(frames[0].size() == kHeaderSize + 3 * 8);
      for (std::size_t t = 0; t < f.hyper.max_epochs; ++t) {
        const auto& push = frames[1 + 2 * t];
        const auto& ack = frames[2 + 2 * t];
        CHECK(push.size() == kHeaderSize + 8 * n);
        CHECK(ack.size() == kHeaderSize + 8 * (3 + 7));
        CHECK_FALSE(contains_bytes(push, local.states[t].shares[m]));
        CHECK_FALSE(contains_bytes(ack, local.states[t].shares[m]));
        CHECK(decode(push).payload[0] == local.states[t].released[m]);
      }
    }
  }

  TEST_CASE("early stop ends every role at the same epoch") {
    auto f = fixture({3, 3}, 500, 7);
    f.hyper.early_stop = true;
    f.hyper.lyapunov_tol = 1e-6;
    auto local = run_local(f);
    REQUIRE(local.trace.size() < 500);
    check_equivalent(local, run_distributed(f, Link::InProcess));
  }

  TEST_CASE("cached release reproduces the other parties' sum") {
    auto f = fixture({3, 4, 2}, 8, 8);
    auto local = run_local(f);
    for (const auto& s : local.states) {
      for (std::size_t m = 0; m < 3; ++m) {
        Vec cached = others_minus_z(s.residual, s.released[m]);
        Vec direct = -s.z;
        for (std::size_t k = 0; k < 3; ++k)
          if (k != m) direct += s.released[k];
        const double scale = s.z.norm() + s.aggregate.norm() + s.released[m].norm();
        CHECK((cached - direct).lpNorm<Eigen::Infinity>() <= 8.0 * std::numeric_limits<double>::epsilon() * scale);
      }
    }
  }

  TEST_CASE("duplicate share is rejected") {
    auto f = fixture({2}, 3, 9);
    auto [coord, party] = make_channel_pair();
    std::vector<std::unique_ptr<Channel>> channels;
    channels.push_back(std::move(coord));
    auto fake = std::async(std::launch::async, [&channel = *party] {
      Vec meta(3);
      meta << 40, 2, 0;
      channel.send(make(MessageKind::Register, 0, 1, {meta}));
      channel.receive(2000ms);
      channel.send(make(MessageKind::PushShare, 1, 1, {Vec::Zero(40)}));
      channel.receive(2000ms);
      channel.send(make(MessageKind::PushShare, 1, 1, {Vec::Zero(40)}));
    });
    try {
      coordinator_serve(channels, f.problem.labels, f.hyper, ProtocolOptions{2000ms});
      FAIL("expected a protocol error");
    } catch (const ProtocolError& e) {
      CHECK(std::string(e.what()).find("duplicate share") != std::string::npos);
    }
    fake.get();
  }

  TEST_CASE("missing party times out") {
    auto f = fixture({2, 2}, 3, 10);
    std::vector<std::unique_ptr<Channel>> channels;
    auto [c1, p1] = make_channel_pair();
    auto [c2, p2] = make_channel_pair();
    channels.push_back(std::move(c1));
    channels.push_back(std::move(c2));
    PartyContext ctx;
    ctx.party_id = 1;
    ctx.shard = &f.problem.shards[0];
    ctx.hyper = f.hyper;
    auto present = std::async(std::launch::async, [&channel = *p1, ctx] {
      try {
        party_serve(channel, ctx, ProtocolOptions{3000ms});
      } catch (const ProtocolError&) {
      }
    });
    CHECK_THROWS_AS(coordinator_serve(channels, f.problem.labels, f.hyper, ProtocolOptions{200ms}), TimeoutError);
    channels.clear();
    present.get();
  }

  TEST_CASE("registration checks") {
    auto f = fixture({2}, 3, 11);
    auto attempt = [&](std::uint16_t id, double rows) {
      auto [coord, party] = make_channel_pair();
      std::vector<std::unique_ptr<Channel>> channels;
      channels.push_back(std::move(coord));
      Vec meta(3);
      meta << rows, 2, 0;
      party->send(make(MessageKind::Register, 0, id, {meta}));
      try {
        coordinator_serve(channels, f.problem.labels, f.hyper, ProtocolOptions{500ms});
      } catch (const ProtocolError& e) {
        return std::string(e.what());
      }
      return std::string();
    };
    CHECK(attempt(1, 39).find("registration rejected") != std::string::npos);
    CHECK(attempt(2, 40).find("registration rejected") != std::string::npos);
    CHECK(attempt(0, 40).find("registration rejected") != std::string::npos);
  }
}
