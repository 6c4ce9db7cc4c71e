#include "vfl/protocol.hpp"

#include <algorithm>
#include <map>

namespace vfl {
namespace {

std::string where(std::uint16_t party, std::uint32_t t) {
  return "party " + std::to_string(party) + " at iteration " + std::to_string(t);
}

Message expect(Channel& channel, MessageKind kind, std::uint32_t iteration, std::uint16_t party, Millis timeout) {
  Message m = channel.receive(timeout);
  if (m.party_id != party)
    throw ProtocolError("frame from " + where(party, iteration) + " claims party id " + std::to_string(m.party_id));
  if (m.kind == MessageKind::PushShare && kind != MessageKind::PushShare && m.iteration <= iteration)
    throw ProtocolError("duplicate share from " + where(party, m.iteration));
  if (m.kind != kind)
    throw ProtocolError("expected " + to_string(kind) + " from " + where(party, iteration) + ", got " +
                        to_string(m.kind));
  if (m.iteration != iteration)
    throw ProtocolError(to_string(kind) + " from party " + std::to_string(party) + " has iteration " +
                        std::to_string(m.iteration) + ", expected " + std::to_string(iteration));
  return m;
}

Message message(MessageKind kind, std::uint32_t iteration, std::uint16_t party, std::vector<Vec> payload = {}) {
  Message m;
  m.kind = kind;
  m.iteration = iteration;
  m.party_id = party;
  m.payload = std::move(payload);
  return m;
}

Vec scalars(std::initializer_list<double> values) {
  Vec v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v[i++] = x;
  return v;
}

}  // namespace

std::vector<DiagnosticsRecord> coordinator_serve(std::vector<std::unique_ptr<Channel>>& channels, const Vec& labels,
                                                 const HyperParams& hyper, const ProtocolOptions& options,
                                                 const CoordinatorCallback& callback) {
  hyper.validate();
  const std::size_t parties = channels.size();
  if (parties == 0 || parties > 65535) throw ProtocolError("coordinator needs between 1 and 65535 parties");
  const auto n = labels.size();

  // Registration: order the connections by party id.
  std::vector<Channel*> by_party(parties, nullptr);
  std::size_t test_rows = 0;
  bool first = true;
  for (auto& channel : channels) {
    Message reg = channel->receive(options.io_timeout);
    if (reg.kind != MessageKind::Register) throw ProtocolError("expected REGISTER, got " + to_string(reg.kind));
    const std::uint16_t id = reg.party_id;
    if (id == 0 || id > parties)
      throw ProtocolError("registration rejected: party id " + std::to_string(id) + " outside 1.." +
                          std::to_string(parties));
    if (by_party[id - 1]) throw ProtocolError("registration rejected: party " + std::to_string(id) + " registered twice");
    const Vec& meta = reg.payload[0];
    if (meta.size() != 3) throw ProtocolError("registration rejected: malformed metadata from party " + std::to_string(id));
    if (meta[0] != static_cast<double>(n))
      throw ProtocolError("registration rejected: party " + std::to_string(id) + " has " +
                          std::to_string(static_cast<long long>(meta[0])) + " samples, expected " + std::to_string(n));
    auto rows = static_cast<std::size_t>(meta[2]);
    if (!first && rows != test_rows)
      throw ProtocolError("registration rejected: party " + std::to_string(id) + " holds a different test set size");
    test_rows = rows;
    first = false;
    by_party[id - 1] = channel.get();
  }
  const Vec schedule = scalars({static_cast<double>(parties), static_cast<double>(hyper.max_epochs)});
  for (std::size_t m = 0; m < parties; ++m)
    by_party[m]->send(message(MessageKind::Ack, 0, 0, {schedule}));

  DescentMonitor monitor(labels, hyper);
  std::vector<DiagnosticsRecord> trace;
  Vec y = Vec::Zero(n);
  std::uint32_t t = 0;
  while (t < hyper.max_epochs) {
    const std::uint32_t next = t + 1;
    std::vector<Vec> released(parties);
    for (std::size_t m = 0; m < parties; ++m) {
      const auto id = static_cast<std::uint16_t>(m + 1);
      Message push = expect(*by_party[m], MessageKind::PushShare, next, id, options.io_timeout);
      if (push.payload[0].size() != n)
        throw ProtocolError("share from " + where(id, next) + " has the wrong length");
      released[m] = std::move(push.payload[0]);
    }

    auto central = central_update(y, released, labels, hyper);
    for (std::size_t m = 0; m < parties; ++m)
      by_party[m]->send(message(MessageKind::Broadcast, next, 0, {central.residual, central.y}));

    std::vector<PartyTerms> terms(parties);
    std::vector<Vec> test_parts(parties);
    for (std::size_t m = 0; m < parties; ++m) {
      const auto id = static_cast<std::uint16_t>(m + 1);
      Message ack = expect(*by_party[m], MessageKind::Ack, next, id, options.io_timeout);
      const Vec& report = ack.payload[0];
      if (report.size() != static_cast<Eigen::Index>(3 + test_rows))
        throw ProtocolError("report from " + where(id, next) + " has the wrong length");
      terms[m] = PartyTerms{report[0], report[1], report[2]};
      test_parts[m] = report.tail(static_cast<Eigen::Index>(test_rows));
    }

    auto record = assemble_diagnostics(next, central.z, central.y, central.aggregate, central.residual, labels,
                                       hyper, terms);
    monitor.check(record, central.z, central.y);
    y = std::move(central.y);
    t = next;
    trace.push_back(record);
    if (callback) callback(record, test_rows ? sum_shares(test_parts) : Vec());
    if (hyper.early_stop && record.lyapunov <= hyper.lyapunov_tol) break;
  }

  for (std::size_t m = 0; m < parties; ++m) by_party[m]->send(message(MessageKind::Shutdown, t, 0));
  return trace;
}

PartyOutcome party_serve(Channel& channel, const PartyContext& context, const ProtocolOptions& options) {
  if (!context.shard) throw Error("party context has no shard");
  if (context.party_id == 0) throw ProtocolError("party ids start at 1");
  const PartyShard& shard = *context.shard;
  const HyperParams& hyper = context.hyper;
  const std::uint16_t id = context.party_id;
  const auto n = static_cast<Eigen::Index>(shard.rows());
  const std::size_t test_rows = context.test_block ? static_cast<std::size_t>(context.test_block->rows()) : 0;
  if (context.test_block && static_cast<std::size_t>(context.test_block->cols()) != shard.width())
    throw DimensionError("test block width does not match the training block");

  XStepSolver solver(shard, hyper.lambda, hyper.rho, hyper.ball_radius);
  PartyNoise noise(context.noise_seed, id - 1u, context.sigma.value_or(0.0));

  channel.send(message(MessageKind::Register, 0, id,
                       {scalars({static_cast<double>(n), static_cast<double>(shard.width()),
                                 static_cast<double>(test_rows)})}));
  Message ack = channel.receive(options.io_timeout);
  if (ack.kind != MessageKind::Ack || ack.iteration != 0 || ack.payload[0].size() != 2)
    throw ProtocolError("party " + std::to_string(id) + " expected a registration ACK, got " + to_string(ack.kind));
  const auto epochs = static_cast<std::size_t>(ack.payload[0][1]);

  Vec x_prev = Vec::Zero(static_cast<Eigen::Index>(shard.width()));
  Vec release = Vec::Zero(n);
  Vec residual = Vec::Zero(n);
  Vec y = Vec::Zero(n);
  PartyOutcome outcome;
  outcome.x = x_prev;
  if (epochs == 0) {
    Message bye = channel.receive(options.io_timeout);
    if (bye.kind != MessageKind::Shutdown) throw ProtocolError("expected SHUTDOWN, got " + to_string(bye.kind));
    return outcome;
  }

  std::uint32_t t = 0;
  for (;;) {
    // x-step from the broadcast of iteration t and the locally cached release.
    Vec c = others_minus_z(residual, release);
    Vec x = solver.solve(y, c, x_prev);
    Vec share = shard.block() * x;
    release = noise.apply(share);
    channel.send(message(MessageKind::PushShare, t + 1, id, {release}));

    Message in = channel.receive(options.io_timeout);
    if (in.kind == MessageKind::Shutdown) {
      if (in.iteration != t) throw ProtocolError("SHUTDOWN for iteration " + std::to_string(in.iteration));
      break;
    }
    if (in.kind != MessageKind::Broadcast || in.iteration != t + 1)
      throw ProtocolError("party " + std::to_string(id) + " expected BROADCAST " + std::to_string(t + 1) + ", got " +
                          to_string(in.kind) + " " + std::to_string(in.iteration));
    if (in.payload[0].size() != n) throw ProtocolError("broadcast has the wrong length");
    residual = std::move(in.payload[0]);
    y = std::move(in.payload[1]);
    x_prev = std::move(x);
    t += 1;
    outcome.x = x_prev;
    outcome.epochs = t;

    auto terms = party_terms(shard, x_prev, residual, y, hyper);
    Vec report(static_cast<Eigen::Index>(3 + test_rows));
    report[0] = terms.reg;
    report[1] = terms.gradient_map_sq;
    report[2] = terms.stationarity_map_sq;
    if (test_rows) {
      Vec scores = *context.test_block * x_prev;
      report.tail(static_cast<Eigen::Index>(test_rows)) = scores;
    }
    channel.send(message(MessageKind::Ack, t, id, {report}));

    if (t >= epochs) {
      Message bye = channel.receive(options.io_timeout);
      if (bye.kind != MessageKind::Shutdown || bye.iteration != t)
        throw ProtocolError("party " + std::to_string(id) + " expected SHUTDOWN " + std::to_string(t) + ", got " +
                            to_string(bye.kind));
      break;
    }
  }
  return outcome;
}

}  // namespace vfl
