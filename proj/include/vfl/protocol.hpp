#pragma once

#include "vfl/channel.hpp"
#include "vfl/engine.hpp"
#include "vfl/privacy.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace vfl {

struct ProtocolOptions {
  Millis io_timeout{30000};
};

// Called once per epoch with the record and the summed test scores
// (empty when parties hold no test rows).
using CoordinatorCallback = std::function<void(const DiagnosticsRecord&, const Vec& test_scores)>;

// Central node. `channels` are the party connections in any order; parties
// identify themselves with REGISTER. Returns the diagnostics trace, which
// matches the in-process engine bit for bit.
std::vector<DiagnosticsRecord> coordinator_serve(std::vector<std::unique_ptr<Channel>>& channels, const Vec& labels,
                                                 const HyperParams& hyper, const ProtocolOptions& options = {},
                                                 const CoordinatorCallback& callback = {});

struct PartyOutcome {
  Vec x;
  std::size_t epochs = 0;
};

struct PartyContext {
  std::uint16_t party_id = 1;  // 1..M on the wire
  const PartyShard* shard = nullptr;
  const Mat* test_block = nullptr;  // optional rows of the test set for this party's columns
  HyperParams hyper;
  std::optional<double> sigma;  // share noise; unset or 0 disables it
  std::uint64_t noise_seed = 0;
};

PartyOutcome party_serve(Channel& channel, const PartyContext& context, const ProtocolOptions& options = {});

}  // namespace vfl
