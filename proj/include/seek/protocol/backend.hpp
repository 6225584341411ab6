#pragma once

#include <atomic>
#include <memory>
#include <mutex>

#include "seek/oracle.hpp"
#include "seek/protocol/session.hpp"
#include "seek/protocol/socket.hpp"

namespace seek::protocol {

// Every query is a full protocol session over the in-memory channel; session
// k uses seed base + k.
class InMemoryProtocolBackend final : public OracleBackend {
 public:
  InMemoryProtocolBackend(std::shared_ptr<const ModelGraph> model, std::uint64_t seed,
                          double mask_bound = default_mask_bound())
      : model_(std::move(model)), seed_(seed), mask_bound_(mask_bound) {}

  std::size_t label(const QueryInput& q) override {
    q.shifts.validate(*model_);
    return run_session(model_, q.x0, MaliciousClientPlan{q.shifts}, seed_ + counter_.fetch_add(1), mask_bound_)
        .label;
  }

 private:
  std::shared_ptr<const ModelGraph> model_;
  std::uint64_t seed_;
  double mask_bound_;
  std::atomic<std::uint64_t> counter_{0};
};

// Queries a served model over TCP, one session per query on a kept-alive
// connection. A failed connection is dropped and re-established on the next
// query; the failing query raises TransportError.
class EndpointBackend final : public OracleBackend {
 public:
  explicit EndpointBackend(Endpoint ep, std::uint64_t seed = 0) : ep_(std::move(ep)), seed_(seed) {}

  std::size_t label(const QueryInput& q) override {
    std::lock_guard<std::mutex> lock(mu_);
    try {
      if (!conn_) conn_ = connect(ep_);
      return conn_->infer(q.x0, MaliciousClientPlan{q.shifts}, seed_ + sessions_++);
    } catch (const TransportError&) {
      conn_.reset();
      throw;
    } catch (const ProtocolError&) {
      conn_.reset();
      throw;
    }
  }

  const ModelInfo& info() {
    std::lock_guard<std::mutex> lock(mu_);
    if (!conn_) conn_ = connect(ep_);
    return conn_->info();
  }

 private:
  Endpoint ep_;
  std::uint64_t seed_;
  std::mutex mu_;
  std::unique_ptr<ClientConnection> conn_;
  std::uint64_t sessions_ = 0;
};

}  // namespace seek::protocol
