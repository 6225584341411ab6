#pragma once

#include <cstdint>
#include <cstdlib>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "seek/forward.hpp"
#include "seek/model.hpp"
#include "seek/ops.hpp"
#include "seek/protocol/wire.hpp"
#include "seek/shift.hpp"

namespace seek::protocol {

inline constexpr double kDefaultMaskBound = 1e3;

// SEEK_MASK_BOUND overrides the default; read whenever a server is created.
inline double default_mask_bound() {
  if (const char* env = std::getenv("SEEK_MASK_BOUND")) {
    char* end = nullptr;
    const double v = std::strtod(env, &end);
    if (end != env && v > 0.0) return v;
  }
  return kDefaultMaskBound;
}

struct MaliciousClientPlan {
  ShiftSet shifts;
};

enum class Direction { ClientToServer, ServerToClient };

struct Transcript {
  std::uint64_t seed = 0;
  struct Entry {
    Direction direction;
    Frame frame;
  };
  std::vector<Entry> entries;

  std::vector<Frame> client_frames() const {
    std::vector<Frame> out;
    for (const auto& e : entries) {
      if (e.direction == Direction::ClientToServer) out.push_back(e.frame);
    }
    return out;
  }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Session nonce as carried in blobs: an integer below 2^52, exact in a double.
inline double session_nonce(std::uint64_t seed) {
  return static_cast<double>(splitmix64(seed) >> 12);
}

// The ideal two-party functionality for one non-linear layer: it receives the
// client's share of y and the server's mask, reconstructs, evaluates, re-shares.
struct NonlinearFunctionality {
  static Tensor reconstruct(const Shape& shape, const std::vector<double>& client_share,
                            const std::vector<double>& mask) {
    Tensor y(shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = client_share[i] + mask[i];
    return y;
  }
  static Tensor evaluate(const LayerSpec& layer, Tensor y) {
    if (layer.kind == LayerKind::ReLU) return apply_relu(std::move(y));
    return apply_maxpool_relu(y, layer.pool());
  }
  static std::size_t label(const Tensor& y) { return argmax_lowest(y.values()); }
};

// Server side of one inference. Computes linear layers on the (mock) ciphertext,
// masks each non-linear input, and unmasks each returned share. Control flow
// depends only on frame tags, layer ids and lengths.
class ServerSession {
 public:
  ServerSession(std::shared_ptr<const ModelGraph> model, std::uint64_t seed, double mask_bound)
      : model_(std::move(model)), rng_(seed), mask_(-mask_bound, mask_bound), seed_(seed) {
    values_.resize(model_->layers().size());
  }

  bool finished() const noexcept { return state_ == State::Done; }
  std::uint64_t seed() const noexcept { return seed_; }
  // Masks drawn this session, keyed by layer; white-box access for tests.
  const std::map<LayerId, std::vector<double>>& pre_masks() const noexcept { return r_y_; }
  const std::map<LayerId, std::vector<double>>& post_masks() const noexcept { return r_z_; }

  std::vector<Frame> handle(const Frame& f) {
    switch (state_) {
      case State::AwaitInput: return on_input(f);
      case State::AwaitShare: return on_share(f);
      case State::AwaitPost: return on_post(f);
      case State::Done: break;
    }
    throw ProtocolError("frame after session end", f.layer);
  }

 private:
  enum class State { AwaitInput, AwaitShare, AwaitPost, Done };

  void expect(const Frame& f, Tag tag, LayerId layer, std::size_t length) const {
    if (f.tag != tag) throw ProtocolError("expected " + to_string(tag) + ", got " + to_string(f.tag), f.layer);
    if (f.layer != layer) throw ProtocolError("frame for unexpected layer " + std::to_string(f.layer), layer);
    if (f.payload.size() != length) {
      throw ProtocolError("payload of " + std::to_string(f.payload.size()) + " values, expected " +
                              std::to_string(length),
                          layer);
    }
  }

  void check_nonce(const Frame& f) const {
    if (f.payload.front() != nonce_) throw ProtocolError("blob nonce does not match session", f.layer);
  }

  std::vector<double> draw(std::size_t n) {
    std::vector<double> r(n);
    for (double& v : r) v = mask_(rng_);
    return r;
  }

  Tensor& value(LayerId id) { return values_[model_->position(id)]; }

  std::vector<Frame> on_input(const Frame& f) {
    const Shape& shape = model_->input_shape();
    expect(f, Tag::EncInput, 0, shape_size(shape) + 1);
    nonce_ = f.payload.front();
    value(model_->input_id()) = Tensor(shape, std::vector<double>(f.payload.begin() + 1, f.payload.end()));
    return advance();
  }

  // Homomorphic part: run linear layers and Adds up to the next non-linear layer.
  std::vector<Frame> advance() {
    const auto& order = model_->topo_order();
    while (cursor_ < order.size()) {
      const LayerSpec& l = model_->layer(order[cursor_]);
      if (is_nonlinear(l.kind)) {
        const Tensor& y = value(l.inputs.front());
        std::vector<double> r = draw(y.size());
        Frame out{Tag::MaskedPre, l.id, std::vector<double>(y.size())};
        for (std::size_t i = 0; i < y.size(); ++i) out.payload[i] = y[i] - r[i];
        r_y_[l.id] = std::move(r);
        state_ = State::AwaitShare;
        return {out};
      }
      if (l.kind == LayerKind::Add) {
        value(l.id) = add_tensors(value(l.inputs[0]), value(l.inputs[1]));
      } else if (l.kind != LayerKind::Input) {
        value(l.id) = apply_linear(l, value(l.inputs.front()));
      }
      ++cursor_;
    }
    throw ProtocolError("model has no output layer");
  }

  std::vector<Frame> on_share(const Frame& f) {
    const LayerSpec& l = model_->layer(model_->topo_order()[cursor_]);
    const Shape& y_shape = model_->in_shape(l.id);
    expect(f, Tag::NonlinearShare, l.id, shape_size(y_shape));
    const Tensor y = NonlinearFunctionality::reconstruct(y_shape, f.payload, r_y_.at(l.id));
    if (l.kind == LayerKind::Argmax) {
      state_ = State::Done;
      return {Frame{Tag::LabelResult, l.id, {static_cast<double>(NonlinearFunctionality::label(y))}}};
    }
    const Tensor z = NonlinearFunctionality::evaluate(l, y);
    std::vector<double> r = draw(z.size());
    Frame out{Tag::NonlinearShare, l.id, std::vector<double>(z.size())};
    for (std::size_t i = 0; i < z.size(); ++i) out.payload[i] = z[i] - r[i];
    r_z_[l.id] = std::move(r);
    state_ = State::AwaitPost;
    return {out};
  }

  std::vector<Frame> on_post(const Frame& f) {
    const LayerSpec& l = model_->layer(model_->topo_order()[cursor_]);
    const Shape& z_shape = model_->out_shape(l.id);
    expect(f, Tag::EncPost, l.id, shape_size(z_shape) + 1);
    check_nonce(f);
    const std::vector<double>& r = r_z_.at(l.id);
    Tensor z(z_shape);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = f.payload[i + 1] + r[i];
    value(l.id) = std::move(z);
    ++cursor_;
    return advance();
  }

  std::shared_ptr<const ModelGraph> model_;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> mask_;
  std::uint64_t seed_;
  State state_ = State::AwaitInput;
  std::size_t cursor_ = 0;
  double nonce_ = 0.0;
  std::vector<Tensor> values_;
  std::map<LayerId, std::vector<double>> r_y_;
  std::map<LayerId, std::vector<double>> r_z_;
};

// Client side of one inference, applying the malicious plan to its own shares.
class ClientSession {
 public:
  ClientSession(Tensor input, MaliciousClientPlan plan, double nonce)
      : input_(std::move(input)), plan_(std::move(plan)), nonce_(nonce) {}

  Frame start() {
    Frame f{Tag::EncInput, 0, {nonce_}};
    f.payload.insert(f.payload.end(), input_.values().begin(), input_.values().end());
    return f;
  }

  // Reply to one server frame; empty once the label has arrived.
  std::vector<Frame> handle(const Frame& f) {
    switch (f.tag) {
      case Tag::MaskedPre: {
        Frame out{Tag::NonlinearShare, f.layer, f.payload};
        shift(out.payload, f.layer, Side::Pre);
        return {out};
      }
      case Tag::NonlinearShare: {
        std::vector<double> share = f.payload;
        shift(share, f.layer, Side::Post);
        Frame out{Tag::EncPost, f.layer, {nonce_}};
        out.payload.insert(out.payload.end(), share.begin(), share.end());
        return {out};
      }
      case Tag::LabelResult:
        if (f.payload.size() != 1 || !(f.payload[0] >= 0.0)) throw ProtocolError("malformed label", f.layer);
        label_ = static_cast<std::size_t>(f.payload[0]);
        done_ = true;
        return {};
      case Tag::Error:
        throw ProtocolError("server rejected session, code " +
                                std::to_string(f.payload.empty() ? 0 : static_cast<int>(f.payload[0])),
                            f.layer);
      default:
        throw ProtocolError("unexpected " + to_string(f.tag) + " from server", f.layer);
    }
  }

  bool done() const noexcept { return done_; }
  std::size_t label() const {
    if (!done_) throw ProtocolError("session has no label yet");
    return label_;
  }

 private:
  void shift(std::vector<double>& share, LayerId layer, Side side) const {
    const BoundaryShift* s = plan_.shifts.find(layer, side);
    if (!s) return;
    if (!s->fits(share.size())) throw StructuralError("plan shift does not fit layer " + std::to_string(layer));
    s->apply(share);
  }

  Tensor input_;
  MaliciousClientPlan plan_;
  double nonce_;
  bool done_ = false;
  std::size_t label_ = 0;
};

struct SeedPolicy {
  std::uint64_t base = 0;
  // Reuse `base` for every session instead of base + session index.
  bool fixed = false;

  std::uint64_t session_seed(std::uint64_t index) const { return fixed ? base : base + index; }
};

// One connection's server state: handshake, then sessions back to back.
// Protocol violations produce an Error frame and discard the session; the
// connection stays usable.
class ServerConnection {
 public:
  using SeedSource = std::function<std::uint64_t()>;

  ServerConnection(std::shared_ptr<const ModelGraph> model, SeedSource seeds, double mask_bound)
      : model_(std::move(model)), seeds_(std::move(seeds)), mask_bound_(mask_bound) {}
  ServerConnection(std::shared_ptr<const ModelGraph> model, SeedPolicy policy, double mask_bound)
      : ServerConnection(std::move(model), SeedSource{[policy, n = std::uint64_t{0}]() mutable {
                           return policy.session_seed(n++);
                         }},
                         mask_bound) {}

  std::vector<Frame> handle(const Frame& f) {
    if (!ready_) {
      if (f.tag != Tag::Hello) return {error_frame(ErrorCode::OutOfOrder, f.layer)};
      if (f.payload.size() != 1 || f.payload[0] != kProtocolVersion) {
        return {error_frame(ErrorCode::VersionMismatch, 0)};
      }
      ready_ = true;
      return {hello_ack(*model_)};
    }
    if (f.tag == Tag::Hello) return {error_frame(ErrorCode::OutOfOrder, 0)};
    try {
      if (!session_ || session_->finished()) {
        if (f.tag != Tag::EncInput) return {error_frame(ErrorCode::OutOfOrder, f.layer)};
        session_ = std::make_unique<ServerSession>(model_, seeds_(), mask_bound_);
        ++sessions_;
      }
      return session_->handle(f);
    } catch (const ProtocolError& e) {
      session_.reset();
      ++rejected_;
      return {error_frame(ErrorCode::Malformed, e.layer())};
    }
  }

  const ServerSession* session() const noexcept { return session_.get(); }
  std::uint64_t sessions_started() const noexcept { return sessions_; }
  std::uint64_t rejected() const noexcept { return rejected_; }

 private:
  std::shared_ptr<const ModelGraph> model_;
  SeedSource seeds_;
  double mask_bound_;
  bool ready_ = false;
  std::unique_ptr<ServerSession> session_;
  std::uint64_t sessions_ = 0;
  std::uint64_t rejected_ = 0;
};

// Client-side byte channel.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(const Frame& f) = 0;
  virtual Frame receive() = 0;
};

// Loops frames through a local ServerConnection, via their byte encoding.
class InMemoryTransport final : public Transport {
 public:
  explicit InMemoryTransport(std::shared_ptr<ServerConnection> server) : server_(std::move(server)) {}

  void send(const Frame& f) override {
    for (const Frame& reply : server_->handle(decode(encode(f)))) inbox_.push_back(encode(reply));
  }
  Frame receive() override {
    if (inbox_.empty()) throw TransportError("in-memory channel: no pending frame");
    Frame f = decode(inbox_.front());
    inbox_.pop_front();
    return f;
  }

  ServerConnection& server() { return *server_; }

 private:
  std::shared_ptr<ServerConnection> server_;
  std::deque<std::vector<std::uint8_t>> inbox_;
};

class ClientConnection {
 public:
  explicit ClientConnection(std::unique_ptr<Transport> transport) : transport_(std::move(transport)) {
    transport_->send(Frame{Tag::Hello, 0, {static_cast<double>(kProtocolVersion)}});
    const Frame ack = transport_->receive();
    if (ack.tag == Tag::Error) throw ProtocolError("handshake rejected: version mismatch");
    info_ = parse_hello_ack(ack);
    if (info_.version != kProtocolVersion) throw ProtocolError("server speaks protocol version " +
                                                               std::to_string(info_.version));
  }

  const ModelInfo& info() const noexcept { return info_; }
  Transport& transport() { return *transport_; }

  std::size_t infer(const Tensor& input, const MaliciousClientPlan& plan, std::uint64_t seed,
                    Transcript* transcript = nullptr) {
    if (input.shape() != info_.input_shape) {
      throw StructuralError("input shape " + shape_string(input.shape()) + " does not match served model " +
                            shape_string(info_.input_shape));
    }
    if (transcript) transcript->seed = seed;
    ClientSession client(input, plan, session_nonce(seed));
    std::vector<Frame> outgoing{client.start()};
    while (!client.done()) {
      for (const Frame& f : outgoing) {
        if (transcript) transcript->entries.push_back({Direction::ClientToServer, f});
        transport_->send(f);
      }
      const Frame reply = transport_->receive();
      if (transcript) transcript->entries.push_back({Direction::ServerToClient, reply});
      outgoing = client.handle(reply);
    }
    return client.label();
  }

 private:
  std::unique_ptr<Transport> transport_;
  ModelInfo info_;
};

struct SessionResult {
  std::size_t label = 0;
  Transcript transcript;
};

// One in-memory session with server masks drawn from `seed`.
inline SessionResult run_session(std::shared_ptr<const ModelGraph> model, const Tensor& input,
                                 const MaliciousClientPlan& plan, std::uint64_t seed,
                                 double mask_bound = default_mask_bound()) {
  auto server = std::make_shared<ServerConnection>(std::move(model), SeedPolicy{seed, true}, mask_bound);
  ClientConnection client(std::make_unique<InMemoryTransport>(server));
  SessionResult r;
  r.label = client.infer(input, plan, seed, &r.transcript);
  return r;
}

// Feeds recorded client frames to a fresh server with the same seed; returns the label.
inline std::size_t replay(std::shared_ptr<const ModelGraph> model, const Transcript& t,
                          double mask_bound = default_mask_bound()) {
  ServerConnection server(std::move(model), SeedPolicy{t.seed, true}, mask_bound);
  server.handle(Frame{Tag::Hello, 0, {static_cast<double>(kProtocolVersion)}});
  for (const Frame& f : t.client_frames()) {
    for (const Frame& reply : server.handle(f)) {
      if (reply.tag == Tag::LabelResult) return static_cast<std::size_t>(reply.payload.at(0));
      if (reply.tag == Tag::Error) throw ProtocolError("replay rejected", reply.layer);
    }
  }
  throw ProtocolError("replay ended without a label");
}

}  // namespace seek::protocol
