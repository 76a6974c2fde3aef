#pragma once

// Simulated leveled SIMD homomorphic arithmetic. Values are held in the
// clear; what is modeled faithfully is the *semantics* that matter for a
// fixed-point training pipeline: slot-wise ops, cyclic rotations, level
// consumption and exhaustion, scale-grid quantization, and the cost of
// the collective protocols (bootstrap, key-switch) via event ledgers.
// There is no noise model: drift comes only from the quantization grid.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace slotsim {

struct dimension_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct state_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct level_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct argument_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct protocol_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EngineParams {
  int ring_log = 14;      // log2 of the polynomial ring degree
  int initial_level = 9;  // L, multiplicative depth of a fresh ciphertext
  int scale_log = 31;     // fixed-point grid is multiples of 2^-scale_log
  bool quantize = true;

  std::size_t ring_degree() const { return std::size_t{1} << ring_log; }
  std::size_t slot_count() const { return std::size_t{1} << (ring_log - 1); }

  void validate() const {
    if (ring_log < 4) throw config_error("engine.ring_log must be >= 4");
    if (initial_level < 1) throw config_error("engine.initial_level must be >= 1");
    if (scale_log < 1 || scale_log > 52) throw config_error("engine.scale_log out of range");
  }
};

// The simulated ciphertext/plaintext: a full vector of slots plus the
// metadata the scheme would carry. Immutable by convention; every engine
// op returns a fresh value.
struct SlotVector {
  std::vector<double> slots;
  int level = 0;
  bool encrypted = false;
  int owner = -1;  // party id after a key-switch, -1 = collective key

  std::size_t size() const { return slots.size(); }
};

struct CostLedger {
  std::uint64_t rotations = 0;
  std::uint64_t ct_mults = 0;
  std::uint64_t pt_mults = 0;
  std::uint64_t additions = 0;
  std::uint64_t bootstraps = 0;
  std::uint64_t key_switches = 0;
  std::uint64_t bytes_model = 0;

  void merge(const CostLedger& o) {
    rotations += o.rotations;
    ct_mults += o.ct_mults;
    pt_mults += o.pt_mults;
    additions += o.additions;
    bootstraps += o.bootstraps;
    key_switches += o.key_switches;
    bytes_model += o.bytes_model;
  }
};

class Engine {
 public:
  explicit Engine(EngineParams params) : params_(params) {
    params_.validate();
    // Interactive protocols are broadcast over the registered topology;
    // by default a single link (N=2 would give the same count).
    protocol_links_ = 1;
  }

  const EngineParams& params() const { return params_; }
  CostLedger& ledger() { return ledger_; }
  const CostLedger& ledger() const { return ledger_; }

  // Number of network links a collective protocol touches: N-1 on a tree,
  // N on a star. Registered once per run by the federation layer.
  void register_protocol_links(std::uint64_t links) { protocol_links_ = links; }
  std::uint64_t protocol_links() const { return protocol_links_; }

  // Modeled ciphertext size in bytes: coefficient count x two polynomials
  // x 8-byte limbs, at the ciphertext's current level. A model, not a
  // measurement.
  std::uint64_t ciphertext_bytes(int level) const {
    return 2ull * params_.ring_degree() * static_cast<std::uint64_t>(level + 1) * 8ull;
  }
  std::uint64_t max_ciphertext_bytes() const { return ciphertext_bytes(params_.initial_level); }

  double quantize_value(double v) const {
    if (!params_.quantize) return v;
    const double scale = std::ldexp(1.0, params_.scale_log);
    return std::round(v * scale) / scale;
  }

  SlotVector encode(const std::vector<double>& values) const {
    if (values.size() > params_.slot_count())
      throw dimension_error("encode: " + std::to_string(values.size()) + " values exceed " +
                            std::to_string(params_.slot_count()) + " slots");
    SlotVector out;
    out.slots.assign(params_.slot_count(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) out.slots[i] = quantize_value(values[i]);
    out.level = params_.initial_level;
    out.encrypted = false;
    return out;
  }

  SlotVector zeros() const { return encode({}); }

  SlotVector constant(double v) const {
    SlotVector out;
    out.slots.assign(params_.slot_count(), quantize_value(v));
    out.level = params_.initial_level;
    out.encrypted = false;
    return out;
  }

  std::vector<double> decode(const SlotVector& v) const {
    if (v.encrypted) throw state_error("decode: value is encrypted");
    return v.slots;
  }

  SlotVector encrypt(const SlotVector& pt) {
    if (pt.encrypted) throw state_error("encrypt: already encrypted");
    SlotVector ct = pt;
    ct.encrypted = true;
    ct.owner = -1;
    return ct;
  }

  // CDecrypt is a collective protocol: modeled as a special key-switch.
  SlotVector decrypt(const SlotVector& ct) {
    if (!ct.encrypted) throw state_error("decrypt: value is not encrypted");
    ledger_.key_switches += 1;
    ledger_.bytes_model += protocol_links_ * ciphertext_bytes(ct.level);
    SlotVector pt = ct;
    pt.encrypted = false;
    pt.owner = -1;
    return pt;
  }

  SlotVector add(const SlotVector& a, const SlotVector& b) {
    check_size(a, b);
    SlotVector out;
    out.slots.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out.slots[i] = a.slots[i] + b.slots[i];
    out.level = std::min(a.level, b.level);
    out.encrypted = a.encrypted || b.encrypted;
    if (out.encrypted) ledger_.additions += 1;
    return out;
  }

  SlotVector sub(const SlotVector& a, const SlotVector& b) {
    check_size(a, b);
    SlotVector out;
    out.slots.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out.slots[i] = a.slots[i] - b.slots[i];
    out.level = std::min(a.level, b.level);
    out.encrypted = a.encrypted || b.encrypted;
    if (out.encrypted) ledger_.additions += 1;
    return out;
  }

  // Slot-wise product followed by a rescale. Any multiplication touching a
  // ciphertext consumes one level, plaintext-plaintext consumes none.
  SlotVector mul(const SlotVector& a, const SlotVector& b) {
    check_size(a, b);
    const bool enc = a.encrypted || b.encrypted;
    int level = std::min(a.level, b.level);
    if (enc) {
      if (level < 1)
        throw level_error("mul: level exhausted, bootstrap the ciphertext before multiplying");
      level -= 1;
      if (a.encrypted && b.encrypted)
        ledger_.ct_mults += 1;
      else
        ledger_.pt_mults += 1;
    }
    SlotVector out;
    out.slots.resize(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      out.slots[i] = quantize_value(a.slots[i] * b.slots[i]);
    out.level = level;
    out.encrypted = enc;
    return out;
  }

  // Cyclic shift left by k slots (negative k shifts right). Free on
  // plaintexts; level is never consumed.
  SlotVector rotate(const SlotVector& c, long k) {
    SlotVector out = c;
    const long n = static_cast<long>(c.size());
    if (n == 0) return out;
    long r = ((k % n) + n) % n;
    if (r != 0) {
      for (long i = 0; i < n; ++i) out.slots[i] = c.slots[(i + r) % n];
      if (c.encrypted) ledger_.rotations += 1;
    }
    return out;
  }

  // Collective refresh back to the initial level. Values survive up to
  // re-quantization onto the scale grid.
  SlotVector bootstrap(const SlotVector& c) {
    if (!c.encrypted) throw state_error("bootstrap: value is not encrypted");
    SlotVector out = c;
    out.level = params_.initial_level;
    for (double& v : out.slots) v = quantize_value(v);
    ledger_.bootstraps += 1;
    ledger_.bytes_model += protocol_links_ * max_ciphertext_bytes();
    return out;
  }

  SlotVector key_switch(const SlotVector& c, int target_party) {
    if (!c.encrypted) throw state_error("key_switch: value is not encrypted");
    SlotVector out = c;
    out.owner = target_party;
    ledger_.key_switches += 1;
    ledger_.bytes_model += protocol_links_ * ciphertext_bytes(c.level);
    return out;
  }

  // Rotate-and-add inner sum: slot i of the result holds
  // sum_{j<count} c[(i + j*stride) mod slot_count], in log2(count) steps.
  SlotVector inner_sum(const SlotVector& c, long stride, std::size_t count) {
    if (count == 0 || (count & (count - 1)) != 0)
      throw argument_error("inner_sum: count must be a power of two");
    if (stride * static_cast<long>(count) > static_cast<long>(params_.slot_count()))
      throw argument_error("inner_sum: stride*count exceeds slot count");
    SlotVector acc = c;
    for (std::size_t span = 1; span < count; span <<= 1)
      acc = add(acc, rotate(acc, stride * static_cast<long>(span)));
    return acc;
  }

  // Simulation-only escape hatch: apply a real function slot-wise while
  // charging the level budget an equivalent polynomial evaluation would.
  // Used for the exact-activation baselines so that placement and ledgers
  // stay comparable between exact and approximated runs.
  SlotVector eval_exact(const SlotVector& c, const std::function<double(double)>& f,
                        int depth_equivalent) {
    if (c.encrypted && c.level < depth_equivalent)
      throw level_error("eval_exact: level exhausted, bootstrap first");
    SlotVector out = c;
    if (c.encrypted) out.level = c.level - depth_equivalent;
    for (double& v : out.slots) v = quantize_value(f(v));
    return out;
  }

 private:
  void check_size(const SlotVector& a, const SlotVector& b) const {
    if (a.size() != b.size())
      throw dimension_error("slot vectors differ in size: " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
  }

  EngineParams params_;
  CostLedger ledger_;
  std::uint64_t protocol_links_;
};

}  // namespace slotsim
