#pragma once

// Recurrent cells expressed entirely in packed-matrix operations: forward
// and backward passes for Elman, Jordan and GRU networks, the LSTM forward
// pass, and the local-iteration driver used by the federation layer.
//
// Ciphertext refreshes follow a fixed placement: the hidden state and dz
// are refreshed every timestep and the output-gradient product once per
// output step; Jordan additionally refreshes its recurrent-weight gradient
// once per backward pass, GRU refreshes each gate activation and the
// backward chain. Bootstrap counts in the ledger come out of these rules.

#include <optional>
#include <variant>

#include "slotsim/approx.hpp"

namespace slotsim {

enum class Arch { elman, jordan, gru, lstm };

inline std::string arch_name(Arch a) {
  switch (a) {
    case Arch::elman: return "elman";
    case Arch::jordan: return "jordan";
    case Arch::gru: return "gru";
    case Arch::lstm: return "lstm";
  }
  return "?";
}

inline Arch arch_from(const std::string& s) {
  if (s == "elman") return Arch::elman;
  if (s == "jordan") return Arch::jordan;
  if (s == "gru") return Arch::gru;
  if (s == "lstm") return Arch::lstm;
  throw config_error("unknown architecture '" + s + "'");
}

struct RnnShape {
  long batch = 1;
  long features = 1;
  long hidden = 1;
  long timesteps = 1;
  long outputs = 1;
  long output_steps = 1;  // kappa, the last output_steps steps emit predictions

  void validate() const {
    if (batch < 1 || features < 1 || hidden < 1 || timesteps < 1 || outputs < 1)
      throw config_error("rnn shape: all dimensions must be positive");
    if (output_steps < 1 || output_steps > timesteps)
      throw config_error("rnn shape: output_steps must lie in [1, timesteps]");
  }
};

struct TrainingFlags {
  bool cached_transforms = true;
  bool exact_activations = false;
  bool use_biases = true;
  bool bsgs = false;
  bool reset_state_per_batch = false;
  bool lstm_paper_hidden = true;  // h_t = o . c_{t-1} + phi(c_t), as printed

  MatmulOptions matmul() const { return MatmulOptions{bsgs}; }
};

struct ActivationSet {
  ActivationPair phi;  // cell activation (tanh by default)
  ActivationPair rho;  // gate activation (sigmoid), used by gru/lstm
};

struct RnnModel {
  Arch arch = Arch::elman;
  RnnShape shape;
  BlockLayout base;  // delta / parallel / engine of every tensor
  std::vector<std::pair<std::string, PackedMatrix>> weights;

  PackedMatrix& weight(const std::string& name) {
    for (auto& [n, w] : weights)
      if (n == name) return w;
    throw argument_error("model has no weight '" + name + "'");
  }
  const PackedMatrix& weight(const std::string& name) const {
    return const_cast<RnnModel*>(this)->weight(name);
  }
  bool has_weight(const std::string& name) const {
    for (auto& [n, w] : weights)
      if (n == name) return true;
    return false;
  }
};

struct GradientSet {
  std::vector<std::pair<std::string, PackedMatrix>> grads;

  PackedMatrix& find(const std::string& name) {
    for (auto& [n, g] : grads)
      if (n == name) return g;
    throw argument_error("gradient set has no entry '" + name + "'");
  }
};

// Recurrent state carried across batches (Elman/GRU: h, Jordan: previous
// output, LSTM: h and c).
struct CarriedState {
  std::optional<PackedMatrix> h;
  std::optional<PackedMatrix> c;
  std::optional<PackedMatrix> p;
};

struct HostBatch {
  HostTensor inputs;   // (batch, T, d)
  HostTensor targets;  // (batch, kappa, o)
};

struct LocalStats {
  std::uint64_t prep_rotations = 0;  // spent building weight transforms/transposes
  std::uint64_t bootstraps = 0;
};

// ---------------------------------------------------------------------------
// helpers

namespace detail {

inline BlockLayout tensor_layout(const BlockLayout& base, long rows, long cols) {
  BlockLayout l = base;
  l.rows = rows;
  l.cols = cols;
  return l;
}

inline long strip_count(long batch_rows, const BlockLayout& base) {
  return (batch_rows + base.delta - 1) / base.delta;
}

// One timestep of the batch as p parallel delta-row strips, in the clear.
inline PackedMatrix pack_step(Engine& eng, const HostTensor& data, long t, long cols,
                              const BlockLayout& base) {
  const long rows = static_cast<long>(data.batch);
  if (strip_count(rows, base) > base.parallel)
    throw dimension_error("batch of " + std::to_string(rows) + " rows exceeds the p*delta = " +
                          std::to_string(base.parallel * base.delta) + " the layout can pack");
  HostTensor strip(strip_count(rows, base), base.delta, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c)
      strip.at(r / base.delta, r % base.delta, c) = data.at(r, t, c);
  return pack(eng, strip, tensor_layout(base, base.delta, cols));
}

inline PackedMatrix zeros_ct(Engine& eng, const BlockLayout& base, long rows, long cols) {
  HostTensor z(1, rows, cols);
  return encrypt_matrix(eng, pack(eng, z, tensor_layout(base, rows, cols)));
}

inline PackedMatrix ones_pt(Engine& eng, const BlockLayout& layout) {
  PackedMatrix m;
  m.layout = layout;
  m.replicated = true;
  const long n = layout.grid_rows() * layout.grid_cols();
  for (long i = 0; i < n; ++i) m.blocks.push_back(eng.constant(1.0));
  return m;
}

// Weight transform cache. In cached mode each weight's rotation family and
// transpose are built once per local iteration; otherwise they are rebuilt
// at every use, which is exactly the non-optimized execution.
class WeightOps {
 public:
  WeightOps(Engine& eng, const RnnModel& model, const TrainingFlags& flags)
      : eng_(eng), model_(model), cached_(flags.cached_transforms), opt_(flags.matmul()) {}

  const PreparedRhs& rhs(const std::string& name) {
    auto it = rhs_.find(name);
    if (cached_ && it != rhs_.end()) return it->second;
    const auto r0 = eng_.ledger().rotations;
    PreparedRhs p = prepare_rhs(eng_, model_.weight(name), opt_);
    prep_rotations_ += eng_.ledger().rotations - r0;
    return rhs_.insert_or_assign(it == rhs_.end() ? rhs_.begin() : it, name, std::move(p))->second;
  }

  const PreparedRhs& transposed_rhs(const std::string& name) {
    auto it = trhs_.find(name);
    if (cached_ && it != trhs_.end()) return it->second;
    const auto r0 = eng_.ledger().rotations;
    PackedMatrix t = transpose(eng_, model_.weight(name), opt_);
    PreparedRhs p = prepare_rhs(eng_, t, opt_);
    prep_rotations_ += eng_.ledger().rotations - r0;
    return trhs_.insert_or_assign(it == trhs_.end() ? trhs_.begin() : it, name, std::move(p))
        ->second;
  }

  std::uint64_t prep_rotations() const { return prep_rotations_; }

 private:
  Engine& eng_;
  const RnnModel& model_;
  bool cached_;
  MatmulOptions opt_;
  std::uint64_t prep_rotations_ = 0;
  std::map<std::string, PreparedRhs> rhs_;
  std::map<std::string, PreparedRhs> trhs_;
};

inline PackedMatrix activate(Engine& eng, const ActivationPair& act, bool exact,
                             const PackedMatrix& z) {
  if (exact) return eval_exact_matrix(eng, act.exact_fn, act.fn.eval_depth(), z);
  return eval_encrypted(eng, act.fn, z);
}

inline PackedMatrix activate_deriv(Engine& eng, const ActivationPair& act, bool exact,
                                   const PackedMatrix& z) {
  if (exact) return eval_exact_matrix(eng, act.exact_deriv, act.deriv.eval_depth(), z);
  return eval_encrypted(eng, act.deriv, z);
}

// 1 - h.h, the tanh derivative taken from the forward output
inline PackedMatrix tanh_deriv_from_h(Engine& eng, const PackedMatrix& h) {
  return elementwise_sub(eng, ones_pt(eng, h.layout), elementwise_mul(eng, h, h));
}

// accumulate-or-assign for gradient tensors
struct GradAcc {
  std::vector<std::pair<std::string, PackedMatrix>> items;

  void add(Engine& eng, const std::string& name, const PackedMatrix& g) {
    for (auto& [n, acc] : items) {
      if (n == name) {
        acc = elementwise_add(eng, acc, g);
        return;
      }
    }
    items.emplace_back(name, g);
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// model construction

inline RnnModel make_model(Engine& eng, Arch arch, const RnnShape& shape, BlockLayout base,
                           std::mt19937_64& rng) {
  shape.validate();
  if (detail::strip_count(shape.batch, base) > base.parallel)
    throw config_error("batch of " + std::to_string(shape.batch) + " needs " +
                       std::to_string(detail::strip_count(shape.batch, base)) +
                       " strips but the layout packs only p = " + std::to_string(base.parallel));
  RnnModel m;
  m.arch = arch;
  m.shape = shape;
  m.base = base;

  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.hidden));
  std::uniform_real_distribution<double> U(-bound, bound);
  auto mat = [&](long r, long c) {
    std::vector<double> w(r * c);
    for (auto& v : w) v = U(rng);
    return pack_replicated(eng, w, r, c, detail::tensor_layout(base, r, c));
  };
  auto bias = [&](long c) {
    return pack_row_tiled(eng, std::vector<double>(c, 0.0),
                          detail::tensor_layout(base, base.delta, c));
  };

  const long d = shape.features, h = shape.hidden, o = shape.outputs;
  switch (arch) {
    case Arch::elman:
      m.weights = {{"U", mat(d, h)}, {"W", mat(h, h)}, {"V", mat(h, o)},
                   {"b_h", bias(h)}, {"b_y", bias(o)}};
      break;
    case Arch::jordan:
      m.weights = {{"U", mat(d, h)}, {"W", mat(o, h)}, {"V", mat(h, o)},
                   {"b_h", bias(h)}, {"b_y", bias(o)}};
      break;
    case Arch::gru:
      m.weights = {{"U_z", mat(d, h)}, {"U_r", mat(d, h)}, {"U_n", mat(d, h)},
                   {"W_z", mat(h, h)}, {"W_r", mat(h, h)}, {"W_n", mat(h, h)},
                   {"V", mat(h, o)},   {"b_z", bias(h)},   {"b_r", bias(h)},
                   {"b_n", bias(h)},   {"b_y", bias(o)}};
      break;
    case Arch::lstm:
      m.weights = {{"W_f", mat(d, h)}, {"W_i", mat(d, h)}, {"W_o", mat(d, h)},
                   {"W_c", mat(d, h)}, {"U_f", mat(h, h)}, {"U_i", mat(h, h)},
                   {"U_o", mat(h, h)}, {"U_c", mat(h, h)}, {"b_f", bias(h)},
                   {"b_i", bias(h)},   {"b_o", bias(h)},   {"b_c", bias(h)}};
      break;
  }
  return m;
}

inline void encrypt_model(Engine& eng, RnnModel& m) {
  for (auto& [n, w] : m.weights) w = encrypt_matrix(eng, w);
}

inline RnnModel decrypt_model(Engine& eng, const RnnModel& m) {
  RnnModel out = m;
  for (auto& [n, w] : out.weights) w = decrypt_matrix(eng, w);
  return out;
}

// Smallest initial level the placement works at; checked by config
// validation so runs fail before any work happens.
inline int required_level(Arch arch, int act_depth, int clip_depth, bool tanh_identity) {
  switch (arch) {
    case Arch::elman:
      return std::max({act_depth + 3, clip_depth + 5, tanh_identity ? 8 : act_depth + 4});
    case Arch::jordan:
      if (!tanh_identity) return std::max({act_depth + 6, clip_depth + 6, act_depth + 7});
      return std::max({act_depth + 6, clip_depth + 6, 8});
    case Arch::gru: return std::max({act_depth + 4, clip_depth + 6, 8});
    case Arch::lstm: return act_depth + 4;
  }
  return 1;
}

// ---------------------------------------------------------------------------
// Elman / Jordan

struct ElmanTrace {
  std::vector<PackedMatrix> h;  // h[0] is the carried state
  std::vector<PackedMatrix> z;  // pre-activations
  std::vector<PackedMatrix> p;  // output steps only (every step for Jordan)
};

inline ElmanTrace elman_forward(Engine& eng, const RnnModel& model, const ActivationSet& acts,
                                const std::vector<PackedMatrix>& x, const PackedMatrix& h_prev,
                                const TrainingFlags& flags, detail::WeightOps& wops,
                                const PackedMatrix* p_prev = nullptr) {
  const auto& s = model.shape;
  const bool jordan = model.arch == Arch::jordan;
  ElmanTrace tr;
  tr.h.push_back(h_prev);
  PackedMatrix rec = jordan ? (p_prev ? *p_prev
                                      : detail::zeros_ct(eng, model.base, model.base.delta,
                                                         s.outputs))
                            : h_prev;
  for (long t = 0; t < s.timesteps; ++t) {
    PackedMatrix z = matmul(eng, rec, wops.rhs("W"));
    z = elementwise_add(eng, z, matmul(eng, x[t], wops.rhs("U")));
    if (flags.use_biases) z = elementwise_add(eng, z, model.weight("b_h"));
    tr.z.push_back(z);
    PackedMatrix h = detail::activate(eng, acts.phi, flags.exact_activations, z);
    h = bootstrap_matrix(eng, h);
    tr.h.push_back(h);
    const bool out_step = t + 1 > s.timesteps - s.output_steps;
    if (jordan || out_step) {
      PackedMatrix p = matmul(eng, h, wops.rhs("V"));
      if (flags.use_biases) p = elementwise_add(eng, p, model.weight("b_y"));
      tr.p.push_back(p);
    }
    rec = jordan ? tr.p.back() : h;
  }
  return tr;
}

inline GradientSet elman_backward(Engine& eng, const RnnModel& model, const ActivationSet& acts,
                                  const std::vector<PackedMatrix>& x,
                                  const std::vector<PackedMatrix>& y, const ElmanTrace& tr,
                                  const TrainingFlags& flags, detail::WeightOps& wops) {
  const auto& s = model.shape;
  const auto opt = flags.matmul();
  detail::GradAcc acc;
  std::optional<PackedMatrix> dh_next;
  std::optional<PackedMatrix> by_acc, bh_acc;
  for (long t = s.timesteps; t-- > 0;) {
    const bool out_step = t + 1 > s.timesteps - s.output_steps;
    std::optional<PackedMatrix> dh;
    if (out_step) {
      const PackedMatrix& p_t = tr.p[tr.p.size() - (s.timesteps - t)];
      PackedMatrix dy = elementwise_sub(eng, p_t, y[t - (s.timesteps - s.output_steps)]);
      dh = matmul(eng, dy, wops.transposed_rhs("V"));
      // I = h_t (x) dy is refreshed in the output stage
      PackedMatrix i_term =
          bootstrap_matrix(eng, matmul(eng, transpose(eng, tr.h[t + 1], opt), dy, opt));
      acc.add(eng, "V", i_term);
      if (flags.use_biases) by_acc = by_acc ? elementwise_add(eng, *by_acc, dy) : dy;
    }
    if (dh_next) dh = dh ? elementwise_add(eng, *dh, *dh_next) : dh_next;

    PackedMatrix dphi = acts.phi.derivative_identity
                            ? detail::tanh_deriv_from_h(eng, tr.h[t + 1])
                            : detail::activate_deriv(eng, acts.phi, flags.exact_activations,
                                                     tr.z[t]);
    PackedMatrix dz = bootstrap_matrix(eng, elementwise_mul(eng, *dh, dphi));
    dh_next = matmul(eng, dz, wops.transposed_rhs("W"));

    acc.add(eng, "U", matmul(eng, transpose(eng, x[t], opt), dz, opt));
    acc.add(eng, "W", matmul(eng, transpose(eng, tr.h[t], opt), dz, opt));
    if (flags.use_biases) bh_acc = bh_acc ? elementwise_add(eng, *bh_acc, dz) : dz;
  }
  if (flags.use_biases) {
    acc.add(eng, "b_h", colsum_broadcast(eng, *bh_acc));
    acc.add(eng, "b_y", colsum_broadcast(eng, *by_acc));
  }
  GradientSet g;
  for (auto& [name, sum] : acc.items)
    g.grads.emplace_back(name, name[0] == 'b' ? sum : reduce_slices(eng, sum));
  return g;
}

inline GradientSet jordan_backward(Engine& eng, const RnnModel& model, const ActivationSet& acts,
                                   const std::vector<PackedMatrix>& x,
                                   const std::vector<PackedMatrix>& y, const ElmanTrace& tr,
                                   const TrainingFlags& flags, detail::WeightOps& wops) {
  const auto& s = model.shape;
  const auto opt = flags.matmul();
  detail::GradAcc acc;
  std::optional<PackedMatrix> dz_next;
  std::optional<PackedMatrix> by_acc, bh_acc;
  for (long t = s.timesteps; t-- > 0;) {
    const bool out_step = t + 1 > s.timesteps - s.output_steps;
    std::optional<PackedMatrix> dp;
    if (out_step)
      dp = elementwise_sub(eng, tr.p[t], y[t - (s.timesteps - s.output_steps)]);
    if (dz_next) {
      PackedMatrix rec_grad = matmul(eng, *dz_next, wops.transposed_rhs("W"));
      dp = dp ? elementwise_add(eng, *dp, rec_grad) : rec_grad;
    }
    // the output gradient feeds nablaV at every step; refresh each product
    PackedMatrix i_term =
        bootstrap_matrix(eng, matmul(eng, transpose(eng, tr.h[t + 1], opt), *dp, opt));
    acc.add(eng, "V", i_term);
    if (flags.use_biases) by_acc = by_acc ? elementwise_add(eng, *by_acc, *dp) : *dp;

    PackedMatrix dh = matmul(eng, *dp, wops.transposed_rhs("V"));
    PackedMatrix dphi = detail::tanh_deriv_from_h(eng, tr.h[t + 1]);
    PackedMatrix dz = bootstrap_matrix(eng, elementwise_mul(eng, dh, dphi));

    PackedMatrix rec = t == 0 ? detail::zeros_ct(eng, model.base, model.base.delta, s.outputs)
                              : tr.p[t - 1];
    acc.add(eng, "W", matmul(eng, transpose(eng, rec, opt), dz, opt));
    acc.add(eng, "U", matmul(eng, transpose(eng, x[t], opt), dz, opt));
    if (flags.use_biases) bh_acc = bh_acc ? elementwise_add(eng, *bh_acc, dz) : dz;
    dz_next = dz;
  }
  GradientSet g;
  for (auto& [name, sum] : acc.items) {
    PackedMatrix out = reduce_slices(eng, sum);
    // the deep recurrent-weight gradient gets one extra refresh per pass
    if (name == "W") out = bootstrap_matrix(eng, out);
    g.grads.emplace_back(name, out);
  }
  if (flags.use_biases) {
    g.grads.emplace_back("b_h", colsum_broadcast(eng, *bh_acc));
    g.grads.emplace_back("b_y", colsum_broadcast(eng, *by_acc));
  }
  return g;
}

// ---------------------------------------------------------------------------
// GRU

struct GruTrace {
  std::vector<PackedMatrix> h;  // h[0] is the carried state
  std::vector<PackedMatrix> z, r, n, rh;
  std::vector<PackedMatrix> p;  // output steps
};

inline GruTrace gru_forward(Engine& eng, const RnnModel& model, const ActivationSet& acts,
                            const std::vector<PackedMatrix>& x, const PackedMatrix& h_prev,
                            const TrainingFlags& flags, detail::WeightOps& wops) {
  const auto& s = model.shape;
  GruTrace tr;
  tr.h.push_back(h_prev);
  for (long t = 0; t < s.timesteps; ++t) {
    const PackedMatrix& hp = tr.h.back();
    auto gate_raw = [&](const char* w_rec, const char* w_in, const char* b,
                        const PackedMatrix& rec_src) {
      PackedMatrix raw = matmul(eng, rec_src, wops.rhs(w_rec));
      raw = elementwise_add(eng, raw, matmul(eng, x[t], wops.rhs(w_in)));
      if (flags.use_biases) raw = elementwise_add(eng, raw, model.weight(b));
      return raw;
    };
    PackedMatrix z = bootstrap_matrix(
        eng, detail::activate(eng, acts.rho, flags.exact_activations,
                              gate_raw("W_z", "U_z", "b_z", hp)));
    PackedMatrix r = bootstrap_matrix(
        eng, detail::activate(eng, acts.rho, flags.exact_activations,
                              gate_raw("W_r", "U_r", "b_r", hp)));
    PackedMatrix rh = elementwise_mul(eng, r, hp);
    PackedMatrix n = bootstrap_matrix(
        eng, detail::activate(eng, acts.phi, flags.exact_activations,
                              gate_raw("W_n", "U_n", "b_n", rh)));
    // h_t = z . h_{t-1} + (1 - z) . n
    PackedMatrix one_minus_z = elementwise_sub(eng, detail::ones_pt(eng, z.layout), z);
    PackedMatrix h = elementwise_add(eng, elementwise_mul(eng, z, hp),
                                     elementwise_mul(eng, one_minus_z, n));
    h = bootstrap_matrix(eng, h);
    tr.z.push_back(z);
    tr.r.push_back(r);
    tr.n.push_back(n);
    tr.rh.push_back(rh);
    tr.h.push_back(h);
    if (t + 1 > s.timesteps - s.output_steps) {
      PackedMatrix p = matmul(eng, h, wops.rhs("V"));
      if (flags.use_biases) p = elementwise_add(eng, p, model.weight("b_y"));
      tr.p.push_back(p);
    }
  }
  return tr;
}

inline GradientSet gru_backward(Engine& eng, const RnnModel& model, const ActivationSet& acts,
                                const std::vector<PackedMatrix>& x,
                                const std::vector<PackedMatrix>& y, const GruTrace& tr,
                                const TrainingFlags& flags, detail::WeightOps& wops) {
  (void)acts;  // gate derivatives come from the forward outputs
  const auto& s = model.shape;
  const auto opt = flags.matmul();
  detail::GradAcc acc;
  std::optional<PackedMatrix> dh_nxt;
  std::map<std::string, std::optional<PackedMatrix>> bias_acc;
  for (long t = s.timesteps; t-- > 0;) {
    const bool out_step = t + 1 > s.timesteps - s.output_steps;
    const PackedMatrix &z = tr.z[t], &r = tr.r[t], &n = tr.n[t], &hp = tr.h[t];
    std::optional<PackedMatrix> dh;
    if (out_step) {
      const PackedMatrix& p_t = tr.p[tr.p.size() - (s.timesteps - t)];
      PackedMatrix dy = elementwise_sub(eng, p_t, y[t - (s.timesteps - s.output_steps)]);
      dh = matmul(eng, dy, wops.transposed_rhs("V"));
      acc.add(eng, "V",
              bootstrap_matrix(eng, matmul(eng, transpose(eng, tr.h[t + 1], opt), dy, opt)));
      if (flags.use_biases) {
        auto& a = bias_acc["b_y"];
        a = a ? elementwise_add(eng, *a, dy) : dy;
      }
    }
    if (dh_nxt) dh = dh ? elementwise_add(eng, *dh, *dh_nxt) : dh_nxt;

    PackedMatrix ones = detail::ones_pt(eng, z.layout);
    PackedMatrix one_minus_z = elementwise_sub(eng, ones, z);
    PackedMatrix dn = elementwise_mul(eng, one_minus_z, *dh);
    PackedMatrix dn_raw = bootstrap_matrix(
        eng, elementwise_mul(eng, detail::tanh_deriv_from_h(eng, n), dn));
    PackedMatrix dnW = matmul(eng, dn_raw, wops.transposed_rhs("W_n"));
    PackedMatrix dr = elementwise_mul(eng, dnW, hp);
    PackedMatrix dr_raw = bootstrap_matrix(
        eng, elementwise_mul(eng, elementwise_mul(eng, r, elementwise_sub(eng, ones, r)), dr));
    PackedMatrix dz = elementwise_mul(eng, elementwise_sub(eng, hp, n), *dh);
    PackedMatrix dz_raw = bootstrap_matrix(
        eng, elementwise_mul(eng, elementwise_mul(eng, z, one_minus_z), dz));

    PackedMatrix dh_h = elementwise_mul(eng, *dh, z);
    PackedMatrix dh_z = matmul(eng, dz_raw, wops.transposed_rhs("W_z"));
    PackedMatrix dh_r = matmul(eng, dr_raw, wops.transposed_rhs("W_r"));
    PackedMatrix dh_n = elementwise_mul(eng, r, dnW);
    PackedMatrix nxt = elementwise_add(eng, elementwise_add(eng, dh_z, dh_h),
                                       elementwise_add(eng, dh_n, dh_r));
    if (t > 0) nxt = bootstrap_matrix(eng, nxt);
    dh_nxt = nxt;

    acc.add(eng, "U_z", matmul(eng, transpose(eng, x[t], opt), dz_raw, opt));
    acc.add(eng, "U_r", matmul(eng, transpose(eng, x[t], opt), dr_raw, opt));
    acc.add(eng, "U_n", matmul(eng, transpose(eng, x[t], opt), dn_raw, opt));
    acc.add(eng, "W_z", matmul(eng, transpose(eng, hp, opt), dz_raw, opt));
    acc.add(eng, "W_r", matmul(eng, transpose(eng, hp, opt), dr_raw, opt));
    acc.add(eng, "W_n", matmul(eng, transpose(eng, tr.rh[t], opt), dn_raw, opt));
    if (flags.use_biases) {
      for (auto& [name, grad] :
           std::initializer_list<std::pair<const char*, const PackedMatrix*>>{
               {"b_z", &dz_raw}, {"b_r", &dr_raw}, {"b_n", &dn_raw}}) {
        auto& a = bias_acc[name];
        a = a ? elementwise_add(eng, *a, *grad) : *grad;
      }
    }
  }
  GradientSet g;
  for (auto& [name, sum] : acc.items) {
    PackedMatrix out = reduce_slices(eng, sum);
    // the reset-gated recurrent gradient runs one level deeper; refresh it
    if (name == "W_n") out = bootstrap_matrix(eng, out);
    g.grads.emplace_back(name, out);
  }
  if (flags.use_biases)
    for (const char* name : {"b_z", "b_r", "b_n", "b_y"})
      g.grads.emplace_back(name, colsum_broadcast(eng, *bias_acc[name]));
  return g;
}

// ---------------------------------------------------------------------------
// LSTM (forward only; the backward pass has no reference algorithm here)

struct LstmTrace {
  std::vector<PackedMatrix> h;  // h[0] carried
  std::vector<PackedMatrix> c;  // c[0] carried
};

inline LstmTrace lstm_forward(Engine& eng, const RnnModel& model, const ActivationSet& acts,
                              const std::vector<PackedMatrix>& x, const PackedMatrix& h_prev,
                              const PackedMatrix& c_prev, const TrainingFlags& flags,
                              detail::WeightOps& wops) {
  const auto& s = model.shape;
  LstmTrace tr;
  tr.h.push_back(h_prev);
  tr.c.push_back(c_prev);
  for (long t = 0; t < s.timesteps; ++t) {
    const PackedMatrix& hp = tr.h.back();
    const PackedMatrix& cp = tr.c.back();
    auto gate = [&](const char* w_in, const char* u_rec, const char* b,
                    const ActivationPair& act) {
      PackedMatrix raw = matmul(eng, x[t], wops.rhs(w_in));
      raw = elementwise_add(eng, raw, matmul(eng, hp, wops.rhs(u_rec)));
      if (flags.use_biases) raw = elementwise_add(eng, raw, model.weight(b));
      return bootstrap_matrix(eng,
                              detail::activate(eng, act, flags.exact_activations, raw));
    };
    PackedMatrix f = gate("W_f", "U_f", "b_f", acts.rho);
    PackedMatrix i = gate("W_i", "U_i", "b_i", acts.rho);
    PackedMatrix o = gate("W_o", "U_o", "b_o", acts.rho);
    PackedMatrix ca = gate("W_c", "U_c", "b_c", acts.phi);
    PackedMatrix c = bootstrap_matrix(
        eng, elementwise_add(eng, elementwise_mul(eng, f, cp), elementwise_mul(eng, i, ca)));
    PackedMatrix phi_c = detail::activate(eng, acts.phi, flags.exact_activations, c);
    PackedMatrix h = flags.lstm_paper_hidden
                         ? elementwise_add(eng, elementwise_mul(eng, o, cp), phi_c)
                         : elementwise_mul(eng, o, phi_c);
    h = bootstrap_matrix(eng, h);
    tr.c.push_back(c);
    tr.h.push_back(h);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// local iteration

namespace detail {

inline std::vector<PackedMatrix> pack_inputs(Engine& eng, const RnnModel& m,
                                             const HostBatch& batch) {
  std::vector<PackedMatrix> x;
  for (long t = 0; t < m.shape.timesteps; ++t)
    x.push_back(pack_step(eng, batch.inputs, t, m.shape.features, m.base));
  return x;
}

inline std::vector<PackedMatrix> pack_targets(Engine& eng, const RnnModel& m,
                                              const HostBatch& batch) {
  std::vector<PackedMatrix> y;
  for (long k = 0; k < m.shape.output_steps; ++k)
    y.push_back(pack_step(eng, batch.targets, k, m.shape.outputs, m.base));
  return y;
}

}  // namespace detail

// One forward+backward pass over a mini-batch; gradients are raw batch
// sums merged across the parallel slices (the 1/b normalization is folded
// into the public averaging factor at model update).
inline GradientSet local_iteration(Engine& eng, const RnnModel& model, const ActivationSet& acts,
                                   const HostBatch& batch, const TrainingFlags& flags,
                                   CarriedState& state, LocalStats* stats = nullptr) {
  if (model.arch == Arch::lstm)
    throw argument_error("local_iteration: lstm training is not supported (forward only)");
  const auto bs0 = eng.ledger().bootstraps;
  detail::WeightOps wops(eng, model, flags);
  auto x = detail::pack_inputs(eng, model, batch);
  auto y = detail::pack_targets(eng, model, batch);

  if (flags.reset_state_per_batch) state = CarriedState{};
  if (!state.h)
    state.h = detail::zeros_ct(eng, model.base, model.base.delta, model.shape.hidden);

  GradientSet g;
  if (model.arch == Arch::gru) {
    GruTrace tr = gru_forward(eng, model, acts, x, *state.h, flags, wops);
    g = gru_backward(eng, model, acts, x, y, tr, flags, wops);
    state.h = tr.h.back();
  } else {
    ElmanTrace tr = elman_forward(eng, model, acts, x, *state.h, flags, wops,
                                  state.p ? &*state.p : nullptr);
    g = model.arch == Arch::jordan ? jordan_backward(eng, model, acts, x, y, tr, flags, wops)
                                   : elman_backward(eng, model, acts, x, y, tr, flags, wops);
    state.h = tr.h.back();
    if (model.arch == Arch::jordan) state.p = tr.p.back();
  }
  if (stats) {
    stats->prep_rotations += wops.prep_rotations();
    stats->bootstraps += eng.ledger().bootstraps - bs0;
  }
  return g;
}

// Forward-only pass over a batch of inputs; returns the encrypted
// predictions of the output steps.
inline std::vector<PackedMatrix> rnn_forward(Engine& eng, const RnnModel& model,
                                             const ActivationSet& acts, const HostTensor& inputs,
                                             const TrainingFlags& flags) {
  detail::WeightOps wops(eng, model, flags);
  HostBatch b;
  b.inputs = inputs;
  auto x = detail::pack_inputs(eng, model, b);
  PackedMatrix h0 = detail::zeros_ct(eng, model.base, model.base.delta, model.shape.hidden);
  if (model.arch == Arch::gru) {
    GruTrace tr = gru_forward(eng, model, acts, x, h0, flags, wops);
    return tr.p;
  }
  if (model.arch == Arch::lstm) {
    PackedMatrix c0 = detail::zeros_ct(eng, model.base, model.base.delta, model.shape.hidden);
    LstmTrace tr = lstm_forward(eng, model, acts, x, h0, c0, flags, wops);
    return {tr.h.back()};
  }
  ElmanTrace tr = elman_forward(eng, model, acts, x, h0, flags, wops);
  if (model.arch == Arch::jordan) {
    std::vector<PackedMatrix> outs(tr.p.end() - model.shape.output_steps, tr.p.end());
    return outs;
  }
  return tr.p;
}

}  // namespace slotsim
