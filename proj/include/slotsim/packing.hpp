#pragma once

// Multi-dimensional block-matrix packing and format-preserving encrypted
// matrix algebra. An n_r x n_c logical matrix is split into a grid of
// delta x delta sub-matrices, one ciphertext per sub-matrix, and each
// ciphertext stacks p parallel slices along the third dimension:
//
//   slot of (slice s, row i, col j) = s*delta^2 + (i mod delta)*delta + (j mod delta)
//
// Matrix products are evaluated block-wise with the format-preserving
// permutation method: C_{i,k} += sum_q phi_q(sigma(A_{i,j})) . psi_q(tau(B_{j,k})).
// All permutations are realized as masked rotations, so rotation counts in
// the ledger emerge from execution rather than a lookup table.

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "slotsim/engine.hpp"

namespace slotsim {

struct BlockLayout {
  int delta = 1;        // sub-matrix side
  long rows = 1;        // logical row count
  long cols = 1;        // logical column count
  int parallel = 1;     // p, parallel matrices per ciphertext
  EngineParams engine;  // the engine this layout packs for

  long grid_rows() const { return (rows + delta - 1) / delta; }
  long grid_cols() const { return (cols + delta - 1) / delta; }
  std::size_t block_slots() const { return std::size_t(delta) * std::size_t(delta); }
  bool full_utilization() const {
    return std::size_t(parallel) * block_slots() == engine.slot_count();
  }

  void validate() const {
    if (delta < 1) throw argument_error("layout: delta must be >= 1");
    if (rows < 1 || cols < 1) throw argument_error("layout: rows/cols must be >= 1");
    if (parallel < 1 || (parallel & (parallel - 1)) != 0)
      throw argument_error("layout: parallel count must be a power of two");
    if (std::size_t(parallel) * block_slots() > engine.slot_count())
      throw argument_error("layout: p*delta^2 = " +
                           std::to_string(std::size_t(parallel) * block_slots()) +
                           " exceeds slot count " + std::to_string(engine.slot_count()));
  }

  bool same_packing(const BlockLayout& o) const {
    return delta == o.delta && parallel == o.parallel &&
           engine.ring_log == o.engine.ring_log;
  }
};

// Host-side dense tensor, batch-major.
struct HostTensor {
  std::size_t batch = 0, rows = 0, cols = 0;
  std::vector<double> data;

  HostTensor() = default;
  HostTensor(std::size_t b, std::size_t r, std::size_t c)
      : batch(b), rows(r), cols(c), data(b * r * c, 0.0) {}
  double& at(std::size_t b, std::size_t r, std::size_t c) {
    return data[(b * rows + r) * cols + c];
  }
  double at(std::size_t b, std::size_t r, std::size_t c) const {
    return data[(b * rows + r) * cols + c];
  }
};

struct PackedMatrix {
  std::vector<SlotVector> blocks;  // grid_rows x grid_cols, row-major
  BlockLayout layout;
  bool replicated = false;  // true when all p slices hold identical copies

  SlotVector& block(long i, long j) { return blocks[i * layout.grid_cols() + j]; }
  const SlotVector& block(long i, long j) const { return blocks[i * layout.grid_cols() + j]; }

  bool encrypted() const { return !blocks.empty() && blocks.front().encrypted; }

  // All blocks share one level by construction; mixed levels indicate a bug.
  int level() const {
    int lv = blocks.front().level;
    for (const auto& b : blocks)
      if (b.level != lv) throw state_error("packed matrix has non-uniform block levels");
    return lv;
  }
};

enum class PermKind { sigma, tau, phi, psi, xi };

struct LinearTransform {
  PermKind kind = PermKind::sigma;
  int shift = 0;  // parameter of phi/psi
  std::vector<std::pair<long, SlotVector>> diagonals;  // (offset, mask)
};

namespace detail {

// Local source index of each permutation on a delta x delta row-major
// block. `reduced` wraps within the block; `unreduced` keeps the natural
// index arithmetic, which may point past the block into the next slice.
inline long perm_source(PermKind kind, int shift, int delta, long q, bool reduced) {
  const long i = q / delta, j = q % delta;
  switch (kind) {
    case PermKind::sigma:  // row i rotated left by i
      return i * delta + (i + j) % delta;
    case PermKind::tau: {  // column j rotated up by j
      const long r = reduced ? (i + j) % delta : (i + j);
      return r * delta + j;
    }
    case PermKind::phi:  // all rows rotated left by shift
      return i * delta + (j + shift) % delta;
    case PermKind::psi: {  // all columns rotated up by shift
      const long r = reduced ? (i + shift) % delta : (i + shift);
      return r * delta + j;
    }
    case PermKind::xi:  // transpose
      return j * delta + i;
  }
  return q;
}

// Column-type permutations wrap across the slice boundary; on a replicated
// operand with full slot utilization the neighbouring slice holds the same
// data, so the wrap diagonal folds into the main one.
inline bool foldable(PermKind kind) { return kind == PermKind::tau || kind == PermKind::psi; }

}  // namespace detail

inline LinearTransform gen_transform(const Engine& eng, PermKind kind, int shift,
                                     const BlockLayout& layout, bool operand_replicated = false) {
  layout.validate();
  if ((kind == PermKind::phi || kind == PermKind::psi) &&
      (shift < 0 || shift >= layout.delta))
    throw argument_error("gen_transform: shift out of [0, delta)");
  const long d = layout.delta;
  const long bs = d * d;
  const bool fold =
      operand_replicated && layout.full_utilization() && detail::foldable(kind);
  std::map<long, std::vector<double>> masks;
  const std::size_t slots = eng.params().slot_count();
  for (long q = 0; q < bs; ++q) {
    const long src = detail::perm_source(kind, shift, static_cast<int>(d), q, !fold);
    const long offset = src - q;
    auto& mask = masks[offset];
    if (mask.empty()) mask.assign(slots, 0.0);
    for (long s = 0; s < layout.parallel; ++s) mask[s * bs + q] = 1.0;
  }
  LinearTransform t;
  t.kind = kind;
  t.shift = shift;
  for (auto& [offset, mask] : masks) t.diagonals.emplace_back(offset, eng.encode(mask));
  return t;
}

namespace detail {

// Evaluate sum_r mask_r . rot(c, r), consuming exactly one level on
// encrypted input. With `bsgs` the diagonals are grouped baby-step /
// giant-step style (masks pre-rotated in the clear), which changes only
// the recorded rotation count, never the values.
inline SlotVector apply_diagonals(Engine& eng,
                                  const std::vector<std::pair<long, SlotVector>>& diagonals,
                                  const SlotVector& c, bool bsgs) {
  if (diagonals.empty()) throw argument_error("apply: transform has no diagonals");

  if (bsgs && diagonals.size() > 3) {
    long g = 0;
    for (const auto& [r, m] : diagonals)
      if (r != 0) g = std::gcd(g, std::labs(r));
    if (g == 0) g = 1;
    long kmax = 0;
    for (const auto& [r, m] : diagonals) kmax = std::max(kmax, std::labs(r) / g);
    long G = 1;
    while (G * G < kmax + 1) ++G;
    const long step = g * G;
    // giant q = floor division so that the baby part is always in [0, step)
    std::map<long, std::vector<std::pair<long, const SlotVector*>>> groups;
    for (const auto& [r, m] : diagonals) {
      long q = r / step;
      long b = r - q * step;
      if (b < 0) {
        q -= 1;
        b = r - q * step;
      }
      groups[q * step].emplace_back(b, &m);
    }
    std::map<long, SlotVector> babies;
    SlotVector out;
    bool first = true;
    for (const auto& [giant, members] : groups) {
      std::optional<SlotVector> inner;
      for (const auto& [b, mask] : members) {
        auto it = babies.find(b);
        if (it == babies.end()) it = babies.emplace(b, eng.rotate(c, b)).first;
        // pre-rotate the mask so that a single giant rotation finishes the job
        SlotVector m2 = eng.rotate(*mask, -giant);
        SlotVector term = eng.mul(m2, it->second);
        inner = inner ? eng.add(*inner, term) : term;
      }
      SlotVector done = eng.rotate(*inner, giant);
      out = first ? done : eng.add(out, done);
      first = false;
    }
    return out;
  }

  SlotVector out;
  bool first = true;
  for (const auto& [offset, mask] : diagonals) {
    SlotVector term = eng.mul(mask, eng.rotate(c, offset));
    out = first ? term : eng.add(out, term);
    first = false;
  }
  return out;
}

}  // namespace detail

inline SlotVector apply(Engine& eng, const LinearTransform& t, const SlotVector& c,
                        bool bsgs = false) {
  return detail::apply_diagonals(eng, t.diagonals, c, bsgs);
}

// ---------------------------------------------------------------------------
// pack / unpack

inline PackedMatrix pack(Engine& eng, const HostTensor& batch, const BlockLayout& layout) {
  layout.validate();
  if (static_cast<long>(batch.batch) > layout.parallel)
    throw argument_error("pack: batch of " + std::to_string(batch.batch) +
                         " exceeds p = " + std::to_string(layout.parallel));
  if (static_cast<long>(batch.rows) > layout.rows || static_cast<long>(batch.cols) > layout.cols)
    throw dimension_error("pack: tensor exceeds layout bounds");
  const long d = layout.delta;
  const long bs = d * d;
  PackedMatrix m;
  m.layout = layout;
  m.blocks.reserve(layout.grid_rows() * layout.grid_cols());
  for (long bi = 0; bi < layout.grid_rows(); ++bi) {
    for (long bj = 0; bj < layout.grid_cols(); ++bj) {
      std::vector<double> slots(eng.params().slot_count(), 0.0);
      for (std::size_t s = 0; s < batch.batch; ++s) {
        for (long i = 0; i < d; ++i) {
          for (long j = 0; j < d; ++j) {
            const long r = bi * d + i, c = bj * d + j;
            if (r < static_cast<long>(batch.rows) && c < static_cast<long>(batch.cols))
              slots[s * bs + i * d + j] = batch.at(s, r, c);
          }
        }
      }
      m.blocks.push_back(eng.encode(slots));
    }
  }
  return m;
}

// Packs one rows x cols matrix with identical copies in all p slices
// (the weight-matrix encoding). Host-side tiling; no homomorphic cost.
inline PackedMatrix pack_replicated(Engine& eng, const std::vector<double>& values,
                                    long rows, long cols, BlockLayout layout) {
  layout.rows = rows;
  layout.cols = cols;
  if (static_cast<long>(values.size()) != rows * cols)
    throw dimension_error("pack_replicated: value count does not match rows*cols");
  HostTensor t(layout.parallel, rows, cols);
  for (long s = 0; s < layout.parallel; ++s)
    for (long i = 0; i < rows; ++i)
      for (long j = 0; j < cols; ++j) t.at(s, i, j) = values[i * cols + j];
  PackedMatrix m = pack(eng, t, layout);
  m.replicated = true;
  return m;
}

// Tiles a length-cols row across every row and slice, so it can be added
// element-wise to any matrix of the same layout (bias encoding).
inline PackedMatrix pack_row_tiled(Engine& eng, const std::vector<double>& row,
                                   BlockLayout layout) {
  if (static_cast<long>(row.size()) != layout.cols)
    throw dimension_error("pack_row_tiled: row length does not match layout cols");
  HostTensor t(layout.parallel, layout.rows, layout.cols);
  for (long s = 0; s < layout.parallel; ++s)
    for (long i = 0; i < layout.rows; ++i)
      for (long j = 0; j < layout.cols; ++j) t.at(s, i, j) = row[j];
  PackedMatrix m = pack(eng, t, layout);
  m.replicated = true;
  return m;
}

inline HostTensor unpack(Engine& eng, const PackedMatrix& m) {
  if (m.encrypted()) throw state_error("unpack: decrypt the matrix first");
  const long d = m.layout.delta;
  const long bs = d * d;
  HostTensor t(m.layout.parallel, m.layout.rows, m.layout.cols);
  for (long bi = 0; bi < m.layout.grid_rows(); ++bi) {
    for (long bj = 0; bj < m.layout.grid_cols(); ++bj) {
      const auto& slots = m.block(bi, bj).slots;
      for (long s = 0; s < m.layout.parallel; ++s) {
        for (long i = 0; i < d; ++i) {
          for (long j = 0; j < d; ++j) {
            const long r = bi * d + i, c = bj * d + j;
            if (r < m.layout.rows && c < m.layout.cols)
              t.at(s, r, c) = slots[s * bs + i * d + j];
          }
        }
      }
    }
  }
  (void)eng;
  return t;
}

inline PackedMatrix encrypt_matrix(Engine& eng, const PackedMatrix& m) {
  PackedMatrix out = m;
  for (auto& b : out.blocks) b = eng.encrypt(b);
  return out;
}

inline PackedMatrix decrypt_matrix(Engine& eng, const PackedMatrix& m) {
  PackedMatrix out = m;
  for (auto& b : out.blocks) b = eng.decrypt(b);
  return out;
}

inline PackedMatrix bootstrap_matrix(Engine& eng, const PackedMatrix& m) {
  PackedMatrix out = m;
  for (auto& b : out.blocks) b = eng.bootstrap(b);
  return out;
}

// ---------------------------------------------------------------------------
// element-wise algebra

inline void check_same_layout(const PackedMatrix& a, const PackedMatrix& b, const char* op) {
  if (!a.layout.same_packing(b.layout) || a.layout.rows != b.layout.rows ||
      a.layout.cols != b.layout.cols)
    throw dimension_error(std::string(op) + ": layout mismatch");
}

inline PackedMatrix elementwise_add(Engine& eng, const PackedMatrix& a, const PackedMatrix& b) {
  check_same_layout(a, b, "elementwise_add");
  PackedMatrix out = a;
  for (std::size_t i = 0; i < out.blocks.size(); ++i)
    out.blocks[i] = eng.add(a.blocks[i], b.blocks[i]);
  out.replicated = a.replicated && b.replicated;
  return out;
}

inline PackedMatrix elementwise_sub(Engine& eng, const PackedMatrix& a, const PackedMatrix& b) {
  check_same_layout(a, b, "elementwise_sub");
  PackedMatrix out = a;
  for (std::size_t i = 0; i < out.blocks.size(); ++i)
    out.blocks[i] = eng.sub(a.blocks[i], b.blocks[i]);
  out.replicated = a.replicated && b.replicated;
  return out;
}

inline PackedMatrix elementwise_mul(Engine& eng, const PackedMatrix& a, const PackedMatrix& b) {
  check_same_layout(a, b, "elementwise_mul");
  PackedMatrix out = a;
  for (std::size_t i = 0; i < out.blocks.size(); ++i)
    out.blocks[i] = eng.mul(a.blocks[i], b.blocks[i]);
  out.replicated = a.replicated && b.replicated;
  return out;
}

inline PackedMatrix scale(Engine& eng, const PackedMatrix& a, double k) {
  PackedMatrix out = a;
  const SlotVector kv = eng.constant(k);
  for (std::size_t i = 0; i < out.blocks.size(); ++i) out.blocks[i] = eng.mul(a.blocks[i], kv);
  return out;
}

// ---------------------------------------------------------------------------
// third-dimension utilities

// Copies slice 0 into all p slices with log2(p) rotate-and-add steps.
// Slices 1..p-1 must be zero on entry.
inline PackedMatrix replicate(Engine& eng, const PackedMatrix& a) {
  PackedMatrix out = a;
  const long bs = a.layout.block_slots();
  for (auto& b : out.blocks) {
    for (long span = 1; span < a.layout.parallel; span <<= 1)
      b = eng.add(b, eng.rotate(b, -span * bs));
  }
  out.replicated = true;
  return out;
}

// Sums the p slices of every block (gradient merge). With full slot
// utilization every slice ends up holding the total.
inline PackedMatrix reduce_slices(Engine& eng, const PackedMatrix& a) {
  PackedMatrix out = a;
  for (auto& b : out.blocks)
    b = eng.inner_sum(b, a.layout.block_slots(), a.layout.parallel);
  out.replicated = a.layout.full_utilization();
  return out;
}

// ---------------------------------------------------------------------------
// matrix multiplication

struct MatmulOptions {
  bool bsgs = false;  // baby-step giant-step evaluation of the shear transforms
};

// The rotation families of one operand, computed once and reusable across
// many multiplications (the weight-transform cache of the training loop).
// Memory cost is x delta ciphertexts per block.
struct PreparedRhs {
  BlockLayout layout;
  bool encrypted = false;
  bool replicated = false;
  int source_level = 0;
  // fam[block][0] = tau(B_block); fam[block][q] = psi_q(tau(B_block))
  std::vector<std::vector<SlotVector>> fam;
};

struct PreparedLhs {
  BlockLayout layout;
  bool encrypted = false;
  bool replicated = false;
  int source_level = 0;
  // fam[block][0] = sigma(A_block); fam[block][q] = phi_q(sigma(A_block))
  std::vector<std::vector<SlotVector>> fam;
};

inline PreparedRhs prepare_rhs(Engine& eng, const PackedMatrix& b, const MatmulOptions& opt = {}) {
  PreparedRhs p;
  p.layout = b.layout;
  p.encrypted = b.encrypted();
  p.replicated = b.replicated;
  p.source_level = b.blocks.front().level;
  const LinearTransform tau = gen_transform(eng, PermKind::tau, 0, b.layout, b.replicated);
  std::vector<LinearTransform> psis;
  for (int q = 1; q < b.layout.delta; ++q)
    psis.push_back(gen_transform(eng, PermKind::psi, q, b.layout, b.replicated));
  p.fam.resize(b.blocks.size());
  for (std::size_t k = 0; k < b.blocks.size(); ++k) {
    SlotVector tb = apply(eng, tau, b.blocks[k], opt.bsgs);
    p.fam[k].push_back(tb);
    for (int q = 1; q < b.layout.delta; ++q)
      p.fam[k].push_back(apply(eng, psis[q - 1], tb, opt.bsgs));
  }
  return p;
}

inline PreparedLhs prepare_lhs(Engine& eng, const PackedMatrix& a, const MatmulOptions& opt = {}) {
  PreparedLhs p;
  p.layout = a.layout;
  p.encrypted = a.encrypted();
  p.replicated = a.replicated;
  p.source_level = a.blocks.front().level;
  const LinearTransform sigma = gen_transform(eng, PermKind::sigma, 0, a.layout, a.replicated);
  std::vector<LinearTransform> phis;
  for (int q = 1; q < a.layout.delta; ++q)
    phis.push_back(gen_transform(eng, PermKind::phi, q, a.layout, a.replicated));
  p.fam.resize(a.blocks.size());
  for (std::size_t k = 0; k < a.blocks.size(); ++k) {
    SlotVector sa = apply(eng, sigma, a.blocks[k], opt.bsgs);
    p.fam[k].push_back(sa);
    for (int q = 1; q < a.layout.delta; ++q)
      p.fam[k].push_back(apply(eng, phis[q - 1], sa, opt.bsgs));
  }
  return p;
}

namespace detail {

inline void check_matmul_shapes(const BlockLayout& a, const BlockLayout& b) {
  if (a.cols != b.rows)
    throw dimension_error("matmul: A.cols = " + std::to_string(a.cols) +
                          " does not match B.rows = " + std::to_string(b.rows));
  if (a.delta != b.delta || a.parallel != b.parallel)
    throw dimension_error("matmul: operands use different delta or p");
}

inline void check_matmul_levels(bool a_enc, int a_level, bool b_enc, int b_level) {
  if (a_enc && b_enc) {
    if (std::min(a_level, b_level) < 3)
      throw level_error("matmul: combined level " + std::to_string(std::min(a_level, b_level)) +
                        " is below the 3 levels a ciphertext product consumes");
  } else if (a_enc || b_enc) {
    const int lv = a_enc ? a_level : b_level;
    if (lv < 2)
      throw level_error("matmul: encrypted operand level " + std::to_string(lv) +
                        " is below the 2 levels a product with a plaintext consumes");
  }
}

struct MatmulGeometry {
  long gi, gj, gk;
  int delta;
  BlockLayout out_layout;
};

inline MatmulGeometry matmul_geometry(const BlockLayout& a, const BlockLayout& b) {
  check_matmul_shapes(a, b);
  MatmulGeometry g{a.grid_rows(), a.grid_cols(), b.grid_cols(), a.delta, a};
  g.out_layout.cols = b.cols;
  return g;
}

// sum_q fa[q] . fb[q], accumulated into the output grid. Works for any
// encryption combination: plaintext-plaintext products are free, so this
// is also the all-clear evaluation path.
inline PackedMatrix family_dot(Engine& eng, const MatmulGeometry& g,
                               const std::vector<std::vector<SlotVector>>& fa,
                               const std::vector<std::vector<SlotVector>>& fb, bool replicated) {
  PackedMatrix c;
  c.layout = g.out_layout;
  c.replicated = replicated;
  c.blocks.resize(g.gi * g.gk);
  std::vector<bool> have(g.gi * g.gk, false);
  for (long i = 0; i < g.gi; ++i) {
    for (long j = 0; j < g.gj; ++j) {
      const auto& a_fam = fa[i * g.gj + j];
      for (long k = 0; k < g.gk; ++k) {
        const auto& b_fam = fb[j * g.gk + k];
        SlotVector dot = eng.mul(a_fam[0], b_fam[0]);
        for (int q = 1; q < g.delta; ++q) dot = eng.add(dot, eng.mul(a_fam[q], b_fam[q]));
        auto& out = c.blocks[i * g.gk + k];
        out = have[i * g.gk + k] ? eng.add(out, dot) : dot;
        have[i * g.gk + k] = true;
      }
    }
  }
  return c;
}

// One-level evaluation of sum_q base[q] . pt_fam[q] where pt_fam holds the
// clear-side family values: the plaintext values are folded into the masks
// of the remaining shift transform, so the whole product costs the shear
// (1 level) plus this call (1 level). `base_rots` caches rotations of the
// shear output so they are shared across output blocks.
inline SlotVector fused_shift_dot(Engine& eng, PermKind shift_kind, const BlockLayout& layout,
                                  bool base_replicated, const SlotVector& base,
                                  std::map<long, SlotVector>& base_rots,
                                  const std::vector<SlotVector>& pt_fam) {
  const int d = layout.delta;
  // masks of the shift family, fused with the plaintext family values
  std::map<long, SlotVector> fused;
  for (int q = 0; q < d; ++q) {
    if (q == 0) {
      auto it = fused.find(0);
      if (it == fused.end())
        fused.emplace(0, pt_fam[0]);
      else
        it->second = eng.add(it->second, pt_fam[0]);
      continue;
    }
    const LinearTransform t = gen_transform(eng, shift_kind, q, layout, base_replicated);
    for (const auto& [offset, mask] : t.diagonals) {
      SlotVector fm = eng.mul(mask, pt_fam[q]);
      auto it = fused.find(offset);
      if (it == fused.end())
        fused.emplace(offset, std::move(fm));
      else
        it->second = eng.add(it->second, fm);
    }
  }
  SlotVector out;
  bool first = true;
  for (const auto& [offset, mask] : fused) {
    auto it = base_rots.find(offset);
    if (it == base_rots.end()) it = base_rots.emplace(offset, eng.rotate(base, offset)).first;
    SlotVector term = eng.mul(mask, it->second);
    out = first ? term : eng.add(out, term);
    first = false;
  }
  return out;
}

// A encrypted, B in the clear: C_{i,k} = sum_j fused(sigma(A_{i,j}); psi/tau(B_{j,k})).
inline PackedMatrix matmul_rhs_clear(Engine& eng, const MatmulGeometry& g, const PackedMatrix& a,
                                     const std::vector<std::vector<SlotVector>>& fb,
                                     const MatmulOptions& opt) {
  const LinearTransform sigma = gen_transform(eng, PermKind::sigma, 0, a.layout, a.replicated);
  PackedMatrix c;
  c.layout = g.out_layout;
  c.replicated = false;
  c.blocks.resize(g.gi * g.gk);
  std::vector<bool> have(g.gi * g.gk, false);
  for (long i = 0; i < g.gi; ++i) {
    for (long j = 0; j < g.gj; ++j) {
      SlotVector sa = apply(eng, sigma, a.block(i, j), opt.bsgs);
      std::map<long, SlotVector> rots;
      for (long k = 0; k < g.gk; ++k) {
        SlotVector dot = fused_shift_dot(eng, PermKind::phi, a.layout, a.replicated, sa, rots,
                                         fb[j * g.gk + k]);
        auto& out = c.blocks[i * g.gk + k];
        out = have[i * g.gk + k] ? eng.add(out, dot) : dot;
        have[i * g.gk + k] = true;
      }
    }
  }
  return c;
}

// A in the clear, B encrypted: symmetric fusion on the tau side.
inline PackedMatrix matmul_lhs_clear(Engine& eng, const MatmulGeometry& g,
                                     const std::vector<std::vector<SlotVector>>& fa,
                                     const PackedMatrix& b, const MatmulOptions& opt) {
  const LinearTransform tau = gen_transform(eng, PermKind::tau, 0, b.layout, b.replicated);
  PackedMatrix c;
  c.layout = g.out_layout;
  c.replicated = false;
  c.blocks.resize(g.gi * g.gk);
  std::vector<bool> have(g.gi * g.gk, false);
  for (long j = 0; j < g.gj; ++j) {
    for (long k = 0; k < g.gk; ++k) {
      SlotVector tb = apply(eng, tau, b.block(j, k), opt.bsgs);
      std::map<long, SlotVector> rots;
      for (long i = 0; i < g.gi; ++i) {
        SlotVector dot = fused_shift_dot(eng, PermKind::psi, b.layout, b.replicated, tb, rots,
                                         fa[i * g.gj + j]);
        auto& out = c.blocks[i * g.gk + k];
        out = have[i * g.gk + k] ? eng.add(out, dot) : dot;
        have[i * g.gk + k] = true;
      }
    }
  }
  return c;
}

}  // namespace detail

// C = A x B in the same packing format. A ciphertext-ciphertext product
// consumes exactly 3 levels (two linear transforms plus the dot product);
// with one operand in the clear that side's transforms are computed in
// plaintext and folded into the other side's masks, consuming 2.
inline PackedMatrix matmul(Engine& eng, const PreparedLhs& a, const PreparedRhs& b) {
  auto g = detail::matmul_geometry(a.layout, b.layout);
  detail::check_matmul_levels(a.encrypted, a.source_level, b.encrypted, b.source_level);
  return detail::family_dot(eng, g, a.fam, b.fam, a.replicated && b.replicated);
}

inline PackedMatrix matmul(Engine& eng, const PackedMatrix& a, const PreparedRhs& b,
                           const MatmulOptions& opt = {}) {
  auto g = detail::matmul_geometry(a.layout, b.layout);
  detail::check_matmul_levels(a.encrypted(), a.blocks.front().level, b.encrypted, b.source_level);
  if (a.encrypted() && !b.encrypted)
    return detail::matmul_rhs_clear(eng, g, a, b.fam, opt);
  return detail::family_dot(eng, g, prepare_lhs(eng, a, opt).fam, b.fam,
                            a.replicated && b.replicated);
}

inline PackedMatrix matmul(Engine& eng, const PreparedLhs& a, const PackedMatrix& b,
                           const MatmulOptions& opt = {}) {
  auto g = detail::matmul_geometry(a.layout, b.layout);
  detail::check_matmul_levels(a.encrypted, a.source_level, b.encrypted(), b.blocks.front().level);
  if (!a.encrypted && b.encrypted())
    return detail::matmul_lhs_clear(eng, g, a.fam, b, opt);
  return detail::family_dot(eng, g, a.fam, prepare_rhs(eng, b, opt).fam,
                            a.replicated && b.replicated);
}

inline PackedMatrix matmul(Engine& eng, const PackedMatrix& a, const PackedMatrix& b,
                           const MatmulOptions& opt = {}) {
  auto g = detail::matmul_geometry(a.layout, b.layout);
  detail::check_matmul_levels(a.encrypted(), a.blocks.front().level, b.encrypted(),
                              b.blocks.front().level);
  if (a.encrypted() && !b.encrypted())
    return detail::matmul_rhs_clear(eng, g, a, prepare_rhs(eng, b, opt).fam, opt);
  if (!a.encrypted() && b.encrypted())
    return detail::matmul_lhs_clear(eng, g, prepare_lhs(eng, a, opt).fam, b, opt);
  return detail::family_dot(eng, g, prepare_lhs(eng, a, opt).fam, prepare_rhs(eng, b, opt).fam,
                            a.replicated && b.replicated);
}

// ---------------------------------------------------------------------------
// transpose

// xi on every block plus a free swap of the block-grid indices.
inline PackedMatrix transpose(Engine& eng, const PackedMatrix& a, const MatmulOptions& opt = {}) {
  if (a.encrypted() && a.blocks.front().level < 1)
    throw level_error("transpose: level exhausted, bootstrap first");
  const LinearTransform xi = gen_transform(eng, PermKind::xi, 0, a.layout, a.replicated);
  PackedMatrix out;
  out.layout = a.layout;
  out.layout.rows = a.layout.cols;
  out.layout.cols = a.layout.rows;
  out.replicated = a.replicated;
  out.blocks.resize(out.layout.grid_rows() * out.layout.grid_cols());
  for (long i = 0; i < a.layout.grid_rows(); ++i)
    for (long j = 0; j < a.layout.grid_cols(); ++j)
      out.block(j, i) = apply(eng, xi, a.block(i, j), opt.bsgs);
  return out;
}

// ---------------------------------------------------------------------------
// bias-row helpers

// Sums a packed matrix over rows and slices and broadcasts the per-column
// totals back to every row and slice, matching the pack_row_tiled layout.
// Costs one level (the row-0 mask) plus 2 log2(delta) + log2(p) rotations.
inline PackedMatrix colsum_broadcast(Engine& eng, const PackedMatrix& a) {
  const long d = a.layout.delta;
  if ((d & (d - 1)) != 0)
    throw argument_error("colsum_broadcast: delta must be a power of two");
  const long bs = a.layout.block_slots();
  std::vector<double> row0(eng.params().slot_count(), 0.0);
  for (long s = 0; s < a.layout.parallel; ++s)
    for (long j = 0; j < d; ++j) row0[s * bs + j] = 1.0;
  const SlotVector row0_mask = eng.encode(row0);

  PackedMatrix out = a;
  for (auto& b : out.blocks) {
    SlotVector v = eng.inner_sum(b, d, d);               // rows within each slice
    v = eng.inner_sum(v, bs, a.layout.parallel);         // across slices
    v = eng.mul(row0_mask, v);                           // keep row 0 only
    for (long span = 1; span < d; span <<= 1)            // broadcast to all rows
      v = eng.add(v, eng.rotate(v, -span * d));
    b = v;
  }
  out.replicated = a.layout.full_utilization();
  return out;
}

// ---------------------------------------------------------------------------
// single-ciphertext reference path

// Row-packing reference: the whole multiplication carried out inside one
// ciphertext holding p parallel delta x delta matrices. Kept independent
// of the block-grid code so the two routes cross-check each other; the
// multi-dimensional method at n = delta must match it in values and
// rotation counts.
inline SlotVector jiang_matmul(Engine& eng, const SlotVector& a, const SlotVector& b, int delta,
                               int parallel, bool a_replicated = false, bool b_replicated = false,
                               bool bsgs = false) {
  const long d = delta, bs = d * d;
  const std::size_t slots = eng.params().slot_count();
  if (std::size_t(parallel) * bs > slots)
    throw argument_error("jiang_matmul: p*delta^2 exceeds slot count");
  const bool full = std::size_t(parallel) * bs == slots;

  auto diagonals = [&](auto src_of, bool fold) {
    std::map<long, std::vector<double>> masks;
    for (long q = 0; q < bs; ++q) {
      const long i = q / d, j = q % d;
      const long src = src_of(i, j, fold);
      auto& m = masks[src - q];
      if (m.empty()) m.assign(slots, 0.0);
      for (long s = 0; s < parallel; ++s) m[s * bs + q] = 1.0;
    }
    std::vector<std::pair<long, SlotVector>> out;
    for (auto& [off, m] : masks) out.emplace_back(off, eng.encode(m));
    return out;
  };

  auto sigma = diagonals([&](long i, long j, bool) { return i * d + (i + j) % d; }, false);
  auto tau = diagonals(
      [&](long i, long j, bool fold) { return (fold ? (i + j) : (i + j) % d) * d + j; },
      b_replicated && full);
  SlotVector sa = detail::apply_diagonals(eng, sigma, a, bsgs);
  SlotVector tb = detail::apply_diagonals(eng, tau, b, bsgs);

  SlotVector acc = eng.mul(sa, tb);
  for (long q = 1; q < d; ++q) {
    auto phi = diagonals([&](long i, long j, bool) { return i * d + (j + q) % d; }, false);
    auto psi = diagonals(
        [&](long i, long j, bool fold) { return (fold ? (i + q) : (i + q) % d) * d + j; },
        b_replicated && full);
    SlotVector fa = detail::apply_diagonals(eng, phi, sa, bsgs);
    SlotVector fb = detail::apply_diagonals(eng, psi, tb, bsgs);
    acc = eng.add(acc, eng.mul(fa, fb));
  }
  (void)a_replicated;
  return acc;
}

}  // namespace slotsim
