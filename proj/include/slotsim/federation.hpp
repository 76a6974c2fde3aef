#pragma once

// FedAvg orchestration over a simulated network: Setup, Local Computation,
// Aggregate and Model-Update phases with per-party ledgers, tree or star
// message accounting, bootstrap placement at the model update, and the
// prediction service (oblivious or with a collectively decrypted model).

#include "slotsim/rnn.hpp"

namespace slotsim {

struct Topology {
  enum class Kind { tree, star };
  Kind kind = Kind::tree;
  int parties = 1;
  std::vector<int> parent;  // tree only: parent[i] for i>0, party 0 is the root

  // balanced binary tree rooted at the aggregation server (party 0)
  static Topology tree(int n) {
    if (n < 1) throw config_error("topology: need at least one party");
    Topology t;
    t.kind = Kind::tree;
    t.parties = n;
    t.parent.assign(n, -1);
    for (int i = 1; i < n; ++i) t.parent[i] = (i - 1) / 2;
    return t;
  }

  // every party talks to a separate aggregation server
  static Topology star(int n) {
    if (n < 1) throw config_error("topology: need at least one party");
    Topology t;
    t.kind = Kind::star;
    t.parties = n;
    return t;
  }

  // links touched by one broadcast / one aggregation sweep
  std::uint64_t links() const {
    return kind == Kind::tree ? std::uint64_t(parties - 1) : std::uint64_t(parties);
  }

  void validate() const {
    if (parties < 1) throw config_error("topology: empty");
    if (kind == Kind::star) return;
    if (static_cast<int>(parent.size()) != parties) throw config_error("topology: bad parent map");
    for (int i = 1; i < parties; ++i) {
      int hops = 0;
      for (int v = i; v != 0; v = parent[v]) {
        if (v < 0 || v >= parties || ++hops > parties)
          throw config_error("topology: not a tree rooted at party 0");
      }
    }
  }
};

enum class AveragingMode { gradients, models };

struct TrainConfig {
  long global_iters = 1;   // e
  long local_iters = 1;    // l
  double learning_rate = 0.1;
  long batch = 64;         // b, per party per iteration
  AveragingMode mode = AveragingMode::gradients;
  bool clip_enabled = true;
  ClipSpec clip{5.0, ClipVariant::soft};
  int clip_degree = 7;
  double clip_interval = 60.0;  // approximation interval [-x, x]
  TrainingFlags flags;

  void validate() const {
    if (global_iters < 0 || local_iters < 1) throw config_error("train: e >= 0 and l >= 1");
    if (batch < 1) throw config_error("train: batch must be positive");
    if (learning_rate <= 0) throw config_error("train: learning rate must be positive");
    if (mode == AveragingMode::gradients && local_iters != 1)
      throw config_error("train: gradient averaging requires l = 1");
    if (clip_enabled) clip.validate();
  }
};

struct Party {
  int id = 0;
  Engine engine;
  HostTensor inputs;   // (n_i, T, d)
  HostTensor targets;  // (n_i, kappa, o)
  long cursor = 0;
  CarriedState state;
  LocalStats stats;

  Party(int id_, const EngineParams& ep) : id(id_), engine(ep) {}
  long samples() const { return static_cast<long>(inputs.batch); }
};

struct RunStats {
  std::uint64_t fl_messages = 0;       // gradient/model ciphertext transfers on links
  std::uint64_t prep_rotations = 0;
  std::uint64_t model_update_bootstraps = 0;
  CostLedger merged;                   // all parties + server, in id order
};

class Federation {
 public:
  Federation(Topology topo, RnnShape shape, Arch arch, BlockLayout base, TrainConfig cfg,
             ActivationSet acts, std::uint64_t seed)
      : topo_(std::move(topo)),
        cfg_(std::move(cfg)),
        acts_(std::move(acts)),
        server_(base.engine),
        base_(base),
        rng_(seed) {
    topo_.validate();
    cfg_.validate();
    shape.validate();
    const int act_depth = acts_.phi.fn.eval_depth();
    const int clip_depth = clip_poly_depth();
    const int need = required_level(arch, act_depth, clip_depth, acts_.phi.derivative_identity);
    if (base.engine.initial_level < need)
      throw config_error("initial level " + std::to_string(base.engine.initial_level) +
                         " is below the " + std::to_string(need) + " this " + arch_name(arch) +
                         " configuration needs");
    server_.register_protocol_links(topo_.links());
    for (int i = 0; i < topo_.parties; ++i) {
      parties_.emplace_back(i, base.engine);
      parties_.back().engine.register_protocol_links(topo_.links());
    }
    if (cfg_.clip_enabled)
      clip_poly_ = fit_clip(cfg_.clip, -cfg_.clip_interval, cfg_.clip_interval, cfg_.clip_degree);
    model_ = make_model(server_, arch, shape, base, rng_);
  }

  // Setup Phase: the server seeds and encrypts the global model and
  // broadcasts it down the tree.
  void setup() {
    encrypt_model(server_, model_);
    charge_broadcast(model_weight_blocks());
    setup_done_ = true;
  }

  void assign_data(int party, HostTensor inputs, HostTensor targets) {
    parties_.at(party).inputs = std::move(inputs);
    parties_.at(party).targets = std::move(targets);
  }

  Party& party(int id) { return parties_.at(id); }
  const RnnModel& model() const { return model_; }
  RnnModel& model() { return model_; }
  Engine& server_engine() { return server_; }
  const TrainConfig& config() const { return cfg_; }
  const ActivationSet& acts() const { return acts_; }
  std::uint64_t fl_messages() const { return fl_messages_; }
  std::uint64_t model_update_bootstraps() const { return update_bootstraps_; }

  long total_samples() const {
    long n = 0;
    for (const auto& p : parties_) n += p.samples();
    return n;
  }

  // One global iteration: Local Computation, Aggregate, Model-Update.
  void global_iteration() {
    if (!setup_done_) throw protocol_error("train: setup phase has not run");
    const long n = total_samples();
    if (n == 0) throw protocol_error("train: no party holds any data");

    std::vector<GradientSet> contributions;
    for (auto& p : parties_) {
      if (p.samples() == 0)
        throw protocol_error("party " + std::to_string(p.id) +
                             " reported no data; dropouts are unsupported");
      GradientSet local;
      if (cfg_.mode == AveragingMode::gradients) {
        local = local_iteration(p.engine, model_, acts_, next_batch(p), cfg_.flags, p.state,
                                &p.stats);
      } else {
        RnnModel local_model = model_;
        for (long li = 0; li < cfg_.local_iters; ++li) {
          if (li > 0)
            for (auto& [name, w] : local_model.weights) w = bootstrap_matrix(p.engine, w);
          GradientSet g = local_iteration(p.engine, local_model, acts_, next_batch(p), cfg_.flags,
                                          p.state, &p.stats);
          for (auto& [name, grad] : g.grads) {
            PackedMatrix step = scale(p.engine, grad, cfg_.learning_rate / double(cfg_.batch));
            local_model.weight(name) =
                elementwise_sub(p.engine, local_model.weight(name), step);
          }
        }
        local.grads = std::move(local_model.weights);
      }
      // the averaging weight n_i/n (and the batch mean) are public scalars
      const double w = cfg_.mode == AveragingMode::gradients
                           ? double(p.samples()) / (double(n) * double(cfg_.batch))
                           : double(p.samples()) / double(n);
      for (auto& [name, g] : local.grads) g = scale(p.engine, g, w);
      contributions.push_back(std::move(local));
    }

    GradientSet agg = aggregate(contributions);
    model_update(agg);
  }

  void train() {
    if (!setup_done_) setup();
    for (long k = 0; k < cfg_.global_iters; ++k) global_iteration();
  }

  // Aggregate Phase: children send up the tree, parents add; the server
  // ends up with the weighted sum. Star topologies send everything to the
  // server directly.
  GradientSet aggregate(std::vector<GradientSet>& per_party) {
    if (static_cast<int>(per_party.size()) != topo_.parties)
      throw protocol_error("aggregate: expected " + std::to_string(topo_.parties) +
                           " contributions, got " + std::to_string(per_party.size()));
    if (topo_.kind == Topology::Kind::star) {
      GradientSet acc = std::move(per_party[0]);
      charge_transfer(parties_[0].engine, acc);
      for (int i = 1; i < topo_.parties; ++i) {
        charge_transfer(parties_[i].engine, per_party[i]);
        for (auto& [name, g] : acc.grads)
          g = elementwise_add(server_, g, per_party[i].find(name));
      }
      return acc;
    }
    for (int i = topo_.parties; i-- > 1;) {
      const int up = topo_.parent[i];
      charge_transfer(parties_[i].engine, per_party[i]);
      for (auto& [name, g] : per_party[up].grads)
        g = elementwise_add(parties_[up].engine, g, per_party[i].find(name));
    }
    return std::move(per_party[0]);
  }

  // Model-Update Phase: clipping is applied to the averaged gradient with
  // the learning rate folded into the polynomial's coefficients, then the
  // weights are refreshed and broadcast for the next round.
  void model_update(GradientSet& agg) {
    const auto bs0 = server_.ledger().bootstraps;
    const bool model_mode = cfg_.mode == AveragingMode::models;
    for (auto& [name, g] : agg.grads) {
      PackedMatrix step = model_mode ? elementwise_sub(server_, g, model_.weight(name)) : g;
      if (cfg_.clip_enabled) {
        if (step.level() < clip_poly_depth() + (model_mode ? 1 : 0))
          step = bootstrap_matrix(server_, step);
        step = apply_clip(step, model_mode ? 1.0 : cfg_.learning_rate);
        if (model_mode) step = scale(server_, step, -1.0);
      } else {
        step = scale(server_, step, model_mode ? -1.0 : cfg_.learning_rate);
      }
      model_.weight(name) = elementwise_sub(server_, model_.weight(name), step);
      model_.weight(name) = bootstrap_matrix(server_, model_.weight(name));
    }
    update_bootstraps_ += server_.ledger().bootstraps - bs0;
    std::uint64_t updated_blocks = 0;
    for (const auto& [name, g] : agg.grads) updated_blocks += model_.weight(name).blocks.size();
    charge_broadcast(updated_blocks);
  }

  RunStats stats() {
    RunStats out;
    out.fl_messages = fl_messages_;
    out.model_update_bootstraps = update_bootstraps_;
    for (auto& p : parties_) {
      out.merged.merge(p.engine.ledger());
      out.prep_rotations += p.stats.prep_rotations;
    }
    out.merged.merge(server_.ledger());
    return out;
  }

  // Predictions-as-a-service: inputs encrypted under the collective key,
  // forward pass on the encrypted model, one key-switch per output block
  // so only the querier can read the result.
  struct Prediction {
    HostTensor values;  // (p, delta, o) per output step, flattened over steps
    std::vector<PackedMatrix> switched;
    std::uint64_t key_switches = 0;
  };

  Prediction predict_oblivious(const HostTensor& inputs, int querier) {
    return predict_impl(inputs, querier, model_, server_);
  }

  // Collective decryption of the model first (a key-switch per weight
  // block with no target key), then the same evaluation path.
  Prediction predict_decrypted(const HostTensor& inputs, int querier) {
    RnnModel open = decrypt_model(server_, model_);
    return predict_impl(inputs, querier, open, server_);
  }

 private:
  int clip_poly_depth() const {
    int d = cfg_.clip_degree;
    int k = 0;
    while ((1 << k) < d + 1) ++k;
    return cfg_.clip_enabled ? k : 1;
  }

  PackedMatrix apply_clip(const PackedMatrix& g, double eta) {
    if (cfg_.flags.exact_activations) {
      const double m = cfg_.clip.threshold;
      return eval_exact_matrix(
          server_, [m, eta](double x) { return eta * clip_reference(x, m); },
          clip_poly_depth(), g);
    }
    PolyApprox scaled = clip_poly_;
    for (double& c : scaled.cheb) c *= eta;
    return eval_encrypted(server_, scaled, g);
  }

  HostBatch next_batch(Party& p) {
    if (cfg_.batch > base_.delta * base_.parallel)
      throw config_error("batch of " + std::to_string(cfg_.batch) +
                         " does not fit p*delta = " +
                         std::to_string(base_.delta * base_.parallel) + " packed rows");
    HostBatch b;
    const auto& sh = model_.shape;
    b.inputs = HostTensor(cfg_.batch, sh.timesteps, sh.features);
    b.targets = HostTensor(cfg_.batch, sh.output_steps, sh.outputs);
    for (long r = 0; r < cfg_.batch; ++r) {
      const long src = (p.cursor + r) % p.samples();
      for (long t = 0; t < sh.timesteps; ++t)
        for (long c = 0; c < sh.features; ++c) b.inputs.at(r, t, c) = p.inputs.at(src, t, c);
      for (long k = 0; k < sh.output_steps; ++k)
        for (long c = 0; c < sh.outputs; ++c) b.targets.at(r, k, c) = p.targets.at(src, k, c);
    }
    p.cursor = (p.cursor + cfg_.batch) % p.samples();
    return b;
  }

  std::uint64_t model_weight_blocks() const {
    std::uint64_t n = 0;
    for (const auto& [name, w] : model_.weights) n += w.blocks.size();
    return n;
  }

  void charge_transfer(Engine& sender, const GradientSet& g) {
    for (const auto& [name, grad] : g.grads) {
      fl_messages_ += grad.blocks.size();
      for (const auto& blk : grad.blocks)
        sender.ledger().bytes_model += sender.ciphertext_bytes(blk.level);
    }
  }

  void charge_broadcast(std::uint64_t blocks) {
    fl_messages_ += topo_.links() * blocks;
    server_.ledger().bytes_model += topo_.links() * blocks * server_.max_ciphertext_bytes();
  }

  Prediction predict_impl(const HostTensor& inputs, int querier, const RnnModel& m, Engine& eng) {
    const auto& sh = m.shape;
    if (static_cast<long>(inputs.rows) != sh.timesteps ||
        static_cast<long>(inputs.cols) != sh.features)
      throw dimension_error("predict: inputs must be (batch, T, d)");
    HostBatch hb;
    hb.inputs = inputs;
    detail::WeightOps wops(eng, m, cfg_.flags);
    auto x = detail::pack_inputs(eng, m, hb);
    for (auto& xt : x) xt = encrypt_matrix(eng, xt);  // querier data under the collective key
    PackedMatrix h0 = detail::zeros_ct(eng, m.base, m.base.delta, sh.hidden);
    std::vector<PackedMatrix> preds;
    if (m.arch == Arch::gru) {
      preds = gru_forward(eng, m, acts_, x, h0, cfg_.flags, wops).p;
    } else {
      auto tr = elman_forward(eng, m, acts_, x, h0, cfg_.flags, wops);
      preds = m.arch == Arch::jordan
                  ? std::vector<PackedMatrix>(tr.p.end() - sh.output_steps, tr.p.end())
                  : tr.p;
    }
    Prediction out;
    const auto ks0 = eng.ledger().key_switches;
    HostTensor all(m.base.parallel, sh.output_steps * m.base.delta, sh.outputs);
    for (long k = 0; k < static_cast<long>(preds.size()); ++k) {
      PackedMatrix sw = preds[k];
      for (auto& blk : sw.blocks) blk = eng.key_switch(blk, querier);
      out.switched.push_back(sw);
      // after the key-switch the querier opens the result with its own
      // key; that is a local decryption, not a collective protocol
      PackedMatrix opened = sw;
      for (auto& blk : opened.blocks) blk.encrypted = false;
      auto vals = unpack(eng, opened);
      for (long s = 0; s < m.base.parallel; ++s)
        for (long i = 0; i < m.base.delta; ++i)
          for (long j = 0; j < sh.outputs; ++j)
            all.at(s, k * m.base.delta + i, j) = vals.at(s, i, j);
    }
    out.key_switches = eng.ledger().key_switches - ks0;
    out.values = all;
    return out;
  }

  Topology topo_;
  TrainConfig cfg_;
  ActivationSet acts_;
  Engine server_;
  BlockLayout base_;
  std::mt19937_64 rng_;
  std::vector<Party> parties_;
  RnnModel model_;
  PolyApprox clip_poly_;
  bool setup_done_ = false;
  std::uint64_t fl_messages_ = 0;
  std::uint64_t update_bootstraps_ = 0;
};

}  // namespace slotsim
