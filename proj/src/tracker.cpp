#include "instformer/tracker/tracker.hpp"

#include <cmath>
#include <numeric>

#include "instformer/core/assignment.hpp"
#include "instformer/core/errors.hpp"
#include "instformer/core/log.hpp"

namespace instformer::tracker {

using namespace instformer::core;

core::Var make_tracking_tokens(const core::Var& queries, const core::Var& instance_tokens) {
  if (queries->shape.size() != 2 || instance_tokens->shape.size() != 2 ||
      queries->shape[0] != instance_tokens->shape[0])
    throw ShapeError("make_tracking_tokens: row count mismatch");
  return concat_cols(queries, instance_tokens);
}

RolloutNet RolloutNet::init(const RolloutConfig& cfg, uint64_t seed) {
  RolloutNet net;
  net.cfg = cfg;
  Rng rng(Rng::derive(seed, 0x4011ULL));
  const int d = cfg.token_dim, h = cfg.hidden_dim;
  // Near-identity start: W_out(tanh(W_in x)) ~ x in the linear regime of
  // tanh, so the untrained rollout is a calibrated previous-frame predictor
  // and the contrastive loss refines it without losing absolute alignment.
  auto w_in = init_normal(rng, int64_t(d) * h, 0.1 / std::sqrt(double(d)));
  auto w_rec = init_normal(rng, int64_t(h) * h, 0.05 / std::sqrt(double(h)));
  auto w_out = init_normal(rng, int64_t(h) * d, 0.1 / std::sqrt(double(h)));
  const double alpha = 0.1;
  for (int i = 0; i < std::min(d, h); ++i) {
    w_in[size_t(i) * h + i] += alpha;
    w_rec[size_t(i) * h + i] += alpha * 0.5;
    w_out[size_t(i) * d + i] += 1.0 / alpha;
  }
  net.pm.add("tracker.rnn.w_in", {d, h}, std::move(w_in));
  net.pm.add("tracker.rnn.w_rec", {h, h}, std::move(w_rec));
  net.pm.add("tracker.rnn.b", {1, h}, init_zeros(h));
  net.pm.add("tracker.rnn.w_out", {h, d}, std::move(w_out));
  return net;
}

std::pair<core::Var, core::Var> rollout_step(const RolloutNet& net, const core::Var& tokens,
                                             const core::Var& hidden) {
  if (tokens->shape.size() != 2 || hidden->shape.size() != 2 || tokens->shape[0] != hidden->shape[0])
    throw ShapeError("rollout_step: token/hidden row mismatch");
  if (tokens->shape[1] != net.cfg.token_dim || hidden->shape[1] != net.cfg.hidden_dim)
    throw ShapeError("rollout_step: width mismatch with the rollout net");
  Var pre = add(add(matmul(tokens, net.pm.get("tracker.rnn.w_in")),
                    matmul(hidden, net.pm.get("tracker.rnn.w_rec"))),
                net.pm.get("tracker.rnn.b"));
  Var h = vtanh(pre);
  Var out = matmul(h, net.pm.get("tracker.rnn.w_out"));
  for (double v : out->val)
    if (!std::isfinite(v)) throw NumericError("rollout_step: non-finite rollout token");
  return {out, h};
}

namespace {

void warn_zero_rows(const core::Var& m, const char* who) {
  int rows = m->shape[0], cols = m->shape[1];
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int c = 0; c < cols; ++c) {
      double v = m->val[size_t(r) * cols + c];
      s += v * v;
    }
    if (std::sqrt(s) < 1e-12) warn(std::string(who) + ": zero-norm row " + std::to_string(r));
  }
}

}  // namespace

core::Var temporal_contrastive_loss(const core::Var& predicted, const core::Var& target, double tau,
                                    TcForm form) {
  if (predicted->shape.size() != 2 || predicted->shape != target->shape)
    throw ShapeError("temporal_contrastive_loss: shape mismatch");
  if (predicted->shape[0] < 1) throw ShapeError("temporal_contrastive_loss: need at least one row");
  if (tau <= 0) throw ConfigError("temporal_contrastive_loss: tau must be positive");
  warn_zero_rows(predicted, "temporal_contrastive_loss");
  warn_zero_rows(target, "temporal_contrastive_loss");

  const int n = predicted->shape[0];
  Var sims = similarity_matrix(predicted, target);
  Var logits = scale(sims, 1.0 / tau);
  if (form == TcForm::kSoftmax) {
    std::vector<int> diag(size_t(n), 0);
    std::iota(diag.begin(), diag.end(), 0);
    return cross_entropy_rows(logits, diag);
  }
  std::vector<double> eye(size_t(n) * n, 0.0);
  for (int i = 0; i < n; ++i) eye[size_t(i) * n + i] = 1.0;
  return bce_with_logits(logits, eye);
}

core::Var similarity_matrix(const core::Var& a, const core::Var& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
    throw ShapeError("similarity_matrix: dimension mismatch");
  return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

std::vector<int> hungarian(const std::vector<double>& similarity, int n, int m) {
  std::vector<double> cost(similarity.size(), 0.0);
  for (size_t i = 0; i < similarity.size(); ++i) cost[i] = -similarity[i];
  return solve_assignment(cost, n, m);
}

std::vector<int> TrackStore::active_ids() const {
  std::vector<int> ids;
  for (const auto& t : tracks)
    if (!t.retired) ids.push_back(t.id);
  return ids;  // tracks are stored by id, so this is ascending
}

std::vector<int> associate_frame(const std::vector<double>& tracking_tokens, int n, int dim,
                                 const std::vector<double>& objectness, TrackStore& store,
                                 const TrackerThresholds& thresholds, TrackerMode mode,
                                 const RolloutNet* rollout) {
  if (int64_t(tracking_tokens.size()) != int64_t(n) * dim)
    throw ShapeError("associate_frame: token buffer size mismatch");
  if (int(objectness.size()) != n) throw ShapeError("associate_frame: objectness size mismatch");
  if (mode == TrackerMode::kRollout && rollout == nullptr)
    throw ConfigError("associate_frame: rollout mode needs a rollout net");

  std::vector<int> result(size_t(n), -1);
  const auto active = store.active_ids();
  std::vector<char> track_matched(active.size(), 0);

  if (!active.empty() && n > 0) {
    std::vector<double> refs(active.size() * size_t(dim), 0.0);
    for (size_t j = 0; j < active.size(); ++j) {
      const Track& t = store.tracks[size_t(active[j])];
      const auto& ref = (mode == TrackerMode::kRollout) ? t.rollout_token : t.last_token;
      std::copy(ref.begin(), ref.end(), refs.begin() + long(j) * dim);
    }
    Var sims = similarity_matrix(make_const({n, dim}, tracking_tokens),
                                 make_const({int(active.size()), dim}, refs));
    auto assign = hungarian(sims->val, n, int(active.size()));
    for (int i = 0; i < n; ++i) {
      int j = assign[size_t(i)];
      if (j < 0) continue;
      if (sims->val[size_t(i) * active.size() + size_t(j)] < thresholds.theta_match) continue;
      result[size_t(i)] = active[size_t(j)];
      track_matched[size_t(j)] = 1;
    }
  }

  auto update_track = [&](Track& t, const double* token) {
    t.last_token.assign(token, token + dim);
    t.miss_count = 0;
    ++t.age;
    if (mode == TrackerMode::kRollout) {
      auto [pred, h] = rollout_step(*rollout, make_const({1, dim}, t.last_token),
                                    make_const({1, rollout->cfg.hidden_dim}, t.hidden));
      t.rollout_token = pred->val;
      t.hidden = h->val;
    }
  };

  for (int i = 0; i < n; ++i) {
    const double* token = tracking_tokens.data() + size_t(i) * dim;
    if (result[size_t(i)] >= 0) {
      update_track(store.tracks[size_t(result[size_t(i)])], token);
    } else if (objectness[size_t(i)] >= thresholds.theta_birth) {
      Track t;
      t.id = store.next_id++;
      t.hidden.assign(size_t(mode == TrackerMode::kRollout ? rollout->cfg.hidden_dim : 1), 0.0);
      update_track(t, token);
      t.age = 1;
      result[size_t(i)] = t.id;
      store.tracks.push_back(std::move(t));
    }
  }

  // unmatched tracks accrue misses; rollout prediction stays frozen
  for (size_t j = 0; j < active.size(); ++j) {
    if (track_matched[j]) continue;
    Track& t = store.tracks[size_t(active[j])];
    if (++t.miss_count > thresholds.max_misses) t.retired = true;
  }
  return result;
}

}  // namespace instformer::tracker
