#pragma once

#include <string>
#include <utility>
#include <vector>

#include "instformer/core/autograd.hpp"

namespace instformer::tracker {

// Row-wise concatenation of proposal queries and instance tokens: the
// tracking token. No normalization; cosine is applied at comparison time.
core::Var make_tracking_tokens(const core::Var& queries, const core::Var& instance_tokens);

struct RolloutConfig {
  int token_dim = 128;   // 2C
  int hidden_dim = 128;  // C_h
};

// Single-layer RNN that predicts the current frame's tracking token from the
// previous token and its hidden state, plus an output projection back to
// token width.
struct RolloutNet {
  RolloutConfig cfg;
  core::ParamMap pm;

  static RolloutNet init(const RolloutConfig& cfg, uint64_t seed);
};

// h_t = tanh(T W_in + h W_rec + b); rollout = h_t W_out. Applied per row.
// Returns (rollout_tokens, new_hidden).
std::pair<core::Var, core::Var> rollout_step(const RolloutNet& net, const core::Var& tokens,
                                             const core::Var& hidden);

enum class TcForm { kSoftmax, kBinary };

// Temporal contrastive loss over identity-aligned rows: softmax form is the
// mean row cross-entropy of cos(pred_i, target_j)/tau with target j=i; the
// binary form treats each pair independently (flag, since the paper's CE is
// ambiguous).
core::Var temporal_contrastive_loss(const core::Var& predicted, const core::Var& target, double tau,
                                    TcForm form = TcForm::kSoftmax);

// Cosine similarity matrix; zero-norm rows yield zero similarity.
core::Var similarity_matrix(const core::Var& a, const core::Var& b);

// Maximizing one-to-one partial assignment of min(n,m) pairs; deterministic,
// ties resolve toward low row-then-column indices.
std::vector<int> hungarian(const std::vector<double>& similarity, int n, int m);

struct TrackerThresholds {
  double theta_match = 0.3;
  double theta_birth = 0.5;
  int max_misses = 3;
};

enum class TrackerMode { kRollout, kPrevious };

struct Track {
  int id = 0;
  std::vector<double> last_token;
  std::vector<double> rollout_token;  // prediction for the next frame
  std::vector<double> hidden;
  int age = 0;
  int miss_count = 0;
  bool retired = false;
};

struct TrackStore {
  std::vector<Track> tracks;  // indexed by id; ids are never reused
  int next_id = 0;

  std::vector<int> active_ids() const;
};

// One online association step. Matched proposals (similarity >= theta_match)
// inherit the track id and update it; unmatched confident proposals spawn new
// tracks; unmatched tracks accrue misses and retire past max_misses. In
// rollout mode matching compares against RNN-predicted tokens, otherwise
// against the previous frame's tokens. Returns the track id per proposal row
// (-1 for dropped proposals).
std::vector<int> associate_frame(const std::vector<double>& tracking_tokens, int n, int dim,
                                 const std::vector<double>& objectness, TrackStore& store,
                                 const TrackerThresholds& thresholds, TrackerMode mode,
                                 const RolloutNet* rollout);

}  // namespace instformer::tracker
