#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "erpbench/classify.hpp"
#include "erpbench/types.hpp"

namespace erpbench {

enum class PatchStrategy { kMulti, kUni, kWhole };

PatchStrategy parse_patch_strategy(const std::string& name);
std::string patch_strategy_name(PatchStrategy s);

// Geometry of one embedding strategy over trials of T samples x C channels.
// multi: time patches of L samples across all channels (patch dim L*C),
// uni:   per-channel time patches (patch dim L), whole: one token per time
// point (patch dim C). Trailing partial patches are zero-padded.
struct PatchConfig {
  PatchStrategy strategy = PatchStrategy::kMulti;
  std::size_t patch_len = 25;  // ignored for whole-variate
  std::size_t d_model = 64;
  std::size_t ff_dim = 128;
  std::size_t n_heads = 1;
  std::size_t trial_samples = 200;  // T
  std::size_t channels = 26;        // C
  std::size_t n_classes = 2;

  std::size_t patch_dim() const;
  std::size_t n_tokens() const;
  void validate() const;
};

// Raw patches of one trial: [n_tokens x patch_dim], before projection.
Matrix cut_patches(const TrialSet& ts, std::size_t trial, const PatchConfig& cfg);

struct PatchModel {
  PatchConfig cfg;
  Matrix w_proj;  // [patch_dim x d_model]
  std::vector<double> b_proj;
  Matrix pos;  // [n_tokens x d_model], learned
  Matrix w_q, w_k, w_v, w_o;  // [d_model x d_model]
  std::vector<double> b_q, b_k, b_v, b_o;
  Matrix w_ff1;  // [d_model x ff_dim]
  std::vector<double> b_ff1;
  Matrix w_ff2;  // [ff_dim x d_model]
  std::vector<double> b_ff2;
  Matrix w_head;  // [d_model x n_classes]
  std::vector<double> b_head;

  std::size_t parameter_count() const;
};

PatchModel init_patch_model(const PatchConfig& cfg, std::uint64_t seed);

// Token embeddings of one trial: patches cut per strategy, flattened,
// linearly projected and offset by the learned positional embeddings —
// [n_tokens x d_model].
Matrix tokenize(const PatchModel& model, const TrialSet& ts, std::size_t trial);

// Intermediate activations retained for the analytic backward pass.
struct ForwardCache {
  Matrix patches;  // [N x P]
  Matrix tok;      // projected + positional
  Matrix h1;       // LN(tok)
  std::vector<double> mean1, inv_std1;
  Matrix q, k, v;
  Matrix attn;     // softmax rows [N x N]
  Matrix ctx;      // attn * v
  Matrix r1;       // tok + attention output
  Matrix h2;       // LN(r1)
  std::vector<double> mean2, inv_std2;
  Matrix z1;       // pre-activation of the feed-forward
  Matrix g;        // gelu(z1)
  Matrix r2;       // r1 + feed-forward output
  std::vector<double> pooled;
  std::vector<double> logits;
};

// Pre-LN block: LN -> single-head scaled dot-product self-attention ->
// residual -> LN -> GELU feed-forward -> residual -> mean pool -> classifier.
std::vector<double> encoder_forward(const PatchModel& model, const Matrix& tokens,
                                    ForwardCache* cache = nullptr);

// Convenience: tokenize trial `t` of `ts` and run the encoder.
std::vector<double> forward_trial(const PatchModel& model, const TrialSet& ts, std::size_t t,
                                  ForwardCache* cache = nullptr);

// Gradients for every tensor, same shapes as the model.
struct PatchGradients {
  Matrix w_proj;
  std::vector<double> b_proj;
  Matrix pos;
  Matrix w_q, w_k, w_v, w_o;
  std::vector<double> b_q, b_k, b_v, b_o;
  Matrix w_ff1;
  std::vector<double> b_ff1;
  Matrix w_ff2;
  std::vector<double> b_ff2;
  Matrix w_head;
  std::vector<double> b_head;
};

PatchGradients zero_gradients(const PatchConfig& cfg);

// Mean cross-entropy over the listed trials; accumulates analytic gradients
// when grads is non-null.
double patch_loss_and_gradients(const PatchModel& model, const TrialSet& ts,
                                const std::vector<std::size_t>& trial_indices,
                                PatchGradients* grads);

struct GradCheckEntry {
  std::string tensor;
  double max_rel_error = 0.0;
  bool flagged = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst_rel_error = 0.0;
  bool all_within_tolerance = false;
};

// Central finite differences (step 1e-5) of the batch loss against the
// analytic gradients; per-tensor relative error is the max elementwise
// difference over the larger of the two gradient max-norms.
GradCheckReport grad_check(PatchModel& model, const TrialSet& ts,
                           const std::vector<std::size_t>& trial_indices, double tolerance);

PatchModel train_patch_model(const TrialSet& train, const TrialSet& valid,
                             const PatchConfig& cfg, const TrainConfig& tcfg,
                             TrainReport* report = nullptr);

Matrix patch_predict_proba(const PatchModel& model, const TrialSet& ts);

// Exact parameter total: projection + positional + attention + feed-forward
// + classifier head. Layer normalization here is affine-free and contributes
// no parameters.
std::size_t param_count(const PatchConfig& cfg);

void write_patch_model(const PatchModel& model, const std::filesystem::path& path);
PatchModel read_patch_model(const std::filesystem::path& path);

}  // namespace erpbench
