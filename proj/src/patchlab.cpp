#include "erpbench/patchlab.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "erpbench/rng.hpp"

namespace erpbench {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLnEps = 1e-5;  // layer-norm variance epsilon

// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = a.at(i, k);
      if (av == 0.0) continue;
      const auto brow = b.row(k);
      auto crow = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C = A * B^T
Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
      c.at(i, j) = acc;
    }
  }
  return c;
}

// C += A^T * B
void accumulate_at_b(const Matrix& a, const Matrix& b, Matrix& c) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const auto arow = a.row(i);
    const auto brow = b.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      auto crow = c.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

void add_bias_rows(Matrix& m, const std::vector<double>& bias) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto row = m.row(i);
    for (std::size_t j = 0; j < m.cols; ++j) row[j] += bias[j];
  }
}

void accumulate_column_sums(const Matrix& m, std::vector<double>& out) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    const auto row = m.row(i);
    for (std::size_t j = 0; j < m.cols; ++j) out[j] += row[j];
  }
}

// y = (x - mean) / sqrt(var + eps), no affine
Matrix layer_norm(const Matrix& x, std::vector<double>& means, std::vector<double>& inv_stds) {
  Matrix y(x.rows, x.cols);
  means.resize(x.rows);
  inv_stds.resize(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto row = x.row(i);
    double mean = 0.0;
    for (const double v : row) mean += v;
    mean /= static_cast<double>(x.cols);
    double var = 0.0;
    for (const double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.cols);
    const double inv_std = 1.0 / std::sqrt(var + kLnEps);
    means[i] = mean;
    inv_stds[i] = inv_std;
    auto yrow = y.row(i);
    for (std::size_t j = 0; j < x.cols; ++j) yrow[j] = (row[j] - mean) * inv_std;
  }
  return y;
}

// dx for layer_norm given dy and the cached normalized output y
Matrix layer_norm_backward(const Matrix& dy, const Matrix& y,
                           const std::vector<double>& inv_stds) {
  Matrix dx(dy.rows, dy.cols);
  const double n = static_cast<double>(dy.cols);
  for (std::size_t i = 0; i < dy.rows; ++i) {
    const auto dyr = dy.row(i);
    const auto yr = y.row(i);
    double mean_dy = 0.0, mean_dyy = 0.0;
    for (std::size_t j = 0; j < dy.cols; ++j) {
      mean_dy += dyr[j];
      mean_dyy += dyr[j] * yr[j];
    }
    mean_dy /= n;
    mean_dyy /= n;
    auto dxr = dx.row(i);
    for (std::size_t j = 0; j < dy.cols; ++j)
      dxr[j] = inv_stds[i] * (dyr[j] - mean_dy - yr[j] * mean_dyy);
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_derivative(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  return cdf + x * phi;
}

void softmax_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto row = m.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
}

// dS for row-wise softmax A = softmax(S)
Matrix softmax_rows_backward(const Matrix& da, const Matrix& a) {
  Matrix ds(da.rows, da.cols);
  for (std::size_t i = 0; i < da.rows; ++i) {
    const auto dar = da.row(i);
    const auto ar = a.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < da.cols; ++j) dot += dar[j] * ar[j];
    auto dsr = ds.row(i);
    for (std::size_t j = 0; j < da.cols; ++j) dsr[j] = ar[j] * (dar[j] - dot);
  }
  return ds;
}

struct TensorRef {
  std::string name;
  double* data;
  std::size_t size;
};

std::vector<TensorRef> tensor_refs(PatchModel& m) {
  return {
      {"w_proj", m.w_proj.data.data(), m.w_proj.size()},
      {"b_proj", m.b_proj.data(), m.b_proj.size()},
      {"pos", m.pos.data.data(), m.pos.size()},
      {"w_q", m.w_q.data.data(), m.w_q.size()},
      {"b_q", m.b_q.data(), m.b_q.size()},
      {"w_k", m.w_k.data.data(), m.w_k.size()},
      {"b_k", m.b_k.data(), m.b_k.size()},
      {"w_v", m.w_v.data.data(), m.w_v.size()},
      {"b_v", m.b_v.data(), m.b_v.size()},
      {"w_o", m.w_o.data.data(), m.w_o.size()},
      {"b_o", m.b_o.data(), m.b_o.size()},
      {"w_ff1", m.w_ff1.data.data(), m.w_ff1.size()},
      {"b_ff1", m.b_ff1.data(), m.b_ff1.size()},
      {"w_ff2", m.w_ff2.data.data(), m.w_ff2.size()},
      {"b_ff2", m.b_ff2.data(), m.b_ff2.size()},
      {"w_head", m.w_head.data.data(), m.w_head.size()},
      {"b_head", m.b_head.data(), m.b_head.size()},
  };
}

std::vector<TensorRef> gradient_refs(PatchGradients& g) {
  return {
      {"w_proj", g.w_proj.data.data(), g.w_proj.size()},
      {"b_proj", g.b_proj.data(), g.b_proj.size()},
      {"pos", g.pos.data.data(), g.pos.size()},
      {"w_q", g.w_q.data.data(), g.w_q.size()},
      {"b_q", g.b_q.data(), g.b_q.size()},
      {"w_k", g.w_k.data.data(), g.w_k.size()},
      {"b_k", g.b_k.data(), g.b_k.size()},
      {"w_v", g.w_v.data.data(), g.w_v.size()},
      {"b_v", g.b_v.data(), g.b_v.size()},
      {"w_o", g.w_o.data.data(), g.w_o.size()},
      {"b_o", g.b_o.data(), g.b_o.size()},
      {"w_ff1", g.w_ff1.data.data(), g.w_ff1.size()},
      {"b_ff1", g.b_ff1.data(), g.b_ff1.size()},
      {"w_ff2", g.w_ff2.data.data(), g.w_ff2.size()},
      {"b_ff2", g.b_ff2.data(), g.b_ff2.size()},
      {"w_head", g.w_head.data.data(), g.w_head.size()},
      {"b_head", g.b_head.data(), g.b_head.size()},
  };
}

}  // namespace

PatchStrategy parse_patch_strategy(const std::string& name) {
  if (name == "multi") return PatchStrategy::kMulti;
  if (name == "uni") return PatchStrategy::kUni;
  if (name == "whole") return PatchStrategy::kWhole;
  throw ArgumentError("unknown patch strategy '" + name + "' (multi|uni|whole)");
}

std::string patch_strategy_name(PatchStrategy s) {
  switch (s) {
    case PatchStrategy::kMulti: return "multi";
    case PatchStrategy::kUni: return "uni";
    case PatchStrategy::kWhole: return "whole";
  }
  return "?";
}

std::size_t PatchConfig::patch_dim() const {
  switch (strategy) {
    case PatchStrategy::kMulti: return patch_len * channels;
    case PatchStrategy::kUni: return patch_len;
    case PatchStrategy::kWhole: return channels;
  }
  return 0;
}

std::size_t PatchConfig::n_tokens() const {
  const std::size_t windows = (trial_samples + patch_len - 1) / patch_len;  // ceil(T/L)
  switch (strategy) {
    case PatchStrategy::kMulti: return windows;
    case PatchStrategy::kUni: return channels * windows;
    case PatchStrategy::kWhole: return trial_samples;
  }
  return 0;
}

void PatchConfig::validate() const {
  if (d_model < 4) throw ArgumentError("d_model must be at least 4");
  if (ff_dim < 1) throw ArgumentError("ff_dim must be positive");
  if (n_heads != 1) throw ArgumentError("this encoder is single-head");
  if (channels < 1 || trial_samples < 1) throw ArgumentError("empty trial geometry");
  if (n_classes < 2) throw ArgumentError("need at least two classes");
  if (strategy != PatchStrategy::kWhole) {
    if (patch_len < 1) throw ArgumentError("patch length must be positive");
    if (trial_samples < patch_len)
      throw LengthError("trial shorter than one patch");
  }
}

Matrix cut_patches(const TrialSet& ts, std::size_t trial, const PatchConfig& cfg) {
  cfg.validate();
  if (ts.channels != cfg.channels || ts.samples != cfg.trial_samples)
    throw ShapeError("trial geometry does not match the patch configuration");
  if (trial >= ts.n_trials) throw ArgumentError("trial index out of range");

  Matrix patches(cfg.n_tokens(), cfg.patch_dim(), 0.0);
  const std::size_t T = cfg.trial_samples;
  const std::size_t C = cfg.channels;
  const std::size_t L = cfg.patch_len;

  switch (cfg.strategy) {
    case PatchStrategy::kMulti: {
      // token w holds rows [wL, wL+L) of the T x C view, flattened time-major
      const std::size_t windows = patches.rows;
      for (std::size_t w = 0; w < windows; ++w) {
        for (std::size_t i = 0; i < L; ++i) {
          const std::size_t t = w * L + i;
          if (t >= T) break;  // trailing zeros stay
          for (std::size_t c = 0; c < C; ++c)
            patches.at(w, i * C + c) = ts.trial_channel(trial, c)[t];
        }
      }
      break;
    }
    case PatchStrategy::kUni: {
      const std::size_t windows = (T + L - 1) / L;
      for (std::size_t c = 0; c < C; ++c) {
        const auto ch = ts.trial_channel(trial, c);
        for (std::size_t w = 0; w < windows; ++w) {
          for (std::size_t i = 0; i < L; ++i) {
            const std::size_t t = w * L + i;
            if (t >= T) break;
            patches.at(c * windows + w, i) = ch[t];
          }
        }
      }
      break;
    }
    case PatchStrategy::kWhole: {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c = 0; c < C; ++c)
          patches.at(t, c) = ts.trial_channel(trial, c)[t];
      }
      break;
    }
  }
  return patches;
}

std::size_t PatchModel::parameter_count() const {
  std::size_t total = 0;
  auto refs = tensor_refs(const_cast<PatchModel&>(*this));
  for (const auto& r : refs) total += r.size;
  return total;
}

std::size_t param_count(const PatchConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const std::size_t f = cfg.ff_dim;
  const std::size_t k = cfg.n_classes;
  const std::size_t projection = cfg.patch_dim() * d + d;
  const std::size_t positional = cfg.n_tokens() * d;
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t feed_forward = d * f + f + f * d + d;
  const std::size_t head = d * k + k;
  return projection + positional + attention + feed_forward + head;
}

PatchModel init_patch_model(const PatchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PatchModel m;
  m.cfg = cfg;
  const std::size_t d = cfg.d_model;
  Rng rng(derive_stream(seed, "patch_init/" + patch_strategy_name(cfg.strategy)));

  const auto fill = [&](Matrix& w, std::size_t rows, std::size_t cols, double scale) {
    w = Matrix(rows, cols);
    for (double& v : w.data) v = scale * rng.next_normal();
  };
  fill(m.w_proj, cfg.patch_dim(), d, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
  m.b_proj.assign(d, 0.0);
  fill(m.pos, cfg.n_tokens(), d, 0.02);
  const double dscale = 1.0 / std::sqrt(static_cast<double>(d));
  fill(m.w_q, d, d, dscale);
  fill(m.w_k, d, d, dscale);
  fill(m.w_v, d, d, dscale);
  fill(m.w_o, d, d, dscale);
  m.b_q.assign(d, 0.0);
  m.b_k.assign(d, 0.0);
  m.b_v.assign(d, 0.0);
  m.b_o.assign(d, 0.0);
  fill(m.w_ff1, d, cfg.ff_dim, dscale);
  m.b_ff1.assign(cfg.ff_dim, 0.0);
  fill(m.w_ff2, cfg.ff_dim, d, 1.0 / std::sqrt(static_cast<double>(cfg.ff_dim)));
  m.b_ff2.assign(d, 0.0);
  fill(m.w_head, d, cfg.n_classes, dscale);
  m.b_head.assign(cfg.n_classes, 0.0);
  return m;
}

Matrix tokenize(const PatchModel& model, const TrialSet& ts, std::size_t trial) {
  const Matrix patches = cut_patches(ts, trial, model.cfg);
  Matrix tok = matmul(patches, model.w_proj);
  add_bias_rows(tok, model.b_proj);
  for (std::size_t i = 0; i < tok.rows; ++i) {
    auto row = tok.row(i);
    const auto prow = model.pos.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += prow[j];
  }
  return tok;
}

std::vector<double> encoder_forward(const PatchModel& model, const Matrix& tokens,
                                    ForwardCache* cache) {
  const PatchConfig& cfg = model.cfg;
  if (tokens.cols != cfg.patch_dim() || tokens.rows != cfg.n_tokens())
    throw ShapeError("token tensor does not match the model geometry");

  ForwardCache local;
  ForwardCache& cc = cache != nullptr ? *cache : local;
  cc.patches = tokens;

  cc.tok = matmul(tokens, model.w_proj);
  add_bias_rows(cc.tok, model.b_proj);
  for (std::size_t i = 0; i < cc.tok.rows; ++i) {
    auto row = cc.tok.row(i);
    const auto prow = model.pos.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += prow[j];
  }

  cc.h1 = layer_norm(cc.tok, cc.mean1, cc.inv_std1);
  cc.q = matmul(cc.h1, model.w_q);
  add_bias_rows(cc.q, model.b_q);
  cc.k = matmul(cc.h1, model.w_k);
  add_bias_rows(cc.k, model.b_k);
  cc.v = matmul(cc.h1, model.w_v);
  add_bias_rows(cc.v, model.b_v);

  cc.attn = matmul_bt(cc.q, cc.k);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (double& v : cc.attn.data) v *= inv_sqrt_d;
  softmax_rows(cc.attn);

  cc.ctx = matmul(cc.attn, cc.v);
  Matrix attn_out = matmul(cc.ctx, model.w_o);
  add_bias_rows(attn_out, model.b_o);

  cc.r1 = cc.tok;
  for (std::size_t i = 0; i < cc.r1.size(); ++i) cc.r1.data[i] += attn_out.data[i];

  cc.h2 = layer_norm(cc.r1, cc.mean2, cc.inv_std2);
  cc.z1 = matmul(cc.h2, model.w_ff1);
  add_bias_rows(cc.z1, model.b_ff1);
  cc.g = Matrix(cc.z1.rows, cc.z1.cols);
  for (std::size_t i = 0; i < cc.z1.size(); ++i) cc.g.data[i] = gelu(cc.z1.data[i]);
  Matrix ff = matmul(cc.g, model.w_ff2);
  add_bias_rows(ff, model.b_ff2);

  cc.r2 = cc.r1;
  for (std::size_t i = 0; i < cc.r2.size(); ++i) cc.r2.data[i] += ff.data[i];

  cc.pooled.assign(cfg.d_model, 0.0);
  for (std::size_t i = 0; i < cc.r2.rows; ++i) {
    const auto row = cc.r2.row(i);
    for (std::size_t j = 0; j < cfg.d_model; ++j) cc.pooled[j] += row[j];
  }
  for (double& v : cc.pooled) v /= static_cast<double>(cc.r2.rows);

  cc.logits.assign(cfg.n_classes, 0.0);
  for (std::size_t k = 0; k < cfg.n_classes; ++k) cc.logits[k] = model.b_head[k];
  for (std::size_t j = 0; j < cfg.d_model; ++j) {
    const double pv = cc.pooled[j];
    const auto wrow = model.w_head.row(j);
    for (std::size_t k = 0; k < cfg.n_classes; ++k) cc.logits[k] += pv * wrow[k];
  }
  return cc.logits;
}

std::vector<double> forward_trial(const PatchModel& model, const TrialSet& ts, std::size_t t,
                                  ForwardCache* cache) {
  return encoder_forward(model, cut_patches(ts, t, model.cfg), cache);
}

PatchGradients zero_gradients(const PatchConfig& cfg) {
  PatchGradients g;
  const std::size_t d = cfg.d_model;
  g.w_proj = Matrix(cfg.patch_dim(), d, 0.0);
  g.b_proj.assign(d, 0.0);
  g.pos = Matrix(cfg.n_tokens(), d, 0.0);
  g.w_q = Matrix(d, d, 0.0);
  g.w_k = Matrix(d, d, 0.0);
  g.w_v = Matrix(d, d, 0.0);
  g.w_o = Matrix(d, d, 0.0);
  g.b_q.assign(d, 0.0);
  g.b_k.assign(d, 0.0);
  g.b_v.assign(d, 0.0);
  g.b_o.assign(d, 0.0);
  g.w_ff1 = Matrix(d, cfg.ff_dim, 0.0);
  g.b_ff1.assign(cfg.ff_dim, 0.0);
  g.w_ff2 = Matrix(cfg.ff_dim, d, 0.0);
  g.b_ff2.assign(d, 0.0);
  g.w_head = Matrix(d, cfg.n_classes, 0.0);
  g.b_head.assign(cfg.n_classes, 0.0);
  return g;
}

double patch_loss_and_gradients(const PatchModel& model, const TrialSet& ts,
                                const std::vector<std::size_t>& trial_indices,
                                PatchGradients* grads) {
  if (trial_indices.empty()) throw ArgumentError("loss needs at least one trial");
  const PatchConfig& cfg = model.cfg;
  const double inv_batch = 1.0 / static_cast<double>(trial_indices.size());
  double loss = 0.0;

  for (const std::size_t t : trial_indices) {
    ForwardCache cc;
    const std::vector<double> logits = forward_trial(model, ts, t, &cc);

    // softmax + cross-entropy
    std::vector<double> probs = logits;
    const double mx = *std::max_element(probs.begin(), probs.end());
    double sum = 0.0;
    for (double& v : probs) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : probs) v /= sum;
    const std::size_t label = static_cast<std::size_t>(ts.labels[t]);
    loss -= std::log(std::max(probs[label], 1e-300)) * inv_batch;
    if (grads == nullptr) continue;

    const std::size_t n_tok = cc.r2.rows;
    const std::size_t d = cfg.d_model;

    std::vector<double> dlogits = probs;
    dlogits[label] -= 1.0;
    for (double& v : dlogits) v *= inv_batch;

    // head
    for (std::size_t j = 0; j < d; ++j) {
      auto gw = grads->w_head.row(j);
      for (std::size_t k = 0; k < cfg.n_classes; ++k) gw[k] += cc.pooled[j] * dlogits[k];
    }
    for (std::size_t k = 0; k < cfg.n_classes; ++k) grads->b_head[k] += dlogits[k];

    std::vector<double> dpooled(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      const auto wrow = model.w_head.row(j);
      for (std::size_t k = 0; k < cfg.n_classes; ++k) dpooled[j] += wrow[k] * dlogits[k];
    }

    // mean pool spreads the gradient evenly over tokens
    Matrix dr2(n_tok, d);
    const double inv_tok = 1.0 / static_cast<double>(n_tok);
    for (std::size_t i = 0; i < n_tok; ++i) {
      auto row = dr2.row(i);
      for (std::size_t j = 0; j < d; ++j) row[j] = dpooled[j] * inv_tok;
    }

    // feed-forward branch
    const Matrix& dff = dr2;
    Matrix dg = matmul_bt(dff, model.w_ff2);
    accumulate_at_b(cc.g, dff, grads->w_ff2);
    accumulate_column_sums(dff, grads->b_ff2);
    Matrix dz1 = dg;
    for (std::size_t i = 0; i < dz1.size(); ++i)
      dz1.data[i] *= gelu_derivative(cc.z1.data[i]);
    accumulate_at_b(cc.h2, dz1, grads->w_ff1);
    accumulate_column_sums(dz1, grads->b_ff1);
    Matrix dh2 = matmul_bt(dz1, model.w_ff1);

    Matrix dr1 = layer_norm_backward(dh2, cc.h2, cc.inv_std2);
    for (std::size_t i = 0; i < dr1.size(); ++i) dr1.data[i] += dr2.data[i];

    // attention branch
    const Matrix& dattn_out = dr1;
    Matrix dctx = matmul_bt(dattn_out, model.w_o);
    accumulate_at_b(cc.ctx, dattn_out, grads->w_o);
    accumulate_column_sums(dattn_out, grads->b_o);

    Matrix da = matmul_bt(dctx, cc.v);
    Matrix dv(n_tok, d, 0.0);
    accumulate_at_b(cc.attn, dctx, dv);

    Matrix dscores = softmax_rows_backward(da, cc.attn);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& v : dscores.data) v *= inv_sqrt_d;

    Matrix dq = matmul(dscores, cc.k);
    Matrix dk(n_tok, d, 0.0);
    accumulate_at_b(dscores, cc.q, dk);

    Matrix dh1(n_tok, d, 0.0);
    accumulate_at_b(cc.h1, dq, grads->w_q);
    accumulate_column_sums(dq, grads->b_q);
    {
      const Matrix tmp = matmul_bt(dq, model.w_q);
      for (std::size_t i = 0; i < dh1.size(); ++i) dh1.data[i] += tmp.data[i];
    }
    accumulate_at_b(cc.h1, dk, grads->w_k);
    accumulate_column_sums(dk, grads->b_k);
    {
      const Matrix tmp = matmul_bt(dk, model.w_k);
      for (std::size_t i = 0; i < dh1.size(); ++i) dh1.data[i] += tmp.data[i];
    }
    accumulate_at_b(cc.h1, dv, grads->w_v);
    accumulate_column_sums(dv, grads->b_v);
    {
      const Matrix tmp = matmul_bt(dv, model.w_v);
      for (std::size_t i = 0; i < dh1.size(); ++i) dh1.data[i] += tmp.data[i];
    }

    Matrix dtok = layer_norm_backward(dh1, cc.h1, cc.inv_std1);
    for (std::size_t i = 0; i < dtok.size(); ++i) dtok.data[i] += dr1.data[i];

    accumulate_at_b(cc.patches, dtok, grads->w_proj);
    accumulate_column_sums(dtok, grads->b_proj);
    for (std::size_t i = 0; i < n_tok; ++i) {
      auto prow = grads->pos.row(i);
      const auto drow = dtok.row(i);
      for (std::size_t j = 0; j < d; ++j) prow[j] += drow[j];
    }
  }
  return loss;
}

GradCheckReport grad_check(PatchModel& model, const TrialSet& ts,
                           const std::vector<std::size_t>& trial_indices, double tolerance) {
  PatchGradients analytic = zero_gradients(model.cfg);
  patch_loss_and_gradients(model, ts, trial_indices, &analytic);

  const double step = 1e-5;
  GradCheckReport report;
  report.all_within_tolerance = true;

  auto params = tensor_refs(model);
  auto grads = gradient_refs(analytic);
  for (std::size_t t = 0; t < params.size(); ++t) {
    double max_diff = 0.0;
    double max_analytic = 0.0;
    double max_numeric = 0.0;
    for (std::size_t i = 0; i < params[t].size; ++i) {
      const double saved = params[t].data[i];
      params[t].data[i] = saved + step;
      const double lp = patch_loss_and_gradients(model, ts, trial_indices, nullptr);
      params[t].data[i] = saved - step;
      const double lm = patch_loss_and_gradients(model, ts, trial_indices, nullptr);
      params[t].data[i] = saved;
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = grads[t].data[i];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      max_analytic = std::max(max_analytic, std::abs(a));
      max_numeric = std::max(max_numeric, std::abs(numeric));
    }
    GradCheckEntry entry;
    entry.tensor = params[t].name;
    // The floor turns the comparison absolute for tensors whose true gradient
    // is structurally zero (the key bias: row-softmax is invariant to a
    // constant score shift), where both sides are finite-difference noise of
    // order ulp(loss)/step ~ 1e-10. Any absolute disagreement above
    // floor * tolerance = 1e-8 still flags.
    entry.max_rel_error = max_diff / std::max({max_analytic, max_numeric, 1e-4});
    entry.flagged = entry.max_rel_error > tolerance;
    report.worst_rel_error = std::max(report.worst_rel_error, entry.max_rel_error);
    if (entry.flagged) report.all_within_tolerance = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

Matrix patch_predict_proba(const PatchModel& model, const TrialSet& ts) {
  Matrix probs(ts.n_trials, model.cfg.n_classes);
  for (std::size_t t = 0; t < ts.n_trials; ++t) {
    std::vector<double> logits = forward_trial(model, ts, t);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double& v : logits) {
      v = std::exp(v - mx);
      sum += v;
    }
    auto row = probs.row(t);
    for (std::size_t k = 0; k < logits.size(); ++k) row[k] = logits[k] / sum;
  }
  return probs;
}

namespace {

double macro_f1_of(const Matrix& probs, const std::vector<int>& labels, std::size_t n_classes) {
  std::vector<double> tp(n_classes, 0.0), fp(n_classes, 0.0), fn(n_classes, 0.0);
  for (std::size_t r = 0; r < probs.rows; ++r) {
    const auto row = probs.row(r);
    std::size_t pred = 0;
    for (std::size_t k = 1; k < n_classes; ++k) {
      if (row[k] > row[pred]) pred = k;
    }
    const std::size_t truth = static_cast<std::size_t>(labels[r]);
    if (pred == truth) {
      tp[pred] += 1.0;
    } else {
      fp[pred] += 1.0;
      fn[truth] += 1.0;
    }
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < n_classes; ++k) {
    const double denom = 2.0 * tp[k] + fp[k] + fn[k];
    sum += denom > 0.0 ? 2.0 * tp[k] / denom : 0.0;
  }
  return sum / static_cast<double>(n_classes);
}

}  // namespace

PatchModel train_patch_model(const TrialSet& train, const TrialSet& valid,
                             const PatchConfig& cfg, const TrainConfig& tcfg,
                             TrainReport* report) {
  cfg.validate();
  tcfg.validate();
  std::set<int> present(train.labels.begin(), train.labels.end());
  if (present.size() < 2) throw DataError("training split contains a single class");

  PatchModel model = init_patch_model(cfg, tcfg.seed);

  // one AdamW state pair per parameter entry, tensors processed in order
  const std::size_t n_params = model.parameter_count();
  std::vector<double> m_state(n_params, 0.0), v_state(n_params, 0.0);
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t adam_step = 0;

  Rng rng(derive_stream(tcfg.seed, "train_patch/" + patch_strategy_name(cfg.strategy)));
  std::vector<std::size_t> order(train.n_trials);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainReport local;
  local.initial_train_loss = patch_loss_and_gradients(model, train, order, nullptr);

  PatchModel best = model;
  double best_f1 = -1.0;
  std::size_t best_epoch = 0;
  std::size_t stale = 0;

  std::size_t epoch = 0;
  for (; epoch < tcfg.max_epochs; ++epoch) {
    const double lr_t = tcfg.lr * 0.5 *
                        (1.0 + std::cos(kPi * static_cast<double>(epoch) /
                                        static_cast<double>(tcfg.max_epochs)));
    rng.shuffle(order);

    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t end = std::min(start + tcfg.batch_size, order.size());
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
      PatchGradients grads = zero_gradients(cfg);
      patch_loss_and_gradients(model, train, batch, &grads);

      ++adam_step;
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam_step));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam_step));
      auto params = tensor_refs(model);
      auto grefs = gradient_refs(grads);
      std::size_t offset = 0;
      for (std::size_t t = 0; t < params.size(); ++t) {
        const bool is_bias = params[t].name[0] == 'b';
        for (std::size_t i = 0; i < params[t].size; ++i) {
          const double g = grefs[t].data[i];
          double& m1 = m_state[offset + i];
          double& v1 = v_state[offset + i];
          m1 = beta1 * m1 + (1.0 - beta1) * g;
          v1 = beta2 * v1 + (1.0 - beta2) * g * g;
          double update = (m1 / bc1) / (std::sqrt(v1 / bc2) + adam_eps);
          if (!is_bias) update += tcfg.weight_decay * params[t].data[i];
          params[t].data[i] -= lr_t * update;
        }
        offset += params[t].size;
      }
    }

    const Matrix val_probs = patch_predict_proba(model, valid);
    const double f1 = macro_f1_of(val_probs, valid.labels, cfg.n_classes);
    if (f1 > best_f1) {
      best_f1 = f1;
      best = model;
      best_epoch = epoch;
      stale = 0;
    } else {
      ++stale;
      if (stale >= tcfg.patience) {
        ++epoch;
        break;
      }
    }
  }

  if (report != nullptr) {
    local.epochs_run = epoch;
    local.best_epoch = best_epoch;
    local.best_valid_f1 = best_f1;
    std::vector<std::size_t> all(train.n_trials);
    std::iota(all.begin(), all.end(), std::size_t{0});
    local.final_train_loss = patch_loss_and_gradients(best, train, all, nullptr);
    *report = local;
  }
  return best;
}

void write_patch_model(const PatchModel& model, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["model_type"] = "patch_transformer";
  header["strategy"] = patch_strategy_name(model.cfg.strategy);
  header["patch_len"] = model.cfg.patch_len;
  header["d_model"] = model.cfg.d_model;
  header["ff_dim"] = model.cfg.ff_dim;
  header["trial_samples"] = model.cfg.trial_samples;
  header["channels"] = model.cfg.channels;
  header["n_classes"] = model.cfg.n_classes;
  header["parameter_count"] = model.parameter_count();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write("ERPBMODL", 8);
  const std::string header_str = header.dump();
  std::uint64_t len = header_str.size();
  unsigned char lb[8];
  for (int i = 0; i < 8; ++i) lb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(lb), 8);
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  auto refs = tensor_refs(const_cast<PatchModel&>(model));
  for (const auto& r : refs) {
    for (std::size_t i = 0; i < r.size; ++i) {
      const float f = static_cast<float>(r.data[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      const unsigned char bytes[4] = {static_cast<unsigned char>(bits & 0xFF),
                                      static_cast<unsigned char>((bits >> 8) & 0xFF),
                                      static_cast<unsigned char>((bits >> 16) & 0xFF),
                                      static_cast<unsigned char>((bits >> 24) & 0xFF)};
      out.write(reinterpret_cast<const char*>(bytes), 4);
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

PatchModel read_patch_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "ERPBMODL", 8) != 0)
    throw CorruptionError(path.string() + ": bad magic tag");
  unsigned char lb[8];
  in.read(reinterpret_cast<char*>(lb), 8);
  if (!in) throw CorruptionError(path.string() + ": truncated header length");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lb[i]) << (8 * i);
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw CorruptionError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path.string() + ": invalid header: " + e.what());
  }
  if (header.at("model_type").get<std::string>() != "patch_transformer")
    throw VersionError(path.string() + ": unexpected model type");

  PatchConfig cfg;
  try {
    cfg.strategy = parse_patch_strategy(header.at("strategy").get<std::string>());
    cfg.patch_len = header.at("patch_len").get<std::size_t>();
    cfg.d_model = header.at("d_model").get<std::size_t>();
    cfg.ff_dim = header.at("ff_dim").get<std::size_t>();
    cfg.trial_samples = header.at("trial_samples").get<std::size_t>();
    cfg.channels = header.at("channels").get<std::size_t>();
    cfg.n_classes = header.at("n_classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }

  PatchModel model = init_patch_model(cfg, 0);
  auto refs = tensor_refs(model);
  for (auto& r : refs) {
    for (std::size_t i = 0; i < r.size; ++i) {
      unsigned char bytes[4];
      in.read(reinterpret_cast<char*>(bytes), 4);
      if (!in) throw CorruptionError(path.string() + ": truncated parameter blob");
      const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) |
                                 (static_cast<std::uint32_t>(bytes[1]) << 8) |
                                 (static_cast<std::uint32_t>(bytes[2]) << 16) |
                                 (static_cast<std::uint32_t>(bytes[3]) << 24);
      float f;
      std::memcpy(&f, &bits, 4);
      r.data[i] = static_cast<double>(f);
    }
  }
  return model;
}

}  // namespace erpbench
