#pragma once

#include "lacim/adam.hpp"
#include "lacim/autodiff.hpp"
#include "lacim/dataset.hpp"
#include "lacim/mlp.hpp"
#include "lacim/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace lacim {

enum class TaskKind { regression, classification };
enum class TrainMode { lacim, pooled, erm };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::lacim: return "lacim";
    case TrainMode::pooled: return "pooled";
    case TrainMode::erm: return "erm";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "lacim") return TrainMode::lacim;
  if (s == "pooled") return TrainMode::pooled;
  if (s == "erm") return TrainMode::erm;
  throw Error("unknown mode '" + s + "' (expected lacim, pooled or erm)");
}

struct ModelDims {
  int m = 1;
  int q_x = 4;
  int q_s = 2;
  int q_z = 2;
  int q_y = 2;  // continuous target width, or class count for classification
  TaskKind task = TaskKind::regression;
  int prior_hidden = 16;
  int trunk_width = 64;
  int head_width = 64;
  int decoder_width = 32;
  double slope = 0.2;

  int q_latent() const { return q_s + q_z; }
};

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 0.0;
  Index batch_size = 512;
  int iterations = 2000;
  int elbo_mc_samples = 8;
  TrainMode mode = TrainMode::lacim;
  std::uint64_t seed = 0;
  /// Clamp p(y|s)/q(y|x) to [1e-6, 1e6]; off gives the raw objective.
  bool clamp_ratio = true;
};

/// Diagonal Gaussian q^e(s, z | x) parameters, one row per input.
struct Posterior {
  Matrix mean_s, log_std_s, mean_z, log_std_z;
};

/// Per-environment priors p(s, z | I^e) and encoder heads q^e(s, z | x) over a
/// shared trunk; decoders p(x | s, z) and p(y | s) are shared by every
/// environment.
class LacimModel {
 public:
  LacimModel() = default;

  LacimModel(const ModelDims& dims, std::uint64_t seed) : dims_(dims) {
    require(dims.m >= 1, "LacimModel: need at least one environment");
    require(dims.q_x > 0 && dims.q_s > 0 && dims.q_z > 0 && dims.q_y > 0, "LacimModel: dimensions must be positive");
    require(dims.task == TaskKind::regression || dims.q_y >= 2, "LacimModel: classification needs >= 2 classes");
    RngStream rng(seed, stream::kModelInit);
    const int q = dims.q_latent();
    for (int e = 1; e <= dims.m; ++e) {
      priors_.emplace_back("prior" + std::to_string(e), std::vector<int>{dims.m, dims.prior_hidden, dims.prior_hidden, 2 * q},
                           dims.slope, false, rng);
    }
    trunk_ = Mlp("trunk", {dims.q_x, dims.trunk_width}, dims.slope, true, rng);
    for (int e = 1; e <= dims.m; ++e) {
      heads_.emplace_back("head" + std::to_string(e), std::vector<int>{dims.trunk_width, dims.head_width, 2 * q},
                          dims.slope, false, rng);
    }
    dec_x_ = Mlp("dec_x", {q, dims.decoder_width, dims.decoder_width, 2 * dims.q_x}, dims.slope, false, rng);
    const int y_out = dims.task == TaskKind::regression ? 2 * dims.q_y : dims.q_y;
    dec_y_ = Mlp("dec_y", {dims.q_s, dims.decoder_width, dims.decoder_width, y_out}, dims.slope, false, rng);
  }

  const ModelDims& dims() const { return dims_; }
  int m() const { return dims_.m; }

  Mlp& prior(int e) { return priors_.at(env_slot(e)); }
  Mlp& head(int e) { return heads_.at(env_slot(e)); }
  Mlp& trunk() { return trunk_; }
  Mlp& dec_x() { return dec_x_; }
  Mlp& dec_y() { return dec_y_; }
  const Mlp& prior(int e) const { return priors_.at(env_slot(e)); }
  const Mlp& head(int e) const { return heads_.at(env_slot(e)); }
  const Mlp& trunk() const { return trunk_; }
  const Mlp& dec_x() const { return dec_x_; }
  const Mlp& dec_y() const { return dec_y_; }

  /// All parameters in checkpoint order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    auto add = [&out](Mlp& net) {
      for (Parameter* p : net.parameters()) out.push_back(p);
    };
    for (auto& p : priors_) add(p);
    add(trunk_);
    for (auto& h : heads_) add(h);
    add(dec_x_);
    add(dec_y_);
    return out;
  }

  /// Parameters owned by environment e alone (its prior and encoder head).
  std::vector<Parameter*> env_parameters(int e) {
    auto out = prior(e).parameters();
    for (Parameter* p : head(e).parameters()) out.push_back(p);
    return out;
  }

  std::vector<Parameter*> decoder_parameters() {
    auto out = dec_x_.parameters();
    for (Parameter* p : dec_y_.parameters()) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  Matrix one_hot(int e) const {
    Matrix v = Matrix::Zero(1, dims_.m);
    v(0, env_slot(e)) = 1.0;
    return v;
  }

  /// Prior mean and log-std of (s, z) for environment e as a 1 x 2q row.
  Matrix prior_params(int e) const { return prior(e).evaluate(one_hot(e)); }

  /// Decoder p(x | s, z): returns [mean, log_std] with q_x columns each.
  Matrix decode_x(const Matrix& sz) const { return dec_x_.evaluate(sz); }

 private:
  std::size_t env_slot(int e) const {
    require(e >= 1 && e <= dims_.m,
            "environment index " + std::to_string(e) + " outside [1, " + std::to_string(dims_.m) + "]");
    return static_cast<std::size_t>(e - 1);
  }

  ModelDims dims_;
  std::vector<Mlp> priors_;
  Mlp trunk_;
  std::vector<Mlp> heads_;
  Mlp dec_x_;
  Mlp dec_y_;
};

/// Deterministic posterior parameters of q^e(s, z | x).
inline Posterior encode(const LacimModel& model, const Matrix& x, int e) {
  require(x.cols() == model.dims().q_x, "encode: input has wrong width");
  const Matrix out = model.head(e).evaluate(model.trunk().evaluate(x));
  const int qs = model.dims().q_s, qz = model.dims().q_z, q = qs + qz;
  auto clamp_ls = [](const Matrix& m) -> Matrix { return m.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax); };
  return Posterior{out.leftCols(qs), clamp_ls(out.middleCols(q, qs)), out.middleCols(qs, qz),
                   clamp_ls(out.middleCols(q + qs, qz))};
}

/// A mini-batch with its targets.
struct Batch {
  Matrix x;
  Matrix y;
  std::vector<int> labels;
};

struct ElboOptions {
  int mc_samples = 8;
  bool clamp_ratio = true;
};

/// Terms of one environment's loss, kept for diagnostics.
struct ElboTerms {
  Var loss;
  Var log_q_y;     // 1 x B, log q^e(y | x)
  Var log_px;      // LB x 1
  Var log_prior;   // LB x 1
  Var log_q;       // LB x 1
  Var log_py;      // LB x 1
};

/// Loss of environment e on a batch:
///   mean_i [ -log q^e(y|x) - E_{q^e(s,z|x)} (p(y|s) / q^e(y|x)) log(p(x|s,z) p^e(s,z) / q^e(s,z|x)) ]
/// with q^e(y|x) = E_{q^e(s|x)} p(y|s). Both expectations reuse the same L
/// reparameterized draws per row; row l*B + i holds draw l of sample i.
inline ElboTerms elbo_terms(Tape& tape, LacimModel& model, const Batch& batch, int e, RngStream& rng,
                            const ElboOptions& opt = {}) {
  const auto& d = model.dims();
  const Index B = batch.x.rows();
  const Index L = opt.mc_samples;
  require(L >= 1, "elbo: need at least one Monte Carlo sample");
  require(B >= 1, "elbo: empty batch");
  require(batch.x.cols() == d.q_x, "elbo: x has wrong width");
  const int q = d.q_latent();

  Var x = tape.constant(batch.x);
  Var enc = model.head(e).forward(tape, model.trunk().forward(tape, x));
  Var mu_q = cols(enc, 0, q);
  Var ls_q = clamp(cols(enc, q, q), kLogStdMin, kLogStdMax);
  Var pri = model.prior(e).forward(tape, tape.constant(model.one_hot(e)));
  Var mu_p = broadcast_rows(cols(pri, 0, q), L * B);
  Var ls_p = broadcast_rows(clamp(cols(pri, q, q), kLogStdMin, kLogStdMax), L * B);

  Var mu_qL = tile_rows(mu_q, L);
  Var ls_qL = tile_rows(ls_q, L);
  Var sz = gaussian_sample(mu_qL, ls_qL, rng);

  ElboTerms t;
  t.log_q = gaussian_logpdf(sz, mu_qL, ls_qL);
  t.log_prior = gaussian_logpdf(sz, mu_p, ls_p);
  Var px = model.dec_x().forward(tape, sz);
  t.log_px = gaussian_logpdf(tape.constant(batch.x.replicate(L, 1)), cols(px, 0, d.q_x),
                             clamp(cols(px, d.q_x, d.q_x), kLogStdMin, kLogStdMax));
  Var py = model.dec_y().forward(tape, cols(sz, 0, d.q_s));
  if (d.task == TaskKind::regression) {
    require(batch.y.rows() == B && batch.y.cols() == d.q_y, "elbo: y has wrong shape");
    t.log_py = gaussian_logpdf(tape.constant(batch.y.replicate(L, 1)), cols(py, 0, d.q_y),
                               clamp(cols(py, d.q_y, d.q_y), kLogStdMin, kLogStdMax));
  } else {
    require(static_cast<Index>(batch.labels.size()) == B, "elbo: label count mismatch");
    std::vector<int> tiled;
    tiled.reserve(static_cast<std::size_t>(L * B));
    for (Index l = 0; l < L; ++l) tiled.insert(tiled.end(), batch.labels.begin(), batch.labels.end());
    t.log_py = categorical_logpdf(py, tiled);
  }

  Var log_py_grid = reshape(t.log_py, L, B);
  t.log_q_y = shift(logsumexp_cols(log_py_grid), -std::log(static_cast<double>(L)));
  Var ratio = exp(add_row(log_py_grid, neg(t.log_q_y)));
  if (opt.clamp_ratio) ratio = clamp(ratio, 1e-6, 1e6);
  Var log_joint_ratio = reshape(sub(add(t.log_px, t.log_prior), t.log_q), L, B);
  Var inner = scale(sum(mul(ratio, log_joint_ratio)), 1.0 / static_cast<double>(L * B));
  t.loss = sub(neg(mean(t.log_q_y)), inner);

  if (!std::isfinite(t.loss.scalar())) {
    std::string culprit = "weighted joint term";
    if (!t.log_q_y.value().allFinite()) culprit = "log q(y|x)";
    else if (!t.log_px.value().allFinite()) culprit = "log p(x|s,z)";
    else if (!t.log_prior.value().allFinite()) culprit = "log prior";
    else if (!t.log_q.value().allFinite()) culprit = "log q(s,z|x)";
    throw Error("elbo: non-finite loss in environment " + std::to_string(e) + " (" + culprit + " diverged)");
  }
  return t;
}

inline Var elbo_env(Tape& tape, LacimModel& model, const Batch& batch, int e, RngStream& rng,
                    const ElboOptions& opt = {}) {
  return elbo_terms(tape, model, batch, e, rng, opt).loss;
}

/// Sum of the per-environment losses; batches[k] belongs to environment k + 1.
/// Environment e draws from the substream keyed by e.
inline Var total_loss(Tape& tape, LacimModel& model, const std::vector<Batch>& batches, RngStream& rng,
                      const ElboOptions& opt = {}) {
  require(!batches.empty(), "total_loss: no batches");
  Var total = tape.constant(Matrix::Zero(1, 1));
  for (std::size_t k = 0; k < batches.size(); ++k) {
    const int e = static_cast<int>(k) + 1;
    RngStream env_rng = rng.substream(static_cast<std::uint64_t>(e));
    total = add(total, elbo_env(tape, model, batches[k], e, env_rng, opt));
  }
  return total;
}

inline Batch take_rows(const ObservedData& d, const std::vector<Index>& rows) {
  Batch b;
  b.x.resize(static_cast<Index>(rows.size()), d.x.cols());
  if (d.y.cols() > 0) b.y.resize(static_cast<Index>(rows.size()), d.y.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Index>(i);
    b.x.row(r) = d.x.row(rows[i]);
    if (d.y.cols() > 0) b.y.row(r) = d.y.row(rows[i]);
    if (!d.labels.empty()) b.labels.push_back(d.labels[static_cast<std::size_t>(rows[i])]);
  }
  return b;
}

inline Batch sample_batch(const ObservedData& d, Index batch_size, RngStream& rng) {
  const Index k = std::min(batch_size, d.size());
  return take_rows(d, rng.sample_indices(d.size(), k));
}

inline ModelDims model_dims_for(const std::vector<ObservedData>& data, int q_s, int q_z, TrainMode mode) {
  require(!data.empty(), "model_dims_for: no datasets");
  ModelDims dims;
  dims.m = mode == TrainMode::pooled ? 1 : static_cast<int>(data.size());
  dims.q_x = static_cast<int>(data.front().x.cols());
  dims.q_s = q_s;
  dims.q_z = q_z;
  if (data.front().classification()) {
    dims.task = TaskKind::classification;
    int classes = 2;
    for (const auto& d : data)
      for (int l : d.labels) classes = std::max(classes, l + 1);
    dims.q_y = classes;
  } else {
    dims.task = TaskKind::regression;
    dims.q_y = static_cast<int>(data.front().y.cols());
  }
  return dims;
}

struct TrainResult {
  std::vector<double> loss_trace;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& msg, std::vector<double> trace)
      : Error(msg), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

/// Adam on every model parameter. In pooled mode all environments are merged
/// into one and the model must have exactly one prior and head.
inline TrainResult train(LacimModel& model, const std::vector<ObservedData>& datasets, const TrainConfig& cfg) {
  require(cfg.elbo_mc_samples >= 1, "train: elbo_mc_samples must be >= 1");
  require(cfg.lr >= 0.0, "train: negative learning rate");
  require(cfg.batch_size >= 1, "train: batch size must be positive");
  require(cfg.mode != TrainMode::erm, "train: erm mode uses train_erm_baseline");
  std::vector<ObservedData> envs;
  if (cfg.mode == TrainMode::pooled) {
    require(model.m() == 1, "train: pooled mode needs a single-environment model");
    envs.push_back(pool(datasets));
  } else {
    require(static_cast<int>(datasets.size()) == model.m(),
            "train: model has " + std::to_string(model.m()) + " environments, got " +
                std::to_string(datasets.size()) + " datasets");
    envs = datasets;
    for (std::size_t k = 0; k < envs.size(); ++k)
      require(envs[k].env == static_cast<int>(k) + 1, "train: datasets must be ordered by environment 1..m");
  }

  Adam opt(model.parameters(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  const ElboOptions eo{cfg.elbo_mc_samples, cfg.clamp_ratio};
  TrainResult result;
  result.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations));
  RngStream base(cfg.seed, stream::kTraining);
  Tape tape;
  for (int it = 0; it < cfg.iterations; ++it) {
    RngStream rng = base.substream(static_cast<std::uint64_t>(it));
    std::vector<Batch> batches;
    for (const auto& env : envs) batches.push_back(sample_batch(env, cfg.batch_size, rng));
    tape.clear();
    Var loss;
    try {
      loss = total_loss(tape, model, batches, rng, eo);
    } catch (const Error& err) {
      throw TrainingDiverged(std::string("train: iteration ") + std::to_string(it) + ": " + err.what(),
                             result.loss_trace);
    }
    const double value = loss.scalar();
    result.loss_trace.push_back(value);
    if (!std::isfinite(value) || value > 1e10)
      throw TrainingDiverged("train: loss diverged at iteration " + std::to_string(it), result.loss_trace);
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
  }
  return result;
}

// ---- ERM baseline ---------------------------------------------------------

/// Direct x -> y network: logits for classification, the mean for regression.
struct ErmModel {
  Mlp net;
  TaskKind task = TaskKind::classification;

  Matrix outputs(const Matrix& x) const { return net.evaluate(x); }

  std::vector<int> predict_labels(const Matrix& x) const {
    const Matrix out = outputs(x);
    std::vector<int> labels(static_cast<std::size_t>(out.rows()));
    for (Index r = 0; r < out.rows(); ++r) {
      Index best = 0;
      for (Index c = 1; c < out.cols(); ++c)
        if (out(r, c) > out(r, best)) best = c;
      labels[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return labels;
  }
};

struct ErmConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  Index batch_size = 512;
  int iterations = 2000;
  int hidden = 32;
  std::uint64_t seed = 0;
};

/// Cross-entropy (or squared error) training on all environments pooled.
inline ErmModel train_erm_baseline(const std::vector<ObservedData>& datasets, const ErmConfig& cfg) {
  const ObservedData all = pool(datasets);
  require(all.size() > 0, "train_erm_baseline: no data");
  ErmModel model;
  model.task = all.classification() ? TaskKind::classification : TaskKind::regression;
  int out_dim = 0;
  if (model.task == TaskKind::classification) {
    out_dim = 2;
    for (int l : all.labels) out_dim = std::max(out_dim, l + 1);
  } else {
    out_dim = static_cast<int>(all.y.cols());
  }
  RngStream init(cfg.seed, stream::kErmInit);
  model.net = Mlp("erm", {static_cast<int>(all.x.cols()), cfg.hidden, cfg.hidden, out_dim}, 0.2, false, init);
  Adam opt(model.net.parameters(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  RngStream base(cfg.seed, stream::kErmInit + 1);
  Tape tape;
  for (int it = 0; it < cfg.iterations; ++it) {
    RngStream rng = base.substream(static_cast<std::uint64_t>(it));
    const Batch b = sample_batch(all, cfg.batch_size, rng);
    tape.clear();
    Var out = model.net.forward(tape, tape.constant(b.x));
    Var loss;
    if (model.task == TaskKind::classification) {
      loss = neg(mean(categorical_logpdf(out, b.labels)));
    } else {
      loss = mean(square(sub(out, tape.constant(b.y))));
    }
    if (!std::isfinite(loss.scalar()))
      throw Error("train_erm_baseline: non-finite loss at iteration " + std::to_string(it));
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
  }
  return model;
}

// ---- checkpoints ----------------------------------------------------------

/// Writes `<stem>.json` (dims and parameter shapes in order) and `<stem>.bin`
/// (parameters as raw float64 in the same order).
inline void save_checkpoint(LacimModel& model, const std::filesystem::path& stem, const nlohmann::json& extra = {}) {
  const auto& d = model.dims();
  nlohmann::json manifest;
  manifest["format"] = "lacim-checkpoint-v1";
  manifest["dims"] = {{"m", d.m},
                      {"q_x", d.q_x},
                      {"q_s", d.q_s},
                      {"q_z", d.q_z},
                      {"q_y", d.q_y},
                      {"task", d.task == TaskKind::regression ? "regression" : "classification"},
                      {"prior_hidden", d.prior_hidden},
                      {"trunk_width", d.trunk_width},
                      {"head_width", d.head_width},
                      {"decoder_width", d.decoder_width},
                      {"slope", d.slope}};
  auto blob_path = stem;
  blob_path += ".bin";
  manifest["blob"] = blob_path.filename().string();
  nlohmann::json params = nlohmann::json::array();
  std::ofstream blob(blob_path, std::ios::binary);
  require(blob.good(), "save_checkpoint: cannot open " + blob_path.string());
  for (const Parameter* p : model.parameters()) {
    params.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    blob.write(reinterpret_cast<const char*>(p->value.data()),
               static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p->value.size())));
  }
  require(blob.good(), "save_checkpoint: write failed");
  manifest["parameters"] = params;
  if (!extra.is_null()) manifest["extra"] = extra;
  auto json_path = stem;
  json_path += ".json";
  std::ofstream out(json_path);
  require(out.good(), "save_checkpoint: cannot open " + json_path.string());
  out << manifest.dump(2) << '\n';
}

inline LacimModel load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  require(in.good(), "load_checkpoint: cannot open " + manifest_path.string());
  const nlohmann::json manifest = nlohmann::json::parse(in);
  require(manifest.value("format", "") == "lacim-checkpoint-v1", "load_checkpoint: unknown format");
  const auto& jd = manifest.at("dims");
  ModelDims d;
  d.m = jd.at("m");
  d.q_x = jd.at("q_x");
  d.q_s = jd.at("q_s");
  d.q_z = jd.at("q_z");
  d.q_y = jd.at("q_y");
  d.task = jd.at("task") == "regression" ? TaskKind::regression : TaskKind::classification;
  d.prior_hidden = jd.at("prior_hidden");
  d.trunk_width = jd.at("trunk_width");
  d.head_width = jd.at("head_width");
  d.decoder_width = jd.at("decoder_width");
  d.slope = jd.at("slope");
  LacimModel model(d, 0);
  const auto params = model.parameters();
  const auto& jp = manifest.at("parameters");
  require(jp.size() == params.size(), "load_checkpoint: parameter count mismatch");
  std::ifstream blob(manifest_path.parent_path() / manifest.at("blob").get<std::string>(), std::ios::binary);
  require(blob.good(), "load_checkpoint: cannot open parameter blob");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter* p = params[i];
    require(jp[i].at("name") == p->name && jp[i].at("rows") == p->value.rows() && jp[i].at("cols") == p->value.cols(),
            "load_checkpoint: layout mismatch at " + p->name);
    blob.read(reinterpret_cast<char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p->value.size())));
    require(blob.good(), "load_checkpoint: blob too short at " + p->name);
  }
  blob.peek();
  require(blob.eof(), "load_checkpoint: trailing bytes in blob");
  return model;
}

}  // namespace lacim
