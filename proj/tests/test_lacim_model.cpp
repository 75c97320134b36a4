#include "elbo_oracle.hpp"
#include "lacim/evaluation.hpp"
#include "lacim/scm.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numbers>
#include <numeric>
#include <set>

using namespace lacim;

namespace {

void zero_all(LacimModel& model) {
  for (Parameter* p : model.parameters()) p->value.setZero();
}

ModelDims tiny_dims(int m) {
  ModelDims d;
  d.m = m;
  d.q_x = 2;
  d.q_s = 1;
  d.q_z = 1;
  d.q_y = 1;
  d.prior_hidden = 4;
  d.trunk_width = 8;
  d.head_width = 8;
  d.decoder_width = 8;
  return d;
}

Batch random_batch(RngStream& rng, Index n, const ModelDims& d) {
  Batch b;
  b.x = rng.normal_matrix(n, d.q_x);
  b.y = rng.normal_matrix(n, d.q_y);
  return b;
}

std::vector<ObservedData> random_envs(std::uint64_t seed, int m, Index n, const ModelDims& d) {
  std::vector<ObservedData> out;
  for (int e = 1; e <= m; ++e) {
    RngStream rng(seed, static_cast<std::uint64_t>(e));
    ObservedData od;
    od.env = e;
    od.x = rng.normal_matrix(n, d.q_x).array() + e;
    od.y = rng.normal_matrix(n, d.q_y);
    out.push_back(od);
  }
  return out;
}

double elbo_value(LacimModel& model, const Batch& b, int e, RngStream& rng, int L = 8) {
  Tape tape;
  return elbo_env(tape, model, b, e, rng, ElboOptions{L, true}).scalar();
}

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "lacim_model_tests";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Elbo, ClosedFormAtOrigin) {
  ModelDims d;  // q_x 4, q_y 2
  LacimModel model(d, 1);
  zero_all(model);
  Batch b;
  b.x = Matrix::Zero(1, 4);
  b.y = Matrix::Zero(1, 2);
  RngStream rng(1, 1);
  // -log N(0; 0, 1) per coordinate of x and y; the latent terms cancel.
  const double expected = 6.0 * 0.5 * std::log(2.0 * std::numbers::pi);
  EXPECT_NEAR(elbo_value(model, b, 1, rng), expected, 1e-12);
}

TEST(Elbo, EncoderEqualToPriorHasNoKlContribution) {
  ModelDims d;
  d.m = 2;
  LacimModel model(d, 2);
  zero_all(model);
  RngStream rng(2, 1);
  const Matrix shared = rng.normal_matrix(1, 2 * d.q_latent()) * 0.5;
  model.head(2).layers().back().bias.value = shared;
  model.prior(2).layers().back().bias.value = shared;
  const Batch b = random_batch(rng, 16, d);

  Tape tape;
  RngStream draw(2, 2);
  const ElboTerms t = elbo_terms(tape, model, b, 2, draw);
  EXPECT_TRUE(t.log_prior.value().isApprox(t.log_q.value(), 1e-14));
  // Constant decoders: the loss is the standard-normal negative log-density of x and y.
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const double nll_x = (0.5 * b.x.array().square() + half_log_2pi).sum() / 16.0;
  const double nll_y = (0.5 * b.y.array().square() + half_log_2pi).sum() / 16.0;
  EXPECT_NEAR(-t.log_q_y.value().mean(), nll_y, 1e-12);
  EXPECT_NEAR(t.loss.scalar(), nll_x + nll_y, 1e-10);
}

TEST(Elbo, MonteCarloSpreadShrinksWithSamples) {
  const ModelDims d = tiny_dims(1);
  LacimModel model(d, 3);
  RngStream data(3, 9);
  const Batch b = random_batch(data, 4, d);
  const int repeats = 200;
  auto moments = [&](int L) {
    std::vector<double> v;
    for (int r = 0; r < repeats; ++r) {
      RngStream rng(100 + static_cast<std::uint64_t>(r), 7);
      v.push_back(elbo_value(model, b, 1, rng, L));
    }
    const double mu = std::accumulate(v.begin(), v.end(), 0.0) / repeats;
    double ss = 0.0;
    for (double x : v) ss += (x - mu) * (x - mu);
    return std::pair{mu, std::sqrt(ss / (repeats - 1))};
  };
  const auto [m4, s4] = moments(4);
  const auto [m64, s64] = moments(64);
  const auto [m1024, s1024] = moments(1024);
  EXPECT_GT(s4, 0.0);
  // 1/sqrt(L) predicts ratios of 4 for both steps.
  EXPECT_GT(s4 / s64, 2.5);
  EXPECT_LT(s4 / s64, 6.5);
  EXPECT_GT(s64 / s1024, 2.5);
  EXPECT_LT(s64 / s1024, 6.5);
  EXPECT_NEAR(m64, m1024, 4.0 * s64 / std::sqrt(static_cast<double>(repeats)));
}

TEST(Elbo, NonFiniteTermIsNamed) {
  ModelDims d;
  LacimModel model(d, 4);
  model.dec_x().layers().back().bias.value(0, 0) = std::numeric_limits<double>::infinity();
  RngStream rng(4, 1);
  const Batch b = random_batch(rng, 8, d);
  try {
    elbo_value(model, b, 1, rng);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("p(x|s,z)"), std::string::npos) << e.what();
  }
}

TEST(TotalLoss, SingleEnvironmentEqualsElbo) {
  ModelDims d;
  LacimModel model(d, 5);
  RngStream data(5, 1);
  const Batch b = random_batch(data, 32, d);
  RngStream base(5, 2);
  Tape tape;
  const double total = total_loss(tape, model, {b}, base).scalar();
  RngStream env_rng = base.substream(1);
  EXPECT_DOUBLE_EQ(total, elbo_value(model, b, 1, env_rng));
}

TEST(TotalLoss, DuplicatedEnvironmentDoubles) {
  ModelDims d;
  d.m = 2;
  LacimModel model(d, 6);
  // Environment 2 becomes a copy of environment 1, including the one-hot input row.
  auto p1 = model.env_parameters(1), p2 = model.env_parameters(2);
  for (std::size_t i = 0; i < p1.size(); ++i) p2[i]->value = p1[i]->value;
  for (int e : {1, 2}) model.prior(e).layers()[0].weight.value.row(1) = model.prior(e).layers()[0].weight.value.row(0);
  RngStream data(6, 1);
  const Batch b = random_batch(data, 32, d);
  RngStream base(6, 2);
  Tape tape;
  const double both = total_loss(tape, model, {b, b}, base).scalar();
  // Each copy contributes environment 1's loss under its own draws.
  RngStream r1 = base.substream(1), r2 = base.substream(2);
  const double first = elbo_value(model, b, 1, r1);
  const double second = elbo_value(model, b, 1, r2);
  EXPECT_DOUBLE_EQ(both, first + second);
  RngStream r2b = base.substream(2);
  EXPECT_EQ(elbo_value(model, b, 2, r2b), second);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  const ModelDims d = tiny_dims(2);
  LacimModel model(d, 7);
  std::vector<Matrix> before;
  for (Parameter* p : model.parameters()) before.push_back(p->value);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.iterations = 3;
  cfg.batch_size = 16;
  train(model, random_envs(7, 2, 40, d), cfg);
  const auto after = model.parameters();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i]->value, before[i]) << after[i]->name;
}

TEST(Train, PooledModelHasOneHeadAndPrior) {
  const ModelDims d = tiny_dims(1);
  const auto envs = random_envs(8, 3, 20, d);
  const ModelDims pd = model_dims_for(envs, 1, 1, TrainMode::pooled);
  EXPECT_EQ(pd.m, 1);
  LacimModel pooled(pd, 8);
  EXPECT_THROW(pooled.head(2), Error);
  EXPECT_NO_THROW(pooled.head(1));
  EXPECT_EQ(model_dims_for(envs, 1, 1, TrainMode::lacim).m, 3);

  LacimModel three(model_dims_for(envs, 1, 1, TrainMode::lacim), 8);
  TrainConfig cfg;
  cfg.mode = TrainMode::pooled;
  cfg.iterations = 1;
  EXPECT_THROW(train(three, envs, cfg), Error);
}

TEST(Train, PooledEqualsSingleEnvironmentLacim) {
  const ModelDims d = tiny_dims(1);
  const auto envs = random_envs(9, 3, 30, d);
  TrainConfig cfg;
  cfg.iterations = 5;
  cfg.batch_size = 32;
  cfg.seed = 9;

  LacimModel a(model_dims_for(envs, 1, 1, TrainMode::pooled), 9);
  cfg.mode = TrainMode::pooled;
  const auto ra = train(a, envs, cfg);

  LacimModel b(model_dims_for(envs, 1, 1, TrainMode::pooled), 9);
  cfg.mode = TrainMode::lacim;
  const auto rb = train(b, {pool(envs)}, cfg);

  EXPECT_EQ(ra.loss_trace, rb.loss_trace);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
}

TEST(Train, DecodersAreSharedAcrossEnvironments) {
  ModelDims d;
  d.m = 3;
  LacimModel model(d, 10);
  RngStream rng(10, 1);
  const Matrix sz = rng.normal_matrix(5, d.q_latent());
  const Matrix x_before = model.decode_x(sz);
  const Matrix y_before = model.dec_y().evaluate(sz.leftCols(d.q_s));
  for (int e = 1; e <= 3; ++e)
    for (Parameter* p : model.env_parameters(e)) p->value.array() += 1.0;
  EXPECT_EQ(model.decode_x(sz), x_before);
  EXPECT_EQ(model.dec_y().evaluate(sz.leftCols(d.q_s)), y_before);

  const auto dec = model.decoder_parameters();
  std::set<const Parameter*> decoder(dec.begin(), dec.end());
  for (int e = 1; e <= 3; ++e)
    for (Parameter* p : model.env_parameters(e)) EXPECT_EQ(decoder.count(p), 0u);
}

TEST(Train, EveryParameterReceivesGradient) {
  ModelDims d;
  d.m = 2;
  LacimModel model(d, 11);
  RngStream rng(11, 1);
  const std::vector<Batch> batches{random_batch(rng, 64, d), random_batch(rng, 64, d)};
  model.zero_grad();
  Tape tape;
  tape.backward(total_loss(tape, model, batches, rng));
  for (Parameter* p : model.parameters()) EXPECT_GT(p->grad.cwiseAbs().sum(), 0.0) << p->name;
}

TEST(Train, SimulationSmokeLossDecreases) {
  const auto scm = build_scm(1, ScmDims{}, 5);
  const auto obs = observed(sample_all_envs(scm, 1000, 1));
  LacimModel model(model_dims_for(obs, 2, 2, TrainMode::lacim), 1);
  TrainConfig cfg;
  cfg.iterations = 100;
  cfg.seed = 1;
  const auto res = train(model, obs, cfg);
  ASSERT_EQ(res.loss_trace.size(), 100u);
  for (double v : res.loss_trace) EXPECT_TRUE(std::isfinite(v));
  const double head = std::accumulate(res.loss_trace.begin(), res.loss_trace.begin() + 10, 0.0);
  const double tail = std::accumulate(res.loss_trace.end() - 10, res.loss_trace.end(), 0.0);
  EXPECT_LT(tail, head);
}

TEST(Train, DeterministicGivenSeed) {
  const ModelDims d = tiny_dims(2);
  const auto envs = random_envs(12, 2, 50, d);
  TrainConfig cfg;
  cfg.iterations = 10;
  cfg.batch_size = 20;
  cfg.seed = 3;
  LacimModel a(d, 12), b(d, 12);
  EXPECT_EQ(train(a, envs, cfg).loss_trace, train(b, envs, cfg).loss_trace);
}

TEST(Train, DivergenceAbortsWithTrace) {
  const ModelDims d = tiny_dims(1);
  auto envs = random_envs(13, 1, 20, d);
  envs[0].x(3, 0) = 1e300;
  LacimModel model(d, 13);
  TrainConfig cfg;
  cfg.iterations = 5;
  cfg.batch_size = 20;
  EXPECT_THROW(train(model, envs, cfg), TrainingDiverged);
}

TEST(Encode, ShapesAndEnvironmentSpecificity) {
  ModelDims d;
  d.m = 2;
  LacimModel model(d, 14);
  RngStream rng(14, 1);
  const Matrix x = rng.normal_matrix(3, d.q_x);
  const Posterior p1 = encode(model, x, 1), p2 = encode(model, x, 2);
  EXPECT_EQ(p1.mean_s.cols(), d.q_s);
  EXPECT_EQ(p1.log_std_s.cols(), d.q_s);
  EXPECT_EQ(p1.mean_z.cols(), d.q_z);
  EXPECT_EQ(p1.log_std_z.cols(), d.q_z);
  EXPECT_EQ(p1.mean_s.rows(), 3);
  EXPECT_NE(p1.mean_s, p2.mean_s);
  EXPECT_THROW(encode(model, x, 0), Error);
  EXPECT_THROW(encode(model, x, 3), Error);
}

TEST(Elbo, BelowImportanceSampledLikelihood) {
  const ModelDims d = tiny_dims(2);
  LacimModel model(d, 15);
  for (Parameter* p : model.parameters()) p->value *= 1.5;
  RngStream data(15, 1);
  for (int i = 0; i < 10; ++i) {
    const int e = 1 + i % 2;
    Batch b = random_batch(data, 1, d);
    const int R = 400;
    double sum = 0.0, sum2 = 0.0;
    for (int r = 0; r < R; ++r) {
      RngStream rng(1000 + static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(r));
      const double v = -elbo_value(model, b, e, rng);
      sum += v;
      sum2 += v * v;
    }
    const double mean = sum / R;
    const double se_elbo = std::sqrt(std::max(0.0, sum2 / R - mean * mean) / R);
    RngStream is_rng(2000 + static_cast<std::uint64_t>(i), 1);
    const auto is = lacim::testing::importance_log_likelihood(model, b.x, b.y, e, 10000, is_rng);
    EXPECT_LE(mean, is.log_likelihood + 3.0 * std::hypot(se_elbo, is.standard_error)) << "datapoint " << i;
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  ModelDims d;
  d.m = 3;
  LacimModel model(d, 16);
  const auto stem = temp_dir() / "ckpt";
  save_checkpoint(model, stem, {{"note", "test"}});
  auto manifest = stem;
  manifest += ".json";
  LacimModel back = load_checkpoint(manifest);
  EXPECT_EQ(back.m(), 3);
  const auto pa = model.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value, pb[i]->value);
  }
  RngStream rng(16, 1);
  const Matrix x = rng.normal_matrix(4, d.q_x);
  EXPECT_EQ(encode(model, x, 2).mean_z, encode(back, x, 2).mean_z);
}

TEST(Checkpoint, TruncatedBlobRejected) {
  LacimModel model(ModelDims{}, 17);
  const auto stem = temp_dir() / "short";
  save_checkpoint(model, stem);
  auto blob = stem;
  blob += ".bin";
  std::filesystem::resize_file(blob, std::filesystem::file_size(blob) - 8);
  auto manifest = stem;
  manifest += ".json";
  EXPECT_THROW(load_checkpoint(manifest), Error);
}

namespace {
std::vector<ObservedData> toy_observed(std::uint64_t seed, ToyConfig cfg) { return observed(build_toy_spurious(seed, cfg).train); }
}  // namespace

TEST(Erm, SeparableToyFitsTrainingData) {
  ToyConfig cfg;
  cfg.class_mean = 3.0;
  cfg.latent_std = 0.5;
  cfg.samples_per_env = 500;
  const auto obs = toy_observed(18, cfg);
  ErmConfig ec;
  ec.iterations = 300;
  ec.seed = 18;
  const ErmModel erm = train_erm_baseline(obs, ec);
  const ObservedData all = pool(obs);
  EXPECT_GT(accuracy(erm.predict_labels(all.x), all.labels), 0.95);
}

TEST(Erm, ConstantLabels) {
  ToyConfig cfg;
  cfg.samples_per_env = 100;
  auto obs = toy_observed(19, cfg);
  for (auto& o : obs) std::fill(o.labels.begin(), o.labels.end(), 0);
  ErmConfig ec;
  ec.iterations = 100;
  const ErmModel erm = train_erm_baseline(obs, ec);
  const ObservedData all = pool(obs);
  EXPECT_DOUBLE_EQ(accuracy(erm.predict_labels(all.x), all.labels), 1.0);
}

TEST(Erm, Reproducible) {
  ToyConfig cfg;
  cfg.samples_per_env = 100;
  const auto obs = toy_observed(20, cfg);
  ErmConfig ec;
  ec.iterations = 30;
  ec.seed = 4;
  const ErmModel a = train_erm_baseline(obs, ec), b = train_erm_baseline(obs, ec);
  for (std::size_t i = 0; i < a.net.layers().size(); ++i)
    EXPECT_EQ(a.net.layers()[i].weight.value, b.net.layers()[i].weight.value);
}

TEST(Erm, SpuriousShiftHurtsTestAccuracy) {
  const auto split = build_toy_spurious(21, ToyConfig{});
  ErmConfig ec;
  ec.iterations = 500;
  ec.seed = 21;
  const auto obs = observed(split.train);
  const ErmModel erm = train_erm_baseline(obs, ec);
  const ObservedData all = pool(obs);
  const double train_acc = accuracy(erm.predict_labels(all.x), all.labels);
  const double test_acc = accuracy(erm.predict_labels(split.test.x), split.test.labels);
  EXPECT_GT(train_acc - test_acc, 0.05) << "train " << train_acc << " test " << test_acc;
}
