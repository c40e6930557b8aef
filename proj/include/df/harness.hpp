#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <map>

#include <json.hpp>

#include "df/autodiff.hpp"
#include "df/discworld.hpp"
#include "df/filters.hpp"

// Training and evaluation harness: loss functions over filter runs,
// sequence chunking, the epoch loop with validation-based model selection,
// sensor pretraining, and the evaluation metrics (tracking RMSE, NLL,
// observation RMSE, R-visibility correlation, Bhattacharyya distance to
// the ground-truth process noise).

namespace df {

enum class LossKind { kMse, kNll, kMix };

inline const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::kMse: return "mse";
    case LossKind::kNll: return "nll";
    case LossKind::kMix: return "mix";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Losses over a filter run

// Weighted particle mean as a taped tensor.
template <typename S>
Tensor<S> particle_mean(const ParticleBelief<S>& bel) {
  return matmul(bel.weights, bel.particles);
}

template <typename S>
Tensor<S> step_mean(const FilterStepRecord<S>& rec) {
  return rec.gauss ? rec.gauss->mean : particle_mean(*rec.particles);
}

// (1/T) sum_t (x_t - mu_t)^T (x_t - mu_t)
template <typename S>
Tensor<S> loss_mse(const std::vector<FilterStepRecord<S>>& records,
                   const std::vector<VecX<S>>& labels) {
  check_shape(records.size() == labels.size(), "loss_mse: label count mismatch");
  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (std::size_t t = 0; t < records.size(); ++t) {
    Tensor<S> resid = sub(Tensor<S>::constant({int(labels[t].size())}, labels[t]),
                          step_mean(records[t]));
    total = add(total, sum_squares(resid));
  }
  return scale(total, S(1) / S(records.size()));
}

// Time-averaged negative log likelihood under each filter's belief
// convention: Gaussian filters use the Gaussian form, the dPF either fits
// a single Gaussian or evaluates the particle mixture.
template <typename S>
Tensor<S> loss_nll(const std::vector<FilterStepRecord<S>>& records,
                   const std::vector<VecX<S>>& labels, PfBeliefMode pf_mode,
                   double gmm_sigma, S fit_eps) {
  check_shape(records.size() == labels.size(), "loss_nll: label count mismatch");
  Tensor<S> total = Tensor<S>::scalar(S(0));
  for (std::size_t t = 0; t < records.size(); ++t) {
    Tensor<S> label = Tensor<S>::constant({int(labels[t].size())}, labels[t]);
    Tensor<S> term;
    if (records[t].gauss) {
      term = gaussian_nll(label, *records[t].gauss);
    } else {
      BeliefSummary<S> summary =
          particle_belief_summary(*records[t].particles, pf_mode, gmm_sigma, fit_eps);
      if (std::holds_alternative<GaussianBelief<S>>(summary))
        term = gaussian_nll(label, std::get<GaussianBelief<S>>(summary));
      else
        term = gmm_nll(label, std::get<GaussianMixture<S>>(summary));
    }
    total = add(total, term);
  }
  return scale(total, S(1) / S(records.size()));
}

template <typename S>
Tensor<S> sequence_loss(const std::vector<FilterStepRecord<S>>& records,
                        const std::vector<VecX<S>>& labels, LossKind kind,
                        const FilterConfig& fcfg, S fit_eps) {
  switch (kind) {
    case LossKind::kMse:
      return loss_mse(records, labels);
    case LossKind::kNll:
      return loss_nll(records, labels, fcfg.pf_belief, fcfg.gmm_sigma, fit_eps);
    case LossKind::kMix: {
      Tensor<S> mse = loss_mse(records, labels);
      Tensor<S> nll = loss_nll(records, labels, fcfg.pf_belief, fcfg.gmm_sigma, fit_eps);
      return scale(add(mse, nll), S(0.5));
    }
  }
  throw Error("loss: bad kind");
}

// Initial belief: mean = x0 + sample of N(0, Sigma_init), cov = Sigma_init.
template <typename S>
GaussianBelief<S> perturb_initial_state(const VecX<S>& x0, double sigma_init_var,
                                        Rng& rng, bool perturb = true) {
  const int n = int(x0.size());
  VecX<S> mean = x0;
  if (perturb) {
    const S sd = S(std::sqrt(sigma_init_var));
    for (int i = 0; i < n; ++i) mean[i] += sd * S(rng.normal());
  }
  MatX<S> cov = MatX<S>::Identity(n, n) * S(sigma_init_var);
  return GaussianBelief<S>{Tensor<S>::constant({n}, std::move(mean)),
                           Tensor<S>::from_matrix(cov)};
}

// ---------------------------------------------------------------------------
// Model construction

struct ModelSpec {
  bool use_sensor = true;
  bool hetero_r = false;
  bool hetero_q = false;
  CovShape r_shape = CovShape::kDiagonal;
  CovShape q_shape = CovShape::kDiagonal;
  bool analytic_process = false;
  bool learned_likelihood = false;
  double q_init = 100.0;  // variance targets at initialization
  double r_init = 900.0;
  double eps = 1e-3;
  bool freeze_sensor = false;   // conv trunk + z head
  bool freeze_process = false;
  int image_size = 100;
  std::uint64_t init_seed = 0;
};

template <typename S>
FilterModels<S> build_models(const ModelSpec& spec) {
  FilterModels<S> m;
  m.state_dim = 4;
  m.obs_dim = 2;
  Rng rng = Rng::derive(spec.init_seed, {40});
  std::vector<int> sensor_params;
  if (spec.use_sensor) {
    SensorConfig<S> scfg;
    scfg.image_h = scfg.image_w = spec.image_size;
    scfg.hetero_r = spec.hetero_r;
    scfg.r_shape = spec.r_shape;
    scfg.r_target = S(spec.r_init);
    scfg.eps = S(spec.eps);
    const int before = m.store.size();
    m.sensor = make_sensor(m.store, scfg, rng);
    for (int i = before; i < m.store.size(); ++i) sensor_params.push_back(i);
  }
  if (spec.analytic_process) {
    m.process = make_analytic_disc_process<S>();
  } else {
    const int before = m.store.size();
    m.process = make_learned_process(m.store, 4, rng);
    if (spec.freeze_process)
      for (int i = before; i < m.store.size(); ++i) m.store.set_trainable(i, false);
  }
  if (spec.hetero_q) {
    m.q_model = make_hetero_noise(m.store, "q", 4, 4, spec.q_shape,
                                  S(spec.q_init), S(spec.eps), rng);
  } else {
    m.q_model = make_constant_noise(m.store, "q", 4, spec.q_shape,
                                    S(spec.q_init), S(spec.eps));
  }
  if (!spec.use_sensor || !spec.hetero_r) {
    m.r_model = make_constant_noise(m.store, "r", 2, spec.r_shape,
                                    S(spec.r_init), S(spec.eps));
  }
  if (spec.learned_likelihood)
    m.likelihood = make_likelihood(m.store, 32, 2, rng);
  if (spec.freeze_sensor && m.sensor) {
    // The heteroscedastic noise head stays trainable; it is the noise
    // model, not part of the frozen virtual sensor.
    for (int i : sensor_params) {
      const std::string& name = m.store.name(i);
      if (name.rfind("sensor.rhead", 0) == 0 || name == "sensor.rbias") continue;
      m.store.set_trainable(i, false);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  LossKind loss = LossKind::kNll;
  int seq_len = 10;
  int epochs = 15;
  double lr = 1e-4;
  int batch_chunks = 0;  // 0: round(320 / seq_len), keeping steps x batch fixed
  double sigma_init = 25.0;
  int threads = 0;  // 0: hardware concurrency
  std::uint64_t seed = 0;
  std::string out_dir;

  int resolved_batch() const {
    if (batch_chunks > 0) return batch_chunks;
    return std::max(1, int(std::lround(320.0 / seq_len)));
  }
  int resolved_threads() const {
    if (threads > 0) return threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
  }
};

struct Chunk {
  int seq = 0;
  int t0 = 0;
  int len = 0;
};

inline std::vector<Chunk> make_chunks(int sequences, int steps, int k) {
  std::vector<Chunk> chunks;
  for (int s = 0; s < sequences; ++s)
    for (int t0 = 0; t0 < steps; t0 += k)
      chunks.push_back(Chunk{s, t0, std::min(k, steps - t0)});
  return chunks;
}

struct TrainResult {
  double best_val_loss = 0;
  int best_epoch = -1;
  long steps = 0;
  long skipped_nonfinite = 0;
  std::string checkpoint_path;
};

namespace detail {

// Loss of one chunk. With a tape, gradients for all trainable parameters
// are accumulated; without one this is a pure evaluation.
template <typename S>
S chunk_loss(const SequenceDataset& ds, const Chunk& chunk,
             const FilterModels<S>& models, const FilterConfig& fcfg,
             const TrainConfig& tcfg, Rng perturb_rng, Rng filter_rng,
             Tape<S>* tape, std::vector<VecX<S>>* grads) {
  auto rec = ds.record(chunk.seq);
  const int image_size = ds.image_size();
  BoundParams<S> bound = models.store.bind(tape);
  GaussianBelief<S> init = perturb_initial_state<S>(
      state_vector<S>(*rec, chunk.t0), tcfg.sigma_init, perturb_rng);
  std::vector<StepInput<S>> inputs;
  std::vector<VecX<S>> labels;
  inputs.reserve(std::size_t(chunk.len));
  for (int t = 0; t < chunk.len; ++t) {
    StepInput<S> in;
    in.image = frame_tensor<S>(*rec, image_size, chunk.t0 + t);
    inputs.push_back(std::move(in));
    labels.push_back(state_vector<S>(*rec, chunk.t0 + t + 1));
  }
  auto records = run_filter(models, bound, fcfg, init, inputs,
                            fcfg.sample_count_train, filter_rng);
  Tensor<S> loss = sequence_loss(records, labels, tcfg.loss, fcfg, S(models.q_model.eps));
  if (tape && loss.taped()) {
    Gradients<S> g = backward(*tape, loss);
    grads->resize(static_cast<std::size_t>(models.store.size()));
    for (int i = 0; i < models.store.size(); ++i)
      if (models.store.trainable(i)) (*grads)[std::size_t(i)] = g.at(bound[i]);
  }
  return loss.scalar_value();
}

template <typename S>
void write_csv_row(std::ofstream& log, int epoch, long step, double train_loss,
                   const std::string& val_loss, double grad_norm,
                   double seconds) {
  log << epoch << ',' << step << ',' << std::setprecision(10) << train_loss
      << ',' << val_loss << ',' << std::setprecision(8) << grad_norm << ','
      << std::setprecision(4) << std::fixed << seconds << '\n';
  log.unsetf(std::ios::fixed);
}

}  // namespace detail

// Epoch loop: shuffled k-step chunks, batched gradient averaging, Adam,
// end-of-epoch validation, best-validation model selection. Deterministic
// given the seed: every chunk derives its own random streams from its
// shuffled position, and gradient reduction is ordered.
template <typename S>
TrainResult train(const SequenceDataset& train_ds, const SequenceDataset& val_ds,
                  FilterModels<S>& models, const FilterConfig& fcfg,
                  const TrainConfig& tcfg) {
  fcfg.validate(models.state_dim);
  namespace fs = std::filesystem;
  if (!tcfg.out_dir.empty()) fs::create_directories(tcfg.out_dir);
  std::ofstream log;
  if (!tcfg.out_dir.empty()) {
    log.open(tcfg.out_dir + "/train_log.csv");
    log << "epoch,step,train_loss,val_loss,grad_norm,seconds\n";
  }
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&start]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
        .count();
  };

  std::vector<Chunk> chunks = make_chunks(train_ds.count(), train_ds.steps(),
                                          tcfg.seq_len);
  std::vector<Chunk> val_chunks = make_chunks(val_ds.count(), val_ds.steps(),
                                              tcfg.seq_len);
  const int batch = tcfg.resolved_batch();
  const int threads = tcfg.resolved_threads();

  AdamState<S> adam;
  adam.lr = S(tcfg.lr);
  adam.reset(models.store);

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<VecX<S>> best_params;
  long global_step = 0;
  int nonfinite_streak = 0;

  auto run_validation = [&]() -> double {
    std::vector<double> losses(val_chunks.size(), 0.0);
    auto worker = [&](int begin, int end) {
      for (int c = begin; c < end; ++c) {
        Rng perturb = Rng::derive(tcfg.seed, {20, std::uint64_t(c)});
        Rng filter_rng = Rng::derive(tcfg.seed, {21, std::uint64_t(c)});
        losses[std::size_t(c)] = detail::chunk_loss<S>(
            val_ds, val_chunks[std::size_t(c)], models, fcfg, tcfg, perturb,
            filter_rng, nullptr, nullptr);
      }
    };
    std::vector<std::thread> pool;
    const int per = (int(val_chunks.size()) + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int begin = t * per;
      const int end = std::min<int>(begin + per, int(val_chunks.size()));
      if (begin < end) pool.emplace_back(worker, begin, end);
    }
    for (auto& th : pool) th.join();
    double sum = 0;
    for (double l : losses) sum += l;
    return sum / double(losses.size());
  };

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    // deterministic shuffle
    Rng shuffle_rng = Rng::derive(tcfg.seed, {11, std::uint64_t(epoch)});
    for (int i = int(chunks.size()) - 1; i > 0; --i)
      std::swap(chunks[std::size_t(i)],
                chunks[std::size_t(shuffle_rng.uniform_int(0, i))]);

    double epoch_loss_sum = 0;
    long epoch_batches = 0;
    for (std::size_t at = 0; at < chunks.size(); at += std::size_t(batch)) {
      const int count = int(std::min<std::size_t>(batch, chunks.size() - at));
      std::vector<std::vector<VecX<S>>> grads(static_cast<std::size_t>(count));
      std::vector<double> losses(std::size_t(count), 0.0);
      auto worker = [&](int begin, int end) {
        for (int c = begin; c < end; ++c) {
          const std::uint64_t uid =
              std::uint64_t(epoch) * 1000003u + (at + std::size_t(c));
          Rng perturb = Rng::derive(tcfg.seed, {10, uid});
          Rng filter_rng = Rng::derive(tcfg.seed, {12, uid});
          Tape<S> tape;
          losses[std::size_t(c)] = detail::chunk_loss<S>(
              train_ds, chunks[at + std::size_t(c)], models, fcfg, tcfg, perturb,
              filter_rng, &tape, &grads[std::size_t(c)]);
        }
      };
      std::vector<std::thread> pool;
      const int per = (count + threads - 1) / threads;
      for (int t = 0; t < threads; ++t) {
        const int begin = t * per;
        const int end = std::min(begin + per, count);
        if (begin < end) pool.emplace_back(worker, begin, end);
      }
      for (auto& th : pool) th.join();

      // ordered reduction
      std::vector<VecX<S>> batch_grads(static_cast<std::size_t>(models.store.size()));
      for (int c = 0; c < count; ++c) {
        if (grads[std::size_t(c)].empty()) continue;
        for (int i = 0; i < models.store.size(); ++i) {
          const VecX<S>& g = grads[std::size_t(c)][std::size_t(i)];
          if (g.size() == 0) continue;
          if (batch_grads[std::size_t(i)].size() == 0)
            batch_grads[std::size_t(i)] = g;
          else
            batch_grads[std::size_t(i)] += g;
        }
      }
      double grad_norm_sq = 0;
      for (auto& g : batch_grads) {
        if (g.size() == 0) continue;
        g /= S(count);
        grad_norm_sq += double(g.squaredNorm());
      }
      double batch_loss = 0;
      for (double l : losses) batch_loss += l;
      batch_loss /= count;

      if (!std::isfinite(batch_loss)) {
        if (++nonfinite_streak >= 3)
          throw DivergenceError(
              "train: non-finite loss on 3 consecutive batches (epoch " +
              std::to_string(epoch) + ")");
      } else {
        nonfinite_streak = 0;
      }

      adam.apply(models.store, batch_grads);
      ++global_step;
      epoch_loss_sum += batch_loss;
      ++epoch_batches;
      if (log.is_open())
        detail::write_csv_row<S>(log, epoch, global_step, batch_loss, "",
                                 std::sqrt(grad_norm_sq), elapsed());
    }

    const double val_loss = run_validation();
    if (log.is_open())
      detail::write_csv_row<S>(log, epoch, global_step,
                               epoch_loss_sum / double(epoch_batches),
                               std::to_string(val_loss), 0.0, elapsed());
    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      best_params.clear();
      for (int i = 0; i < models.store.size(); ++i)
        best_params.push_back(*models.store.values(i));
    }
  }

  if (!best_params.empty())
    for (int i = 0; i < models.store.size(); ++i)
      *models.store.values(i) = best_params[std::size_t(i)];
  result.steps = global_step;
  result.skipped_nonfinite = adam.skipped_nonfinite;
  if (!tcfg.out_dir.empty()) {
    result.checkpoint_path = tcfg.out_dir + "/checkpoint.ckpt";
    save_checkpoint(result.checkpoint_path, models.store, tcfg.seed, global_step);
  }
  return result;
}

// Supervised sensor pretraining: Gaussian NLL of the labeled position
// under (z, R) predicted per frame.
template <typename S>
TrainResult pretrain_sensor(const SequenceDataset& train_ds,
                            const SequenceDataset& val_ds,
                            FilterModels<S>& models, const TrainConfig& tcfg,
                            int frame_batch = 64) {
  check_shape(bool(models.sensor), "pretrain: no sensor model");
  namespace fs = std::filesystem;
  if (!tcfg.out_dir.empty()) fs::create_directories(tcfg.out_dir);
  std::ofstream log;
  if (!tcfg.out_dir.empty()) {
    log.open(tcfg.out_dir + "/train_log.csv");
    log << "epoch,step,train_loss,val_loss,grad_norm,seconds\n";
  }
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&start]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
        .count();
  };

  struct Frame {
    int seq, t;
  };
  std::vector<Frame> frames;
  for (int s = 0; s < train_ds.count(); ++s)
    for (int t = 0; t < train_ds.steps(); ++t) frames.push_back(Frame{s, t});
  std::vector<Frame> val_frames;
  for (int s = 0; s < val_ds.count(); ++s)
    for (int t = 0; t < val_ds.steps(); ++t) val_frames.push_back(Frame{s, t});

  const int threads = tcfg.resolved_threads();
  AdamState<S> adam;
  adam.lr = S(tcfg.lr);
  adam.reset(models.store);

  auto frame_loss = [&](const SequenceDataset& ds, const Frame& f, Tape<S>* tape,
                        std::vector<VecX<S>>* grads) -> double {
    auto rec = ds.record(f.seq);
    BoundParams<S> bound = models.store.bind(tape);
    StepInput<S> in;
    in.image = frame_tensor<S>(*rec, ds.image_size(), f.t);
    Observation<S> obs = observe(models, bound, in);
    VecX<S> label = state_vector<S>(*rec, f.t + 1).head(2);
    GaussianBelief<S> bel{obs.z, obs.r};
    Tensor<S> loss = gaussian_nll(Tensor<S>::constant({2}, label), bel);
    if (tape && loss.taped()) {
      Gradients<S> g = backward(*tape, loss);
      grads->resize(static_cast<std::size_t>(models.store.size()));
      for (int i = 0; i < models.store.size(); ++i)
        if (models.store.trainable(i)) (*grads)[std::size_t(i)] = g.at(bound[i]);
    }
    return double(loss.scalar_value());
  };

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<VecX<S>> best_params;
  long global_step = 0;
  int nonfinite_streak = 0;

  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    Rng shuffle_rng = Rng::derive(tcfg.seed, {51, std::uint64_t(epoch)});
    for (int i = int(frames.size()) - 1; i > 0; --i)
      std::swap(frames[std::size_t(i)],
                frames[std::size_t(shuffle_rng.uniform_int(0, i))]);
    double epoch_loss = 0;
    long batches = 0;
    for (std::size_t at = 0; at < frames.size(); at += std::size_t(frame_batch)) {
      const int count = int(std::min<std::size_t>(frame_batch, frames.size() - at));
      std::vector<std::vector<VecX<S>>> grads(static_cast<std::size_t>(count));
      std::vector<double> losses(std::size_t(count), 0.0);
      auto worker = [&](int begin, int end) {
        for (int c = begin; c < end; ++c) {
          Tape<S> tape;
          losses[std::size_t(c)] = frame_loss(train_ds, frames[at + std::size_t(c)],
                                              &tape, &grads[std::size_t(c)]);
        }
      };
      std::vector<std::thread> pool;
      const int per = (count + threads - 1) / threads;
      for (int t = 0; t < threads; ++t) {
        const int begin = t * per, end = std::min(begin + per, count);
        if (begin < end) pool.emplace_back(worker, begin, end);
      }
      for (auto& th : pool) th.join();

      std::vector<VecX<S>> batch_grads(static_cast<std::size_t>(models.store.size()));
      for (int c = 0; c < count; ++c)
        for (int i = 0; i < models.store.size() && !grads[std::size_t(c)].empty(); ++i) {
          const VecX<S>& g = grads[std::size_t(c)][std::size_t(i)];
          if (g.size() == 0) continue;
          if (batch_grads[std::size_t(i)].size() == 0)
            batch_grads[std::size_t(i)] = g;
          else
            batch_grads[std::size_t(i)] += g;
        }
      double gn = 0;
      for (auto& g : batch_grads)
        if (g.size() != 0) {
          g /= S(count);
          gn += double(g.squaredNorm());
        }
      double batch_loss = 0;
      for (double l : losses) batch_loss += l;
      batch_loss /= count;
      if (!std::isfinite(batch_loss)) {
        if (++nonfinite_streak >= 3)
          throw DivergenceError("pretrain: non-finite loss on 3 consecutive batches");
      } else {
        nonfinite_streak = 0;
      }
      adam.apply(models.store, batch_grads);
      ++global_step;
      epoch_loss += batch_loss;
      ++batches;
      if (log.is_open() && global_step % 25 == 0)
        detail::write_csv_row<S>(log, epoch, global_step, batch_loss, "",
                                 std::sqrt(gn), elapsed());
    }

    // validation
    std::vector<double> vlosses(val_frames.size(), 0.0);
    auto vworker = [&](int begin, int end) {
      for (int c = begin; c < end; ++c)
        vlosses[std::size_t(c)] =
            frame_loss(val_ds, val_frames[std::size_t(c)], nullptr, nullptr);
    };
    std::vector<std::thread> vpool;
    const int per = (int(val_frames.size()) + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
      const int begin = t * per, end = std::min<int>(begin + per, int(val_frames.size()));
      if (begin < end) vpool.emplace_back(vworker, begin, end);
    }
    for (auto& th : vpool) th.join();
    double val_loss = 0;
    for (double l : vlosses) val_loss += l;
    val_loss /= double(vlosses.size());
    if (log.is_open())
      detail::write_csv_row<S>(log, epoch, global_step, epoch_loss / double(batches),
                               std::to_string(val_loss), 0.0, elapsed());
    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      best_params.clear();
      for (int i = 0; i < models.store.size(); ++i)
        best_params.push_back(*models.store.values(i));
    }
  }
  if (!best_params.empty())
    for (int i = 0; i < models.store.size(); ++i)
      *models.store.values(i) = best_params[std::size_t(i)];
  result.steps = global_step;
  result.skipped_nonfinite = adam.skipped_nonfinite;
  if (!tcfg.out_dir.empty()) {
    result.checkpoint_path = tcfg.out_dir + "/checkpoint.ckpt";
    save_checkpoint(result.checkpoint_path, models.store, tcfg.seed, global_step);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalConfig {
  int perturbations = 2;  // runs = {true init} + this many perturbed inits
  double sigma_init = 25.0;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out_dir;
  std::string label;  // config echo used for grouping in comparisons

  int resolved_threads() const {
    if (threads > 0) return threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
  }
};

struct EvalReport {
  std::string label;
  double rmse = 0;        // position tracking error
  double state_rmse = 0;  // over the full state
  double nll = 0;         // belief convention, no 2 pi constant (paper form)
  double nll_2pi = 0;     // with the constant restored
  double obs_rmse = 0;
  double corr_r_visibility = 0;
  bool corr_defined = false;
  double d_q = 0;
  double mean_ess = 0;  // particle filters only
  std::vector<double> trace_rmse, trace_nll, trace_sigma_qp, trace_sigma_qv;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["label"] = label;
    j["rmse"] = rmse;
    j["state_rmse"] = state_rmse;
    j["nll"] = nll;
    j["nll_2pi"] = nll_2pi;
    j["obs_rmse"] = obs_rmse;
    if (corr_defined)
      j["corr_r_visibility"] = corr_r_visibility;
    else
      j["corr_r_visibility"] = "undefined";
    j["d_q"] = d_q;
    j["mean_ess"] = mean_ess;
    return j;
  }
};

// Pearson correlation; `defined` goes false when either variance vanishes.
inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys,
                      bool* defined) {
  const std::size_t n = xs.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  const double scale = std::max({sxx, syy, 1e-300});
  if (sxx <= 1e-12 * scale || syy <= 1e-12 * scale) {
    *defined = false;
    return 0.0;
  }
  *defined = true;
  return sxy / std::sqrt(sxx * syy);
}

// Per-(sequence, init variant) accumulation used by evaluate().
struct EvalAccum {
  double pos_sq = 0, state_sq = 0, nll = 0, obs_sq = 0, ess = 0;
  long steps = 0;
  Eigen::Matrix4d q_sum = Eigen::Matrix4d::Zero();
  std::vector<double> r_trace;   // mean diag of R per step (variant 0 only)
  std::vector<double> visible;   // visible pixel counts (variant 0 only)
  std::vector<double> t_pos_sq, t_nll, t_sqp, t_sqv;  // per step index
};

// Runs the filter at evaluation sample counts over the test split,
// averaging over the true initial state and `perturbations` fixed
// perturbed ones.
template <typename S>
EvalReport evaluate(const SequenceDataset& test_ds, const FilterModels<S>& models,
                    const FilterConfig& fcfg, const EvalConfig& ecfg) {
  fcfg.validate(models.state_dim);
  const int variants = 1 + ecfg.perturbations;
  const int steps = test_ds.steps();
  const int threads = ecfg.resolved_threads();
  const int jobs = test_ds.count() * variants;

  std::vector<EvalAccum> accums(static_cast<std::size_t>(jobs));
  auto worker = [&](int begin, int end) {
    for (int job = begin; job < end; ++job) {
      const int seq = job / variants;
      const int variant = job % variants;
      auto rec = test_ds.record(seq);
      EvalAccum& acc = accums[std::size_t(job)];
      acc.t_pos_sq.assign(static_cast<std::size_t>(steps), 0.0);
      acc.t_nll.assign(static_cast<std::size_t>(steps), 0.0);
      acc.t_sqp.assign(static_cast<std::size_t>(steps), 0.0);
      acc.t_sqv.assign(static_cast<std::size_t>(steps), 0.0);

      Rng perturb = Rng::derive(ecfg.seed, {30, std::uint64_t(variant),
                                            std::uint64_t(seq)});
      Rng filter_rng = Rng::derive(ecfg.seed, {31, std::uint64_t(variant),
                                               std::uint64_t(seq)});
      BoundParams<S> bound = models.store.bind(nullptr);
      GaussianBelief<S> init = perturb_initial_state<S>(
          state_vector<S>(*rec, 0), ecfg.sigma_init, perturb, variant != 0);
      std::vector<StepInput<S>> inputs(static_cast<std::size_t>(steps));
      for (int t = 0; t < steps; ++t)
        inputs[std::size_t(t)].image = frame_tensor<S>(*rec, test_ds.image_size(), t);
      auto records = run_filter(models, bound, fcfg, init, inputs,
                                fcfg.sample_count_eval, filter_rng);
      for (int t = 0; t < steps; ++t) {
        const auto& r = records[std::size_t(t)];
        VecX<S> label = state_vector<S>(*rec, t + 1);
        Tensor<S> label_t = Tensor<S>::constant({4}, label);
        VecX<S> mu = step_mean(r).values();
        const double pos_sq = double((mu.head(2) - label.head(2)).squaredNorm());
        const double state_sq = double((mu - label).squaredNorm());
        double nll;
        if (r.gauss) {
          nll = double(gaussian_nll(label_t, *r.gauss).scalar_value());
        } else {
          BeliefSummary<S> summary = particle_belief_summary(
              *r.particles, fcfg.pf_belief, fcfg.gmm_sigma, S(models.q_model.eps));
          nll = std::holds_alternative<GaussianBelief<S>>(summary)
                    ? double(gaussian_nll(label_t, std::get<GaussianBelief<S>>(summary))
                                 .scalar_value())
                    : double(gmm_nll(label_t, std::get<GaussianMixture<S>>(summary))
                                 .scalar_value());
          acc.ess += r.diag.effective_sample_size;
        }
        const double obs_sq =
            double((r.obs.z.values() - label.head(2).template cast<S>()).squaredNorm());
        acc.pos_sq += pos_sq;
        acc.state_sq += state_sq;
        acc.nll += nll;
        acc.obs_sq += obs_sq;
        ++acc.steps;
        Eigen::Matrix4d q;
        for (int i = 0; i < 4; ++i)
          for (int j = 0; j < 4; ++j) q(i, j) = double(r.q.values()[i * 4 + j]);
        acc.q_sum += q;
        acc.t_pos_sq[std::size_t(t)] += pos_sq;
        acc.t_nll[std::size_t(t)] += nll;
        acc.t_sqp[std::size_t(t)] += std::sqrt(0.5 * (q(0, 0) + q(1, 1)));
        acc.t_sqv[std::size_t(t)] += std::sqrt(0.5 * (q(2, 2) + q(3, 3)));
        if (variant == 0) {
          const double r_diag_mean =
              0.5 * double(r.obs.r.values()[0] +
                           r.obs.r.values()[models.obs_dim * models.obs_dim - 1]);
          acc.r_trace.push_back(r_diag_mean);
          acc.visible.push_back(double(rec->visible[std::size_t(t)]));
        }
      }
    }
  };
  std::vector<std::thread> pool;
  const int per = (jobs + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int begin = t * per, end = std::min(begin + per, jobs);
    if (begin < end) pool.emplace_back(worker, begin, end);
  }
  for (auto& th : pool) th.join();

  // ordered reduction
  EvalReport report;
  report.label = ecfg.label;
  double pos_sq = 0, state_sq = 0, nll = 0, obs_sq = 0, ess = 0;
  long total_steps = 0;
  Eigen::Matrix4d q_mean = Eigen::Matrix4d::Zero();
  std::vector<double> r_trace, visible;
  std::vector<double> t_pos(std::size_t(steps), 0), t_nll(std::size_t(steps), 0),
      t_sqp(std::size_t(steps), 0), t_sqv(std::size_t(steps), 0);
  for (const auto& acc : accums) {
    pos_sq += acc.pos_sq;
    state_sq += acc.state_sq;
    nll += acc.nll;
    obs_sq += acc.obs_sq;
    ess += acc.ess;
    total_steps += acc.steps;
    q_mean += acc.q_sum;
    for (int t = 0; t < steps; ++t) {
      t_pos[std::size_t(t)] += acc.t_pos_sq[std::size_t(t)];
      t_nll[std::size_t(t)] += acc.t_nll[std::size_t(t)];
      t_sqp[std::size_t(t)] += acc.t_sqp[std::size_t(t)];
      t_sqv[std::size_t(t)] += acc.t_sqv[std::size_t(t)];
    }
    r_trace.insert(r_trace.end(), acc.r_trace.begin(), acc.r_trace.end());
    visible.insert(visible.end(), acc.visible.begin(), acc.visible.end());
  }
  report.rmse = std::sqrt(pos_sq / double(total_steps));
  report.state_rmse = std::sqrt(state_sq / double(total_steps));
  report.nll = nll / double(total_steps);
  report.nll_2pi = report.nll + 0.5 * 4.0 * kLog2Pi;
  report.obs_rmse = std::sqrt(obs_sq / double(total_steps));
  report.mean_ess = ess / double(total_steps);
  q_mean /= double(total_steps);
  report.d_q = bhattacharyya_value<double>(q_mean, test_ds.ground_truth_q());
  report.corr_r_visibility = pearson(r_trace, visible, &report.corr_defined);
  const double runs = double(jobs);
  for (int t = 0; t < steps; ++t) {
    report.trace_rmse.push_back(std::sqrt(t_pos[std::size_t(t)] / runs));
    report.trace_nll.push_back(t_nll[std::size_t(t)] / runs);
    report.trace_sigma_qp.push_back(t_sqp[std::size_t(t)] / runs);
    report.trace_sigma_qv.push_back(t_sqv[std::size_t(t)] / runs);
  }

  if (!ecfg.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(ecfg.out_dir);
    std::ofstream json_out(ecfg.out_dir + "/report.json");
    json_out << report.to_json().dump(2) << '\n';
    std::ofstream trace(ecfg.out_dir + "/trace.csv");
    trace << "t,rmse,nll,sigma_qp_pred,sigma_qv_pred\n";
    for (int t = 0; t < steps; ++t)
      trace << (t + 1) << ',' << std::setprecision(10) << report.trace_rmse[std::size_t(t)]
            << ',' << report.trace_nll[std::size_t(t)] << ','
            << report.trace_sigma_qp[std::size_t(t)] << ','
            << report.trace_sigma_qv[std::size_t(t)] << '\n';
  }
  return report;
}

// ---------------------------------------------------------------------------
// Comparison tables

// Aligns reports into one table; reports sharing a label are aggregated
// with mean and standard error (sd / sqrt(n)). Metrics missing from a
// group stay blank.
inline nlohmann::json compare_reports(const std::vector<nlohmann::json>& reports) {
  static const std::vector<std::string> metrics = {
      "rmse", "state_rmse", "nll", "nll_2pi", "obs_rmse",
      "corr_r_visibility", "d_q"};
  std::vector<std::string> order;
  std::map<std::string, std::vector<nlohmann::json>> groups;
  for (const auto& r : reports) {
    const std::string label = r.value("label", std::string("unlabeled"));
    if (groups.find(label) == groups.end()) order.push_back(label);
    groups[label].push_back(r);
  }
  auto rows = nlohmann::json::array();
  for (const auto& label : order) {
    const auto& group = groups[label];
    nlohmann::json row;
    row["label"] = label;
    row["n"] = group.size();
    for (const auto& metric : metrics) {
      std::vector<double> values;
      for (const auto& r : group)
        if (r.contains(metric) && r[metric].is_number())
          values.push_back(r[metric].get<double>());
      if (values.empty()) continue;
      double mean = 0;
      for (double v : values) mean += v;
      mean /= double(values.size());
      row[metric] = mean;
      if (values.size() > 1) {
        double var = 0;
        for (double v : values) var += (v - mean) * (v - mean);
        var /= double(values.size() - 1);
        row[metric + "_stderr"] = std::sqrt(var / double(values.size()));
      }
    }
    rows.push_back(row);
  }
  nlohmann::json table;
  table["rows"] = rows;
  return table;
}

inline std::string compare_csv(const nlohmann::json& table) {
  static const std::vector<std::string> metrics = {
      "rmse", "state_rmse", "nll", "nll_2pi", "obs_rmse",
      "corr_r_visibility", "d_q"};
  std::ostringstream out;
  out << "label,n";
  for (const auto& m : metrics) out << ',' << m << ',' << m << "_stderr";
  out << '\n';
  for (const auto& row : table["rows"]) {
    out << row["label"].get<std::string>() << ',' << row["n"].get<std::size_t>();
    for (const auto& m : metrics) {
      out << ',';
      if (row.contains(m)) out << std::setprecision(8) << row[m].get<double>();
      out << ',';
      if (row.contains(m + "_stderr"))
        out << std::setprecision(4) << row[m + "_stderr"].get<double>();
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace df
