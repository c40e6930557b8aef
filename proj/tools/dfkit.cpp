// dfkit: differentiable Bayesian filtering toolkit CLI.
//
// Subcommands: gen-data, train, eval, compare, gradcheck, oracle-check.
// Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure, 5 divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "df/discworld.hpp"
#include "df/gradcheck_suite.hpp"
#include "df/harness.hpp"
#include "df/oracle_suite.hpp"

namespace fs = std::filesystem;

namespace {

struct FilterFlags {
  std::string filter = "ekf";
  double alpha = 1.0, kappa = 0.5, beta = 0.0;
  int particles = 100;
  int particles_eval = 500;
  double alpha_re = 0.05;
  int resample_every = 1;
  double gmm_sigma = 1.0;
};

struct ModelFlags {
  bool hetero_r = false;
  bool hetero_q = false;
  bool full_cov = false;
  bool analytic_process = false;
  bool freeze_sensor = false;
  bool freeze_process = false;
  double q_init = -1.0;  // <0: resolved from preset
  double r_init = -1.0;
  double eps = 1e-3;
  std::string preset;  // "", "from-scratch", "noise-only"
};

struct ParsedFilter {
  df::FilterKind kind = df::FilterKind::kEkf;
  df::PfBeliefMode belief = df::PfBeliefMode::kGmm;
  df::PfUpdate update = df::PfUpdate::kAnalytic;
};

ParsedFilter parse_filter(const std::string& name) {
  ParsedFilter f;
  if (name == "ekf") f.kind = df::FilterKind::kEkf;
  else if (name == "ukf") f.kind = df::FilterKind::kUkf;
  else if (name == "mcukf") f.kind = df::FilterKind::kMcukf;
  else if (name == "pf-g" || name == "pf-m" || name == "pf-g-lrn" || name == "pf-m-lrn") {
    f.kind = df::FilterKind::kPf;
    f.belief = name[3] == 'g' ? df::PfBeliefMode::kSingleGaussian
                              : df::PfBeliefMode::kGmm;
    f.update = name.size() > 4 ? df::PfUpdate::kLearned : df::PfUpdate::kAnalytic;
  } else {
    throw df::ConfigError("unknown filter: " + name);
  }
  return f;
}

df::FilterConfig make_filter_config(const FilterFlags& ff) {
  ParsedFilter pf = parse_filter(ff.filter);
  df::FilterConfig fc;
  fc.kind = pf.kind;
  fc.pf_belief = pf.belief;
  fc.pf_update = pf.update;
  fc.ukf = df::UkfParams{ff.alpha, ff.kappa, ff.beta};
  fc.sample_count_train = ff.particles;
  fc.sample_count_eval = ff.particles_eval;
  fc.alpha_re = ff.alpha_re;
  fc.resample_every = ff.resample_every;
  fc.gmm_sigma = ff.gmm_sigma;
  return fc;
}

df::ModelSpec make_model_spec(const ModelFlags& mf, const FilterFlags& ff,
                              int image_size, std::uint64_t seed) {
  df::ModelSpec spec;
  spec.image_size = image_size;
  spec.init_seed = seed;
  spec.hetero_r = mf.hetero_r;
  spec.hetero_q = mf.hetero_q;
  spec.q_shape = mf.full_cov ? df::CovShape::kFull : df::CovShape::kDiagonal;
  spec.r_shape = spec.q_shape;
  spec.analytic_process = mf.analytic_process;
  spec.freeze_sensor = mf.freeze_sensor;
  spec.freeze_process = mf.freeze_process;
  spec.eps = mf.eps;
  spec.learned_likelihood = parse_filter(ff.filter).update == df::PfUpdate::kLearned;
  double q_init = 100.0, r_init = 900.0;
  if (mf.preset == "noise-only") {
    spec.freeze_sensor = true;
    spec.analytic_process = true;
    q_init = 1.0;
    r_init = 100.0;
  } else if (!mf.preset.empty() && mf.preset != "from-scratch") {
    throw df::ConfigError("unknown preset: " + mf.preset);
  }
  spec.q_init = mf.q_init >= 0 ? mf.q_init : q_init;
  spec.r_init = mf.r_init >= 0 ? mf.r_init : r_init;
  return spec;
}

nlohmann::json filter_flags_json(const FilterFlags& ff, const ModelFlags& mf) {
  nlohmann::json j;
  j["filter"] = ff.filter;
  j["alpha"] = ff.alpha;
  j["kappa"] = ff.kappa;
  j["beta"] = ff.beta;
  j["particles"] = ff.particles;
  j["particles_eval"] = ff.particles_eval;
  j["alpha_re"] = ff.alpha_re;
  j["resample_every"] = ff.resample_every;
  j["gmm_sigma"] = ff.gmm_sigma;
  j["hetero_r"] = mf.hetero_r;
  j["hetero_q"] = mf.hetero_q;
  j["full_cov"] = mf.full_cov;
  j["analytic_process"] = mf.analytic_process;
  j["freeze_sensor"] = mf.freeze_sensor;
  j["freeze_process"] = mf.freeze_process;
  j["q_init"] = mf.q_init;
  j["r_init"] = mf.r_init;
  j["eps"] = mf.eps;
  j["preset"] = mf.preset;
  return j;
}

void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const nlohmann::json& config) {
  if (out_dir.empty()) return;
  fs::create_directories(out_dir);
  nlohmann::json m;
  m["command"] = command;
  m["config"] = config;
  std::ofstream out(out_dir + "/run_manifest.json");
  out << m.dump(2) << '\n';
}

std::string default_label(const FilterFlags& ff, const ModelFlags& mf,
                          const std::string& loss) {
  std::string label = ff.filter;
  label += mf.hetero_r ? "+heteroR" : "+constR";
  label += mf.hetero_q ? "+heteroQ" : "+constQ";
  if (mf.full_cov) label += "+full";
  if (!loss.empty()) label += "+" + loss;
  if (!mf.preset.empty()) label += "+" + mf.preset;
  return label;
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const df::DatasetConfig& cfg, const std::string& out_dir,
                 const nlohmann::json& resolved) {
  fs::create_directories(out_dir);
  write_run_manifest(out_dir, "gen-data", resolved);
  df::generate_dataset(cfg, out_dir);
  nlohmann::json summary = df::dataset_manifest(cfg, "train", cfg.train_count);
  summary.erase("split");
  summary["counts"] = {cfg.train_count, cfg.val_count, cfg.test_count};
  std::cout << summary.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train / eval

struct TrainOpts {
  std::string data, out, init_from;
  std::string loss = "nll";
  int seq_len = 10;
  int epochs = 15;
  int batch = 0;
  double lr = 1e-4;
  double sigma_init = 25.0;
  int threads = 0;
  std::uint64_t seed = 0;
  bool f64 = false;
  bool pretrain_sensor = false;
};

df::LossKind parse_loss(const std::string& s) {
  if (s == "mse") return df::LossKind::kMse;
  if (s == "nll") return df::LossKind::kNll;
  if (s == "mix") return df::LossKind::kMix;
  throw df::ConfigError("unknown loss: " + s);
}

template <typename S>
int run_train(const TrainOpts& opts, const FilterFlags& ff, const ModelFlags& mf) {
  df::SequenceDataset train_ds(opts.data + "/train.dfd");
  df::SequenceDataset val_ds(opts.data + "/val.dfd");
  train_ds.preload_all();
  val_ds.preload_all();

  df::ModelSpec spec = make_model_spec(mf, ff, train_ds.image_size(), opts.seed);
  df::FilterModels<S> models = df::build_models<S>(spec);
  if (!opts.init_from.empty())
    df::load_checkpoint(opts.init_from, models.store, /*strict=*/false);

  df::TrainConfig tcfg;
  tcfg.loss = parse_loss(opts.loss);
  tcfg.seq_len = opts.seq_len;
  tcfg.epochs = opts.epochs;
  tcfg.lr = opts.lr;
  tcfg.batch_chunks = opts.batch;
  tcfg.sigma_init = opts.sigma_init;
  tcfg.threads = opts.threads;
  tcfg.seed = opts.seed;
  tcfg.out_dir = opts.out;

  df::TrainResult result;
  if (opts.pretrain_sensor) {
    result = df::pretrain_sensor(train_ds, val_ds, models, tcfg);
  } else {
    df::FilterConfig fcfg = make_filter_config(ff);
    fcfg.validate(models.state_dim);
    result = df::train(train_ds, val_ds, models, fcfg, tcfg);
  }
  nlohmann::json out;
  out["best_val_loss"] = result.best_val_loss;
  out["best_epoch"] = result.best_epoch;
  out["steps"] = result.steps;
  out["skipped_nonfinite"] = result.skipped_nonfinite;
  out["checkpoint"] = result.checkpoint_path;
  std::cout << out.dump(2) << '\n';
  return 0;
}

struct EvalOpts {
  std::string data, checkpoint, out, label;
  int perturbations = 2;
  double sigma_init = 25.0;
  int threads = 0;
  std::uint64_t seed = 0;
  bool f64 = false;
};

template <typename S>
int run_eval(const EvalOpts& opts, const FilterFlags& ff, const ModelFlags& mf) {
  df::SequenceDataset test_ds(opts.data + "/test.dfd");
  df::ModelSpec spec = make_model_spec(mf, ff, test_ds.image_size(), opts.seed);
  df::FilterModels<S> models = df::build_models<S>(spec);
  if (opts.checkpoint.empty())
    throw df::ConfigError("eval: --checkpoint is required");
  df::load_checkpoint(opts.checkpoint, models.store, /*strict=*/false);

  df::FilterConfig fcfg = make_filter_config(ff);
  df::EvalConfig ecfg;
  ecfg.perturbations = opts.perturbations;
  ecfg.sigma_init = opts.sigma_init;
  ecfg.seed = opts.seed;
  ecfg.threads = opts.threads;
  ecfg.out_dir = opts.out;
  ecfg.label = opts.label;
  df::EvalReport report = df::evaluate<S>(test_ds, models, fcfg, ecfg);
  std::cout << report.to_json().dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// compare / gradcheck / oracle-check

int cmd_compare(const std::vector<std::string>& files, const std::string& out_dir) {
  std::vector<nlohmann::json> reports;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw df::DataError("cannot open report: " + f);
    reports.push_back(nlohmann::json::parse(in));
  }
  nlohmann::json table = df::compare_reports(reports);
  const std::string csv = df::compare_csv(table);
  std::cout << csv;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream jout(out_dir + "/comparison.json");
    jout << table.dump(2) << '\n';
    std::ofstream cout_(out_dir + "/comparison.csv");
    cout_ << csv;
  }
  return 0;
}

int cmd_gradcheck(double tol, int trials) {
  df::GradcheckSuiteResult result = df::run_gradcheck_suite(tol, trials);
  double worst_op = 0;
  for (const auto& e : result.entries) {
    if (e.name.rfind("composed", 0) == 0)
      std::printf("%-24s max_rel=%.3g  %s\n", e.name.c_str(), e.max_rel_error,
                  e.pass ? "pass" : "FAIL");
    else
      worst_op = std::max(worst_op, e.max_rel_error);
  }
  std::printf("%-24s max_rel=%.3g  %s\n", "ops(all)", worst_op,
              worst_op < tol ? "pass" : "FAIL");
  std::printf("gradcheck: %s (max relative error %.3g, tol %.1g)\n",
              result.pass ? "PASS" : "FAIL", result.max_rel_error, tol);
  if (!result.pass) throw df::NumericError("gradcheck failed");
  return 0;
}

int cmd_oracle_check(const std::string& filter, int steps, int trials,
                     int samples, int particles, std::uint64_t seed) {
  df::OracleCheckConfig cfg;
  cfg.steps = steps;
  cfg.trials = trials;
  cfg.mcukf_samples = samples;
  cfg.pf_particles = particles;
  cfg.seed = seed;
  if (filter != "all") {
    cfg.run_ekf = filter == "ekf";
    cfg.run_ukf = filter == "ukf";
    cfg.run_mcukf = filter == "mcukf";
    cfg.run_pf = filter == "pf";
    if (!cfg.run_ekf && !cfg.run_ukf && !cfg.run_mcukf && !cfg.run_pf)
      throw df::ConfigError("oracle-check: unknown filter " + filter);
  }
  df::OracleCheckResult r = df::run_oracle_check(cfg);
  if (r.ran_ekf)
    std::printf("dEKF   max|mu-mu_kf|=%.3g  max|Sigma-Sigma_kf|=%.3g\n",
                r.ekf_max_mu, r.ekf_max_sigma);
  if (r.ran_ukf)
    std::printf("dUKF   max|mu-mu_kf|=%.3g  max|Sigma-Sigma_kf|=%.3g\n",
                r.ukf_max_mu, r.ukf_max_sigma);
  if (r.ran_mcukf)
    std::printf("dMCUKF %d/%d trials within bound (worst ratio %.3f)\n",
                r.mcukf_pass, r.trials, r.mcukf_worst_ratio);
  if (r.ran_pf)
    std::printf("dPF    %d/%d trials within bound (worst ratio %.3f)\n",
                r.pf_pass, r.trials, r.pf_worst_ratio);
  const bool ok = r.pass();
  std::printf("oracle-check: %s\n", ok ? "PASS" : "FAIL");
  if (!ok) throw df::NumericError("oracle-check failed");
  return 0;
}

void add_filter_flags(CLI::App* cmd, FilterFlags& ff, ModelFlags& mf) {
  cmd->add_option("--filter", ff.filter,
                  "ekf | ukf | mcukf | pf-g | pf-m | pf-g-lrn | pf-m-lrn");
  cmd->add_option("--alpha", ff.alpha, "UKF alpha");
  cmd->add_option("--kappa", ff.kappa, "UKF kappa");
  cmd->add_option("--beta", ff.beta, "UKF beta");
  cmd->add_option("--particles", ff.particles, "sample/particle count (training)");
  cmd->add_option("--particles-eval", ff.particles_eval,
                  "sample/particle count (evaluation)");
  cmd->add_option("--alpha-re", ff.alpha_re, "soft resampling trade-off in [0,1]");
  cmd->add_option("--resample-every", ff.resample_every, "resampling interval");
  auto* gmm = cmd->add_option("--gmm-sigma", ff.gmm_sigma,
                              "per-particle mixture stddev (dPF-M)");
  cmd->add_flag("--hetero-r", mf.hetero_r, "learn heteroscedastic observation noise");
  cmd->add_flag("--hetero-q", mf.hetero_q, "learn heteroscedastic process noise");
  cmd->add_flag("--full-cov", mf.full_cov, "full (triangular) noise covariances");
  cmd->add_flag("--analytic-process", mf.analytic_process, "use the true dynamics");
  cmd->add_flag("--freeze-sensor", mf.freeze_sensor, "freeze sensor trunk + z head");
  cmd->add_flag("--freeze-process", mf.freeze_process, "freeze the process net");
  cmd->add_option("--q-init", mf.q_init, "initial Q diagonal target");
  cmd->add_option("--r-init", mf.r_init, "initial R diagonal target");
  cmd->add_option("--eps", mf.eps, "diagonal lower bound for noise covariances");
  cmd->add_option("--preset", mf.preset, "from-scratch | noise-only");
  cmd->callback([cmd, gmm, &ff]() {
    if (gmm->count() > 0 && parse_filter(ff.filter).kind != df::FilterKind::kPf)
      throw CLI::ValidationError("--gmm-sigma requires a particle filter (--filter pf-*)");
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dfkit: differentiable Bayesian filtering toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "config file with key=value lines");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a disc-tracking dataset");
  df::DatasetConfig dcfg;
  std::string gen_out = "dataset";
  bool desk_scale = false, hetero_gt = false, correlated = false;
  dcfg.scene.image_size = 100;
  dcfg.scene.num_distractors = 15;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--seed", dcfg.seed, "dataset seed");
  gen->add_option("--train", dcfg.train_count, "training sequences");
  gen->add_option("--val", dcfg.val_count, "validation sequences");
  gen->add_option("--test", dcfg.test_count, "test sequences");
  gen->add_option("--steps", dcfg.steps, "steps per sequence");
  gen->add_option("--distractors", dcfg.scene.num_distractors, "distractor count");
  gen->add_option("--image-size", dcfg.scene.image_size, "image side length");
  gen->add_option("--sigma-p", dcfg.regime.sigma_p, "position noise stddev");
  gen->add_option("--sigma-v", dcfg.regime.sigma_v, "velocity noise stddev");
  gen->add_flag("--hetero-q", hetero_gt, "heteroscedastic ground-truth velocity noise");
  gen->add_flag("--correlated-q", correlated, "correlated ground-truth process noise");
  gen->add_flag("--desk-scale", desk_scale, "32x32, 5 distractors, 300/50/50 preset");

  // train
  auto* tr = app.add_subcommand("train", "train a differentiable filter");
  TrainOpts topts;
  FilterFlags tff;
  ModelFlags tmf;
  tr->add_option("--data", topts.data, "dataset directory")->required();
  tr->add_option("--out", topts.out, "output directory")->required();
  tr->add_option("--loss", topts.loss, "mse | nll | mix");
  tr->add_option("--seq-len", topts.seq_len, "training chunk length k");
  tr->add_option("--epochs", topts.epochs, "training epochs");
  tr->add_option("--lr", topts.lr, "Adam learning rate");
  tr->add_option("--batch", topts.batch, "chunks per batch (0: 320/k)");
  tr->add_option("--sigma-init", topts.sigma_init, "initial-belief variance");
  tr->add_option("--threads", topts.threads, "worker threads (0: all cores)");
  tr->add_option("--seed", topts.seed, "training seed");
  tr->add_option("--init-from", topts.init_from, "checkpoint to initialize from");
  tr->add_flag("--f64", topts.f64, "train in 64-bit precision");
  tr->add_flag("--pretrain-sensor", topts.pretrain_sensor,
               "supervised sensor pretraining instead of filter training");
  add_filter_flags(tr, tff, tmf);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  EvalOpts eopts;
  FilterFlags eff;
  ModelFlags emf;
  ev->add_option("--data", eopts.data, "dataset directory")->required();
  ev->add_option("--checkpoint", eopts.checkpoint, "checkpoint file")->required();
  ev->add_option("--out", eopts.out, "output directory");
  ev->add_option("--label", eopts.label, "report label (grouping key)");
  ev->add_option("--eval-perturb", eopts.perturbations,
                 "number of perturbed initial states");
  ev->add_option("--sigma-init", eopts.sigma_init, "initial-belief variance");
  ev->add_option("--threads", eopts.threads, "worker threads");
  ev->add_option("--seed", eopts.seed, "evaluation seed");
  ev->add_flag("--f64", eopts.f64, "evaluate in 64-bit precision");
  add_filter_flags(ev, eff, emf);

  // compare
  auto* cp = app.add_subcommand("compare", "tabulate evaluation reports");
  std::vector<std::string> report_files;
  std::string cp_out;
  cp->add_option("reports", report_files, "report.json files")->required();
  cp->add_option("--out", cp_out, "output directory");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "verify gradients against finite differences");
  double gc_tol = 1e-4;
  int gc_trials = 100;
  std::uint64_t gc_seed = 0;
  gc->add_option("--tol", gc_tol, "relative error tolerance");
  gc->add_option("--trials", gc_trials, "random inputs over the op set");
  gc->add_option("--seed", gc_seed, "unused; accepted for uniformity");

  // oracle-check
  auto* oc = app.add_subcommand("oracle-check",
                                "compare filters against a closed-form Kalman filter");
  std::string oc_filter = "all";
  int oc_steps = 50, oc_trials = 100, oc_samples = 100000, oc_particles = 10000;
  std::uint64_t oc_seed = 2024;
  oc->add_option("--filter", oc_filter, "ekf | ukf | mcukf | pf | all");
  oc->add_option("--steps", oc_steps, "sequence length");
  oc->add_option("--trials", oc_trials, "Monte-Carlo trials");
  oc->add_option("--samples", oc_samples, "dMCUKF sample count");
  oc->add_option("--particles", oc_particles, "dPF particle count");
  oc->add_option("--seed", oc_seed, "system seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "E_USAGE: " << e.what() << '\n';
    return 2;
  }

  try {
    if (gen->parsed()) {
      if (hetero_gt && correlated)
        throw df::ConfigError("--hetero-q and --correlated-q are mutually exclusive");
      if (desk_scale) {
        df::SceneSpec desk = df::desk_scene();
        if (gen->count("--image-size") == 0) dcfg.scene.image_size = desk.image_size;
        if (gen->count("--distractors") == 0)
          dcfg.scene.num_distractors = desk.num_distractors;
        if (gen->count("--train") == 0) dcfg.train_count = 300;
        if (gen->count("--val") == 0) dcfg.val_count = 50;
        if (gen->count("--test") == 0) dcfg.test_count = 50;
      }
      if (hetero_gt) dcfg.regime.kind = df::RegimeKind::kHeteroscedasticNoise;
      if (correlated) dcfg.regime.kind = df::RegimeKind::kCorrelatedNoise;
      nlohmann::json resolved = df::dataset_manifest(dcfg, "all", dcfg.train_count);
      return cmd_gen_data(dcfg, gen_out, resolved);
    }
    if (tr->parsed()) {
      if (topts.pretrain_sensor && tr->count("--epochs") == 0) topts.epochs = 30;
      nlohmann::json resolved = filter_flags_json(tff, tmf);
      resolved["loss"] = topts.loss;
      resolved["seq_len"] = topts.seq_len;
      resolved["epochs"] = topts.epochs;
      resolved["lr"] = topts.lr;
      resolved["batch"] = topts.batch;
      resolved["sigma_init"] = topts.sigma_init;
      resolved["seed"] = topts.seed;
      resolved["f64"] = topts.f64;
      resolved["init_from"] = topts.init_from;
      resolved["pretrain_sensor"] = topts.pretrain_sensor;
      resolved["data"] = topts.data;
      write_run_manifest(topts.out, "train", resolved);
      return topts.f64 ? run_train<double>(topts, tff, tmf)
                       : run_train<float>(topts, tff, tmf);
    }
    if (ev->parsed()) {
      if (eopts.label.empty()) eopts.label = default_label(eff, emf, "");
      nlohmann::json resolved = filter_flags_json(eff, emf);
      resolved["checkpoint"] = eopts.checkpoint;
      resolved["eval_perturb"] = eopts.perturbations;
      resolved["sigma_init"] = eopts.sigma_init;
      resolved["seed"] = eopts.seed;
      resolved["f64"] = eopts.f64;
      resolved["label"] = eopts.label;
      resolved["data"] = eopts.data;
      write_run_manifest(eopts.out, "eval", resolved);
      return eopts.f64 ? run_eval<double>(eopts, eff, emf)
                       : run_eval<float>(eopts, eff, emf);
    }
    if (cp->parsed()) return cmd_compare(report_files, cp_out);
    if (gc->parsed()) return cmd_gradcheck(gc_tol, gc_trials);
    if (oc->parsed())
      return cmd_oracle_check(oc_filter, oc_steps, oc_trials, oc_samples,
                              oc_particles, oc_seed);
  } catch (const df::ConfigError& e) {
    std::cerr << "E_USAGE: " << e.what() << '\n';
    return 2;
  } catch (const df::DataError& e) {
    std::cerr << "E_DATA: " << e.what() << '\n';
    return 3;
  } catch (const df::DivergenceError& e) {
    std::cerr << "E_DIVERGENCE: " << e.what() << '\n';
    return 5;
  } catch (const df::Error& e) {
    std::cerr << "E_NUMERIC: " << e.what() << '\n';
    return 4;
  }
  return 0;
}
