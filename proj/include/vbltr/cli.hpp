#pragma once

// Command-line front end. Exit codes: 0 ok, 1 usage, 2 data, 3 numerical.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vbltr/io.hpp"

namespace vbltr {

namespace cli_detail {

struct FitFlags {
  Hyperparams hp;
  std::optional<double> alpha, a_tau, b_tau, b_lambda;
  std::string formula = "printed";
  std::string log_phi = "printed";
  std::string moments = "analytic";
  std::string convergence = "absolute";

  void attach(CLI::App* app) {
    app->add_option("--rank", hp.rank, "CP rank R")->capture_default_str();
    app->add_option("--alpha", alpha, "Dirichlet concentration (default 1/R)");
    app->add_option("--a-tau", a_tau, "tau prior shape (default alpha R)");
    app->add_option("--b-tau", b_tau, "tau prior rate (default R sum(I)/2 - 1/2)");
    app->add_option("--a-lambda", hp.a_lambda, "lambda prior shape")->capture_default_str();
    app->add_option("--b-lambda", b_lambda, "lambda prior rate (default a_lambda^(1/(2M)))");
    app->add_option("--epsilon", hp.epsilon, "bound convergence tolerance")->capture_default_str();
    app->add_option("--max-iters", hp.max_iters, "maximum sweeps")->capture_default_str();
    app->add_option("--convergence", convergence, "absolute | relative")->capture_default_str();
    app->add_option("--seed", hp.seed, "random seed")->capture_default_str();
    app->add_option("--mode", hp.mode, "matricisation mode (0-based)")->capture_default_str();
    app->add_option("--formula-mode", formula, "printed | derived")->capture_default_str();
    app->add_option("--log-phi", log_phi, "printed | digamma")->capture_default_str();
    app->add_option("--moments", moments, "analytic | monte_carlo")->capture_default_str();
    app->add_option("--mc-draws", hp.mc_draws, "Monte-Carlo moment draws")->capture_default_str();
    app->add_option("--init-scale", hp.init_scale, "sd of initial margin means")->capture_default_str();
    app->add_option("--restarts", hp.restarts, "seeded starts, best bound kept")->capture_default_str();
    app->add_option("--dense-budget", hp.dense_budget, "max entries of a dense gram block")
        ->capture_default_str();
    app->add_option("--threads", hp.threads, "worker threads (0: VBLTR_THREADS or all)");
  }

  Hyperparams resolve() const {
    Hyperparams h = hp;
    h.alpha = alpha;
    h.a_tau = a_tau;
    h.b_tau = b_tau;
    h.b_lambda = b_lambda;
    h.formula = parse_formula_mode(formula);
    h.log_phi = parse_log_phi(log_phi);
    h.moments = parse_moments(moments);
    h.convergence = parse_convergence(convergence);
    return h;
  }
};

struct SimFlags {
  SimConfig sim;
  std::vector<std::size_t> dims{10, 12, 10};
  std::string support = "0:4,1:5,0:3";

  void attach(CLI::App* app) {
    app->add_option("--n1", sim.n1, "group 1 size")->capture_default_str();
    app->add_option("--n2", sim.n2, "group 2 size")->capture_default_str();
    app->add_option("--dims", dims, "tensor dims, comma separated")->delimiter(',');
    app->add_option("--mu1", sim.mu1, "group 1 mean")->capture_default_str();
    app->add_option("--mu2", sim.mu2, "group 2 mean")->capture_default_str();
    app->add_option("--support", support, "per-mode first:last (0-based, half-open)")
        ->capture_default_str();
    app->add_option("--train-fraction", sim.train_fraction, "training share")->capture_default_str();
    app->add_option("--seed", sim.seed, "random seed")->capture_default_str();
  }

  SimConfig resolve() const {
    SimConfig s = sim;
    s.dims = dims;
    s.support.clear();
    std::stringstream ss(support);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw HyperparamError("support ranges look like first:last");
      s.support.emplace_back(std::stoul(item.substr(0, colon)), std::stoul(item.substr(colon + 1)));
    }
    return s;
  }
};

inline FittedModel finish_model(const Dataset& data, const FitReport& rep, int draws,
                                std::ostream& err) {
  FittedModel m{rep.state, rep.hp, 0.5, draws, rep.hp.seed, rep.elbo_trace};
  if (data.single_class()) {
    err << "warning: training labels hold one class; threshold left at 0.5\n";
    return m;
  }
  const Vector p = Predictor(m).probabilities(data.covariates);
  const std::vector<double> scores(p.data(), p.data() + p.size());
  m.threshold = youden_threshold(scores, data.labels);
  return m;
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Variational Bayesian logistic tensor regression"};
  app.require_subcommand(1);

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "generate a synthetic two-group dataset");
  cli_detail::SimFlags sim_flags;
  sim_flags.attach(sim_cmd);
  std::string sim_out, sim_truth;
  sim_cmd->add_option("--out", sim_out, "dataset file (VTNS)")->required();
  sim_cmd->add_option("--truth", sim_truth, "true coefficient tensor (JSON)");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "fit the model and choose a threshold");
  cli_detail::FitFlags fit_flags;
  fit_flags.attach(fit_cmd);
  std::string fit_data, fit_out;
  int fit_draws = 1000;
  fit_cmd->add_option("--data", fit_data, "training dataset")->required();
  fit_cmd->add_option("--out", fit_out, "model file (JSON)")->required();
  fit_cmd->add_option("--draws", fit_draws, "predictive draws J")->capture_default_str();

  // rank-select
  auto* rs_cmd = app.add_subcommand("rank-select", "fit several ranks, keep the largest bound");
  cli_detail::FitFlags rs_flags;
  rs_flags.attach(rs_cmd);
  std::string rs_data, rs_out;
  std::vector<std::size_t> rs_ranks{1, 2, 3};
  int rs_draws = 1000;
  rs_cmd->add_option("--data", rs_data, "training dataset")->required();
  rs_cmd->add_option("--ranks", rs_ranks, "candidate ranks")->delimiter(',')->capture_default_str();
  rs_cmd->add_option("--out", rs_out, "model file for the chosen rank");
  rs_cmd->add_option("--draws", rs_draws, "predictive draws J")->capture_default_str();

  // predict
  auto* pred_cmd = app.add_subcommand("predict", "class probabilities and labels");
  std::string pred_model, pred_data, pred_out;
  pred_cmd->add_option("--model", pred_model, "model file")->required();
  pred_cmd->add_option("--data", pred_data, "dataset")->required();
  pred_cmd->add_option("--out", pred_out, "scores CSV (id,probability,label)")->required();

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "classification metrics on labelled data");
  std::string eval_model, eval_data, eval_out;
  eval_cmd->add_option("--model", eval_model, "model file")->required();
  eval_cmd->add_option("--data", eval_data, "dataset")->required();
  eval_cmd->add_option("--out", eval_out, "metrics JSON (stdout when absent)");

  // experiment
  auto* exp_cmd = app.add_subcommand("experiment", "replicated simulate / fit / evaluate runs");
  cli_detail::SimFlags exp_sim;
  exp_sim.attach(exp_cmd);
  cli_detail::FitFlags exp_fit;
  // --seed belongs to the simulation; the fit seed is derived per replication.
  exp_fit.hp.rank = 3;
  exp_cmd->add_option("--rank", exp_fit.hp.rank, "rank when --ranks is empty")->capture_default_str();
  exp_cmd->add_option("--formula-mode", exp_fit.formula, "printed | derived")->capture_default_str();
  exp_cmd->add_option("--log-phi", exp_fit.log_phi, "printed | digamma")->capture_default_str();
  exp_cmd->add_option("--moments", exp_fit.moments, "analytic | monte_carlo")->capture_default_str();
  exp_cmd->add_option("--epsilon", exp_fit.hp.epsilon, "bound tolerance")->capture_default_str();
  exp_cmd->add_option("--max-iters", exp_fit.hp.max_iters, "maximum sweeps")->capture_default_str();
  exp_cmd->add_option("--init-scale", exp_fit.hp.init_scale, "sd of initial margin means")
      ->capture_default_str();
  exp_cmd->add_option("--restarts", exp_fit.hp.restarts, "seeded starts, best bound kept")
      ->capture_default_str();
  exp_cmd->add_option("--threads", exp_fit.hp.threads, "worker threads");
  ExperimentOptions exp_opt;
  std::string exp_out, exp_timing;
  exp_cmd->add_option("--replications", exp_opt.replications, "replications")->capture_default_str();
  exp_cmd->add_option("--ranks", exp_opt.ranks, "candidate ranks (empty: fixed --rank)")
      ->delimiter(',');
  exp_cmd->add_option("--activity-threshold", exp_opt.activity_threshold,
                      "|w| above this counts as active")
      ->capture_default_str();
  exp_cmd->add_option("--draws", exp_opt.draws, "predictive draws J")->capture_default_str();
  exp_cmd->add_option("--out", exp_out, "report JSON (stdout when absent)");
  exp_cmd->add_option("--timing", exp_timing, "per-replication wall times (JSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    if (*sim_cmd) {
      const SimConfig cfg = sim_flags.resolve();
      const SimData sd = generate(cfg);
      save_dataset(sim_out, sd.data);
      if (!sim_truth.empty()) detail::write_text(sim_truth, to_json(sd.truth).dump(1) + "\n");
      out << "wrote " << sd.data.size() << " samples of dims " << dims_to_string(cfg.dims) << "\n";
    } else if (*fit_cmd) {
      const Hyperparams hp = fit_flags.resolve();
      const Dataset data = load_dataset(fit_data);
      const FitReport rep = fit(data, hp);
      for (std::size_t t = 0; t < rep.elbo_trace.size(); ++t) {
        out << t << " " << format_double(rep.elbo_trace[t]) << "\n";
      }
      out << (rep.converged ? "converged" : "stopped") << " after " << rep.iterations
          << " sweeps\n";
      err << "fit time " << rep.wall_seconds << " s\n";
      save_model(fit_out, cli_detail::finish_model(data, rep, fit_draws, err));
    } else if (*rs_cmd) {
      const Hyperparams hp = rs_flags.resolve();
      const Dataset data = load_dataset(rs_data);
      const RankSelection sel = select_rank(data, hp, rs_ranks);
      json fits = json::array();
      for (const auto& f : sel.fits) {
        if (f.report) {
          fits.push_back({{"rank", f.rank},
                          {"elbo", f.report->final_elbo()},
                          {"iterations", f.report->iterations},
                          {"converged", f.report->converged}});
        } else {
          fits.push_back({{"rank", f.rank}, {"error", f.error}});
        }
      }
      out << json{{"best_rank", sel.best_rank}, {"fits", fits}}.dump(1) << "\n";
      if (!rs_out.empty()) {
        save_model(rs_out, cli_detail::finish_model(data, sel.best(), rs_draws, err));
      }
    } else if (*pred_cmd) {
      const FittedModel model = load_model(pred_model);
      const Dataset data = load_dataset(pred_data);
      const Predictor pred(model);
      const Vector p = pred.probabilities(data.covariates);
      std::vector<int> labels(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) {
        labels[i] = p(static_cast<Eigen::Index>(i)) > model.threshold ? 1 : -1;
      }
      detail::write_text(pred_out, scores_csv(p, labels));
    } else if (*eval_cmd) {
      const FittedModel model = load_model(eval_model);
      const Dataset data = load_dataset(eval_data);
      const Vector p = Predictor(model).probabilities(data.covariates);
      std::vector<int> labels(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) {
        labels[i] = p(static_cast<Eigen::Index>(i)) > model.threshold ? 1 : -1;
      }
      const ClassMetrics m = classification_metrics(data.labels, labels);
      const std::vector<double> scores(p.data(), p.data() + p.size());
      const json a = data.single_class() ? json(nullptr) : json(auc(scores, data.labels));
      const std::string text = metrics_json(m, a).dump(1) + "\n";
      if (eval_out.empty()) {
        out << text;
      } else {
        detail::write_text(eval_out, text);
      }
    } else if (*exp_cmd) {
      const SimConfig cfg = exp_sim.resolve();
      const Hyperparams hp = exp_fit.resolve();
      const MetricsReport rep = run_experiment(cfg, hp, exp_opt);
      const std::string text = to_json(rep).dump(1) + "\n";
      if (exp_out.empty()) {
        out << text;
      } else {
        detail::write_text(exp_out, text);
      }
      json timing = json::array();
      for (const auto& r : rep.replications) timing.push_back({{"index", r.index}, {"ctime", r.ctime}});
      if (!exp_timing.empty()) detail::write_text(exp_timing, timing.dump(1) + "\n");
      for (const auto& r : rep.replications) {
        err << "replication " << r.index << (r.ok ? "" : " failed") << " ctime " << r.ctime << " s\n";
      }
    }
  } catch (const NumericalBreakdown& e) {
    err << "numerical breakdown: " << e.what() << "\n";
    return 3;
  } catch (const HyperparamError& e) {
    err << "bad option: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace vbltr
