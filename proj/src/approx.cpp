#include "hexform/approx.hpp"

#include <algorithm>
#include <cmath>

#include "hexform/optim.hpp"

namespace hexform {

const char* schedule_name(Schedule s) {
  switch (s) {
    case Schedule::TwoStages: return "two-stages";
    case Schedule::JointFtS: return "joint-s";
    case Schedule::JointFtLn: return "joint-ln";
    case Schedule::JointFtSLn: return "joint-s-ln";
  }
  return "?";
}

Schedule schedule_from_name(const std::string& name) {
  if (name == "two-stages") return Schedule::TwoStages;
  if (name == "joint-s") return Schedule::JointFtS;
  if (name == "joint-ln") return Schedule::JointFtLn;
  if (name == "joint-s-ln") return Schedule::JointFtSLn;
  throw InvalidSpec("unknown schedule '" + name + "'");
}

void replace_ops(TransformerModel& model,
                 std::shared_ptr<SoftmaxEstimator> estimator) {
  model.config().activation = Activation::Relu;
  model.config().softmax = SoftmaxKind::Estimated;
  if (!model.estimator()) {
    model.attach_estimator(std::move(estimator));
  }
}

namespace {

// Runs forwards with norm-site capture and hands each (pre-LN input, exact
// output) pair to `consume(site_index, x, teacher)`.
template <typename F>
void for_each_site_io(const TransformerModel& model,
                      const std::vector<const Example*>& examples, F consume) {
  int n_sites = static_cast<int>(model.norm_sites().size());
  for (const Example* ex : examples) {
    ForwardHooks hooks;
    hooks.capture_norm_io = true;
    {
      NoGradGuard ng;
      (void)model.forward_tokens(ex->tokens, ex->mask, &hooks);
    }
    if (static_cast<int>(hooks.norm_io.size()) != n_sites) {
      throw BadConfig("norm-site capture needs the exact LN path");
    }
    for (int s = 0; s < n_sites; ++s) {
      consume(s, hooks.norm_io[s].first, hooks.norm_io[s].second);
    }
  }
}

std::vector<const Example*> pointers_to(const Dataset& data, size_t limit) {
  std::vector<const Example*> out;
  for (size_t i = 0; i < data.items.size() && i < limit; ++i) {
    out.push_back(&data.items[i]);
  }
  return out;
}

}  // namespace

std::pair<Tensor, Tensor> affine_from_moments(const Tensor& gamma,
                                              const Tensor& beta,
                                              std::span<const double> mean,
                                              std::span<const double> var) {
  int h = static_cast<int>(gamma.numel());
  std::vector<double> gamma_t(h), beta_t(h);
  std::span<const double> g = gamma.data(), b = beta.data();
  for (int j = 0; j < h; ++j) {
    gamma_t[j] = g[j] / std::sqrt(std::max(var[j], 0.0) + kLnEpsilon);
    beta_t[j] = b[j] - gamma_t[j] * mean[j];
  }
  return {Tensor::from_data({h}, std::move(gamma_t), true),
          Tensor::from_data({h}, std::move(beta_t), true)};
}

void init_affine_from_calibration(
    TransformerModel& model, const std::vector<const Example*>& calibration) {
  if (calibration.empty()) {
    throw EmptyCalibration("need at least one calibration example");
  }
  int h = model.config().hidden_size;
  int n_sites = static_cast<int>(model.norm_sites().size());
  std::vector<std::vector<double>> sum(n_sites, std::vector<double>(h, 0.0));
  std::vector<std::vector<double>> sumsq(n_sites, std::vector<double>(h, 0.0));
  std::vector<int64_t> count(n_sites, 0);

  for_each_site_io(model, calibration,
                   [&](int s, const Tensor& x, const Tensor&) {
                     std::span<const double> xv = x.data();
                     int64_t rows = x.numel() / h;
                     for (int64_t r = 0; r < rows; ++r) {
                       for (int j = 0; j < h; ++j) {
                         double v = xv[r * h + j];
                         sum[s][j] += v;
                         sumsq[s][j] += v * v;
                       }
                     }
                     count[s] += rows;
                   });

  for (int s = 0; s < n_sites; ++s) {
    NormSite& site = model.norm_sites()[s];
    std::vector<double> m(h), v(h);
    for (int j = 0; j < h; ++j) {
      m[j] = sum[s][j] / static_cast<double>(count[s]);
      v[j] = sumsq[s][j] / static_cast<double>(count[s]) - m[j] * m[j];
    }
    auto [gamma_t, beta_t] = affine_from_moments(site.gamma, site.beta, m, v);
    site.gamma_t = gamma_t;
    site.beta_t = beta_t;
  }
}

double affine_vs_exact_mse(const TransformerModel& model, const Dataset& data) {
  NoGradGuard ng;
  double acc = 0.0;
  int64_t terms = 0;
  auto ptrs = pointers_to(data, data.items.size());
  for_each_site_io(model, ptrs,
                   [&](int s, const Tensor& x, const Tensor& teacher) {
                     const NormSite& site = model.norm_sites()[s];
                     if (!site.gamma_t.defined()) {
                       throw MissingAffineNorm("site " + site.name);
                     }
                     auto student =
                         affine_norm_forward(x, site.gamma_t, site.beta_t);
                     acc += mse_loss(student, teacher).item();
                     ++terms;
                   });
  return acc / static_cast<double>(std::max<int64_t>(1, terms));
}

DistillResult ln_distill(TransformerModel& model, const Dataset& data,
                         const Dataset& heldout, const DistillOptions& opts) {
  if (model.config().norm != NormKind::LayerNorm) {
    throw BadConfig("distillation needs the exact LN teacher in place");
  }
  for (const NormSite& s : model.norm_sites()) {
    if (!s.gamma_t.defined()) {
      throw MissingAffineNorm("attach affine parameters before distilling");
    }
  }

  DistillResult result;
  result.init_heldout_mse = affine_vs_exact_mse(model, heldout);

  std::vector<Tensor> affine_params;
  for (NormSite& s : model.norm_sites()) {
    affine_params.push_back(s.gamma_t);
    affine_params.push_back(s.beta_t);
  }
  AdamW opt(affine_params, {.lr = opts.lr, .weight_decay = 0.0});

  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<int> pick(0,
                                          static_cast<int>(data.items.size()) - 1);
  double last_loss = 0.0;
  for (int step = 0; step < opts.steps; ++step) {
    std::vector<const Example*> batch;
    for (int b = 0; b < opts.batch; ++b) batch.push_back(&data.items[pick(rng)]);

    opt.zero_grad();
    // L = sum over sites of per-site MSE(student, teacher), averaged over
    // the batch
    Tensor loss;
    for_each_site_io(model, batch,
                     [&](int s, const Tensor& x, const Tensor& teacher) {
                       const NormSite& site = model.norm_sites()[s];
                       auto student =
                           affine_norm_forward(x, site.gamma_t, site.beta_t);
                       auto term = mse_loss(student, teacher);
                       loss = loss.defined() ? add(loss, term) : term;
                     });
    loss = scalar_mul(loss, 1.0 / static_cast<double>(opts.batch));
    last_loss = loss.item();
    if (!std::isfinite(last_loss)) {
      throw NonFiniteLoss("distillation loss overflowed; raise weight_decay");
    }
    backward(loss);
    opt.step();
  }
  int n_sites = static_cast<int>(model.norm_sites().size());
  result.train_mse = last_loss / n_sites;
  result.heldout_mse = affine_vs_exact_mse(model, heldout);
  return result;
}

void drop_ln(TransformerModel& model) {
  for (NormSite& s : model.norm_sites()) {
    if (!s.gamma_t.defined()) {
      throw MissingAffineNorm("cannot drop exact LN at site " + s.name);
    }
  }
  for (NormSite& s : model.norm_sites()) {
    s.exact_dropped = true;
    s.gamma = Tensor();
    s.beta = Tensor();
  }
  model.config().norm = NormKind::Affine;
}

WorkflowResult run_workflow(TransformerModel& model,
                            std::shared_ptr<SoftmaxEstimator> estimator,
                            const Dataset& train, const Dataset& dev,
                            Schedule schedule, const WorkflowHyper& hp) {
  if (!estimator) throw BadConfig("workflow needs a trained estimator");
  WorkflowResult result;

  bool joint_s =
      schedule == Schedule::JointFtS || schedule == Schedule::JointFtSLn;
  bool joint_ln =
      schedule == Schedule::JointFtLn || schedule == Schedule::JointFtSLn;

  estimator->set_frozen(!joint_s);
  replace_ops(model, estimator);

  if (joint_ln) {
    // one-pass schedules: affine replaces LN from the start, trained by the
    // task loss; no distillation afterwards
    init_affine_from_calibration(
        model, pointers_to(train, hp.calibration_examples));
    model.config().norm = NormKind::Affine;
    auto fitres = fit(model, train, dev, hp.train);
    result.metric_after_finetune = fitres.final_dev_metric;
    result.max_preln_abs = evaluate(model, dev).max_preln_abs;
    drop_ln(model);
  } else {
    auto fitres = fit(model, train, dev, hp.train);
    result.metric_after_finetune = fitres.final_dev_metric;
    result.max_preln_abs = evaluate(model, dev).max_preln_abs;
    init_affine_from_calibration(
        model, pointers_to(train, hp.calibration_examples));
    result.distill = ln_distill(model, train, dev, hp.distill);
    result.distilled = true;
    drop_ln(model);
  }

  result.metric_final = evaluate(model, dev).metric;
  result.report.emplace_back("metric_relu_s", result.metric_after_finetune);
  result.report.emplace_back("metric_relu_s_l", result.metric_final);
  result.report.emplace_back("max_preln_act", result.max_preln_abs);
  if (result.distilled) {
    result.report.emplace_back("distill_init_mse", result.distill.init_heldout_mse);
    result.report.emplace_back("distill_heldout_mse", result.distill.heldout_mse);
  }
  return result;
}

}  // namespace hexform
