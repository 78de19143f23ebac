// hexform: an addition/multiplication-only transformer pipeline with a
// two-party encrypted-inference protocol.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage, 3 contract violation.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "hexform/approx.hpp"
#include "hexform/checkpoint.hpp"
#include "hexform/he.hpp"
#include "hexform/protocol.hpp"

using namespace hexform;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitContract = 3;

uint64_t default_seed() {
  if (const char* env = std::getenv("HEXFORM_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  return 0;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

struct TaskOptions {
  std::string task = "classify";
  int vocab_size = 32;
  int seq_len = 16;
  int num_classes = 4;
  int train_size = 384;
  int dev_size = 128;
  std::string tsv_path;  // optional override of the synthetic task
};

struct ModelOptions {
  int layers = 2;
  int hidden = 32;
  int heads = 2;
  int ffn = 64;
};

void add_task_flags(CLI::App* cmd, TaskOptions* t) {
  cmd->add_option("--task", t->task, "classify | regress | tag")
      ->check(CLI::IsMember({"classify", "regress", "tag"}));
  cmd->add_option("--vocab", t->vocab_size, "synthetic vocabulary size");
  cmd->add_option("--seq-len", t->seq_len, "sequence length");
  cmd->add_option("--classes", t->num_classes, "label count");
  cmd->add_option("--train-size", t->train_size, "training examples");
  cmd->add_option("--dev-size", t->dev_size, "dev examples");
  cmd->add_option("--data", t->tsv_path, "TSV file instead of synthetic data");
}

void add_model_flags(CLI::App* cmd, ModelOptions* m) {
  cmd->add_option("--layers", m->layers, "encoder layers");
  cmd->add_option("--hidden", m->hidden, "hidden size");
  cmd->add_option("--heads", m->heads, "attention heads");
  cmd->add_option("--ffn", m->ffn, "feed-forward size");
}

struct PreparedTask {
  Dataset train, dev;
  std::vector<std::string> vocab;
  TaskKind kind = TaskKind::Classify;
  int num_outputs = 0;
};

PreparedTask prepare_task(const TaskOptions& t, uint64_t seed) {
  PreparedTask out;
  out.kind = task_from_name(t.task);
  if (!t.tsv_path.empty()) {
    auto loaded = load_tsv(t.tsv_path, {.kind = out.kind}, t.seq_len);
    // deterministic split: the last tenth becomes dev
    size_t split = loaded.dataset.items.size() -
                   std::max<size_t>(1, loaded.dataset.items.size() / 10);
    out.train.kind = out.dev.kind = out.kind;
    out.train.num_classes = out.dev.num_classes = loaded.dataset.num_classes;
    for (size_t i = 0; i < loaded.dataset.items.size(); ++i) {
      (i < split ? out.train : out.dev).items.push_back(loaded.dataset.items[i]);
    }
    out.vocab = loaded.vocab.tokens;
    out.num_outputs =
        out.kind == TaskKind::Regress ? 1 : loaded.dataset.num_classes;
    return out;
  }
  SyntheticTaskSpec spec;
  spec.kind = out.kind;
  spec.vocab_size = t.vocab_size;
  spec.seq_len = t.seq_len;
  spec.num_classes = t.num_classes;
  spec.train_size = t.train_size;
  spec.dev_size = t.dev_size;
  auto [train, dev] = gen_synthetic(spec, seed);
  out.train = std::move(train);
  out.dev = std::move(dev);
  out.vocab = Vocab::standard(t.vocab_size).tokens;
  out.num_outputs = out.kind == TaskKind::Regress ? 1 : t.num_classes;
  return out;
}

TransformerModel build_model(const ModelOptions& m, const PreparedTask& task,
                             int seq_len, double mask_value, uint64_t seed) {
  ModelConfig cfg;
  cfg.num_layers = m.layers;
  cfg.hidden_size = m.hidden;
  cfg.num_heads = m.heads;
  cfg.ffn_size = m.ffn;
  cfg.vocab_size = static_cast<int>(task.vocab.size());
  cfg.max_seq_len = seq_len;
  cfg.task = task.kind;
  cfg.num_outputs = task.num_outputs;
  cfg.mask_value = mask_value;
  std::mt19937_64 rng(seed);
  return TransformerModel(cfg, rng);
}

struct FinetuneOutcome {
  std::vector<std::pair<std::string, std::string>> report;
  WorkflowResult workflow;
  std::optional<TransformerModel> final_model;
  std::vector<std::string> vocab;
};

FinetuneOutcome run_finetune(const TaskOptions& topt, const ModelOptions& mopt,
                             const std::string& estimator_dir,
                             Schedule schedule, double mask_value,
                             const TrainHyper& hyper,
                             const DistillOptions& distill, uint64_t seed,
                             bool with_reference_columns) {
  auto task = prepare_task(topt, seed);
  auto estimator =
      std::make_shared<SoftmaxEstimator>(ckpt::load_estimator(estimator_dir));

  FinetuneOutcome out;
  out.vocab = task.vocab;
  out.report.emplace_back("task", topt.task);
  out.report.emplace_back("schedule", schedule_name(schedule));
  out.report.emplace_back("seed", std::to_string(seed));
  out.report.emplace_back("mask_value", fmt(mask_value));
  out.report.emplace_back("weight_decay", fmt(hyper.weight_decay));

  TransformerModel base = build_model(mopt, task, topt.seq_len, mask_value, seed);

  // The task-trained exact model stands in for the pretrained checkpoint the
  // approximation schedules start from.
  TransformerModel pretrained = base.clone();
  auto fit_base = fit(pretrained, task.train, task.dev, hyper);
  out.report.emplace_back("metric_baseline", fmt(fit_base.final_dev_metric));

  if (with_reference_columns) {
    // reference column: GELU swapped for ReLU, everything else exact
    auto relu_only = pretrained.clone();
    relu_only.config().activation = Activation::Relu;
    auto fit_relu = fit(relu_only, task.train, task.dev, hyper);
    out.report.emplace_back("metric_relu", fmt(fit_relu.final_dev_metric));
  }

  TransformerModel work = pretrained.clone();
  WorkflowHyper whyper;
  whyper.train = hyper;
  whyper.distill = distill;
  out.workflow =
      run_workflow(work, estimator, task.train, task.dev, schedule, whyper);
  for (const auto& [k, v] : out.workflow.report) out.report.emplace_back(k, fmt(v));

  work.absorb_attention_scale();
  out.final_model = std::move(work);
  return out;
}

void print_report(const std::vector<std::pair<std::string, std::string>>& rows) {
  for (const auto& [k, v] : rows) std::cout << k << "=" << v << "\n";
}

int dispatch(int argc, char** argv) {
  CLI::App app{"addition/multiplication-only transformer pipeline with "
               "encrypted two-party inference"};
  app.require_subcommand(1);

  // ---- train-estimator ----
  auto* cmd_est = app.add_subcommand(
      "train-estimator", "fit the softmax estimation network's reciprocal T");
  int est_dim = 16;
  uint64_t est_seed = default_seed();
  std::string est_out = "estimator";
  cmd_est->add_option("--dim", est_dim, "attention-row length");
  cmd_est->add_option("--seed", est_seed, "rng seed");
  cmd_est->add_option("--out", est_out, "output checkpoint directory");

  // ---- finetune ----
  auto* cmd_ft = app.add_subcommand(
      "finetune", "run an approximation schedule on a task");
  TaskOptions ft_task;
  ModelOptions ft_model;
  std::string ft_schedule = "two-stages";
  std::string ft_estimator;
  std::string ft_out = "run";
  double ft_mask = -3.0;
  TrainHyper ft_hyper;
  uint64_t ft_seed = default_seed();
  add_task_flags(cmd_ft, &ft_task);
  add_model_flags(cmd_ft, &ft_model);
  cmd_ft->add_option("--schedule", ft_schedule,
                     "two-stages | joint-s | joint-ln | joint-s-ln")
      ->check(CLI::IsMember({"two-stages", "joint-s", "joint-ln", "joint-s-ln"}));
  cmd_ft->add_option("--estimator", ft_estimator, "estimator checkpoint dir")
      ->required();
  cmd_ft->add_option("--out", ft_out, "output directory");
  cmd_ft->add_option("--mask-value", ft_mask, "finite attention mask value");
  cmd_ft->add_option("--weight-decay", ft_hyper.weight_decay, "AdamW decay");
  cmd_ft->add_option("--batch", ft_hyper.batch, "batch size");
  cmd_ft->add_option("--lr", ft_hyper.lr, "learning rate");
  cmd_ft->add_option("--epochs", ft_hyper.epochs, "training epochs");
  DistillOptions ft_distill;
  cmd_ft->add_option("--distill-steps", ft_distill.steps, "LN-distill steps");
  cmd_ft->add_option("--distill-lr", ft_distill.lr, "LN-distill learning rate");
  cmd_ft->add_option("--seed", ft_seed, "rng seed");

  // ---- sweep ----
  auto* cmd_sweep = app.add_subcommand(
      "sweep", "sweep mask-value or weight-decay and tabulate the outcome");
  TaskOptions sw_task;
  ModelOptions sw_model;
  std::string sw_param = "mask-value";
  std::vector<double> sw_values;
  std::string sw_estimator;
  TrainHyper sw_hyper;
  uint64_t sw_seed = default_seed();
  add_task_flags(cmd_sweep, &sw_task);
  add_model_flags(cmd_sweep, &sw_model);
  cmd_sweep->add_option("--param", sw_param, "mask-value | weight-decay")
      ->check(CLI::IsMember({"mask-value", "weight-decay"}));
  cmd_sweep->add_option("--values", sw_values, "sweep points")
      ->delimiter(',')
      ->required();
  cmd_sweep->add_option("--estimator", sw_estimator, "estimator checkpoint dir")
      ->required();
  cmd_sweep->add_option("--batch", sw_hyper.batch, "batch size");
  cmd_sweep->add_option("--lr", sw_hyper.lr, "learning rate");
  cmd_sweep->add_option("--epochs", sw_hyper.epochs, "training epochs");
  cmd_sweep->add_option("--weight-decay", sw_hyper.weight_decay,
                        "AdamW decay (fixed during mask sweeps)");
  DistillOptions sw_distill;
  cmd_sweep->add_option("--distill-steps", sw_distill.steps, "LN-distill steps");
  cmd_sweep->add_option("--distill-lr", sw_distill.lr, "LN-distill learning rate");
  cmd_sweep->add_option("--seed", sw_seed, "rng seed");

  // ---- serve ----
  auto* cmd_serve = app.add_subcommand(
      "serve", "host an HE-ready checkpoint for encrypted sessions");
  std::string srv_checkpoint;
  uint16_t srv_port = 7690;
  int srv_degree = 8192;
  int srv_scale_bits = 30;
  std::vector<int> srv_coeffs;
  std::string srv_backend = "shadow";
  int srv_max_sessions = 0;
  cmd_serve->add_option("--checkpoint", srv_checkpoint, "model checkpoint dir")
      ->required();
  cmd_serve->add_option("--port", srv_port, "TCP port (0 = ephemeral)");
  cmd_serve->add_option("--he-degree", srv_degree, "polynomial modulus degree");
  cmd_serve->add_option("--he-coeffs", srv_coeffs,
                        "coefficient modulus bit chain")
      ->delimiter(',');
  cmd_serve->add_option("--scale-bits", srv_scale_bits, "fixed-point scale");
  cmd_serve->add_option("--backend", srv_backend, "shadow | fixedpoint")
      ->check(CLI::IsMember({"shadow", "fixedpoint"}));
  cmd_serve->add_option("--max-sessions", srv_max_sessions,
                        "stop after N sessions (0 = run forever)");

  // ---- query ----
  auto* cmd_query = app.add_subcommand(
      "query", "run the client side of a session against a server");
  std::string q_host = "127.0.0.1";
  uint16_t q_port = 7690;
  std::string q_text;
  uint64_t q_key_seed = default_seed() + 1;
  cmd_query->add_option("--host", q_host, "server host");
  cmd_query->add_option("--port", q_port, "server port");
  cmd_query->add_option("--text", q_text, "whitespace-tokenized query")
      ->required();
  cmd_query->add_option("--key-seed", q_key_seed, "client key seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (cmd_est->parsed()) {
    auto [est, report] = train_estimator(est_dim, est_seed);
    ckpt::save_estimator(est_out, est);
    std::vector<std::pair<std::string, std::string>> rows = {
        {"dim", std::to_string(est_dim)},
        {"seed", std::to_string(est_seed)},
        {"steps_used", std::to_string(report.steps_used)},
        {"train_mse", fmt(report.train_mse)},
        {"heldout_mse", fmt(report.heldout_mse)},
        {"softmax_mse_heldout", fmt(report.softmax_mse_heldout)},
        {"reached_target", report.reached_target ? "1" : "0"},
    };
    ckpt::write_report(est_out + "/report.txt", rows);
    print_report(rows);
    return kExitOk;
  }

  if (cmd_ft->parsed()) {
    ft_hyper.seed = ft_seed;
    auto outcome = run_finetune(ft_task, ft_model, ft_estimator,
                                schedule_from_name(ft_schedule), ft_mask,
                                ft_hyper, ft_distill, ft_seed,
                                /*with_reference_columns=*/true);
    ckpt::save_model(ft_out + "/model", *outcome.final_model, outcome.vocab);
    ckpt::write_report(ft_out + "/report.txt", outcome.report);
    print_report(outcome.report);
    return kExitOk;
  }

  if (cmd_sweep->parsed()) {
    if (sw_values.empty()) throw InvalidSpec("sweep needs --values");
    sw_hyper.seed = sw_seed;
    for (double value : sw_values) {
      double mask = sw_param == "mask-value" ? value : -3.0;
      TrainHyper hyper = sw_hyper;
      if (sw_param == "weight-decay") hyper.weight_decay = value;
      auto outcome = run_finetune(sw_task, sw_model, sw_estimator,
                                  Schedule::TwoStages, mask, hyper, sw_distill,
                                  sw_seed,
                                  /*with_reference_columns=*/false);
      std::cout << "param=" << sw_param << " value=" << fmt(value)
                << " dev_metric=" << fmt(outcome.workflow.metric_final)
                << " max_preln_act=" << fmt(outcome.workflow.max_preln_abs)
                << " distill_mse=" << fmt(outcome.workflow.distill.heldout_mse)
                << "\n";
    }
    return kExitOk;
  }

  if (cmd_serve->parsed()) {
    he::HeParams params;
    params.poly_modulus_degree = srv_degree;
    params.scale_bits = srv_scale_bits;
    if (!srv_coeffs.empty()) {
      params.coeff_modulus_bits = srv_coeffs;
    } else {
      params.coeff_modulus_bits = he::HeParams::deep().coeff_modulus_bits;
    }
    params.validate();

    auto loaded = ckpt::load_model(srv_checkpoint);
    std::string why;
    if (!he::he_ready(loaded.model, &why)) {
      std::cerr << "model not HE-ready: " << why << "\n";
      return kExitContract;
    }
    he::Backend backend = srv_backend == "shadow" ? he::Backend::Shadow
                                                  : he::Backend::FixedPoint;
    proto::InferenceServer server(std::move(loaded.model), loaded.vocab,
                                  params, backend);
    proto::TcpListener listener(srv_port);
    std::cout << "listening on port " << listener.port() << std::endl;
    std::vector<std::thread> sessions;
    int served = 0;
    while (srv_max_sessions == 0 || served < srv_max_sessions) {
      auto transport = listener.accept_one();
      ++served;
      sessions.emplace_back([t = std::move(transport), &server] {
        (void)server.serve_session(*t);
      });
    }
    for (auto& s : sessions) s.join();
    return kExitOk;
  }

  if (cmd_query->parsed()) {
    auto transport = proto::tcp_connect(q_host, q_port);
    proto::InferenceClient client(*transport, q_key_seed);
    auto outcome = client.query_text(q_text);
    for (int64_t i = 0; i < outcome.logits.numel(); ++i) {
      std::cout << "logit_" << i << "=" << fmt(outcome.logits.data()[i]) << "\n";
    }
    if (client.task_kind() != TaskKind::Regress) {
      int best = 0;
      for (int64_t i = 1; i < outcome.logits.numel(); ++i) {
        if (outcome.logits.data()[i] > outcome.logits.data()[best]) {
          best = static_cast<int>(i);
        }
      }
      std::cout << "prediction=" << best << "\n";
    }
    std::cout << "max_mult_depth=" << outcome.max_mult_depth << "\n";
    std::cout << "relu_round_trips=" << outcome.relu_round_trips << "\n";
    return kExitOk;
  }

  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const InvalidSpec& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const BadConfig& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "unexpected failure: " << e.what() << "\n";
    return kExitRuntime;
  }
}
