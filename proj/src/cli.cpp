// SPDX-License-Identifier: Apache-2.0

#include "ssmb/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "ssmb/eval.hpp"
#include "ssmb/train.hpp"

namespace ssmb {
namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw Error("cannot open " + path.string() + " for writing");
  file << text;
  if (!file) throw Error("failed writing " + path.string());
}

std::string fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

struct GenArgs {
  std::string out;
  std::size_t identities = 20;
  std::size_t samples = 5;
  std::uint64_t seed = 7;
  std::string modalities = "vis,nir,thermal,sketch,lowres";
};

struct PretrainArgs {
  std::string data, out;
  PretrainConfig config;
};

struct TrainArgs {
  std::string data, teacher, out, gate_mode = "scaled";
  TrainConfig config;
};

struct EvalArgs {
  std::string data, model, report, csv;
};

struct RoutesArgs {
  std::string data, model, out;
};

int run_gen(const GenArgs& a, std::ostream& out) {
  GenerateOptions options;
  options.seed = a.seed;
  options.num_identities = a.identities;
  options.samples_per_id = a.samples;
  options.modalities = parse_modality_list(a.modalities);
  const auto manifest = generate_dataset(options, a.out);
  out << "wrote " << manifest.records.size() << " images for " << a.identities << " identities to " << a.out << '\n';
  return kExitOk;
}

int run_pretrain(const PretrainArgs& a, std::ostream& out) {
  const auto store = ImageStore::open(a.data);
  auto result = pretrain_teacher(store, a.config);
  save_checkpoint(result.model, a.out);
  out << "train accuracy: " << fixed(result.train_accuracy, 4) << '\n';
  out << "final loss: " << fixed(result.epoch_loss.back(), 6) << '\n';
  out << "checkpoint: " << a.out << '\n';
  return kExitOk;
}

int run_train(TrainArgs a, std::ostream& out) {
  a.config.gate_mode = parse_gate_mode(a.gate_mode);
  const auto store = ImageStore::open(a.data);
  const auto teacher = load_checkpoint(a.teacher);
  RunLog log;
  const auto student = train_student(teacher, store, a.config, &log);
  save_checkpoint(student, a.out);
  log.final_metrics = evaluate(score_protocol(student, store));
  const std::string runlog = a.out + ".runlog";
  write_text(runlog, log.to_text());
  out << "steps: " << log.steps.size() << '\n';
  out << "final loss: " << fixed(log.steps.back().total, 6) << '\n';
  out << "dev eer: " << fixed(log.final_metrics->aggregate.eer, 2) << '\n';
  out << "checkpoint: " << a.out << '\n';
  out << "runlog: " << runlog << '\n';
  return kExitOk;
}

int run_eval(const EvalArgs& a, std::ostream& out) {
  const auto model = load_checkpoint(a.model);
  const auto store = ImageStore::open(a.data);
  const auto report = evaluate(score_protocol(model, store));
  write_text(a.report, report.to_text());
  if (!a.csv.empty()) write_text(a.csv, report.to_csv());
  out << report.to_text();
  return kExitOk;
}

int run_routes(const RoutesArgs& a, std::ostream& out) {
  const auto model = load_checkpoint(a.model);
  const auto store = ImageStore::open(a.data);
  const auto report = inspect_routing(model, store);
  write_text(a.out, report.to_text());
  out << report.to_text();
  return kExitOk;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Switch style modulation blocks: data, training and evaluation", "ssmb"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic multi-modality dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--identities", gen.identities, "Number of identities")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--samples", gen.samples, "Samples per identity per modality")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed, "Generation seed");
  gen_cmd->add_option("--modalities", gen.modalities, "Comma-separated modality list");

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Pretrain the teacher backbone on source-modality images");
  pre_cmd->add_option("--data", pre.data, "Dataset directory")->required();
  pre_cmd->add_option("--out", pre.out, "Output checkpoint")->required();
  pre_cmd->add_option("--epochs", pre.config.epochs, "Epochs")->check(CLI::PositiveNumber);
  pre_cmd->add_option("--lr", pre.config.lr, "Learning rate")->check(CLI::PositiveNumber);
  pre_cmd->add_option("--batch", pre.config.batch_size, "Batch size")->check(CLI::PositiveNumber);
  pre_cmd->add_option("--seed", pre.config.seed, "Seed");

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "Train SSMB blocks on top of a frozen teacher");
  tr_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  tr_cmd->add_option("--teacher", tr.teacher, "Teacher checkpoint")->required();
  tr_cmd->add_option("--out", tr.out, "Output student checkpoint")->required();
  tr_cmd->add_option("--experts", tr.config.num_experts, "Experts per block")->check(CLI::PositiveNumber);
  tr_cmd->add_option("--gate-mode", tr.gate_mode, "Gate mode")->check(CLI::IsMember({"scaled", "value-preserving"}));
  tr_cmd->add_option("--gamma", tr.config.gamma, "Teacher-student loss weight")->check(CLI::Range(0.0, 1.0));
  tr_cmd->add_option("--alpha", tr.config.alpha, "Load-balance loss weight")->check(CLI::NonNegativeNumber);
  tr_cmd->add_option("--margin", tr.config.margin, "Contrastive margin")->check(CLI::Range(-1.0, 1.0));
  tr_cmd->add_option("--lr", tr.config.lr, "Learning rate")->check(CLI::PositiveNumber);
  tr_cmd->add_option("--epochs", tr.config.epochs, "Epochs")->check(CLI::PositiveNumber);
  tr_cmd->add_option("--batch", tr.config.batch_size, "Pair batch size")->check(CLI::Range(2, 1 << 20));
  tr_cmd->add_option("--seed", tr.config.seed, "Seed");

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Score the dev protocol and write a metrics report");
  ev_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  ev_cmd->add_option("--model", ev.model, "Model checkpoint")->required();
  ev_cmd->add_option("--report", ev.report, "Report path")->required();
  ev_cmd->add_option("--csv", ev.csv, "Optional CSV report path");

  RoutesArgs ro;
  auto* ro_cmd = app.add_subcommand("routes", "Per-modality expert histograms over dev probes");
  ro_cmd->add_option("--data", ro.data, "Dataset directory")->required();
  ro_cmd->add_option("--model", ro.model, "Student checkpoint")->required();
  ro_cmd->add_option("--out", ro.out, "Output path")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return run_gen(gen, out);
    if (pre_cmd->parsed()) return run_pretrain(pre, out);
    if (tr_cmd->parsed()) return run_train(tr, out);
    if (ev_cmd->parsed()) return run_eval(ev, out);
    if (ro_cmd->parsed()) return run_routes(ro, out);
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const DataError& e) {
    err << "error: data: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace ssmb
