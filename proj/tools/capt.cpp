#include <array>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <limits>
#include <string>

#include <CLI11.hpp>

#include "capt/pipeline.hpp"

namespace {

enum ExitCode : int { kOk = 0, kConfig = 2, kIo = 3, kNumeric = 4 };

double parse_omega(const std::string& s) {
  if (s == "inf" || s == "Inf" || s == "INF") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw capt::ConfigError("not a number: " + s);
  }
  if (used != s.size()) throw capt::ConfigError("not a number: " + s);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capt: articulation estimation from point clouds"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "global seed");
  auto* threads_opt = app.add_option("--threads", threads, "worker threads")->check(CLI::Range(1u, 256u));
  app.add_flag("-q,--quiet", quiet, "suppress progress output");

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::string category, out_dir;
  std::size_t count = 0, n_points = 0;
  auto* cat_opt = gen->add_option("--category", category, "laptop, oven, eyeglasses, ...");
  auto* count_opt = gen->add_option("--count", count, "total samples, split 70/20/10");
  std::array<std::size_t, 3> split_counts{};
  auto* splits_opt = gen->add_option("--splits", split_counts, "explicit train val test counts")->excludes(count_opt);
  auto* npts_opt = gen->add_option("--points", n_points, "points per sample");
  auto* out_opt = gen->add_option("--out", out_dir, "output directory");

  // train
  auto* train = app.add_subcommand("train", "train a model on a generated dataset");
  std::string data_dir, checkpoint, loss_csv;
  bool no_motion = false;
  std::size_t epochs = 0, batch = 0;
  double lr = 0;
  auto* tdata_opt = train->add_option("--data", data_dir, "dataset directory");
  auto* tckpt_opt = train->add_option("--checkpoint", checkpoint, "output checkpoint");
  auto* csv_opt = train->add_option("--loss-csv", loss_csv, "per-step loss log");
  auto* epochs_opt = train->add_option("--epochs", epochs);
  auto* batch_opt = train->add_option("--batch", batch);
  auto* lr_opt = train->add_option("--lr", lr);
  train->add_flag("--no-motion-loss", no_motion, "drop the motion term from the objective");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string split = "test", report;
  std::string omega0_s, omega1_s;
  auto* edata_opt = eval->add_option("--data", data_dir, "dataset directory");
  auto* eckpt_opt = eval->add_option("--checkpoint", checkpoint);
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  auto* report_opt = eval->add_option("--report", report, "output prefix for .json and .txt");
  eval->add_option("--omega0", omega0_s);
  eval->add_option("--omega1", omega1_s, "upper band factor, 'inf' disables the cut");

  // infer
  auto* infer = app.add_subcommand("infer", "predict joints for a single cloud");
  std::string input, ply, json_out;
  auto* ickpt_opt = infer->add_option("--checkpoint", checkpoint);
  infer->add_option("--input", input, "sample file or text with x y z per line")->required();
  infer->add_option("--ply", ply, "write a colored PLY with predicted axes");
  infer->add_option("--json", json_out, "write the result here instead of stdout");
  infer->add_option("--omega0", omega0_s);
  infer->add_option("--omega1", omega1_s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  capt::tune_allocator();
  try {
    capt::RunConfig rc;
    if (!config_path.empty()) capt::load_run_config_file(rc, config_path);
    if (*seed_opt) rc.seed = seed;
    if (*threads_opt) rc.threads = threads;
    rc.verbose = !quiet;
    if (!omega0_s.empty()) rc.voting.omega0 = parse_omega(omega0_s);
    if (!omega1_s.empty()) rc.voting.omega1 = parse_omega(omega1_s);
    if (*tdata_opt || *edata_opt) rc.dataset_dir = data_dir;
    if (*tckpt_opt || *eckpt_opt || *ickpt_opt) rc.checkpoint = checkpoint;

    if (*gen) {
      if (*cat_opt) rc.category = category;
      if (*count_opt) rc.count = count;
      if (*npts_opt) rc.n_points = n_points;
      if (*out_opt) rc.dataset_dir = out_dir;
      if (*splits_opt) rc.split_counts = capt::SplitCounts{split_counts[0], split_counts[1], split_counts[2]};
      const auto m = capt::cmd_gen(rc);
      std::cout << (std::filesystem::path(m.root) / "manifest.json").string() << "\n";
    } else if (*train) {
      if (*csv_opt) rc.loss_csv = loss_csv;
      if (*epochs_opt) rc.train.epochs = epochs;
      if (*batch_opt) rc.train.batch = batch;
      if (*lr_opt) rc.train.adam.lr = lr;
      if (no_motion) rc.weights.motion = 0;
      const auto out = capt::cmd_train(rc);
      std::printf("checkpoint %s\nbest epoch %zu\ntrain time %.1f s\n", out.checkpoint.c_str(),
                  out.result.best_epoch + 1, out.result.seconds);
    } else if (*eval) {
      rc.split = split;
      if (*report_opt) rc.report = report;
      const auto out = capt::cmd_eval(rc);
      std::cout << capt::report_table(out);
      std::printf("inference %.2f ms/sample\n", 1000.0 * out.seconds_per_sample);
    } else if (*infer) {
      const auto out = capt::cmd_infer(rc, input, ply);
      const std::string text = out.record.dump(2) + "\n";
      if (json_out.empty()) std::cout << text;
      else capt::write_text(json_out, text);
    }
    return kOk;
  } catch (const capt::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const capt::ContractError& e) {
    std::fprintf(stderr, "invalid argument: %s\n", e.what());
    return kConfig;
  } catch (const capt::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kIo;
  } catch (const capt::NumericalFault& e) {
    std::fprintf(stderr, "numerical fault: %s\n", e.what());
    return kNumeric;
  } catch (const capt::DegenerateError& e) {
    std::fprintf(stderr, "degenerate geometry: %s\n", e.what());
    return kNumeric;
  } catch (const capt::DimensionError& e) {
    std::fprintf(stderr, "shape mismatch: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
