#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sgpa/cli.hpp"

namespace {

std::vector<Eigen::Index> parse_lengths(const std::string &text) {
  std::vector<Eigen::Index> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception &) {
      used = 0;
    }
    if (used == 0 || used != item.size() || v < 1) {
      throw sgpa::ConfigError("--lens: '" + item + "' is not a positive integer");
    }
    out.push_back(static_cast<Eigen::Index>(v));
  }
  return out;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Sparse Gaussian process attention: train, evaluate, audit, benchmark"};
  app.require_subcommand(1);

  std::string config;
  auto *train = app.add_subcommand("train", "train a model from a run config");
  train->add_option("--config", config, "run config JSON")->required();

  std::string ckpt, data_spec, out_dir;
  int samples = 10;
  auto *eval = app.add_subcommand("eval", "accuracy, NLL and calibration of a checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint JSON")->required();
  eval->add_option("--data", data_spec, "data spec JSON")->required();
  eval->add_option("--out", out_dir, "output directory")->required();
  eval->add_option("--samples", samples, "Monte-Carlo samples per prediction")
      ->check(CLI::PositiveNumber);

  std::string in_spec, out_spec;
  auto *ood = app.add_subcommand("ood", "entropy-based out-of-distribution detection");
  ood->add_option("--ckpt", ckpt, "checkpoint JSON")->required();
  ood->add_option("--in", in_spec, "in-distribution data spec JSON")->required();
  ood->add_option("--out-data", out_spec, "out-of-distribution data spec JSON")->required();
  ood->add_option("--out", out_dir, "output directory")->required();
  ood->add_option("--samples", samples, "Monte-Carlo samples per prediction")
      ->check(CLI::PositiveNumber);

  bool zero_noise = false;
  auto *gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of the ELBO gradient");
  gradcheck->add_option("--config", config, "run config JSON (tiny dims)")->required();
  gradcheck->add_flag("--zero-noise", zero_noise, "replace reparameterization noise by zeros");

  std::string mode, lens = "64,128,256", bench_out;
  int reps = 5;
  long long m_global = 8;
  auto *bench = app.add_subcommand("bench", "forward-pass timing against sequence length");
  bench->add_option("--mode", mode, "kernel, sgpa-standard or sgpa-decoupled")->required();
  bench->add_option("--lens", lens, "comma-separated sequence lengths");
  bench->add_option("--reps", reps, "repetitions per length")->check(CLI::PositiveNumber);
  bench->add_option("--m-global", m_global, "global inducing points (decoupled)")
      ->check(CLI::NonNegativeNumber);
  bench->add_option("--out", bench_out, "timing CSV path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : sgpa::exit_code::kConfig;
  }

  if (*train) {
    return sgpa::cmd_train(config, std::cout);
  }
  if (*eval) {
    return sgpa::cmd_eval(ckpt, data_spec, out_dir, samples, std::cout);
  }
  if (*ood) {
    return sgpa::cmd_ood(ckpt, in_spec, out_spec, out_dir, samples, std::cout);
  }
  if (*gradcheck) {
    return sgpa::cmd_gradcheck(config, zero_noise, std::cout);
  }
  std::vector<Eigen::Index> parsed;
  try {
    parsed = parse_lengths(lens);
  } catch (const sgpa::ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return sgpa::exit_code::kConfig;
  }
  return sgpa::cmd_bench(mode, parsed, reps, static_cast<Eigen::Index>(m_global), bench_out,
                         std::cout);
}
