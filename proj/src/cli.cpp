#include "crformer/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "crformer/ablate.hpp"
#include "crformer/error.hpp"
#include "crformer/harness.hpp"
#include "crformer/io.hpp"

namespace crformer {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << text;
  if (!out) throw FormatError("write failed for '" + path + "'");
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pr_line(const MetricReport& r) {
  std::string s;
  for (const auto& [x, v] : r.precision) s += " pr@" + fixed(x, 1) + "=" + fixed(v);
  return s;
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir, std::uint64_t seed, std::size_t count,
                 std::ostream& out) {
  const DataSpec spec = spec_path.empty() ? DataSpec{} : data_spec_from_json(read_json(spec_path));
  const auto samples = gen_split(seed, count, spec);
  export_dataset(out_dir, samples);
  write_text((fs::path(out_dir) / "spec.json").string(), to_json(spec).dump(2) + "\n");
  out << "wrote " << samples.size() << " samples to " << out_dir << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  const Config cfg = config_path.empty() ? default_config() : load_config(config_path);
  TrainOptions opts;
  opts.out_dir = out_dir;
  opts.on_epoch = [&](const EpochRecord& e) {
    if (!e.train) return;
    out << "epoch " << e.epoch << " step " << e.step << " train miou " << fixed(e.train->miou);
    if (e.val) out << " val miou " << fixed(e.val->miou);
    out << "\n" << std::flush;
  };
  const auto result = train(cfg, opts);
  if (result.aborted) {
    err << "training aborted: " << result.failure << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& report_path,
             std::ostream& out) {
  const auto ck = load_checkpoint(ckpt_path);
  const auto samples = load_dataset(data_dir);
  const auto report = evaluate(ck, std::span<const SampleRecord>(samples));
  if (!report_path.empty()) write_text(report_path, to_json(report).dump(2) + "\n");
  out << "miou " << fixed(report.miou) << pr_line(report) << "\n";
  return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& axis_name, const std::string& out_csv,
               const std::vector<std::uint64_t>& seeds, std::size_t direction_seeds, std::ostream& out) {
  const AblationAxis axis = parse_axis(axis_name);
  const Config cfg = config_path.empty() ? default_config() : load_config(config_path);
  const auto table = run_ablation(cfg, axis, seeds);
  const std::string csv = table.to_csv();
  if (out_csv.empty()) {
    out << csv;
  } else {
    write_text(out_csv, csv);
    out << "wrote " << table.rows.size() << " rows (" << table.split << " split) to " << out_csv << "\n";
  }
  if (direction_seeds > 0) {
    std::vector<std::uint64_t> ds(direction_seeds);
    for (std::size_t i = 0; i < ds.size(); ++i) ds[i] = cfg.seed + i;
    for (const auto& d : directional_comparison(cfg, ds)) {
      out << d.name << ": mean " << fixed(d.mean) << ", positive in " << d.positive << "/" << d.deltas.size()
          << " seeds\n";
    }
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& config_path, std::size_t tokens, double h, double tol, std::ostream& out) {
  Config cfg = config_path.empty() ? gradcheck_config() : load_config(config_path);
  cfg.precision = Precision::kFloat64;
  const auto r = model_gradcheck(cfg, tokens, h, tol);
  for (const auto& p : r.report.params) {
    out << (p.pass ? "  ok   " : "  FAIL ") << p.name << " " << p.max_rel_error << "\n";
  }
  out << "expression: " << r.text << "\n";
  out << "parameters: " << r.num_params << ", max relative error " << r.report.max_rel_error << " (tol " << tol
      << "), " << fixed(r.seconds, 1) << " s\n";
  out << (r.report.pass ? "PASS" : "FAIL") << "\n";
  return r.report.pass ? kExitOk : kExitNumeric;
}

int cmd_export_masks(const std::string& ckpt_path, const std::string& data_dir, const std::string& out_dir,
                     std::ostream& out) {
  const auto ck = load_checkpoint(ckpt_path);
  const auto samples = load_dataset(data_dir);
  const auto masks = predict_masks(ck, std::span<const SampleRecord>(samples));
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    write_pgm((fs::path(out_dir) / (sample_stem(i) + ".pgm")).string(), mask_to_gray(masks[i]));
  }
  out << "wrote " << masks.size() << " masks to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Calibrated query decoding for referring segmentation on synthetic scenes", "crformer"};
  app.require_subcommand(1);

  std::string spec_path, config_path, out_path, ckpt_path, data_dir, report_path, axis;
  std::uint64_t gen_seed = 1;
  std::size_t gen_count = 32;
  std::vector<std::uint64_t> seeds;
  std::size_t direction_seeds = 0;
  std::size_t tokens = 6;
  double h = 1e-5, tol = 1e-3;

  auto* gen = app.add_subcommand("gen-data", "Generate and export a synthetic split");
  gen->add_option("--spec", spec_path, "DataSpec JSON (defaults when omitted)");
  gen->add_option("--out", out_path, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Split seed");
  gen->add_option("--count", gen_count, "Number of samples")->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Train and write log.jsonl, config.json, checkpoint.crfk");
  tr->add_option("--config", config_path, "Config JSON (defaults when omitted)");
  tr->add_option("--out", out_path, "Run directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on an exported split");
  ev->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--report", report_path, "Report JSON path");

  auto* ab = app.add_subcommand("ablate", "Train one run per ablation cell and write a CSV table");
  ab->add_option("--config", config_path, "Base config JSON (defaults when omitted)");
  ab->add_option("--axis", axis, "nq, layers, omega_re or components")->required();
  ab->add_option("--out", out_path, "CSV path (stdout when omitted)");
  ab->add_option("--seeds", seeds, "Model seeds averaged per cell")->delimiter(',');
  ab->add_option("--directions", direction_seeds, "Also report CDec and L_re directions over this many seeds");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full loss");
  gc->add_option("--config", config_path, "Config JSON (toy dimensions when omitted)");
  gc->add_option("--tokens", tokens, "Expression length including the global slot");
  gc->add_option("--step", h, "Central-difference step");
  gc->add_option("--tol", tol, "Maximum relative error");

  auto* ex = app.add_subcommand("export-masks", "Write predicted masks as PGM files");
  ex->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  ex->add_option("--data", data_dir, "Dataset directory")->required();
  ex->add_option("--out", out_path, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(spec_path, out_path, gen_seed, gen_count, out);
    if (tr->parsed()) return cmd_train(config_path, out_path, out, err);
    if (ev->parsed()) return cmd_eval(ckpt_path, data_dir, report_path, out);
    if (ab->parsed()) return cmd_ablate(config_path, axis, out_path, seeds, direction_seeds, out);
    if (gc->parsed()) return cmd_gradcheck(config_path, tokens, h, tol, out);
    if (ex->parsed()) return cmd_export_masks(ckpt_path, data_dir, out_path, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace crformer
