#include "crformer/ablate.hpp"

#include <array>
#include <cstdio>
#include <sstream>

#include "crformer/error.hpp"
#include "crformer/harness.hpp"

namespace crformer {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

const char* on_off(bool b) { return b ? "on" : "off"; }

Config with_components(Config c, bool cdec, bool recon) {
  c.cdec_enabled = cdec;
  c.loss.recon = recon ? 0.1 : 0.0;
  return c;
}

const std::vector<SampleRecord>& empty_split() {
  static const std::vector<SampleRecord> none;
  return none;
}

// A run that aborted before its first evaluation is scored from the retained
// checkpoint.
MetricReport final_report(const TrainResult& r, const std::vector<SampleRecord>& train_set,
                          const std::vector<SampleRecord>& val_set) {
  for (auto it = r.log.epochs.rbegin(); it != r.log.epochs.rend(); ++it) {
    if (it->val) return *it->val;
    if (it->train) return *it->train;
  }
  return evaluate(r.checkpoint, std::span<const SampleRecord>(val_set.empty() ? train_set : val_set));
}

}  // namespace

AblationAxis parse_axis(std::string_view name) {
  if (name == "nq") return AblationAxis::kNumQueries;
  if (name == "layers") return AblationAxis::kLayers;
  if (name == "omega_re") return AblationAxis::kOmegaRe;
  if (name == "components") return AblationAxis::kComponents;
  throw UsageError("unknown ablation axis '" + std::string(name) + "' (expected nq, layers, omega_re, components)");
}

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kNumQueries: return "nq";
    case AblationAxis::kLayers: return "layers";
    case AblationAxis::kOmegaRe: return "omega_re";
    case AblationAxis::kComponents: return "components";
  }
  return "?";
}

std::vector<std::string> key_columns(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kNumQueries: return {"N_q"};
    case AblationAxis::kLayers: return {"N", "cdec"};
    case AblationAxis::kOmegaRe: return {"omega_re"};
    case AblationAxis::kComponents: return {"cdec", "l_re"};
  }
  return {};
}

std::vector<AblationCell> ablation_cells(const Config& base, AblationAxis axis) {
  std::vector<AblationCell> cells;
  switch (axis) {
    case AblationAxis::kNumQueries:
      for (std::size_t nq : {1, 2, 4, 8, 16, 24, 32}) {
        Config c = base;
        c.model.num_queries = nq;
        cells.push_back({{std::to_string(nq)}, c});
      }
      break;
    case AblationAxis::kLayers:
      for (std::size_t n : {1, 2, 3, 4}) {
        for (bool cdec : {true, false}) {
          Config c = base;
          c.model.layers = n;
          c.cdec_enabled = cdec;
          cells.push_back({{std::to_string(n), on_off(cdec)}, c});
        }
      }
      break;
    case AblationAxis::kOmegaRe:
      for (double w : {0.0, 0.05, 0.10, 0.15, 0.20}) {
        Config c = base;
        c.loss.recon = w;
        cells.push_back({{fmt(w)}, c});
      }
      break;
    case AblationAxis::kComponents: {
      constexpr std::array<std::array<bool, 2>, 4> grid{{{true, true}, {true, false}, {false, true}, {false, false}}};
      for (const auto& [cdec, recon] : grid) {
        cells.push_back({{on_off(cdec), on_off(recon)}, with_components(base, cdec, recon)});
      }
      break;
    }
  }
  for (auto& cell : cells) cell.config.validate();
  return cells;
}

std::string AblationTable::to_csv() const {
  std::ostringstream out;
  for (const auto& k : key_columns(axis)) out << k << ",";
  out << "miou";
  for (double x : kPrecisionThresholds) out << ",pr@" << fmt(x);
  out << ",runs,aborted\n";
  for (const auto& r : rows) {
    for (const auto& k : r.key) out << k << ",";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", r.miou);
    out << buf;
    for (double x : kPrecisionThresholds) {
      std::snprintf(buf, sizeof buf, "%.6f", r.precision.at(x));
      out << "," << buf;
    }
    out << "," << r.runs << "," << r.aborted << "\n";
  }
  return out.str();
}

AblationTable run_ablation(const Config& base, AblationAxis axis, const std::vector<std::uint64_t>& seeds) {
  base.validate();
  const std::vector<std::uint64_t> model_seeds = seeds.empty() ? std::vector<std::uint64_t>{base.seed} : seeds;
  const auto spec = base.data_spec();
  const auto train_set = gen_split(base.data.train_seed, base.data.train_size, spec);
  const auto val_set =
      base.data.val_size > 0 ? gen_split(base.data.val_seed, base.data.val_size, spec) : empty_split();

  AblationTable table;
  table.axis = axis;
  table.split = val_set.empty() ? "train" : "val";
  for (const auto& cell : ablation_cells(base, axis)) {
    AblationRow row;
    row.key = cell.key;
    for (double x : kPrecisionThresholds) row.precision[x] = 0.0;
    for (auto s : model_seeds) {
      Config c = cell.config;
      c.seed = s;
      const auto result = train(c, train_set, val_set);
      const auto report = final_report(result, train_set, val_set);
      row.miou += report.miou;
      for (double x : kPrecisionThresholds) row.precision[x] += report.precision.at(x);
      ++row.runs;
      if (result.aborted) ++row.aborted;
    }
    const double inv = 1.0 / static_cast<double>(row.runs);
    row.miou *= inv;
    for (auto& [x, v] : row.precision) v *= inv;
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::vector<DirectionStats> directional_comparison(const Config& base, const std::vector<std::uint64_t>& seeds) {
  base.validate();
  if (seeds.empty()) throw ContractError("directional_comparison: no seeds");
  const auto spec = base.data_spec();
  const auto train_set = gen_split(base.data.train_seed, base.data.train_size, spec);
  const auto val_set =
      base.data.val_size > 0 ? gen_split(base.data.val_seed, base.data.val_size, spec) : empty_split();

  auto run = [&](Config c, std::uint64_t seed) {
    c.seed = seed;
    return final_report(train(c, train_set, val_set), train_set, val_set).miou;
  };
  Config cdec_on = base, cdec_off = base, re_on = base, re_off = base;
  cdec_on.cdec_enabled = true;
  cdec_off.cdec_enabled = false;
  re_on.loss.recon = 0.1;
  re_off.loss.recon = 0.0;

  std::vector<DirectionStats> out{{"cdec_on_minus_off", {}, 0, 0.0}, {"omega_re_0.1_minus_0", {}, 0, 0.0}};
  for (auto s : seeds) {
    out[0].deltas.push_back(run(cdec_on, s) - run(cdec_off, s));
    out[1].deltas.push_back(run(re_on, s) - run(re_off, s));
  }
  for (auto& d : out) {
    for (double v : d.deltas) {
      d.mean += v;
      if (v > 0) ++d.positive;
    }
    d.mean /= static_cast<double>(d.deltas.size());
  }
  return out;
}

}  // namespace crformer
