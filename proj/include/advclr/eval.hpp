#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "advclr/attack.hpp"
#include "advclr/data.hpp"
#include "advclr/model.hpp"

namespace advclr {

inline constexpr const char* kReportSchema = "advclr.eval_report/1";

struct EvalCell {
  AttackKind attack = AttackKind::pgd;
  double epsilon = 0.0;
  Objective objective = Objective::supervised_ce;
  std::size_t num_steps = 1;
  double robust_accuracy = 0.0;
  std::size_t samples = 0;

  friend bool operator==(const EvalCell&, const EvalCell&) = default;
};

struct EvalReport {
  std::string model_id;
  double clean_accuracy = 0.0;
  std::size_t clean_samples = 0;
  std::vector<EvalCell> cells;
  std::uint64_t seed = 0;
  std::string timestamp;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Failures of one or more table cells, each prefixed with its cell.
class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

namespace detail {

inline void check_eval_inputs(const ModelParams<float>& params, const Dataset& ds) {
  if (ds.empty()) throw DataError("evaluation: empty dataset");
  if (params.num_classes != ds.num_classes()) {
    throw std::invalid_argument("evaluation: classifier has " + std::to_string(params.num_classes) +
                                " classes, dataset has " + std::to_string(ds.num_classes()));
  }
}

inline std::vector<std::size_t> argmax_rows(const TensorF& logits) {
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  std::vector<std::size_t> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const float* row = logits.ptr() + i * c;
    out[i] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

}  // namespace detail

/// Fraction of images whose argmax logit equals the label.
inline double clean_accuracy(const ModelParams<float>& params, const Dataset& ds,
                             std::size_t batch_size = 256) {
  detail::check_eval_inputs(params, ds);
  std::size_t correct = 0;
  auto seq = batch_iter(ds, batch_size);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const Batch b = seq[i];
    const auto pred = detail::argmax_rows(logits_eval(params, b.images));
    for (std::size_t k = 0; k < b.size(); ++k) correct += pred[k] == b.labels[k];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

/// Fraction of images classified correctly both before and after the
/// attack. Random starts are seeded per batch from `seed`.
inline double robust_accuracy(const ModelParams<float>& params, const Dataset& ds,
                              const AttackConfig& attack, std::uint64_t seed = 0,
                              std::size_t batch_size = 256) {
  detail::check_eval_inputs(params, ds);
  attack.validate();
  if (!attack.objective.supervised()) {
    throw std::invalid_argument("robust_accuracy: evaluation attacks need a supervised objective");
  }
  std::size_t correct = 0;
  auto seq = batch_iter(ds, batch_size);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const Batch b = seq[i];
    AttackContext<float> ctx{b.labels, nullptr, Mode::eval, seed * 1000003ull + i};
    const TensorF adv = run_attack(params, b.images, attack, ctx);
    const auto clean = detail::argmax_rows(logits_eval(params, b.images));
    const auto pred = detail::argmax_rows(logits_eval(params, adv));
    for (std::size_t k = 0; k < b.size(); ++k) {
      correct += clean[k] == b.labels[k] && pred[k] == b.labels[k];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

struct NamedModel {
  std::string id;
  const ModelParams<float>* params = nullptr;
};

/// Attack configs for every (kind, epsilon) pair with the evaluation
/// defaults.
inline std::vector<AttackConfig> attack_grid(const std::vector<AttackKind>& kinds,
                                             const std::vector<double>& epsilons,
                                             std::size_t steps = 10, double kappa = 0.0,
                                             bool pgd_random_start = true) {
  std::vector<AttackConfig> out;
  for (auto k : kinds)
    for (double e : epsilons) {
      switch (k) {
        case AttackKind::fgsm: out.push_back(AttackConfig::fgsm(e)); break;
        case AttackKind::pgd: out.push_back(AttackConfig::pgd(e, steps, pgd_random_start)); break;
        case AttackKind::cw: out.push_back(AttackConfig::cw(e, steps, kappa)); break;
      }
    }
  return out;
}

/// Clean accuracy plus one robust-accuracy cell per attack, for each model.
inline std::vector<EvalReport> eval_table(const std::vector<NamedModel>& models,
                                          const std::vector<AttackConfig>& attacks,
                                          const Dataset& ds, std::uint64_t seed = 0,
                                          std::size_t batch_size = 256) {
  if (models.empty()) throw std::invalid_argument("eval_table: no models");
  if (attacks.empty()) throw std::invalid_argument("eval_table: no attacks");
  std::vector<EvalReport> out;
  std::vector<std::string> failures;
  const std::string stamp = utc_timestamp();
  for (const auto& m : models) {
    EvalReport rep{m.id, 0.0, ds.size(), {}, seed, stamp};
    try {
      if (!m.params) throw std::invalid_argument("null parameters");
      rep.clean_accuracy = clean_accuracy(*m.params, ds, batch_size);
    } catch (const std::exception& e) {
      failures.push_back("model " + m.id + " clean: " + e.what());
      continue;
    }
    for (std::size_t ai = 0; ai < attacks.size(); ++ai) {
      const auto& a = attacks[ai];
      try {
        const double acc = robust_accuracy(*m.params, ds, a, seed + ai, batch_size);
        rep.cells.push_back({a.kind, a.epsilon, a.objective.variant, a.num_steps, acc, ds.size()});
      } catch (const std::exception& e) {
        std::ostringstream os;
        os << "model " << m.id << " attack " << to_string(a.kind) << " eps " << a.epsilon << ": "
           << e.what();
        failures.push_back(os.str());
      }
    }
    out.push_back(std::move(rep));
  }
  if (!failures.empty()) {
    std::string msg = "eval_table: " + std::to_string(failures.size()) + " cell(s) failed";
    for (const auto& f : failures) msg += "\n  " + f;
    throw EvalError(msg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json report_to_json(const std::vector<EvalReport>& reports) {
  nlohmann::ordered_json doc;
  doc["schema"] = kReportSchema;
  doc["reports"] = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json jr;
    jr["model_id"] = r.model_id;
    jr["clean_accuracy"] = r.clean_accuracy;
    jr["clean_samples"] = r.clean_samples;
    jr["seed"] = r.seed;
    jr["timestamp"] = r.timestamp;
    jr["cells"] = nlohmann::ordered_json::array();
    for (const auto& c : r.cells) {
      nlohmann::ordered_json jc;
      jc["attack"] = to_string(c.attack);
      jc["epsilon"] = c.epsilon;
      jc["objective"] = to_string(c.objective);
      jc["num_steps"] = c.num_steps;
      jc["robust_accuracy"] = c.robust_accuracy;
      jc["samples"] = c.samples;
      jr["cells"].push_back(std::move(jc));
    }
    doc["reports"].push_back(std::move(jr));
  }
  return doc;
}

inline std::string serialize_reports(const std::vector<EvalReport>& reports) {
  return report_to_json(reports).dump(2) + "\n";
}

inline std::vector<EvalReport> parse_reports(const std::string& text) {
  const auto doc = nlohmann::json::parse(text);
  if (doc.at("schema").get<std::string>() != kReportSchema) {
    throw std::invalid_argument("report: unsupported schema " + doc.at("schema").dump());
  }
  std::vector<EvalReport> out;
  for (const auto& jr : doc.at("reports")) {
    EvalReport r;
    r.model_id = jr.at("model_id").get<std::string>();
    r.clean_accuracy = jr.at("clean_accuracy").get<double>();
    r.clean_samples = jr.at("clean_samples").get<std::size_t>();
    r.seed = jr.at("seed").get<std::uint64_t>();
    r.timestamp = jr.at("timestamp").get<std::string>();
    for (const auto& jc : jr.at("cells")) {
      EvalCell c;
      c.attack = attack_kind_from_string(jc.at("attack").get<std::string>());
      c.epsilon = jc.at("epsilon").get<double>();
      c.objective = objective_from_string(jc.at("objective").get<std::string>());
      c.num_steps = jc.at("num_steps").get<std::size_t>();
      c.robust_accuracy = jc.at("robust_accuracy").get<double>();
      c.samples = jc.at("samples").get<std::size_t>();
      r.cells.push_back(c);
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// model,attack,epsilon,accuracy; one row per cell.
inline std::string reports_to_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "model,attack,epsilon,accuracy\n";
  os << std::setprecision(17);
  for (const auto& r : reports)
    for (const auto& c : r.cells)
      os << r.model_id << ',' << to_string(c.attack) << ',' << c.epsilon << ','
         << c.robust_accuracy << '\n';
  return os.str();
}

/// Table with one row per (model, attack) and one column per epsilon.
inline std::string render_table(const std::vector<EvalReport>& reports) {
  std::set<double> eps;
  for (const auto& r : reports)
    for (const auto& c : r.cells) eps.insert(c.epsilon);
  std::ostringstream os;
  os << std::left << std::setw(18) << "model" << std::setw(8) << "clean" << std::setw(7)
     << "attack";
  for (double e : eps) {
    std::ostringstream h;
    h << "eps=" << e;
    os << std::setw(11) << h.str();
  }
  os << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& r : reports) {
    std::map<std::string, std::map<double, double>> rows;
    std::vector<std::string> order;
    for (const auto& c : r.cells) {
      const std::string k = to_string(c.attack);
      if (!rows.count(k)) order.push_back(k);
      rows[k][c.epsilon] = c.robust_accuracy;
    }
    bool first = true;
    for (const auto& k : order) {
      std::ostringstream clean;
      if (first) clean << std::fixed << std::setprecision(2) << 100.0 * r.clean_accuracy << '%';
      os << std::setw(18) << (first ? r.model_id : "") << std::setw(8) << clean.str()
         << std::setw(7) << k;
      for (double e : eps) {
        std::ostringstream cell;
        if (rows[k].count(e)) {
          cell << std::fixed << std::setprecision(2) << 100.0 * rows[k][e] << '%';
        } else {
          cell << '-';
        }
        os << std::setw(11) << cell.str();
      }
      os << '\n';
      first = false;
    }
  }
  return os.str();
}

}  // namespace advclr
