#pragma once

// MATPOWER case parsing and the DC measurement model z = Hx + e.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "lesson/error.hpp"

namespace lesson {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class BusType { pq = 1, pv = 2, slack = 3 };

struct CaseBus {
  int id = 0;
  BusType type = BusType::pq;
  double load_mw = 0.0;  // as written in the file
  double load_pu = 0.0;  // load_mw / base_mva

  bool operator==(const CaseBus&) const = default;
};

struct CaseBranch {
  int from = 0;
  int to = 0;
  double reactance = 0.0;  // per-unit, strictly positive
  bool in_service = true;

  bool operator==(const CaseBranch&) const = default;
};

struct RawCase {
  std::string name;
  double base_mva = 100.0;
  std::vector<CaseBus> buses;
  std::vector<CaseBranch> branches;  // in service only
  std::vector<std::string> warnings;

  bool operator==(const RawCase& o) const {
    return name == o.name && base_mva == o.base_mva && buses == o.buses &&
           branches == o.branches;
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

// Drops a trailing `%` comment, ignoring `%` inside single-quoted strings.
inline std::string_view strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\'') quoted = !quoted;
    if (line[i] == '%' && !quoted) return line.substr(0, i);
  }
  return line;
}

inline double parse_number(std::string_view tok, int line_no) {
  // MATLAB allows Inf/NaN in case files; none of the columns we read may use them.
  double v = 0.0;
  const char* begin = tok.data();
  const char* end = tok.data() + tok.size();
  if (!tok.empty() && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end) {
    throw ParseError("line " + std::to_string(line_no) + ": invalid number '" +
                     std::string(tok) + "'");
  }
  return v;
}

struct MatrixRow {
  int line_no = 0;
  std::vector<double> values;
};

// Splits the body of a `[ ... ]` block into rows. Rows end at ';' or at the end
// of a line.
inline void split_rows(std::string_view body, int line_no, std::vector<MatrixRow>& rows,
                       MatrixRow& current) {
  std::size_t i = 0;
  auto flush = [&] {
    if (!current.values.empty()) rows.push_back(std::move(current));
    current = MatrixRow{};
  };
  while (i < body.size()) {
    const char c = body[i];
    if (c == ';') {
      flush();
      ++i;
      continue;
    }
    if (c == ' ' || c == '\t' || c == ',' || c == '\r') {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < body.size() && body[j] != ';' && body[j] != ' ' && body[j] != '\t' &&
           body[j] != ',' && body[j] != '\r')
      ++j;
    if (current.values.empty()) current.line_no = line_no;
    current.values.push_back(parse_number(body.substr(i, j - i), line_no));
    i = j;
  }
  flush();
}

}  // namespace detail

/// Parses the `mpc.baseMVA`, `mpc.bus` and `mpc.branch` assignments of a
/// MATPOWER case file. Every other block (gen, gencost, bus_name, ...) is
/// skipped. Out-of-service branches are dropped; loads are converted to
/// per-unit on the system base.
inline RawCase parse_matpower_case(std::string_view text, std::string name = "case") {
  RawCase rc;
  rc.name = std::move(name);

  std::optional<double> base;
  std::vector<detail::MatrixRow> bus_rows;
  std::vector<detail::MatrixRow> branch_rows;
  bool have_bus = false;
  bool have_branch = false;

  std::vector<detail::MatrixRow>* target = nullptr;  // block being read
  detail::MatrixRow pending;
  int block_start = 0;

  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    std::string_view line = detail::trim(detail::strip_comment(raw));

    if (target) {
      const auto close = line.find(']');
      detail::split_rows(line.substr(0, close), line_no, *target, pending);
      if (close != std::string_view::npos) {
        if (!pending.values.empty()) target->push_back(std::move(pending));
        pending = {};
        target = nullptr;
      } else if (!pending.values.empty()) {
        // newline terminates a row as well
        target->push_back(std::move(pending));
        pending = {};
      }
      continue;
    }
    if (line.empty()) continue;
    if (line.rfind("mpc.", 0) != 0) continue;

    const auto eq = line.find('=');
    if (eq == std::string_view::npos) continue;
    const auto key = detail::trim(line.substr(4, eq - 4));
    auto rhs = detail::trim(line.substr(eq + 1));

    if (key == "baseMVA") {
      if (!rhs.empty() && rhs.back() == ';') rhs.remove_suffix(1);
      base = detail::parse_number(detail::trim(rhs), line_no);
    } else if (key == "bus" || key == "branch") {
      if (rhs.empty() || rhs.front() != '[') {
        throw ParseError("line " + std::to_string(line_no) + ": expected '[' after mpc." +
                         std::string(key));
      }
      auto& rows = key == "bus" ? bus_rows : branch_rows;
      (key == "bus" ? have_bus : have_branch) = true;
      rhs.remove_prefix(1);
      const auto close = rhs.find(']');
      block_start = line_no;
      detail::split_rows(rhs.substr(0, close), line_no, rows, pending);
      if (close == std::string_view::npos) {
        if (!pending.values.empty()) {
          rows.push_back(std::move(pending));
          pending = {};
        }
        target = &rows;
      } else {
        if (!pending.values.empty()) rows.push_back(std::move(pending));
        pending = {};
      }
    }
  }
  if (target) {
    throw ParseError("line " + std::to_string(block_start) + ": unterminated matrix block");
  }
  if (!base) throw ParseError("line " + std::to_string(line_no) + ": missing mpc.baseMVA");
  if (!have_bus) throw ParseError("line " + std::to_string(line_no) + ": missing mpc.bus");
  if (!have_branch) throw ParseError("line " + std::to_string(line_no) + ": missing mpc.branch");
  if (!(*base > 0.0)) throw ValidationError("baseMVA must be positive");
  rc.base_mva = *base;

  for (const auto& row : bus_rows) {
    if (row.values.size() < 3) {
      throw ParseError("line " + std::to_string(row.line_no) + ": bus row needs at least 3 columns");
    }
    CaseBus bus;
    bus.id = static_cast<int>(row.values[0]);
    const int type = static_cast<int>(row.values[1]);
    if (type < 1 || type > 3) {
      throw ValidationError("line " + std::to_string(row.line_no) + ": unsupported bus type " +
                            std::to_string(type) + " for bus " + std::to_string(bus.id));
    }
    bus.type = static_cast<BusType>(type);
    bus.load_mw = row.values[2];
    bus.load_pu = bus.load_mw / rc.base_mva;
    rc.buses.push_back(bus);
  }

  for (const auto& row : branch_rows) {
    if (row.values.size() < 11) {
      throw ParseError("line " + std::to_string(row.line_no) +
                       ": branch row needs at least 11 columns");
    }
    CaseBranch br;
    br.from = static_cast<int>(row.values[0]);
    br.to = static_cast<int>(row.values[1]);
    double x = row.values[3];
    br.in_service = row.values[10] > 0.0;
    if (!br.in_service) continue;
    if (x == 0.0) {
      throw ValidationError("line " + std::to_string(row.line_no) + ": zero reactance on branch " +
                            std::to_string(br.from) + "-" + std::to_string(br.to));
    }
    if (x < 0.0) {
      rc.warnings.push_back("line " + std::to_string(row.line_no) +
                            ": negative reactance replaced by its absolute value");
      x = -x;
    }
    br.reactance = x;
    rc.branches.push_back(br);
  }

  // structural validation
  std::map<int, std::size_t> index;
  int slack_count = 0;
  for (std::size_t i = 0; i < rc.buses.size(); ++i) {
    if (!index.emplace(rc.buses[i].id, i).second) {
      throw ValidationError("duplicate bus id " + std::to_string(rc.buses[i].id));
    }
    if (rc.buses[i].type == BusType::slack) ++slack_count;
  }
  if (slack_count != 1) {
    throw ValidationError("expected exactly one slack bus, found " + std::to_string(slack_count));
  }
  for (const auto& br : rc.branches) {
    for (int end : {br.from, br.to}) {
      if (!index.contains(end)) {
        throw ValidationError("branch " + std::to_string(br.from) + "-" + std::to_string(br.to) +
                              " references unknown bus " + std::to_string(end));
      }
    }
    if (br.from == br.to) {
      throw ValidationError("branch connects bus " + std::to_string(br.from) + " to itself");
    }
  }
  return rc;
}

/// Writes a RawCase back in the subset grammar read by parse_matpower_case.
inline std::string serialize_matpower_case(const RawCase& rc) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "function mpc = " << rc.name << "\n";
  os << "mpc.version = '2';\n";
  os << "mpc.baseMVA = " << num(rc.base_mva) << ";\n\n";
  os << "%% bus_i type Pd\nmpc.bus = [\n";
  for (const auto& b : rc.buses) {
    os << "\t" << b.id << "\t" << static_cast<int>(b.type) << "\t" << num(b.load_mw)
       << "\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;\n";
  }
  os << "];\n\n%% fbus tbus r x b rateA rateB rateC ratio angle status\nmpc.branch = [\n";
  for (const auto& br : rc.branches) {
    os << "\t" << br.from << "\t" << br.to << "\t0\t" << num(br.reactance) << "\t0\t0\t0\t0\t0\t0\t"
       << (br.in_service ? 1 : 0) << "\t-360\t360;\n";
  }
  os << "];\n";
  return os.str();
}

// ---------------------------------------------------------------------------

struct FlowMeter {
  int from_bus;  // bus ids
  int to_bus;
  bool operator==(const FlowMeter&) const = default;
};

struct InjectionMeter {
  int bus;
  bool operator==(const InjectionMeter&) const = default;
};

struct MeterDescriptor {
  std::size_t id = 0;
  std::variant<FlowMeter, InjectionMeter> kind;

  bool is_flow() const { return std::holds_alternative<FlowMeter>(kind); }
  bool operator==(const MeterDescriptor&) const = default;
};

struct MeterConfig {
  bool reverse_flows = false;  // add a to->from flow meter per branch
};

struct GridBranch {
  std::size_t from;  // bus positions, not ids
  std::size_t to;
  double reactance;
};

/// DC measurement model. Immutable once noise_sigma has been set through
/// set_noise_sigma(); the estimation factorizations are cached at that point.
struct GridModel {
  std::string case_name;
  std::size_t n_bus = 0;
  std::size_t n_state = 0;
  std::size_t slack = 0;          // position of the slack bus
  std::vector<int> bus_ids;       // position -> bus id
  std::vector<GridBranch> branches;
  std::vector<MeterDescriptor> meters;
  Matrix h;                       // m x n_state
  Vector base_loads;              // per bus, p.u.
  Vector noise_sigma;             // length m once calibrated, empty before

  /// Cholesky of H^T R^-1 H; set together with noise_sigma.
  std::shared_ptr<const Eigen::LLT<Matrix>> normal_factor;
  /// Cholesky of the reduced bus susceptance matrix (DC power flow).
  std::shared_ptr<const Eigen::LLT<Matrix>> susceptance_factor;

  std::size_t n_meter() const { return meters.size(); }
  std::size_t n_branch() const { return branches.size(); }
  bool has_noise() const { return noise_sigma.size() == static_cast<Eigen::Index>(meters.size()); }

  /// Column of bus position `bus` in H, or -1 for the slack.
  Eigen::Index state_index(std::size_t bus) const {
    if (bus == slack) return -1;
    return static_cast<Eigen::Index>(bus < slack ? bus : bus - 1);
  }
};

/// Installs per-meter noise standard deviations and factors the WLS normal
/// matrix. Throws ObservabilityError when H^T R^-1 H is not positive definite.
inline void set_noise_sigma(GridModel& grid, const Vector& sigma) {
  require(sigma.size() == static_cast<Eigen::Index>(grid.n_meter()),
          "noise_sigma length must equal the meter count");
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (!(sigma[i] > 0.0) || !std::isfinite(sigma[i])) {
      throw ContractError("noise_sigma must be strictly positive and finite (meter " +
                          std::to_string(i) + ")");
    }
  }
  const Vector w = sigma.array().square().inverse().matrix();
  const Matrix normal = grid.h.transpose() * w.asDiagonal() * grid.h;
  auto llt = std::make_shared<Eigen::LLT<Matrix>>(normal);
  if (llt->info() != Eigen::Success) {
    throw ObservabilityError("H^T R^-1 H is rank deficient; the meter set does not observe the grid");
  }
  // LLT succeeds on some semi-definite inputs; confirm the pivots are sane.
  const auto diag = llt->matrixLLT().diagonal();
  if (diag.size() > 0 && diag.minCoeff() <= 1e-12 * diag.maxCoeff()) {
    throw ObservabilityError("H^T R^-1 H is numerically singular");
  }
  grid.noise_sigma = sigma;
  grid.normal_factor = std::move(llt);
}

/// Factors the reduced bus susceptance matrix, read off the injection rows of
/// the non-slack buses in H.
inline void factor_susceptance(GridModel& g) {
  const auto n = static_cast<Eigen::Index>(g.n_state);
  Matrix bred = Matrix::Zero(n, n);
  for (const auto& meter : g.meters) {
    if (const auto* inj = std::get_if<InjectionMeter>(&meter.kind)) {
      const auto it = std::find(g.bus_ids.begin(), g.bus_ids.end(), inj->bus);
      const auto b = static_cast<std::size_t>(it - g.bus_ids.begin());
      if (auto c = g.state_index(b); c >= 0) bred.row(c) = g.h.row(static_cast<Eigen::Index>(meter.id));
    }
  }
  auto llt = std::make_shared<Eigen::LLT<Matrix>>(bred);
  if (llt->info() != Eigen::Success) throw ModelError("reduced susceptance matrix is singular");
  g.susceptance_factor = std::move(llt);
}

/// Assembles H from a validated RawCase. Flow row for branch (i, j) holds
/// +1/x at column(i) and -1/x at column(j); the slack column is omitted.
/// Injection rows are signed sums of incident flow rows.
inline GridModel build_grid_model(const RawCase& raw, const MeterConfig& config = {}) {
  GridModel g;
  g.case_name = raw.name;
  g.n_bus = raw.buses.size();
  if (g.n_bus < 2) throw ModelError("a grid needs at least two buses");
  g.n_state = g.n_bus - 1;

  std::map<int, std::size_t> pos;
  g.base_loads = Vector::Zero(static_cast<Eigen::Index>(g.n_bus));
  bool slack_found = false;
  for (std::size_t i = 0; i < raw.buses.size(); ++i) {
    pos[raw.buses[i].id] = i;
    g.bus_ids.push_back(raw.buses[i].id);
    g.base_loads[static_cast<Eigen::Index>(i)] = raw.buses[i].load_pu;
    if (raw.buses[i].type == BusType::slack) {
      if (slack_found) throw ValidationError("multiple slack buses");
      g.slack = i;
      slack_found = true;
    }
  }
  if (!slack_found) throw ValidationError("no slack bus");

  for (const auto& br : raw.branches) {
    if (!br.in_service) continue;
    if (!pos.contains(br.from) || !pos.contains(br.to)) {
      throw ValidationError("branch references unknown bus");
    }
    if (!(br.reactance > 0.0)) throw ValidationError("branch reactance must be positive");
    g.branches.push_back({pos[br.from], pos[br.to], br.reactance});
  }

  // every bus must reach the slack
  std::vector<std::vector<std::size_t>> adj(g.n_bus);
  for (const auto& br : g.branches) {
    adj[br.from].push_back(br.to);
    adj[br.to].push_back(br.from);
  }
  std::vector<bool> seen(g.n_bus, false);
  std::queue<std::size_t> q;
  q.push(g.slack);
  seen[g.slack] = true;
  while (!q.empty()) {
    const auto b = q.front();
    q.pop();
    for (auto nb : adj[b]) {
      if (!seen[nb]) {
        seen[nb] = true;
        q.push(nb);
      }
    }
  }
  for (std::size_t b = 0; b < g.n_bus; ++b) {
    if (!seen[b]) {
      throw ModelError("bus " + std::to_string(g.bus_ids[b]) +
                       " lies in an island without a slack bus");
    }
  }

  const auto n = static_cast<Eigen::Index>(g.n_state);
  const std::size_t nbr = g.branches.size();
  const std::size_t n_flow = config.reverse_flows ? 2 * nbr : nbr;
  const auto m = static_cast<Eigen::Index>(n_flow + g.n_bus);
  g.h = Matrix::Zero(m, n);

  auto flow_row = [&](Eigen::Index row, std::size_t from, std::size_t to, double x) {
    const double b = 1.0 / x;
    if (auto c = g.state_index(from); c >= 0) g.h(row, c) += b;
    if (auto c = g.state_index(to); c >= 0) g.h(row, c) -= b;
  };

  std::size_t id = 0;
  for (const auto& br : g.branches) {
    flow_row(static_cast<Eigen::Index>(id), br.from, br.to, br.reactance);
    g.meters.push_back({id++, FlowMeter{g.bus_ids[br.from], g.bus_ids[br.to]}});
  }
  if (config.reverse_flows) {
    for (const auto& br : g.branches) {
      flow_row(static_cast<Eigen::Index>(id), br.to, br.from, br.reactance);
      g.meters.push_back({id++, FlowMeter{g.bus_ids[br.to], g.bus_ids[br.from]}});
    }
  }
  for (std::size_t b = 0; b < g.n_bus; ++b) {
    const auto row = static_cast<Eigen::Index>(id);
    for (std::size_t k = 0; k < nbr; ++k) {
      const auto& br = g.branches[k];
      if (br.from == b) g.h.row(row) += g.h.row(static_cast<Eigen::Index>(k));
      if (br.to == b) g.h.row(row) -= g.h.row(static_cast<Eigen::Index>(k));
    }
    g.meters.push_back({id++, InjectionMeter{g.bus_ids[b]}});
  }

  factor_susceptance(g);
  return g;
}

inline std::size_t flow_meter_count(const GridModel& g) {
  return static_cast<std::size_t>(std::count_if(g.meters.begin(), g.meters.end(),
                                                [](const auto& m) { return m.is_flow(); }));
}

}  // namespace lesson
