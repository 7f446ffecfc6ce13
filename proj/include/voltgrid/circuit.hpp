#pragma once

// Radial distribution circuit model: buses, lines, actuators, and the
// tree bookkeeping everything else is built on. Quantities are per-unit;
// bus 0 is always the substation/source.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace voltgrid {

struct Bus {
  int id = 0;
  std::string name;
  double base_load_p = 0.0;  // p.u. active demand at nominal multiplier
  double base_load_q = 0.0;  // p.u. reactive demand, may be negative
};

struct Line {
  int from_bus = 0;  // parent
  int to_bus = 0;    // child
  double resistance = 0.0;
  double reactance = 0.0;
  bool is_regulator = false;
};

struct Regulator {
  int line_index = 0;
  int num_taps = 33;
  double ratio_min = 0.9;
  double ratio_max = 1.1;

  int middle_tap() const { return (num_taps - 1) / 2; }
  double ratio(int tap) const {
    return ratio_min + tap * (ratio_max - ratio_min) / (num_taps - 1);
  }
  // The squared turns ratio entering the downstream voltage equation.
  double ratio_sq(int tap) const {
    double rho = ratio(tap);
    return rho * rho;
  }
};

struct Capacitor {
  int bus = 0;
  double q_rated = 0.0;  // p.u. reactive injection when closed
};

struct Battery {
  int bus = 0;
  double p_rated = 0.0;   // p.u. power at full charge/discharge
  double capacity = 0.0;  // p.u.-steps of energy
  int num_levels = 5;     // odd, so the middle level is exactly zero power
  double soc_init = 0.5;

  int zero_level() const { return (num_levels - 1) / 2; }
  // Positive = discharge (injection into the grid).
  double level_power(int level) const {
    return p_rated * (2.0 * level / (num_levels - 1) - 1.0);
  }
};

struct Circuit {
  std::string name;
  double v_source = 1.0;  // squared source voltage
  std::vector<Bus> buses;
  std::vector<Line> lines;
  std::vector<Regulator> regulators;
  std::vector<Capacitor> capacitors;
  std::vector<Battery> batteries;

  int num_buses() const { return static_cast<int>(buses.size()); }
  int num_lines() const { return static_cast<int>(lines.size()); }

  // parent_line[j] = index of the line whose to_bus is j; -1 for the root.
  std::vector<int> parent_lines() const {
    std::vector<int> parent(buses.size(), -1);
    for (int e = 0; e < num_lines(); ++e) parent[lines[e].to_bus] = e;
    return parent;
  }

  std::vector<std::vector<int>> child_lines() const {
    std::vector<std::vector<int>> children(buses.size());
    for (int e = 0; e < num_lines(); ++e) children[lines[e].from_bus].push_back(e);
    return children;
  }

  // Bus order with every parent before its children. Assumes validity.
  std::vector<int> bfs_order() const {
    std::vector<std::vector<int>> children = child_lines();
    std::vector<int> order;
    order.reserve(buses.size());
    order.push_back(0);
    for (size_t k = 0; k < order.size(); ++k)
      for (int e : children[order[k]]) order.push_back(lines[e].to_bus);
    return order;
  }
};

/// Checks every structural invariant; returns human-readable violations
/// (empty means the circuit is well formed). Does not throw.
inline std::vector<std::string> validate_circuit(const Circuit& c) {
  std::vector<std::string> out;
  auto fail = [&out](const std::string& msg) { out.push_back(msg); };

  const int n = c.num_buses();
  if (n < 1) {
    fail("circuit has no buses");
    return out;
  }
  for (int i = 0; i < n; ++i) {
    if (c.buses[i].id != i) {
      fail("bus ids must be 0..N-1 in order; bus at position " + std::to_string(i) +
           " has id " + std::to_string(c.buses[i].id));
      return out;
    }
  }
  for (const Bus& b : c.buses) {
    if (b.base_load_p < 0.0) fail("bus " + std::to_string(b.id) + " has negative base_load_p");
    if (std::abs(b.base_load_q) > 10.0 * b.base_load_p + 1.0)
      fail("bus " + std::to_string(b.id) + " reactive load outside sanity bound");
  }
  if (c.v_source <= 0.0) fail("v_source must be positive");

  if (c.num_lines() != n - 1)
    fail("expected " + std::to_string(n - 1) + " lines for " + std::to_string(n) +
         " buses, got " + std::to_string(c.num_lines()));

  std::vector<int> parent_of(n, -1);
  bool structure_ok = true;
  for (int e = 0; e < c.num_lines(); ++e) {
    const Line& l = c.lines[e];
    if (l.from_bus < 0 || l.from_bus >= n || l.to_bus < 0 || l.to_bus >= n) {
      fail("line " + std::to_string(e) + " references unknown bus");
      structure_ok = false;
      continue;
    }
    if (l.to_bus == 0) {
      fail("line " + std::to_string(e) + " points into the root bus");
      structure_ok = false;
    } else if (parent_of[l.to_bus] != -1) {
      fail("bus " + std::to_string(l.to_bus) + " has two parents: not a tree");
      structure_ok = false;
    } else {
      parent_of[l.to_bus] = l.from_bus;
    }
    if (l.resistance < 0.0 || l.reactance < 0.0)
      fail("line " + std::to_string(e) + " has negative impedance");
    if (l.is_regulator && (l.resistance != 0.0 || l.reactance != 0.0))
      fail("line " + std::to_string(e) + ": regulator line must have R=X=0");
  }
  if (structure_ok) {
    for (int j = 1; j < n; ++j)
      if (parent_of[j] == -1) fail("orphan bus " + std::to_string(j));
    // Walking parents from every bus must terminate at the root; a finite
    // walk longer than n means we are trapped in a cycle.
    for (int j = 1; j < n && out.empty(); ++j) {
      int cur = j, hops = 0;
      while (cur != 0 && hops <= n) {
        cur = parent_of[cur];
        if (cur < 0) break;
        ++hops;
      }
      if (cur != 0) fail("not a tree: bus " + std::to_string(j) + " cannot reach the root");
    }
  }

  std::vector<int> reg_count_per_line(std::max(c.num_lines(), 0), 0);
  for (size_t r = 0; r < c.regulators.size(); ++r) {
    const Regulator& reg = c.regulators[r];
    if (reg.line_index < 0 || reg.line_index >= c.num_lines()) {
      fail("regulator " + std::to_string(r) + " references unknown line");
      continue;
    }
    if (!c.lines[reg.line_index].is_regulator)
      fail("regulator " + std::to_string(r) + " placed on a non-regulator line");
    if (++reg_count_per_line[reg.line_index] > 1)
      fail("line " + std::to_string(reg.line_index) + " has more than one regulator");
    if (reg.num_taps < 2) fail("regulator " + std::to_string(r) + ": num_taps must be >= 2");
    if (!(reg.ratio_min > 0.0 && reg.ratio_min < reg.ratio_max))
      fail("regulator " + std::to_string(r) + ": need 0 < ratio_min < ratio_max");
  }
  for (int e = 0; e < c.num_lines(); ++e)
    if (c.lines[e].is_regulator && reg_count_per_line[e] == 0)
      fail("line " + std::to_string(e) + " is flagged as regulator but has no regulator entry");

  for (size_t k = 0; k < c.capacitors.size(); ++k) {
    const Capacitor& cap = c.capacitors[k];
    if (cap.bus < 0 || cap.bus >= n) fail("capacitor " + std::to_string(k) + " references unknown bus");
    if (cap.q_rated <= 0.0) fail("capacitor " + std::to_string(k) + ": q_rated must be positive");
  }
  for (size_t k = 0; k < c.batteries.size(); ++k) {
    const Battery& b = c.batteries[k];
    if (b.bus < 0 || b.bus >= n) fail("battery " + std::to_string(k) + " references unknown bus");
    if (b.p_rated <= 0.0) fail("battery " + std::to_string(k) + ": p_rated must be positive");
    if (b.capacity <= 0.0) fail("battery " + std::to_string(k) + ": capacity must be positive");
    if (b.num_levels < 3 || b.num_levels % 2 == 0)
      fail("battery " + std::to_string(k) + ": num_levels must be odd (and >= 3)");
    if (b.soc_init < 0.0 || b.soc_init > 1.0)
      fail("battery " + std::to_string(k) + ": soc_init must lie in [0,1]");
  }
  return out;
}

/// All buses strictly below `bus` in the rooted tree.
inline std::vector<int> descendants(const Circuit& c, int bus) {
  if (bus < 0 || bus >= c.num_buses())
    throw std::out_of_range("descendants: unknown bus id " + std::to_string(bus));
  std::vector<std::vector<int>> children = c.child_lines();
  std::vector<int> out;
  std::vector<int> stack;
  for (int e : children[bus]) stack.push_back(c.lines[e].to_bus);
  while (!stack.empty()) {
    int j = stack.back();
    stack.pop_back();
    out.push_back(j);
    for (int e : children[j]) stack.push_back(c.lines[e].to_bus);
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) { known = true; break; }
    if (!known) throw std::runtime_error("unknown key \"" + it.key() + "\" in " + where);
  }
}

}  // namespace detail

/// Parses a circuit document (see the JSON schema in the README) and
/// validates it; throws std::runtime_error naming the first problem.
inline Circuit circuit_from_json(const nlohmann::json& j) {
  using nlohmann::json;
  Circuit c;
  detail::reject_unknown_keys(
      j, {"name", "v_source", "buses", "lines", "regulators", "capacitors", "batteries"}, "circuit");
  c.name = j.value("name", "");
  c.v_source = j.value("v_source", 1.0);
  if (!j.contains("buses") || !j.contains("lines"))
    throw std::runtime_error("circuit document must contain \"buses\" and \"lines\"");
  for (const json& bj : j.at("buses")) {
    detail::reject_unknown_keys(bj, {"id", "name", "p", "q"}, "bus");
    Bus b;
    b.id = bj.at("id").get<int>();
    b.name = bj.value("name", "");
    b.base_load_p = bj.value("p", 0.0);
    b.base_load_q = bj.value("q", 0.0);
    c.buses.push_back(b);
  }
  for (const json& lj : j.at("lines")) {
    detail::reject_unknown_keys(lj, {"from", "to", "r", "x", "regulator"}, "line");
    Line l;
    l.from_bus = lj.at("from").get<int>();
    l.to_bus = lj.at("to").get<int>();
    l.resistance = lj.value("r", 0.0);
    l.reactance = lj.value("x", 0.0);
    l.is_regulator = lj.value("regulator", false);
    c.lines.push_back(l);
  }
  for (const json& rj : j.value("regulators", json::array())) {
    detail::reject_unknown_keys(rj, {"line", "num_taps", "ratio_min", "ratio_max"}, "regulator");
    Regulator r;
    r.line_index = rj.at("line").get<int>();
    r.num_taps = rj.value("num_taps", 33);
    r.ratio_min = rj.value("ratio_min", 0.9);
    r.ratio_max = rj.value("ratio_max", 1.1);
    c.regulators.push_back(r);
  }
  for (const json& cj : j.value("capacitors", json::array())) {
    detail::reject_unknown_keys(cj, {"bus", "q_rated"}, "capacitor");
    Capacitor cap;
    cap.bus = cj.at("bus").get<int>();
    cap.q_rated = cj.at("q_rated").get<double>();
    c.capacitors.push_back(cap);
  }
  for (const json& bj : j.value("batteries", json::array())) {
    detail::reject_unknown_keys(bj, {"bus", "p_rated", "capacity", "num_levels", "soc_init"}, "battery");
    Battery b;
    b.bus = bj.at("bus").get<int>();
    b.p_rated = bj.at("p_rated").get<double>();
    b.capacity = bj.at("capacity").get<double>();
    b.num_levels = bj.value("num_levels", 5);
    b.soc_init = bj.value("soc_init", 0.5);
    c.batteries.push_back(b);
  }
  std::vector<std::string> violations = validate_circuit(c);
  if (!violations.empty()) throw std::runtime_error("invalid circuit: " + violations.front());
  return c;
}

inline nlohmann::json circuit_to_json(const Circuit& c) {
  using nlohmann::json;
  json j;
  j["name"] = c.name;
  j["v_source"] = c.v_source;
  j["buses"] = json::array();
  for (const Bus& b : c.buses)
    j["buses"].push_back({{"id", b.id}, {"name", b.name}, {"p", b.base_load_p}, {"q", b.base_load_q}});
  j["lines"] = json::array();
  for (const Line& l : c.lines)
    j["lines"].push_back({{"from", l.from_bus},
                          {"to", l.to_bus},
                          {"r", l.resistance},
                          {"x", l.reactance},
                          {"regulator", l.is_regulator}});
  j["regulators"] = json::array();
  for (const Regulator& r : c.regulators)
    j["regulators"].push_back({{"line", r.line_index},
                               {"num_taps", r.num_taps},
                               {"ratio_min", r.ratio_min},
                               {"ratio_max", r.ratio_max}});
  j["capacitors"] = json::array();
  for (const Capacitor& cap : c.capacitors)
    j["capacitors"].push_back({{"bus", cap.bus}, {"q_rated", cap.q_rated}});
  j["batteries"] = json::array();
  for (const Battery& b : c.batteries)
    j["batteries"].push_back({{"bus", b.bus},
                              {"p_rated", b.p_rated},
                              {"capacity", b.capacity},
                              {"num_levels", b.num_levels},
                              {"soc_init", b.soc_init}});
  return j;
}

inline Circuit load_circuit(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open circuit file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("parse error in " + path + ": " + e.what());
  }
  return circuit_from_json(j);
}

inline void save_circuit(const Circuit& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write circuit file: " + path);
  out << circuit_to_json(c).dump(2) << "\n";
}

}  // namespace voltgrid
