#include "respike/energy.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include "json.hpp"
#include <stdexcept>

#include "respike/errors.hpp"

namespace respike {

const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::fc: return "fc";
    case LayerKind::attention: return "attention";
  }
  return "?";
}

const char* branch_name(Branch b) { return b == Branch::ann ? "ann" : "snn"; }

namespace {
void require_positive(std::size_t v, const std::string& layer, const char* field) {
  if (v == 0) throw std::invalid_argument("layer '" + layer + "': " + field + " must be positive");
}
}  // namespace

double flops_of_layer(const LayerCostSpec& s) {
  switch (s.kind) {
    case LayerKind::conv: {
      const auto& g = s.conv;
      require_positive(g.k_w, s.name, "k_w");
      require_positive(g.k_h, s.name, "k_h");
      require_positive(g.c_in, s.name, "c_in");
      require_positive(g.c_out, s.name, "c_out");
      require_positive(g.h_out, s.name, "h_out");
      require_positive(g.w_out, s.name, "w_out");
      return static_cast<double>(g.k_w) * g.k_h * g.c_in * g.h_out * g.w_out * g.c_out;
    }
    case LayerKind::fc:
      require_positive(s.fc.f_in, s.name, "f_in");
      require_positive(s.fc.f_out, s.name, "f_out");
      return static_cast<double>(s.fc.f_in) * s.fc.f_out;
    case LayerKind::attention: {
      const auto& a = s.attn;
      require_positive(a.m, s.name, "m");
      require_positive(a.p, s.name, "p");
      require_positive(a.d, s.name, "d");
      const double m = static_cast<double>(a.m), p = static_cast<double>(a.p);
      const double d = static_cast<double>(a.d);
      double f = 2.0 * m * p * d;  // QK^T and weights x V
      f += m * static_cast<double>(a.q_in) * d;
      f += 2.0 * p * static_cast<double>(a.kv_in) * d;
      if (a.out_proj) f += m * d * d;
      return f;
    }
  }
  return 0;
}

double syops_of_layer(const LayerCostSpec& s) {
  if (!s.spike_rate) {
    throw std::invalid_argument("layer '" + s.name + "': spike rate not set");
  }
  if (*s.spike_rate < 0) throw std::invalid_argument("layer '" + s.name + "': negative spike rate");
  return *s.spike_rate * flops_of_layer(s) * s.repeats;
}

double energy_mj(double flops, double syops) {
  return (kEnergyAnnJ * flops + kEnergySnnJ * syops) * 1e3;
}

EnergyReport model_energy(const std::vector<LayerCostSpec>& specs) {
  EnergyReport r;
  for (const auto& s : specs) {
    LayerEnergy e{s.name, s.kind, s.branch};
    if (s.branch == Branch::snn) {
      e.syops = syops_of_layer(s);
    } else {
      e.flops = flops_of_layer(s) * s.repeats;
    }
    e.energy_mj = energy_mj(e.flops, e.syops);
    r.flops_total += e.flops;
    r.syops_total += e.syops;
    r.layers.push_back(std::move(e));
  }
  r.energy_mj = energy_mj(r.flops_total, r.syops_total);
  return r;
}

EnergyReport energy_from_counts(double flops, double syops) {
  EnergyReport r;
  r.flops_total = flops;
  r.syops_total = syops;
  r.energy_mj = energy_mj(flops, syops);
  return r;
}

std::string energy_summary(const EnergyReport& r) {
  char e[64];
  if (r.energy_mj >= 1.0) std::snprintf(e, sizeof e, "%.2f", r.energy_mj);
  else std::snprintf(e, sizeof e, "%.4g", r.energy_mj);
  char buf[192];
  std::snprintf(buf, sizeof buf, "FLOPs=%.4gG SyOPs=%.4gG E=%smJ", r.flops_total / 1e9,
                r.syops_total / 1e9, e);
  return buf;
}

void write_energy_json(const EnergyReport& r, const std::string& path, const std::string& source) {
  nlohmann::json j;
  j["source"] = source;
  j["flops_total"] = r.flops_total;
  j["syops_total"] = r.syops_total;
  j["energy_mj"] = r.energy_mj;
  j["e_ann_pj"] = kEnergyAnnJ * 1e12;
  j["e_snn_pj"] = kEnergySnnJ * 1e12;
  j["counting_rules"] = {
      {"conv", "k_w*k_h*c_in*h_out*w_out*c_out per application"},
      {"fc", "f_in*f_out per row"},
      {"attention", "2*m*p*d for QK^T and weights*V, plus m*q_in*d + 2*p*kv_in*d projections "
                    "and m*d*d output projection when folded in"},
      {"snn", "SyOPs = spike_rate * geometry FLOPs * sequences per clip"},
      {"excluded", "normalization, pooling, residual adds and other elementwise ops"}};
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"name", l.name},
                      {"kind", layer_kind_name(l.kind)},
                      {"branch", branch_name(l.branch)},
                      {"flops", l.flops},
                      {"syops", l.syops},
                      {"energy_mj", l.energy_mj}});
  }
  j["layers"] = std::move(layers);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path);
}

const std::vector<Table4Row>& table4_rows() {
  // Published per-clip operation counts (GFLOPs, GSyOPs) and energy (mJ).
  static const std::vector<Table4Row> rows = {
      {"resnet18", "ResNet-18 (ANN)", 29.22, 0.0, 134.40},
      {"resnet50", "ResNet-50 (ANN)", 66.29, 0.0, 304.92},
      {"c3d", "C3D (ANN)", 154.19, 0.0, 709.27},
      {"res3d", "Res3D-18 (ANN)", 163.21, 0.0, 750.78},
      {"hmdb-ms18", "MS-ResNet-18, HMDB-51", 0.35, 3.19, 4.47},
      {"ucf-ms18", "MS-ResNet-18, UCF-101", 0.35, 3.27, 4.55},
      {"hmdb-respike18", "ReSpike Res-18, HMDB-51", 7.25 + 7.22, 1.93, 68.31},
      {"ucf-respike18", "ReSpike Res-18, UCF-101", 7.25 + 7.22, 1.97, 68.35},
      {"hmdb-respike50", "ReSpike Res-50, HMDB-51", 16.35 + 7.22, 1.93, 110.15},
      {"ucf-respike50", "ReSpike Res-50, UCF-101", 16.35 + 7.22, 2.01, 110.21},
  };
  return rows;
}

const Table4Row& table4_row(const std::string& id) {
  for (const auto& r : table4_rows()) {
    if (r.id == id) return r;
  }
  std::string known;
  for (const auto& r : table4_rows()) known += (known.empty() ? "" : ", ") + r.id;
  throw std::invalid_argument("unknown table row '" + id + "' (known: " + known + ")");
}

void CostLog::add(LayerCostSpec spec, double applications) {
  if (index_.count(spec.name)) return;
  spec.repeats = applications / static_cast<double>(clips_);
  index_[spec.name] = specs_.size();
  specs_.push_back(std::move(spec));
}

void CostLog::clear() {
  specs_.clear();
  index_.clear();
}

}  // namespace respike
