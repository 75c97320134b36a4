#pragma once

#include "lacim/matrix.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace lacim {

/// Samples from one environment. `s`, `z`, `c` are simulator ground truth and
/// are only populated for generated data; they never reach a model.
struct EnvDataset {
  int env = 1;
  Matrix x;
  Matrix y;                 // n x q_y, continuous targets
  std::vector<int> labels;  // n class labels, classification targets
  bool has_latents = false;
  Matrix s;
  Matrix z;
  Matrix c;

  Index size() const { return x.rows(); }
  bool classification() const { return y.cols() == 0 && !labels.empty(); }

  void validate() const {
    const Index n = x.rows();
    require(y.cols() == 0 || y.rows() == n, "EnvDataset: y row count differs from x");
    require(labels.empty() || static_cast<Index>(labels.size()) == n,
            "EnvDataset: label count differs from x");
    require(y.cols() == 0 || labels.empty(), "EnvDataset: both continuous and class targets set");
    if (has_latents) {
      require(s.rows() == n && z.rows() == n && c.rows() == n,
              "EnvDataset: latent row counts differ from x");
    }
  }
};

/// The part of a dataset a learner may see: inputs, targets and the
/// environment index.
struct ObservedData {
  int env = 1;
  Matrix x;
  Matrix y;
  std::vector<int> labels;

  Index size() const { return x.rows(); }
  bool classification() const { return y.cols() == 0 && !labels.empty(); }
};

inline ObservedData observed(const EnvDataset& d) { return ObservedData{d.env, d.x, d.y, d.labels}; }

inline std::vector<ObservedData> observed(const std::vector<EnvDataset>& ds) {
  std::vector<ObservedData> out;
  out.reserve(ds.size());
  for (const auto& d : ds) out.push_back(observed(d));
  return out;
}

/// Merge all environments into a single environment 1.
inline ObservedData pool(const std::vector<ObservedData>& ds) {
  require(!ds.empty(), "pool: no datasets");
  ObservedData out;
  out.env = 1;
  Index n = 0;
  for (const auto& d : ds) n += d.size();
  out.x.resize(n, ds.front().x.cols());
  out.y.resize(ds.front().y.cols() > 0 ? n : 0, ds.front().y.cols());
  Index r = 0;
  for (const auto& d : ds) {
    out.x.middleRows(r, d.size()) = d.x;
    if (out.y.cols() > 0) out.y.middleRows(r, d.size()) = d.y;
    out.labels.insert(out.labels.end(), d.labels.begin(), d.labels.end());
    r += d.size();
  }
  return out;
}

namespace csv {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(std::string_view s, std::size_t row) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw Error("csv: cannot parse '" + std::string(s) + "' as a number on row " + std::to_string(row));
  return v;
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace csv

/// Column layout: x0.., then y0.. (continuous) or `label` (classification),
/// then s0.., z0.., c0.. when latents are present, then env.
inline void export_dataset(const EnvDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path);
  require(out.good(), "export_dataset: cannot open " + path.string());
  std::vector<std::string> header;
  auto add = [&](const char* prefix, Index count) {
    for (Index i = 0; i < count; ++i) header.push_back(prefix + std::to_string(i));
  };
  add("x", ds.x.cols());
  if (ds.classification()) {
    header.emplace_back("label");
  } else {
    add("y", ds.y.cols());
  }
  if (ds.has_latents) {
    add("s", ds.s.cols());
    add("z", ds.z.cols());
    add("c", ds.c.cols());
  }
  header.emplace_back("env");
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (Index r = 0; r < ds.size(); ++r) {
    auto row = [&](const Matrix& m) {
      for (Index c = 0; c < m.cols(); ++c) out << csv::format_double(m(r, c)) << ',';
    };
    row(ds.x);
    if (ds.classification()) {
      out << ds.labels[static_cast<std::size_t>(r)] << ',';
    } else {
      row(ds.y);
    }
    if (ds.has_latents) {
      row(ds.s);
      row(ds.z);
      row(ds.c);
    }
    out << ds.env << '\n';
  }
  require(out.good(), "export_dataset: write failed for " + path.string());
}

inline EnvDataset import_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "import_dataset: cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "import_dataset: missing header in " + path.string());
  const auto header = csv::split(line);
  Index nx = 0, ny = 0, ns = 0, nz = 0, nc = 0;
  bool has_label = false, has_env = false;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string& h = header[i];
    const bool last = i + 1 == header.size();
    if (h == "env" && last) {
      has_env = true;
    } else if (h == "label") {
      has_label = true;
    } else if (h.size() > 1 && (h[0] == 'x' || h[0] == 'y' || h[0] == 's' || h[0] == 'z' || h[0] == 'c')) {
      Index& count = h[0] == 'x' ? nx : h[0] == 'y' ? ny : h[0] == 's' ? ns : h[0] == 'z' ? nz : nc;
      require(h.substr(1) == std::to_string(count),
              "import_dataset: unexpected column '" + h + "' in header");
      ++count;
    } else {
      throw Error("import_dataset: unknown column '" + h + "' in header");
    }
  }
  require(has_env, "import_dataset: header must end with 'env'");
  require(!(has_label && ny > 0), "import_dataset: both label and y columns present");
  const bool latents = ns + nz + nc > 0;

  std::vector<std::vector<double>> rows;
  std::size_t row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    const auto cells = csv::split(line);
    require(cells.size() == header.size(),
            "import_dataset: row " + std::to_string(row_no) + " has " + std::to_string(cells.size()) +
                " columns, expected " + std::to_string(header.size()));
    std::vector<double> vals(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) vals[i] = csv::parse_double(cells[i], row_no);
    rows.push_back(std::move(vals));
  }

  EnvDataset ds;
  const auto n = static_cast<Index>(rows.size());
  ds.x.resize(n, nx);
  ds.y.resize(ny > 0 ? n : 0, ny);
  ds.has_latents = latents;
  if (latents) {
    ds.s.resize(n, ns);
    ds.z.resize(n, nz);
    ds.c.resize(n, nc);
  }
  for (Index r = 0; r < n; ++r) {
    const auto& v = rows[static_cast<std::size_t>(r)];
    std::size_t k = 0;
    for (Index i = 0; i < nx; ++i) ds.x(r, i) = v[k++];
    if (has_label) {
      ds.labels.push_back(static_cast<int>(v[k++]));
    } else {
      for (Index i = 0; i < ny; ++i) ds.y(r, i) = v[k++];
    }
    if (latents) {
      for (Index i = 0; i < ns; ++i) ds.s(r, i) = v[k++];
      for (Index i = 0; i < nz; ++i) ds.z(r, i) = v[k++];
      for (Index i = 0; i < nc; ++i) ds.c(r, i) = v[k++];
    }
    const int env = static_cast<int>(v[k]);
    require(r == 0 || env == ds.env, "import_dataset: mixed env indices on row " + std::to_string(r + 2));
    ds.env = env;
  }
  ds.validate();
  return ds;
}

}  // namespace lacim
