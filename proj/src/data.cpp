#include "kft/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "kft/errors.hpp"
#include "kft/tensor_ops.hpp"

namespace kft {

ZTransform ZTransform::fit(std::span<const double> values, bool center_constant) {
  ZTransform t;
  if (values.empty()) return t;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  if (var > 0.0) {
    t.mean = mean;
    t.scale = std::sqrt(var);
  } else if (center_constant) {
    t.mean = mean;
  }
  return t;
}

CooDataset::CooDataset(std::vector<std::size_t> extents, std::vector<std::size_t> indices,
                       std::vector<double> targets)
    : extents_(std::move(extents)), indices_(std::move(indices)), targets_(std::move(targets)) {
  const std::size_t p = extents_.size();
  if (p == 0) throw DataError("dataset must have at least one mode");
  if (indices_.size() != targets_.size() * p) {
    throw DataError("index table has " + std::to_string(indices_.size()) + " entries for " +
                    std::to_string(targets_.size()) + " records of order " + std::to_string(p));
  }
  std::set<std::vector<std::size_t>> seen;
  for (std::size_t r = 0; r < targets_.size(); ++r) {
    std::vector<std::size_t> tuple(indices_.begin() + static_cast<std::ptrdiff_t>(r * p),
                                   indices_.begin() + static_cast<std::ptrdiff_t>((r + 1) * p));
    for (std::size_t m = 0; m < p; ++m) {
      if (tuple[m] >= extents_[m]) {
        throw DataError("record " + std::to_string(r) + ": index " + std::to_string(tuple[m]) +
                        " outside extent " + std::to_string(extents_[m]) + " of mode " +
                        std::to_string(m));
      }
    }
    if (!seen.insert(std::move(tuple)).second) {
      throw DataError("record " + std::to_string(r) + ": duplicate index tuple");
    }
    if (!std::isfinite(targets_[r])) throw DataError("record " + std::to_string(r) + ": non-finite target");
  }
}

IndexBatch CooDataset::batch(std::span<const std::size_t> records) const {
  IndexBatch b;
  b.modes.assign(order(), std::vector<std::size_t>(records.size()));
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto idx = index(records[k]);
    for (std::size_t m = 0; m < order(); ++m) b.modes[m][k] = idx[m];
  }
  return b;
}

CooDataset CooDataset::subset(std::span<const std::size_t> records) const {
  std::vector<std::size_t> idx;
  idx.reserve(records.size() * order());
  for (auto r : records) {
    const auto i = index(r);
    idx.insert(idx.end(), i.begin(), i.end());
  }
  CooDataset out(extents_, std::move(idx), targets_at(records));
  out.target_transform = target_transform;
  out.targets_scaled = targets_scaled;
  return out;
}

IndexBatch CooDataset::all() const {
  std::vector<std::size_t> records(size());
  std::iota(records.begin(), records.end(), std::size_t{0});
  return batch(records);
}

std::vector<double> CooDataset::targets_at(std::span<const std::size_t> records) const {
  std::vector<double> out(records.size());
  for (std::size_t k = 0; k < records.size(); ++k) out[k] = targets_[records[k]];
  return out;
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

std::optional<std::size_t> parse_index(const std::string& s) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

std::string where(const std::filesystem::path& file, std::size_t line) {
  return file.string() + ":" + std::to_string(line) + ": ";
}

// Rows of a CSV file after the header, each tagged with its line number.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
};

CsvTable read_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  CsvTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    if (table.header.empty()) {
      table.header = std::move(fields);
      continue;
    }
    if (fields.size() != table.header.size()) {
      throw DataError(where(file, lineno) + "expected " + std::to_string(table.header.size()) +
                      " fields, found " + std::to_string(fields.size()));
    }
    table.rows.emplace_back(lineno, std::move(fields));
  }
  if (table.header.empty()) throw DataError(file.string() + ": empty file");
  return table;
}

}  // namespace

DenseTensor load_side_file(const std::filesystem::path& file, std::size_t expected_rows,
                           std::size_t onehot_cap) {
  const CsvTable table = read_csv(file);
  const std::size_t cols = table.header.size();
  if (cols < 2) throw DataError(file.string() + ": side file needs an index column and features");

  std::vector<std::optional<std::size_t>> row_line(expected_rows);
  std::vector<const std::vector<std::string>*> by_index(expected_rows, nullptr);
  for (const auto& [lineno, fields] : table.rows) {
    const auto idx = parse_index(fields[0]);
    if (!idx) throw DataError(where(file, lineno) + "invalid index '" + fields[0] + "'");
    if (*idx >= expected_rows) {
      throw DataError(where(file, lineno) + "unknown index " + std::to_string(*idx) +
                      " (mode extent " + std::to_string(expected_rows) + ")");
    }
    if (row_line[*idx]) throw DataError(where(file, lineno) + "duplicate index " + std::to_string(*idx));
    row_line[*idx] = lineno;
    by_index[*idx] = &fields;
  }
  for (std::size_t i = 0; i < expected_rows; ++i) {
    if (!by_index[i]) throw DataError(file.string() + ": missing side row for index " + std::to_string(i));
  }

  // Column c is numeric when every value parses; otherwise one-hot encoded.
  std::vector<std::vector<double>> columns;
  for (std::size_t c = 1; c < cols; ++c) {
    bool numeric = true;
    for (std::size_t i = 0; i < expected_rows && numeric; ++i) {
      const auto v = parse_double((*by_index[i])[c]);
      numeric = v && std::isfinite(*v);
    }
    if (numeric) {
      std::vector<double> col(expected_rows);
      for (std::size_t i = 0; i < expected_rows; ++i) col[i] = *parse_double((*by_index[i])[c]);
      const ZTransform z = ZTransform::fit(col, false);
      for (auto& v : col) v = z.apply(v);
      columns.push_back(std::move(col));
      continue;
    }
    std::set<std::string> levels;
    for (std::size_t i = 0; i < expected_rows; ++i) {
      const std::string& v = (*by_index[i])[c];
      if (v.empty()) {
        throw DataError(where(file, *row_line[i]) + "empty value in column '" + table.header[c] + "'");
      }
      levels.insert(v);
    }
    if (levels.size() > onehot_cap) {
      throw DataError(file.string() + ": column '" + table.header[c] + "' has " +
                      std::to_string(levels.size()) + " categories, cap is " +
                      std::to_string(onehot_cap));
    }
    for (const auto& level : levels) {
      std::vector<double> col(expected_rows);
      for (std::size_t i = 0; i < expected_rows; ++i) col[i] = (*by_index[i])[c] == level ? 1.0 : 0.0;
      columns.push_back(std::move(col));
    }
  }

  DenseTensor out(Shape{expected_rows, columns.size()});
  for (std::size_t c = 0; c < columns.size(); ++c)
    for (std::size_t i = 0; i < expected_rows; ++i) out(i, c) = columns[c][i];
  return out;
}

LoadedData load_data(const std::filesystem::path& data_file,
                     const std::map<std::size_t, std::filesystem::path>& side_files,
                     const LoadOptions& options) {
  const CsvTable table = read_csv(data_file);
  if (table.header.size() < 2) throw DataError(data_file.string() + ": need index columns and a target");
  const std::size_t p = table.header.size() - 1;

  std::vector<std::size_t> indices;
  std::vector<double> targets;
  std::vector<std::size_t> extents(p, 0);
  std::set<std::vector<std::size_t>> seen;
  for (const auto& [lineno, fields] : table.rows) {
    std::vector<std::size_t> tuple(p);
    for (std::size_t m = 0; m < p; ++m) {
      const auto idx = parse_index(fields[m]);
      if (!idx) throw DataError(where(data_file, lineno) + "invalid index '" + fields[m] + "'");
      tuple[m] = *idx;
      extents[m] = std::max(extents[m], *idx + 1);
    }
    const auto y = parse_double(fields[p]);
    if (!y || !std::isfinite(*y)) {
      throw DataError(where(data_file, lineno) + "non-numeric target '" + fields[p] + "'");
    }
    if (!seen.insert(tuple).second) throw DataError(where(data_file, lineno) + "duplicate index tuple");
    indices.insert(indices.end(), tuple.begin(), tuple.end());
    targets.push_back(*y);
  }
  if (targets.empty()) throw DataError(data_file.string() + ": no records");

  LoadedData out;
  out.side.assign(p, std::nullopt);
  for (const auto& [mode, path] : side_files) {
    if (mode >= p) {
      throw DataError(path.string() + ": side file for mode " + std::to_string(mode) +
                      " but data has " + std::to_string(p) + " modes");
    }
    // The side file fixes the extent; data indices beyond it are unknown.
    const CsvTable probe = read_csv(path);
    std::size_t rows = 0;
    for (const auto& [lineno, fields] : probe.rows) {
      const auto idx = parse_index(fields[0]);
      if (!idx) throw DataError(where(path, lineno) + "invalid index '" + fields[0] + "'");
      rows = std::max(rows, *idx + 1);
    }
    if (rows < extents[mode]) {
      throw DataError(data_file.string() + ": unknown index " + std::to_string(extents[mode] - 1) +
                      " for mode " + std::to_string(mode) + " (no side row)");
    }
    extents[mode] = rows;
    out.side[mode] = load_side_file(path, rows, options.onehot_cap);
  }

  ZTransform transform;
  if (options.scale_targets) {
    transform = ZTransform::fit(targets);
    for (auto& y : targets) y = transform.apply(y);
  }
  out.dataset = CooDataset(std::move(extents), std::move(indices), std::move(targets));
  out.dataset.target_transform = transform;
  out.dataset.targets_scaled = options.scale_targets;
  return out;
}

IndexBatch load_index_file(const std::filesystem::path& file, std::size_t order) {
  const CsvTable table = read_csv(file);
  if (table.header.size() != order && table.header.size() != order + 1) {
    throw DataError(file.string() + ": expected " + std::to_string(order) + " index columns (optionally plus a target), found " +
                    std::to_string(table.header.size()) + " columns");
  }
  IndexBatch batch;
  batch.modes.assign(order, {});
  for (const auto& [lineno, fields] : table.rows) {
    for (std::size_t m = 0; m < order; ++m) {
      const auto idx = parse_index(fields[m]);
      if (!idx) throw DataError(where(file, lineno) + "invalid index '" + fields[m] + "'");
      batch.modes[m].push_back(*idx);
    }
  }
  if (batch.size() == 0) throw DataError(file.string() + ": no records");
  return batch;
}

void save_dataset(const std::filesystem::path& file, const CooDataset& data) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  for (std::size_t m = 0; m < data.order(); ++m) out << 'i' << (m + 1) << ',';
  out << "y\n" << std::setprecision(17);
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (auto idx : data.index(r)) out << idx << ',';
    out << data.target_transform.invert(data.targets()[r]) << '\n';
  }
}

void save_side(const std::filesystem::path& file, const DenseTensor& features) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << "index";
  for (std::size_t c = 0; c < features.cols(); ++c) out << ",f" << c;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    out << i;
    for (std::size_t c = 0; c < features.cols(); ++c) out << ',' << features(i, c);
    out << '\n';
  }
}

Split split_dataset(std::size_t records, std::uint64_t seed) {
  if (records < 5) throw DataError("need at least 5 records to split, got " + std::to_string(records));
  std::vector<std::size_t> order(records);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t held = records / 5;
  Split s;
  s.seed = seed;
  const auto begin = order.begin();
  const auto n_train = static_cast<std::ptrdiff_t>(records - 2 * held);
  s.train.assign(begin, begin + n_train);
  s.validation.assign(begin + n_train, begin + n_train + static_cast<std::ptrdiff_t>(held));
  s.test.assign(begin + n_train + static_cast<std::ptrdiff_t>(held), order.end());
  return s;
}

std::string to_string(SideKind kind) {
  switch (kind) {
    case SideKind::Informative: return "informative";
    case SideKind::Constant: return "constant";
    case SideKind::GaussianNoise: return "gaussian-noise";
    case SideKind::None: return "none";
  }
  return "unknown";
}

SideKind side_kind_from_string(const std::string& name) {
  if (name == "informative") return SideKind::Informative;
  if (name == "constant") return SideKind::Constant;
  if (name == "gaussian-noise") return SideKind::GaussianNoise;
  if (name == "none") return SideKind::None;
  throw ConfigError("unknown side kind '" + name + "' (informative, constant, gaussian-noise, none)");
}

std::optional<DenseTensor> make_side(SideKind kind, std::size_t rows, std::size_t dim,
                                     std::uint64_t seed) {
  switch (kind) {
    case SideKind::None: return std::nullopt;
    case SideKind::Constant: return DenseTensor(Shape{rows, dim}, 1.0);
    case SideKind::GaussianNoise:
    case SideKind::Informative: {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> normal;
      DenseTensor out(Shape{rows, dim});
      for (auto& v : out.data()) v = normal(rng);
      return out;
    }
  }
  return std::nullopt;
}

SynthData synth(const SynthSpec& spec) {
  const std::size_t p = spec.extents.size();
  if (p < 2) throw ConfigError("synth needs at least two modes");
  if (spec.rank == 0 || spec.side_dim == 0) throw ConfigError("synth rank and side_dim must be >= 1");
  if (!(spec.observed_fraction > 0.0 && spec.observed_fraction <= 1.0)) {
    throw ConfigError("synth observed_fraction must lie in (0, 1]");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal;

  SynthData out;
  out.informative.resize(p);
  std::vector<DenseTensor> cores;
  for (std::size_t m = 0; m < p; ++m) {
    const std::size_t n = spec.extents[m];
    DenseTensor features;
    if (spec.clusters > 0) {
      features = DenseTensor(Shape{n, spec.clusters});
      std::uniform_int_distribution<std::size_t> pick(0, spec.clusters - 1);
      for (std::size_t i = 0; i < n; ++i) features(i, i < spec.clusters ? i : pick(rng)) = 1.0;
    } else {
      features = DenseTensor(Shape{n, spec.side_dim});
      for (auto& v : features.data()) v = normal(rng);
    }
    const std::size_t left = m == 0 ? 1 : spec.rank;
    const std::size_t right = m + 1 == p ? 1 : spec.rank;
    DenseTensor loadings(Shape{left, features.cols(), right});
    for (auto& v : loadings.data()) v = normal(rng);
    DenseTensor core = mode_product(loadings, features, Axis(1));  // (left, n, right)
    for (auto& v : core.data()) v += spec.index_share * normal(rng);
    cores.push_back(std::move(core));
    out.informative[m] = std::move(features);
  }
  DenseTensor truth = chain_last_mode(cores);
  const ZTransform z = ZTransform::fit(truth.data());
  for (auto& v : truth.data()) v = (v - z.mean) / z.scale;

  const std::size_t total = truth.size();
  const auto observed = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(spec.observed_fraction * static_cast<double>(total))));
  std::vector<std::size_t> flat(total);
  std::iota(flat.begin(), flat.end(), std::size_t{0});
  for (std::size_t k = 0; k < observed; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, total - 1);
    std::swap(flat[k], flat[pick(rng)]);
  }
  flat.resize(observed);
  std::sort(flat.begin(), flat.end());

  const auto strides = truth.strides();
  std::vector<std::size_t> indices;
  std::vector<double> targets;
  for (auto f : flat) {
    for (std::size_t m = 0; m < p; ++m) indices.push_back((f / strides[m]) % spec.extents[m]);
    targets.push_back(truth[f] + spec.noise * normal(rng));
  }
  out.dataset = CooDataset(spec.extents, std::move(indices), std::move(targets));
  out.truth = std::move(truth);

  out.side.resize(p);
  for (std::size_t m = 0; m < p; ++m) {
    if (spec.kind == SideKind::Informative) {
      out.side[m] = out.informative[m];
    } else {
      out.side[m] = make_side(spec.kind, spec.extents[m], spec.side_dim, spec.seed * 1000003 + m + 1);
    }
  }
  return out;
}

}  // namespace kft
