#include "stm3/datakit.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "json_util.hpp"
#include "stm3/error.hpp"
#include "stm3/tensor_io.hpp"

namespace stm3 {

using detail::json;

// --- synthetic generator ----------------------------------------------------

void SyntheticSpec::validate() const {
  if (N == 0 || C == 0 || T_total == 0) throw ConfigError("data: N, C and T_total must be positive");
  if (clusters == 0 || clusters > N) throw ConfigError("data: clusters must be in [1, N]");
  if (!(period_fast > 0) || !(period_slow > 0)) throw ConfigError("data: periods must be positive");
  if (!(noise >= 0)) throw ConfigError("data: noise must be nonnegative");
  if (!mix.empty() && mix.size() != clusters) throw ConfigError("data: mix must list one pair per cluster");
}

std::string to_json(const SyntheticSpec& s) {
  json j{{"N", s.N},
         {"T_total", s.T_total},
         {"C", s.C},
         {"clusters", s.clusters},
         {"period_fast", s.period_fast},
         {"period_slow", s.period_slow},
         {"graph_degree", s.graph_degree},
         {"noise", s.noise}};
  if (!s.mix.empty()) j["mix"] = s.mix;
  return j.dump(2);
}

SyntheticSpec synthetic_spec_from_json(const std::string& text) {
  const json j = detail::parse_object(text, "data");
  detail::reject_unknown(j, {"N", "T_total", "C", "clusters", "period_fast", "period_slow", "graph_degree", "noise", "mix"},
                         "data");
  SyntheticSpec s;
  const char* sec = "data";
  detail::read(j, "N", s.N, sec);
  detail::read(j, "T_total", s.T_total, sec);
  detail::read(j, "C", s.C, sec);
  detail::read(j, "clusters", s.clusters, sec);
  detail::read(j, "period_fast", s.period_fast, sec);
  detail::read(j, "period_slow", s.period_slow, sec);
  detail::read(j, "graph_degree", s.graph_degree, sec);
  detail::read(j, "noise", s.noise, sec);
  detail::read(j, "mix", s.mix, sec);
  return s;
}

RawSeries gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t N = spec.N;
  const std::size_t T = spec.T_total;
  const std::size_t C = spec.C;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  RawSeries raw;
  raw.coords = Tensor({N, 2});
  auto xy = raw.coords.mutable_data();
  for (auto& v : xy) v = unit(rng);

  // Clusters: equal-size bands ordered by x coordinate.
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xy[2 * a] < xy[2 * b]; });
  raw.labels.assign(N, 0);
  for (std::size_t r = 0; r < N; ++r) raw.labels[order[r]] = r * spec.clusters / N;

  // k-nearest-neighbour graph, symmetrized.
  const std::size_t degree = std::min(spec.graph_degree, N - 1);
  std::vector<std::vector<std::size_t>> nbrs(N);
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t m = 0; m < N; ++m) {
      if (m == n) continue;
      const double dx = xy[2 * n] - xy[2 * m];
      const double dy = xy[2 * n + 1] - xy[2 * m + 1];
      dist.emplace_back(dx * dx + dy * dy, m);
    }
    std::sort(dist.begin(), dist.end());
    for (std::size_t i = 0; i < degree; ++i) {
      const std::size_t m = dist[i].second;
      nbrs[n].push_back(m);
      nbrs[m].push_back(n);
    }
  }
  for (auto& list : nbrs) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end()), list.end());
  }

  std::vector<std::pair<double, double>> mix = spec.mix;
  if (mix.empty()) {
    for (std::size_t c = 0; c < spec.clusters; ++c) {
      const double f = spec.clusters == 1 ? 0.0 : static_cast<double>(c) / static_cast<double>(spec.clusters - 1);
      mix.emplace_back(1.0 + f * (0.25 - 1.0), 0.25 + f * (1.0 - 0.25));
    }
  }

  std::vector<double> phase(N);
  for (auto& p : phase) p = 2.0 * std::numbers::pi * unit(rng);

  raw.values = Tensor({T, N, C});
  auto v = raw.values.mutable_data();
  std::vector<double> white(N);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) {
      for (auto& w : white) w = spec.noise > 0 ? spec.noise * gauss(rng) : 0.0;
      const double channel_shift = static_cast<double>(c) * std::numbers::pi / 4.0;
      for (std::size_t n = 0; n < N; ++n) {
        const auto [a, b] = mix[raw.labels[n]];
        double smooth = white[n];
        if (!nbrs[n].empty()) {
          double acc = 0.0;
          for (std::size_t m : nbrs[n]) acc += white[m];
          smooth = 0.5 * white[n] + 0.5 * acc / static_cast<double>(nbrs[n].size());
        }
        const double tt = static_cast<double>(t);
        v[(t * N + n) * C + c] = a * std::sin(two_pi * tt / spec.period_fast + phase[n] + channel_shift) +
                                 b * std::sin(two_pi * tt / spec.period_slow + channel_shift) + smooth;
      }
    }
  }
  return raw;
}

// --- files ------------------------------------------------------------------

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& field, std::size_t line) {
  std::size_t b = 0;
  std::size_t e = field.size();
  while (b < e && std::isspace(static_cast<unsigned char>(field[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(field[e - 1]))) --e;
  double v = 0.0;
  const char* first = field.data() + b;
  const char* last = field.data() + e;
  if (b < e && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (b == e || res.ec != std::errc() || res.ptr != last || !std::isfinite(v)) {
    throw ParseError("line " + std::to_string(line) + ": not a finite number: '" + field + "'");
  }
  return v;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

std::filesystem::path labels_path(const std::filesystem::path& path) {
  return path.parent_path() / (path.stem().string() + ".labels.csv");
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void save_labels(const std::filesystem::path& path, const RawSeries& raw) {
  std::ofstream out(labels_path(path));
  if (!out) throw Error("cannot write " + labels_path(path).string());
  const bool has_xy = raw.coords.size() == 2 * raw.nodes();
  out << (has_xy ? "node,cluster,x,y\n" : "node,cluster\n");
  for (std::size_t n = 0; n < raw.labels.size(); ++n) {
    out << n << ',' << raw.labels[n];
    if (has_xy) out << ',' << format_double(raw.coords[2 * n]) << ',' << format_double(raw.coords[2 * n + 1]);
    out << '\n';
  }
}

void load_labels(const std::filesystem::path& path, RawSeries& raw) {
  const auto lp = labels_path(path);
  if (!std::filesystem::exists(lp)) return;
  std::ifstream in(lp);
  std::string line;
  std::getline(in, line);
  strip_cr(line);
  const bool has_xy = split_fields(line).size() == 4;
  std::vector<std::size_t> labels;
  std::vector<double> xy;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != (has_xy ? 4u : 2u)) throw ParseError(lp.string() + " line " + std::to_string(lineno) + ": ragged row");
    const double label = parse_number(f[1], lineno);
    if (label < 0 || label != std::floor(label)) throw ParseError(lp.string() + ": cluster labels must be integers");
    labels.push_back(static_cast<std::size_t>(label));
    if (has_xy) {
      xy.push_back(parse_number(f[2], lineno));
      xy.push_back(parse_number(f[3], lineno));
    }
  }
  if (labels.size() != raw.nodes()) throw ParseError(lp.string() + ": one label per node expected");
  raw.labels = std::move(labels);
  if (has_xy) raw.coords = Tensor({raw.nodes(), 2}, std::move(xy));
}

}  // namespace

RawSeries load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  strip_cr(line);
  const auto header = split_fields(line);
  if (header.empty() || line.empty()) throw ParseError(path.string() + ": empty header");

  // Header names give the (node, channel) grid.
  std::size_t N = 0;
  std::size_t C = 0;
  std::vector<std::pair<std::size_t, std::size_t>> cols;
  for (const std::string& h : header) {
    std::size_t n = 0;
    std::size_t c = 0;
    char tail = 0;
    if (std::sscanf(h.c_str(), "node%zu_c%zu%c", &n, &c, &tail) != 2) {
      throw ParseError(path.string() + ": bad header column '" + h + "' (expected node{n}_c{c})");
    }
    cols.emplace_back(n, c);
    N = std::max(N, n + 1);
    C = std::max(C, c + 1);
  }
  if (N * C != cols.size()) throw ParseError(path.string() + ": header does not cover a full node x channel grid");
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] != std::make_pair(i / C, i % C)) {
      throw ParseError(path.string() + ": header columns must be ordered node-major");
    }
  }

  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != cols.size()) {
      throw ParseError(path.string() + " line " + std::to_string(lineno) + ": expected " +
                       std::to_string(cols.size()) + " fields, found " + std::to_string(fields.size()));
    }
    for (const std::string& f : fields) values.push_back(parse_number(f, lineno));
    ++rows;
  }
  if (rows == 0) throw ParseError(path.string() + ": no data rows");
  RawSeries raw;
  raw.values = Tensor({rows, N, C}, std::move(values));
  return raw;
}

void save_csv(const std::filesystem::path& path, const RawSeries& raw) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  const std::size_t N = raw.nodes();
  const std::size_t C = raw.channels();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) out << (n || c ? "," : "") << "node" << n << "_c" << c;
  out << '\n';
  const auto v = raw.values.data();
  for (std::size_t t = 0; t < raw.steps(); ++t) {
    for (std::size_t i = 0; i < N * C; ++i) out << (i ? "," : "") << format_double(v[t * N * C + i]);
    out << '\n';
  }
}

RawSeries load_series(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  RawSeries raw;
  if (ext == ".csv") {
    raw = load_csv(path);
  } else if (ext == ".bin") {
    raw.values = load_tensor(path);
    if (raw.values.ndim() != 3) throw ParseError(path.string() + ": series tensor must be [T, N, C]");
  } else {
    throw ParseError("unsupported dataset extension '" + ext + "' (use .csv or .bin)");
  }
  load_labels(path, raw);
  return raw;
}

void save_series(const std::filesystem::path& path, const RawSeries& raw) {
  const std::string ext = path.extension().string();
  if (ext == ".csv") {
    save_csv(path, raw);
  } else if (ext == ".bin") {
    save_tensor(path, raw.values);
  } else {
    throw ArgumentError("unsupported dataset extension '" + ext + "' (use .csv or .bin)");
  }
  if (!raw.labels.empty()) save_labels(path, raw);
}

// --- windows ----------------------------------------------------------------

WindowedDataset::WindowedDataset(Tensor normalized, std::size_t T, std::size_t tau, std::vector<double> mean,
                                 std::vector<double> stddev, std::vector<std::size_t> labels)
    : series_(std::move(normalized)),
      T_(T),
      tau_(tau),
      mean_(std::move(mean)),
      std_(std::move(stddev)),
      labels_(std::move(labels)) {
  if (series_.ndim() != 3) throw DimensionError("dataset series must be [T_total, N, C]");
  if (T_ == 0 || tau_ == 0) throw ConfigError("window lengths must be positive");
  if (series_.dim(0) < T_ + tau_) throw ConfigError("series is shorter than one window");
  const std::size_t W = window_count();
  n_train_ = W * 6 / 10;
  n_val_ = W * 2 / 10;
  if (n_train_ == 0 || n_val_ == 0 || W - n_train_ - n_val_ == 0) {
    throw ConfigError("series too short: " + std::to_string(W) + " windows cannot fill a 6:2:2 split");
  }
}

std::pair<std::size_t, std::size_t> WindowedDataset::range(Split split) const {
  switch (split) {
    case Split::train:
      return {0, n_train_};
    case Split::val:
      return {n_train_, n_train_ + n_val_};
    case Split::test:
      return {n_train_ + n_val_, window_count()};
  }
  return {0, 0};
}

std::size_t WindowedDataset::size(Split split) const {
  const auto [b, e] = range(split);
  return e - b;
}

Window WindowedDataset::window(std::size_t start) const {
  if (start >= window_count()) throw ArgumentError("window index out of range");
  const std::size_t row = nodes() * channels();
  const auto v = series_.data();
  Window w;
  w.X = Tensor({T_, nodes(), channels()},
               std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(start * row),
                                   v.begin() + static_cast<std::ptrdiff_t>((start + T_) * row)));
  w.Y = Tensor({tau_, nodes(), channels()},
               std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>((start + T_) * row),
                                   v.begin() + static_cast<std::ptrdiff_t>((start + T_ + tau_) * row)));
  return w;
}

Tensor WindowedDataset::denormalize(const Tensor& x) const {
  const std::size_t C = channels();
  if (x.ndim() == 0 || x.shape().back() != C) throw DimensionError("denormalize: last axis must be the channel axis");
  Tensor out(x.shape());
  auto o = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] * std_[i % C] + mean_[i % C];
  return out;
}

Tensor WindowedDataset::normalize(const Tensor& x) const {
  const std::size_t C = channels();
  if (x.ndim() == 0 || x.shape().back() != C) throw DimensionError("normalize: last axis must be the channel axis");
  Tensor out(x.shape());
  auto o = out.mutable_data();
  const auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = (in[i] - mean_[i % C]) / std_[i % C];
  return out;
}

WindowedDataset split_normalize(const RawSeries& raw, std::size_t T, std::size_t tau) {
  if (raw.values.ndim() != 3) throw DimensionError("split_normalize: series must be [T_total, N, C]");
  const std::size_t steps = raw.steps();
  if (T == 0 || tau == 0 || steps < T + tau) throw ConfigError("split_normalize: series shorter than one window");
  const std::size_t W = steps - T - tau + 1;
  const std::size_t n_train = W * 6 / 10;
  if (n_train == 0) throw ConfigError("split_normalize: no training windows");
  // Train windows start at 0 .. n_train - 1 and read history up to n_train - 1 + T.
  const std::size_t covered = n_train - 1 + T;
  const std::size_t N = raw.nodes();
  const std::size_t C = raw.channels();
  const auto v = raw.values.data();
  std::vector<double> mean(C, 0.0);
  std::vector<double> stddev(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t t = 0; t < covered; ++t)
      for (std::size_t n = 0; n < N; ++n) s += v[(t * N + n) * C + c];
    mean[c] = s / static_cast<double>(covered * N);
    double ss = 0.0;
    for (std::size_t t = 0; t < covered; ++t)
      for (std::size_t n = 0; n < N; ++n) {
        const double e = v[(t * N + n) * C + c] - mean[c];
        ss += e * e;
      }
    stddev[c] = std::sqrt(ss / static_cast<double>(covered * N));
    if (!(stddev[c] > 0)) stddev[c] = 1.0;
  }
  Tensor normalized(raw.values.shape());
  auto o = normalized.mutable_data();
  for (std::size_t i = 0; i < v.size(); ++i) o[i] = (v[i] - mean[i % C]) / stddev[i % C];
  return WindowedDataset(std::move(normalized), T, tau, std::move(mean), std::move(stddev), raw.labels);
}

Tensor persistence_forecast(const Tensor& X, std::size_t tau) {
  if (X.ndim() != 3) throw DimensionError("persistence_forecast: history must be [T, N, C]");
  const std::size_t row = X.dim(1) * X.dim(2);
  const auto v = X.data();
  Tensor out({tau, X.dim(1), X.dim(2)});
  auto o = out.mutable_data();
  const std::size_t last = (X.dim(0) - 1) * row;
  for (std::size_t h = 0; h < tau; ++h)
    for (std::size_t i = 0; i < row; ++i) o[h * row + i] = v[last + i];
  return out;
}

}  // namespace stm3
