#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "stm3/datakit.hpp"
#include "stm3/error.hpp"
#include "test_util.hpp"

using namespace stm3;
using stm3::testing::bit_equal;
using stm3::testing::random_tensor;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "stm3_test_datakit";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

// Pearson correlation of x[t] and x[t + lag].
double autocorrelation(const std::vector<double>& x, std::size_t lag) {
  const std::size_t n = x.size() - lag;
  double ma = 0, mb = 0;
  for (std::size_t t = 0; t < n; ++t) {
    ma += x[t];
    mb += x[t + lag];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t t = 0; t < n; ++t) {
    sab += (x[t] - ma) * (x[t + lag] - mb);
    saa += (x[t] - ma) * (x[t] - ma);
    sbb += (x[t + lag] - mb) * (x[t + lag] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

RawSeries ramp(std::size_t steps, std::size_t N, std::size_t C) {
  RawSeries raw;
  raw.values = Tensor({steps, N, C});
  auto v = raw.values.mutable_data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 * static_cast<double>(i) + std::sin(static_cast<double>(i));
  return raw;
}

}  // namespace

TEST(Synthetic, SameSeedSameSeries) {
  SyntheticSpec s;
  s.T_total = 300;
  const RawSeries a = gen_synthetic(s, 11);
  const RawSeries b = gen_synthetic(s, 11);
  const RawSeries c = gen_synthetic(s, 12);
  EXPECT_TRUE(bit_equal(a.values, b.values));
  EXPECT_TRUE(bit_equal(a.coords, b.coords));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(bit_equal(a.values, c.values));
}

TEST(Synthetic, PureSinusoidHasPeriodFast) {
  SyntheticSpec s;
  s.N = 1;
  s.clusters = 1;
  s.noise = 0.0;
  s.T_total = 480;
  s.mix = {{1.0, 0.0}};
  const RawSeries raw = gen_synthetic(s, 3);
  ASSERT_EQ(raw.values.shape(), (Shape{480, 1, 1}));
  const std::vector<double> x(raw.values.data().begin(), raw.values.data().end());
  EXPECT_NEAR(autocorrelation(x, 12), 1.0, 1e-9);
  EXPECT_NEAR(autocorrelation(x, 6), -1.0, 1e-9);
  for (std::size_t lag = 1; lag < 12; ++lag) EXPECT_LT(autocorrelation(x, lag), 0.9) << lag;
  double peak = 0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  EXPECT_NEAR(peak, 1.0, 0.02);
}

TEST(Synthetic, TwoClustersAreNonEmpty) {
  SyntheticSpec s;
  s.T_total = 100;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const RawSeries raw = gen_synthetic(s, seed);
    ASSERT_EQ(raw.labels.size(), s.N);
    std::size_t ones = 0;
    for (std::size_t l : raw.labels) {
      ASSERT_LT(l, 2u);
      ones += l;
    }
    EXPECT_GT(ones, 0u);
    EXPECT_LT(ones, s.N);
  }
}

TEST(Synthetic, ClustersSeparateByMix) {
  // Cluster 0 is fast-dominated, cluster 1 slow-dominated.
  SyntheticSpec s;
  s.noise = 0.0;
  s.T_total = 960;
  const RawSeries raw = gen_synthetic(s, 5);
  for (std::size_t n = 0; n < s.N; ++n) {
    std::vector<double> x;
    for (std::size_t t = 0; t < s.T_total; ++t) x.push_back(raw.values[t * s.N + n]);
    const double r6 = autocorrelation(x, 6);
    if (raw.labels[n] == 0)
      EXPECT_LT(r6, 0.0) << n;
    else
      EXPECT_GT(r6, 0.5) << n;
  }
}

TEST(Synthetic, RejectsBadSpec) {
  SyntheticSpec s;
  s.clusters = 0;
  EXPECT_THROW(gen_synthetic(s, 0), ConfigError);
  s.clusters = 30;
  EXPECT_THROW(gen_synthetic(s, 0), ConfigError);
  s = SyntheticSpec{};
  s.mix = {{1.0, 0.0}};
  EXPECT_THROW(gen_synthetic(s, 0), ConfigError);
}

TEST(Synthetic, SpecJsonRoundTrip) {
  SyntheticSpec s;
  s.N = 7;
  s.noise = 0.25;
  s.mix = {{1.0, 0.5}, {0.5, 1.0}};
  const SyntheticSpec r = synthetic_spec_from_json(to_json(s));
  EXPECT_EQ(r.N, 7u);
  EXPECT_EQ(r.noise, 0.25);
  EXPECT_EQ(r.mix, s.mix);
  EXPECT_THROW(synthetic_spec_from_json(R"({"N": 4, "nodes": 4})"), ConfigError);
}

TEST(Csv, ShapeFromHeader) {
  const fs::path p = scratch("small.csv");
  write_text(p, "node0_c0,node1_c0\n1,2\n3,4\n5,6\n");
  const RawSeries raw = load_csv(p);
  EXPECT_EQ(raw.values.shape(), (Shape{3, 2, 1}));
  EXPECT_EQ(raw.values.at({2, 1, 0}), 6.0);
  EXPECT_EQ(raw.values.at({1, 0, 0}), 3.0);
}

TEST(Csv, ChannelsAreNodeMajor) {
  const fs::path p = scratch("channels.csv");
  write_text(p, "node0_c0,node0_c1,node1_c0,node1_c1\n1,2,3,4\n");
  const RawSeries raw = load_csv(p);
  EXPECT_EQ(raw.values.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(raw.values.at({0, 1, 0}), 3.0);
}

TEST(Csv, Errors) {
  const fs::path empty = scratch("empty.csv");
  write_text(empty, "");
  EXPECT_THROW(load_csv(empty), ParseError);

  const fs::path ragged = scratch("ragged.csv");
  write_text(ragged, "node0_c0,node1_c0\n1,2\n3\n");
  try {
    load_csv(ragged);
    FAIL() << "ragged row accepted";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }

  const fs::path text = scratch("text.csv");
  write_text(text, "node0_c0\n1\nabc\n");
  EXPECT_THROW(load_csv(text), ParseError);

  const fs::path header = scratch("header.csv");
  write_text(header, "a,b\n1,2\n");
  EXPECT_THROW(load_csv(header), ParseError);

  EXPECT_THROW(load_csv(scratch("does_not_exist.csv")), ParseError);
}

TEST(Csv, RoundTrip) {
  std::mt19937_64 rng(8);
  RawSeries raw;
  raw.values = random_tensor({17, 4, 3}, rng, -1e3, 1e3);
  const fs::path p = scratch("round.csv");
  save_csv(p, raw);
  const RawSeries back = load_csv(p);
  ASSERT_EQ(back.values.shape(), raw.values.shape());
  for (std::size_t i = 0; i < raw.values.size(); ++i) EXPECT_NEAR(back.values[i], raw.values[i], 1e-12);
}

TEST(Series, LabelsSidecarAndBinary) {
  SyntheticSpec s;
  s.T_total = 50;
  const RawSeries raw = gen_synthetic(s, 2);
  for (const char* name : {"syn.csv", "syn.bin"}) {
    const fs::path p = scratch(name);
    save_series(p, raw);
    const RawSeries back = load_series(p);
    EXPECT_TRUE(bit_equal(back.values, raw.values)) << name;
    EXPECT_EQ(back.labels, raw.labels) << name;
    EXPECT_TRUE(bit_equal(back.coords, raw.coords)) << name;
  }
  EXPECT_THROW(load_series(scratch("syn.txt")), ParseError);
}

TEST(Split, SixtyTwentyTwenty) {
  // T_total - T - tau + 1 = 100 start positions.
  const WindowedDataset d = split_normalize(ramp(112, 2, 1), 8, 5);
  ASSERT_EQ(d.window_count(), 100u);
  EXPECT_EQ(d.size(Split::train), 60u);
  EXPECT_EQ(d.size(Split::val), 20u);
  EXPECT_EQ(d.size(Split::test), 20u);
  EXPECT_EQ(d.range(Split::train).second, d.range(Split::val).first);
  EXPECT_EQ(d.range(Split::val).second, d.range(Split::test).first);
  EXPECT_EQ(d.range(Split::test).second, 100u);
}

TEST(Split, WindowCountFormula) {
  const WindowedDataset d = split_normalize(ramp(10, 1, 1), 4, 2);
  EXPECT_EQ(d.window_count(), 5u);
  // Too short for every split to be non-empty.
  EXPECT_THROW(split_normalize(ramp(8, 1, 1), 4, 2), ConfigError);
  EXPECT_THROW(split_normalize(ramp(5, 1, 1), 4, 2), ConfigError);
}

TEST(Split, WindowsAreStrideOne) {
  const RawSeries raw = ramp(60, 3, 2);
  const WindowedDataset d = split_normalize(raw, 6, 4);
  const std::size_t row = 6;
  for (std::size_t s : {0u, 1u, 17u, 50u}) {
    const Window w = d.window(s);
    ASSERT_EQ(w.X.shape(), (Shape{6, 3, 2}));
    ASSERT_EQ(w.Y.shape(), (Shape{4, 3, 2}));
    for (std::size_t i = 0; i < w.X.size(); ++i) EXPECT_EQ(w.X[i], d.normalized()[s * row + i]);
    for (std::size_t i = 0; i < w.Y.size(); ++i) EXPECT_EQ(w.Y[i], d.normalized()[(s + 6) * row + i]);
  }
  EXPECT_THROW(d.window(d.window_count()), ArgumentError);
}

TEST(Split, TrainStatisticsAreStandard) {
  SyntheticSpec s;
  s.N = 5;
  s.C = 2;
  s.T_total = 400;
  const RawSeries raw = gen_synthetic(s, 4);
  const std::size_t T = 12;
  const std::size_t tau = 12;
  const WindowedDataset d = split_normalize(raw, T, tau);
  // Steps read by train-window histories.
  const std::size_t covered = d.size(Split::train) - 1 + T;
  for (std::size_t c = 0; c < 2; ++c) {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < covered; ++t)
      for (std::size_t node = 0; node < 5; ++node) {
        const double v = d.normalized()[(t * 5 + node) * 2 + c];
        sum += v;
        sq += v * v;
        ++n;
      }
    const double mean = sum / n;
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(std::sqrt(sq / n - mean * mean), 1.0, 1e-10);
  }
}

TEST(Split, NoLeakage) {
  // Changing data outside the train histories leaves the statistics untouched.
  SyntheticSpec s;
  s.N = 3;
  s.T_total = 300;
  RawSeries raw = gen_synthetic(s, 9);
  const WindowedDataset a = split_normalize(raw, 12, 12);
  const std::size_t covered = a.size(Split::train) - 1 + 12;
  RawSeries shifted = raw;
  shifted.values = raw.values.clone();
  auto v = shifted.values.mutable_data();
  for (std::size_t i = covered * 3; i < v.size(); ++i) v[i] = 100.0 + 7.0 * v[i];
  const WindowedDataset b = split_normalize(shifted, 12, 12);
  EXPECT_EQ(a.mean(), b.mean());
  EXPECT_EQ(a.stddev(), b.stddev());
  // Validation and test windows are normalized with the same statistics.
  const Window w = b.window(Split::test, 3);
  const Tensor raw_x = b.denormalize(w.X);
  const std::size_t start = b.range(Split::test).first + 3;
  for (std::size_t i = 0; i < raw_x.size(); ++i) EXPECT_NEAR(raw_x[i], v[start * 3 + i], 1e-9);
}

TEST(Split, DenormalizeInvertsNormalize) {
  std::mt19937_64 rng(10);
  RawSeries raw;
  raw.values = random_tensor({80, 4, 3}, rng, -50, 200);
  const WindowedDataset d = split_normalize(raw, 5, 3);
  const Tensor x = random_tensor({7, 4, 3}, rng, -1e3, 1e3);
  const Tensor back = d.denormalize(d.normalize(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back[i], x[i], 1e-12 * std::max(1.0, std::abs(x[i])));
  EXPECT_THROW(d.normalize(Tensor({2, 2})), DimensionError);
}

TEST(Split, ConstantChannelKeepsUnitScale) {
  RawSeries raw;
  raw.values = Tensor::full({40, 2, 1}, 3.0);
  const WindowedDataset d = split_normalize(raw, 4, 2);
  EXPECT_EQ(d.stddev()[0], 1.0);
  for (double v : d.normalized().data()) EXPECT_EQ(v, 0.0);
}

TEST(Persistence, RepeatsLastStep) {
  std::mt19937_64 rng(12);
  const Tensor X = random_tensor({5, 3, 2}, rng);
  const Tensor P = persistence_forecast(X, 4);
  ASSERT_EQ(P.shape(), (Shape{4, 3, 2}));
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(P[h * 6 + i], X[4 * 6 + i]);
}
