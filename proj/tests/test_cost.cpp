#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "sala/checkpoint.hpp"
#include "sala/cost.hpp"
#include "sala/network.hpp"

using namespace sala;

namespace {

NetworkSpec full(std::size_t width) {
  NetworkSpec s;
  s.width = width;
  s.num_classes = 13;
  return s;
}

AggregatorConfig sala2() {
  AggregatorConfig a;
  a.family = AggregatorFamily::Sala;
  a.groups = 2;
  return a;
}

const CostRow& row(const CostReport& r, const std::string& name) {
  for (const auto& x : r.breakdown)
    if (x.name == name) return x;
  throw std::runtime_error("no row " + name);
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "sala_test_cost";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::vector<std::size_t> benchmark_counts() {
  static const auto counts = pyramid_point_counts(benchmark_cloud(), GeometrySpec{}, 5);
  return counts;
}

}  // namespace

TEST(Cost, HeadIsLinearWithBias) {
  NetworkSpec s = full(4);
  s.num_classes = 36;
  EXPECT_EQ(row(count_params(s, sala2()), "head").params, 180u);  // 4*36 + 36
}

TEST(Cost, OneRowTwoToThreeIsSixMacs) {
  NetworkSpec s = full(2);
  s.num_classes = 3;
  s.stages = 1;
  s.blocks_per_stage = {1};
  EXPECT_EQ(row(count_macs(s, sala2(), {1}, 1), "head").macs, 6u);
}

TEST(Cost, ParamsMatchModelScalars) {
  for (std::size_t width : {18u, 36u}) {
    SalaNet<float> net(full(width), sala2(), 1);
    const auto path = scratch("w" + std::to_string(width) + ".salaw");
    net.save(path);
    std::uint64_t scalars = 0;
    for (const auto& t : read_checkpoint(path)) scalars += t.tensor.size();
    EXPECT_EQ(count_params(full(width), sala2()).params, scalars);
  }
}

TEST(Cost, ParameterBandsAndRatio) {
  const double p36 = double(count_params(full(36), sala2()).params);
  const double p18 = double(count_params(full(18), sala2()).params);
  EXPECT_GE(p36, 1.6e6 * 0.9);
  EXPECT_LE(p36, 1.6e6 * 1.1);
  EXPECT_GE(p18, 0.41e6 * 0.9);
  EXPECT_LE(p18, 0.41e6 * 1.1);
  EXPECT_GE(p36 / p18, 3.4);
  EXPECT_LE(p36 / p18, 4.6);
}

TEST(Cost, BenchmarkCloudIsSeededAndSized) {
  const auto a = benchmark_cloud();
  EXPECT_EQ(a.size(), 15000u);
  EXPECT_EQ(a.positions, benchmark_cloud().positions);
  EXPECT_THROW(benchmark_cloud(10'000'000), ValidationError);
}

TEST(Cost, GmacsWithinBandAndDoublingRatio) {
  const auto counts = benchmark_counts();
  ASSERT_EQ(counts.size(), 5u);
  EXPECT_EQ(counts[0], 15000u);
  const double g36 = double(count_macs(full(36), sala2(), counts, 32).macs) / 1e9;
  const double g18 = double(count_macs(full(18), sala2(), counts, 32).macs) / 1e9;
  EXPECT_GE(g36, 12.9 / 2);
  EXPECT_LE(g36, 12.9 * 2);
  EXPECT_GE(g36 / g18, 3.5);
  EXPECT_LE(g36 / g18, 4.5);
}

TEST(Cost, MacsGrowWithKAndPoints) {
  const auto counts = benchmark_counts();
  auto half = counts;
  for (auto& c : half) c /= 2;
  const auto base = count_macs(full(18), sala2(), counts, 16).macs;
  EXPECT_LT(base, count_macs(full(18), sala2(), counts, 32).macs);
  EXPECT_GT(base, count_macs(full(18), sala2(), half, 16).macs);
  EXPECT_THROW(count_macs(full(18), sala2(), {100, 50}, 16), DimensionError);
}

TEST(Cost, BreakdownSumsToTotals) {
  const auto r = count_macs(full(18), sala2(), benchmark_counts(), 32);
  std::uint64_t p = 0, m = 0;
  for (const auto& x : r.breakdown) p += x.params, m += x.macs;
  EXPECT_EQ(p, r.params);
  EXPECT_EQ(m, r.macs);
  EXPECT_EQ(r.raw_f32_bytes, 4 * r.params);
}

TEST(Footprint, EmptyCheckpointIsHeaderOnly) {
  const auto path = scratch("empty.salaw");
  write_checkpoint(path, std::span<const NamedTensor>{});
  EXPECT_EQ(weight_footprint(path), 14u);  // magic + u64 count
}

TEST(Footprint, OneMillionScalars) {
  const auto path = scratch("million.salaw");
  std::vector<NamedTensor> t{{"w", Tensor({1000, 1000})}};
  write_checkpoint(path, t);
  // header, u32 name length, 1 name byte, u32 rank, 2 u64 extents, data
  EXPECT_EQ(weight_footprint(path), 14u + 4 + 1 + 4 + 16 + 4'000'000);
}

TEST(Footprint, RejectsNonCheckpoint) {
  const auto path = scratch("junk.salaw");
  std::ofstream(path) << "not weights";
  EXPECT_THROW(weight_footprint(path), FormatError);
}

TEST(CostReport, JsonAndTableCarryTotals) {
  const auto r = count_params(full(18), sala2());
  EXPECT_NE(r.to_json().find("\"params\": " + std::to_string(r.params)), std::string::npos);
  EXPECT_NE(r.to_table().find(std::to_string(r.params)), std::string::npos);
}
