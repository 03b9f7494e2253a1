#include <gtest/gtest.h>

#include "funkflow/errors.hpp"
#include "funkflow/tensor.hpp"

using namespace funkflow;

static ParamStore sample_store() {
  ParamStore p;
  auto& a = p.add("a", {2, 3});
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] = double(i);
  auto& b = p.add("b", {4});
  for (std::size_t i = 0; i < b.size(); ++i) b.data[i] = -double(i);
  return p;
}

TEST(Tensor, RowMajorMapping) {
  Tensor t({2, 3});
  t.mat()(1, 2) = 5.0;
  EXPECT_EQ(t.data[5], 5.0);
  Tensor v({4});
  EXPECT_EQ(v.mat().rows(), 1);
  EXPECT_EQ(v.mat().cols(), 4);
}

TEST(ParamStore, FlattenUnflattenRoundTrip) {
  auto p = sample_store();
  const auto flat = p.flatten();
  ASSERT_EQ(flat.size(), 10u);
  EXPECT_EQ(flat[6], 0.0);
  EXPECT_EQ(flat[7], -1.0);
  auto q = p.zeros_like();
  q.unflatten(flat);
  EXPECT_EQ(p, q);
}

TEST(ParamStore, InsertionOrderIsLayoutOrder) {
  auto p = sample_store();
  std::vector<std::string> names;
  for (const auto& [n, _] : p) names.push_back(n);
  EXPECT_EQ(names, (std::vector<std::string>{"a", "b"}));
}

TEST(ParamStore, RejectsDuplicatesAndUnknown) {
  auto p = sample_store();
  EXPECT_THROW(p.add("a", {1}), ValidationError);
  EXPECT_THROW(p.at("zzz"), ValidationError);
}

TEST(ParamStore, UnflattenLengthChecked) {
  auto p = sample_store();
  std::vector<double> wrong(9);
  EXPECT_THROW(p.unflatten(wrong), ValidationError);
}

TEST(ParamStore, AccumulateScales) {
  auto p = sample_store();
  auto q = sample_store();
  q.accumulate(p, -1.0);
  for (double v : q.flatten()) EXPECT_EQ(v, 0.0);
}

TEST(ParamStore, LayoutMismatchDetected) {
  auto p = sample_store();
  ParamStore q;
  q.add("a", {3, 2});
  q.add("b", {4});
  EXPECT_THROW(p.check_layout(q), ValidationError);
}
