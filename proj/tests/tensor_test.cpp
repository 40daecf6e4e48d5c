#include <gtest/gtest.h>

#include <sstream>

#include <busu/busu.hpp>

using namespace busu;

TEST(Tensor, ShapeAndFill) {
  Tensor<float> t({2, 3, 4, 5}, 1.5f);
  EXPECT_EQ(t.size(), 120u);
  EXPECT_EQ(t.rank(), 4u);
  EXPECT_EQ(t.at(1, 2, 3, 4), 1.5f);
  EXPECT_THROW(Tensor<float>({2, 0, 3}), ShapeError);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>(3)), ShapeError);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor<double> t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r[4], 5.0);
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Bten, HeaderLayout) {
  Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  std::ostringstream os;
  write_bten(os, t);
  const std::string s = os.str();
  ASSERT_EQ(s.size(), 4u + 3u + 2u * 8u + 6u * 4u);
  EXPECT_EQ(s.substr(0, 4), "BTEN");
  EXPECT_EQ(std::uint8_t(s[4]), 1);  // version
  EXPECT_EQ(std::uint8_t(s[5]), 0);  // f32
  EXPECT_EQ(std::uint8_t(s[6]), 2);  // rank
  EXPECT_EQ(std::uint8_t(s[7]), 2);  // first extent, little endian
  EXPECT_EQ(std::uint8_t(s[15]), 3);
  float first;
  std::memcpy(&first, s.data() + 23, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(Bten, RoundTripBothPrecisions) {
  Rng rng(4);
  Tensor<double> d({3, 1, 4, 2});
  for (auto& v : d.data()) v = rng.normal();
  std::stringstream ss;
  write_bten(ss, d);
  EXPECT_EQ(read_bten<double>(ss), d);

  Tensor<float> f = d.cast<float>();
  std::stringstream sf;
  write_bten(sf, f);
  EXPECT_EQ(read_bten<float>(sf), f);
}

TEST(Bten, CorruptInputs) {
  Tensor<float> t({4}, 2.0f);
  std::ostringstream os;
  write_bten(os, t);
  std::string s = os.str();

  std::istringstream truncated(s.substr(0, s.size() - 3));
  EXPECT_THROW(read_bten<float>(truncated), FormatError);

  std::string bad = s;
  bad[0] = 'X';
  std::istringstream magic(bad);
  EXPECT_THROW(read_bten<float>(magic), FormatError);

  std::istringstream wrong_type(s);
  EXPECT_THROW(read_bten<double>(wrong_type), FormatError);
}
