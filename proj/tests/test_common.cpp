// SPDX-License-Identifier: Apache-2.0

#include "xmgn/common.hpp"

#include <gtest/gtest.h>

using namespace xmgn;

TEST(Fnv64, KnownVectors) {
  // Published FNV-1a 64 test vectors.
  Fnv64 empty;
  EXPECT_EQ(empty.digest(), 0xcbf29ce484222325ULL);
  Fnv64 a;
  a.update("a", 1);
  EXPECT_EQ(a.digest(), 0xaf63dc4c8601ec8cULL);
  Fnv64 foobar;
  foobar.update("foobar", 6);
  EXPECT_EQ(foobar.digest(), 0x85944171f73967e8ULL);
  EXPECT_EQ(hex64(0x85944171f73967e8ULL), "85944171f73967e8");
}

TEST(LittleEndian, RoundTripAndByteOrder) {
  std::vector<unsigned char> buf;
  put_le<std::uint32_t>(buf, 0x01020304u);
  ASSERT_EQ(buf.size(), 4u);
  EXPECT_EQ(buf[0], 0x04);
  EXPECT_EQ(buf[3], 0x01);
  EXPECT_EQ(get_le<std::uint32_t>(buf.data()), 0x01020304u);
  put_le<double>(buf, -2.5);
  EXPECT_EQ(get_le<double>(buf.data() + 4), -2.5);
}

TEST(MixSeed, StreamsDiffer) {
  EXPECT_NE(mix_seed(1, 0), mix_seed(1, 1));
  EXPECT_NE(mix_seed(1, 0), mix_seed(2, 0));
  EXPECT_EQ(mix_seed(7, 3), mix_seed(7, 3));
}

TEST(Require, ThrowsConfigError) {
  EXPECT_NO_THROW(require(true, "x"));
  EXPECT_THROW(require(false, "x"), ConfigError);
}
