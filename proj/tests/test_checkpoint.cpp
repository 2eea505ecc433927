#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pil/checkpoint.hpp"
#include "pil/errors.hpp"

using namespace pil;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pil_ckpt";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Checkpoint, ByteExactRoundTrip) {
  const Network net = Network::build(student_spec("desk"), 4);
  const Checkpoint ckpt = checkpoint_of(net, {{"phase", "student"}, {"iteration", 7}});
  const auto bytes = encode_checkpoint(ckpt);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.spec, net.spec());
  EXPECT_EQ(back.meta["iteration"], 7);
  EXPECT_EQ(network_from_checkpoint(back).digest(), net.digest());

  const fs::path p = scratch("rt.plck");
  save_checkpoint(p, ckpt);
  EXPECT_EQ(file_bytes(p), bytes);
  save_checkpoint(scratch("rt2.plck"), load_checkpoint(p));
  EXPECT_EQ(file_bytes(scratch("rt2.plck")), bytes);
}

TEST(Checkpoint, LayoutIsLittleEndian) {
  Checkpoint c;
  c.spec = student_spec("desk");
  c.tensors.push_back({"w", Tensor({2}, std::vector<double>{1.0, -2.0})});
  const auto b = encode_checkpoint(c);
  ASSERT_GE(b.size(), 12u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "PLCK");
  EXPECT_EQ(b[4], 1);  // version
  EXPECT_EQ(b[8], 1);  // tensor count
  EXPECT_EQ(b[12], 1);  // name length
  EXPECT_EQ(b[16], 'w');
  EXPECT_EQ(b[17], 1);  // rank
  EXPECT_EQ(b[21], 2);  // dim 0
  // 1.0 = 0x3ff0000000000000
  EXPECT_EQ(b[29 + 7], 0x3f);
  EXPECT_EQ(b[29 + 6], 0xf0);
}

TEST(Checkpoint, CorruptInputIsAnIoError) {
  const auto good = encode_checkpoint(checkpoint_of(Network::build(student_spec("desk"), 1)));
  auto bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), IoError);
  bad = good;
  bad[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad), IoError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{40}, good.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(std::span(good).first(cut)), IoError) << cut;
  }
  EXPECT_THROW(load_checkpoint(scratch("absent.plck")), IoError);
}

TEST(Checkpoint, MismatchedTensorsAreRejected) {
  Checkpoint c = checkpoint_of(Network::build(student_spec("desk"), 1));
  c.spec = teacher_spec("desk");
  EXPECT_THROW(network_from_checkpoint(c), BuildError);
}
