#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fda/netmodel.hpp"
#include "fda/numkit/random.hpp"

namespace fda {
namespace {

namespace fs = std::filesystem;

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fda_netmodel_test";
  fs::create_directories(dir);
  return dir / name;
}

Block random_ffn(RngStream& rng, std::size_t d, std::size_t h, std::size_t q, Activation act) {
  return Block::ffn(gaussian_matrix(rng, h, d), gaussian_matrix(rng, h, 1), act, gaussian_matrix(rng, q, h),
                    gaussian_matrix(rng, q, 1));
}

Checkpoint random_checkpoint(std::uint64_t seed) {
  RngStream rng(seed);
  Checkpoint c;
  c.blocks.push_back(Block::affine(gaussian_matrix(rng, 6, 4), gaussian_matrix(rng, 6, 1), Activation::Tanh));
  c.blocks.push_back(random_ffn(rng, 6, 5, 3, Activation::SmoothGelu));
  c.meta = {"random", seed, "abc"};
  return c;
}

TEST(ForwardBlock, IdentityAffine) {
  const Block b = Block::affine(Matrix::identity(3), Matrix(3, 1));
  const std::vector<double> x{0.5, -1.0, 2.0};
  EXPECT_EQ(forward_block(b, x), x);
}

TEST(ForwardBlock, ZeroFfnPassesBias) {
  const Block b = Block::ffn(Matrix(4, 2), Matrix::column({1, 2, 3, 4}), Activation::Tanh, Matrix(2, 4),
                             Matrix::column({7, -3}));
  EXPECT_EQ(forward_block(b, std::vector<double>{5, 6}), (std::vector<double>{7, -3}));
}

TEST(ForwardBlock, HandComputedAffine) {
  const Block b = Block::affine(Matrix::from_rows({{1, 2}, {3, 4}}), Matrix::column({1, 1}));
  EXPECT_EQ(forward_block(b, std::vector<double>{1, 1}), (std::vector<double>{4, 8}));
}

TEST(ForwardBlock, ShapeMismatch) {
  const Block b = Block::affine(Matrix::identity(3), Matrix(3, 1));
  try {
    forward_block(b, std::vector<double>{1, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(ForwardBlock, FiniteInputsStayFinite) {
  RngStream rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const Block b = random_ffn(rng, 7, 9, 5, trial % 2 ? Activation::Tanh : Activation::SmoothGelu);
    Matrix x = gaussian_matrix(rng, 7, 4);
    x *= std::pow(10.0, static_cast<double>(trial % 7) - 3.0);
    EXPECT_TRUE(forward_block(b, x).all_finite());
  }
}

TEST(ForwardBlock, MatchesGraphBuilder) {
  RngStream rng(2);
  const Block b = random_ffn(rng, 4, 6, 3, Activation::SmoothGelu);
  const Matrix x = gaussian_matrix(rng, 4, 5);
  const auto params = graph::param_constants(b);
  const Matrix via_graph =
      tape::evaluate(graph::block_output(b.kind, b.activation, params, tape::constant(x)), {});
  const Matrix direct = forward_block(b, x);
  for (std::size_t k = 0; k < direct.size(); ++k) EXPECT_NEAR(via_graph[k], direct[k], 1e-14);
}

TEST(BlockDist, Examples) {
  const std::vector<double> y{1.0, -2.0, 0.5};
  for (auto k : {DistKind::Cosine, DistKind::L1, DistKind::L2}) EXPECT_NEAR(block_dist(k, y, y), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(block_dist(DistKind::L2, std::vector<double>{0, 0}, std::vector<double>{3, 4}), 12.5);
  EXPECT_DOUBLE_EQ(block_dist(DistKind::L1, std::vector<double>{1, 2}, std::vector<double>{2, 0}), 3.0);
}

TEST(BlockDist, CosineZeroNorm) {
  try {
    block_dist(DistKind::Cosine, std::vector<double>{0, 0}, std::vector<double>{1, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroNorm);
  }
}

TEST(BlockDist, Symmetric) {
  RngStream rng(4);
  for (int t = 0; t < 20; ++t) {
    const Matrix a = gaussian_matrix(rng, 6, 1), b = gaussian_matrix(rng, 6, 1);
    for (auto k : {DistKind::Cosine, DistKind::L1, DistKind::L2})
      EXPECT_DOUBLE_EQ(block_dist(k, a.values(), b.values()), block_dist(k, b.values(), a.values()));
  }
}

TEST(BlockDist, GraphAgreesWithDirect) {
  RngStream rng(6);
  const Matrix y0 = gaussian_matrix(rng, 5, 4), yi = gaussian_matrix(rng, 5, 4);
  for (auto k : {DistKind::Cosine, DistKind::L1, DistKind::L2}) {
    const double g = tape::evaluate(graph::dist_sum(k, tape::constant(y0), tape::constant(yi)), {})(0, 0);
    EXPECT_NEAR(g, block_dist_sum(k, y0, yi), 1e-10) << to_string(k);
  }
}

TEST(TaskVector, ZeroWhenEqual) {
  const Checkpoint c = random_checkpoint(1);
  EXPECT_TRUE(task_vector(c, c).is_zero());
}

TEST(TaskVector, ScalarHandExample) {
  Checkpoint a{{Block::affine(Matrix(1, 1, 5.0), Matrix(1, 1, 0.0))}, {}};
  Checkpoint b{{Block::affine(Matrix(1, 1, 2.0), Matrix(1, 1, 0.0))}, {}};
  EXPECT_DOUBLE_EQ(task_vector(a, b).blocks[0].params[0](0, 0), 3.0);
}

TEST(TaskVector, RoundtripIsBitwiseForFinetunedWeights) {
  // Fine-tuned weights stay within a factor of two of the pretrained ones, so
  // the subtraction is exact and adding it back recovers theta_i.
  const Checkpoint theta0 = random_checkpoint(3);
  Checkpoint theta_i = theta0;
  RngStream rng(9);
  for (auto& b : theta_i.blocks)
    for (auto& p : b.params)
      for (double& v : p.values()) v *= 1.0 + 0.05 * rng.normal();
  const Checkpoint back = apply_task_vector(theta0, task_vector(theta_i, theta0));
  for (std::size_t l = 0; l < back.blocks.size(); ++l) EXPECT_EQ(back.blocks[l], theta_i.blocks[l]);
}

TEST(TaskVector, ArchitectureMismatch) {
  const Checkpoint a = random_checkpoint(1);
  Checkpoint b = a;
  b.blocks.pop_back();
  try {
    task_vector(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ArchitectureMismatch);
  }
}

TEST(CheckpointIo, RoundtripIsBitwise) {
  const Checkpoint c = random_checkpoint(12);
  const std::string path = temp_file("roundtrip.ckpt").string();
  save_checkpoint(c, path);
  const Checkpoint back = load_checkpoint(path);
  ASSERT_EQ(back.blocks.size(), c.blocks.size());
  for (std::size_t l = 0; l < c.blocks.size(); ++l) EXPECT_EQ(back.blocks[l], c.blocks[l]);
  EXPECT_EQ(back.meta, c.meta);
}

TEST(CheckpointIo, LayoutIsLittleEndian) {
  Checkpoint c{{Block::affine(Matrix(1, 1, 1.0), Matrix(1, 1, -2.0))}, {}};
  const std::string path = temp_file("layout.ckpt").string();
  save_checkpoint(c, path);
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  // magic 8 + version 2 + count 4 + tags 2 + dims 12 + 2 doubles 16 + crc 4
  ASSERT_EQ(bytes.size(), 48u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "FDACKPT1");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9], 0);
  EXPECT_EQ(bytes[10], 1);  // block count
  EXPECT_EQ(bytes[16], 1);  // d
  EXPECT_EQ(bytes[20], 0);  // h
  EXPECT_EQ(bytes[24], 1);  // q
  // 1.0 = 0x3FF0000000000000
  EXPECT_EQ(bytes[28 + 6], 0xF0);
  EXPECT_EQ(bytes[28 + 7], 0x3F);
  // -2.0 = 0xC000000000000000
  EXPECT_EQ(bytes[36 + 7], 0xC0);
}

void expect_format_violation(const std::string& path, bool task_vector_file = false) {
  try {
    if (task_vector_file) load_task_vector(path);
    else load_checkpoint(path);
    FAIL() << "expected FormatViolation";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::FormatViolation) << e.what();
  }
}

TEST(CheckpointIo, CorruptedMagic) {
  const std::string path = temp_file("magic.ckpt").string();
  save_checkpoint(random_checkpoint(5), path);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(0);
  f.put('X');
  f.close();
  expect_format_violation(path);
}

TEST(CheckpointIo, TruncatedPayload) {
  const std::string path = temp_file("trunc.ckpt").string();
  save_checkpoint(random_checkpoint(5), path);
  fs::resize_file(path, fs::file_size(path) - 20);
  expect_format_violation(path);
}

TEST(CheckpointIo, FlippedPayloadBit) {
  const std::string path = temp_file("flip.ckpt").string();
  save_checkpoint(random_checkpoint(5), path);
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(60);
  const char c = static_cast<char>(f.get());
  f.seekp(60);
  f.put(static_cast<char>(c ^ 0x10));
  f.close();
  expect_format_violation(path);
}

TEST(CheckpointIo, MissingFileIsIo) {
  try {
    load_checkpoint(temp_file("does-not-exist.ckpt").string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Io);
  }
}

TEST(TaskVectorIo, RoundtripAndMagic) {
  const Checkpoint a = random_checkpoint(1), b = random_checkpoint(2);
  const TaskVector tv = task_vector(a, b);
  const std::string path = temp_file("tv.bin").string();
  save_task_vector(tv, path);
  const TaskVector back = load_task_vector(path);
  for (std::size_t l = 0; l < tv.blocks.size(); ++l) EXPECT_EQ(back.blocks[l], tv.blocks[l]);
  // A task-vector file is not a checkpoint.
  expect_format_violation(path);
}

}  // namespace
}  // namespace fda
