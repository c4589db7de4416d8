#include "attnhess/tensor_ops.hpp"

#include <atomic>
#include <numeric>
#include <string>

namespace attnhess {

namespace {
std::atomic<std::size_t> g_element_cap{std::size_t{1} << 26};
}

std::size_t element_cap() { return g_element_cap.load(); }

void set_element_cap(std::size_t cap) {
  if (cap == 0) throw ValidationError("element cap must be positive");
  g_element_cap.store(cap);
}

void check_element_cap(Index rows, Index cols, const char* label) {
  const auto r = static_cast<unsigned long long>(rows);
  const auto c = static_cast<unsigned long long>(cols);
  const auto cap = static_cast<unsigned long long>(element_cap());
  if (r != 0 && c > cap / r) {
    throw SizeLimitError(std::string(label) + ": requested " + std::to_string(r) + " x " +
                         std::to_string(c) + " exceeds element cap " + std::to_string(cap));
  }
}

Vec vecr(const Mat& m) {
  Vec out(m.size());
  for (Index i = 0; i < m.rows(); ++i) {
    out.segment(i * m.cols(), m.cols()) = m.row(i).transpose();
  }
  return out;
}

Mat unvecr(const Vec& v, Index rows, Index cols) {
  if (v.size() != rows * cols) throw ShapeError("unvecr: size mismatch");
  Mat out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    out.row(i) = v.segment(i * cols, cols).transpose();
  }
  return out;
}

Mat kron(const Mat& a, const Mat& b) {
  check_element_cap(a.rows() * b.rows(), a.cols() * b.cols(), "kron");
  Mat out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

Mat commutation(Index n, Index m) {
  if (n < 1 || m < 1) throw ShapeError("commutation: dimensions must be >= 1");
  check_element_cap(m * n, m * n, "commutation");
  Mat out = Mat::Zero(m * n, m * n);
  // Row super-index (i_n, i_m), column super-index (i_m, i_n).
  for (Index in = 0; in < n; ++in) {
    for (Index im = 0; im < m; ++im) {
      out(in * m + im, im * n + in) = 1.0;
    }
  }
  return out;
}

BlockPartition BlockPartition::single(Index rows, Index cols) {
  return BlockPartition{{rows}, {cols}};
}

BlockPartition BlockPartition::row_blocks(Index count, Index rows_per_block, Index cols) {
  BlockPartition p;
  p.row_sizes.assign(static_cast<std::size_t>(count), rows_per_block);
  p.col_sizes = {cols};
  return p;
}

Index BlockPartition::total_rows() const {
  return std::accumulate(row_sizes.begin(), row_sizes.end(), Index{0});
}

Index BlockPartition::total_cols() const {
  return std::accumulate(col_sizes.begin(), col_sizes.end(), Index{0});
}

Mat khatri_rao(const Mat& a, const BlockPartition& pa, const Mat& b, const BlockPartition& pb) {
  if (pa.row_sizes.size() != pb.row_sizes.size() || pa.col_sizes.size() != pb.col_sizes.size()) {
    throw PartitionError("khatri_rao: block grids have different shapes");
  }
  if (pa.total_rows() != a.rows() || pa.total_cols() != a.cols() ||
      pb.total_rows() != b.rows() || pb.total_cols() != b.cols()) {
    throw PartitionError("khatri_rao: partition does not tile its matrix");
  }
  for (Index s : pa.row_sizes) if (s < 1) throw PartitionError("khatri_rao: block sizes must be >= 1");
  for (Index s : pa.col_sizes) if (s < 1) throw PartitionError("khatri_rao: block sizes must be >= 1");
  for (Index s : pb.row_sizes) if (s < 1) throw PartitionError("khatri_rao: block sizes must be >= 1");
  for (Index s : pb.col_sizes) if (s < 1) throw PartitionError("khatri_rao: block sizes must be >= 1");

  const std::size_t nr = pa.row_sizes.size();
  const std::size_t nc = pa.col_sizes.size();
  Index out_rows = 0, out_cols = 0;
  for (std::size_t i = 0; i < nr; ++i) out_rows += pa.row_sizes[i] * pb.row_sizes[i];
  for (std::size_t j = 0; j < nc; ++j) out_cols += pa.col_sizes[j] * pb.col_sizes[j];
  check_element_cap(out_rows, out_cols, "khatri_rao");

  Mat out(out_rows, out_cols);
  Index ra = 0, rb = 0, ro = 0;
  for (std::size_t i = 0; i < nr; ++i) {
    Index ca = 0, cb = 0, co = 0;
    for (std::size_t j = 0; j < nc; ++j) {
      const Mat block = kron(a.block(ra, ca, pa.row_sizes[i], pa.col_sizes[j]),
                             b.block(rb, cb, pb.row_sizes[i], pb.col_sizes[j]));
      out.block(ro, co, block.rows(), block.cols()) = block;
      ca += pa.col_sizes[j];
      cb += pb.col_sizes[j];
      co += block.cols();
    }
    ra += pa.row_sizes[i];
    rb += pb.row_sizes[i];
    ro += pa.row_sizes[i] * pb.row_sizes[i];
  }
  return out;
}

Mat shuffle_matrix(Index d) {
  if (d < 1) throw ShapeError("shuffle_matrix: d must be >= 1");
  const Mat id = Mat::Identity(d, d);
  const Mat vec_id = vecr(id);  // d^2 x 1
  return kron(id, commutation(d, d)) * kron(vec_id, id);
}

Mat block_diag(const std::vector<Mat>& blocks) {
  if (blocks.empty()) throw ShapeError("block_diag: empty block list");
  Index rows = 0, cols = 0;
  for (const Mat& b : blocks) {
    rows += b.rows();
    cols += b.cols();
  }
  check_element_cap(rows, cols, "block_diag");
  Mat out = Mat::Zero(rows, cols);
  Index r = 0, c = 0;
  for (const Mat& b : blocks) {
    out.block(r, c, b.rows(), b.cols()) = b;
    r += b.rows();
    c += b.cols();
  }
  return out;
}

}  // namespace attnhess
