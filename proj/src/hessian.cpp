#include "attnhess/hessian.hpp"

#include "attnhess/derivatives.hpp"

#include <cmath>
#include <string>

namespace attnhess {

namespace {

// Everything the closed forms of one head consume. The residual is the
// global one (all heads contribute to f).
struct BlockContext {
  Mat w_query, w_key, w_value;
  Mat m1, z1, z2;
  Vec residual;
  Mat shuffle;  // S, d_v^3 x d_v
  Index L = 0, d_v = 0, d_k = 0;
  double loss_scale = 0;  // 2 / (L d_v)
  double sim_scale = 0;   // 1 / (t sqrt(d_k))
};

BlockContext make_context(const AttentionSpec& spec, const ForwardCache& cache,
                          const MomentSet& terms, std::size_t head) {
  BlockContext c;
  const HeadWeights& h = spec.heads.at(head);
  c.w_query = h.w_query;
  c.w_key = h.w_key;
  c.w_value = h.w_value;
  c.m1 = terms.m1;
  c.z1 = terms.z1;
  c.z2 = terms.z2;
  c.residual = cache.residual;
  c.L = cache.output.rows();
  c.d_v = cache.output.cols();
  c.d_k = h.w_query.cols();
  c.shuffle = shuffle_matrix(c.d_v);
  c.loss_scale = 2.0 / static_cast<double>(c.L * c.d_v);
  c.sim_scale = 1.0 / (spec.temperature * std::sqrt(static_cast<double>(c.d_k)));
  return c;
}

Mat identity(Index n) { return Mat::Identity(n, n); }

// Column factor attached to query columns: I_{d_v} ⊗ W_K.
Mat query_cols(const BlockContext& c) { return kron(identity(c.d_v), c.w_key); }

// Column factor attached to key columns: (W_Q ⊗ I_{d_v}) K_{d_k,d_v}.
Mat key_cols(const BlockContext& c) {
  return kron(c.w_query, identity(c.d_v)) * commutation(c.d_k, c.d_v);
}

// Z1^T (I_L ⊗ W_V W_V^T) Z1, the shared core of all query/key outer blocks.
Mat qk_outer_core(const BlockContext& c) {
  const Mat mid = kron(identity(c.L), c.w_value * c.w_value.transpose());
  return c.z1.transpose() * mid * c.z1;
}

// delta^T (I_L ⊗ W_V^T) as a 1 x L d_v row; equals vecr(Delta W_V^T)^T.
Mat residual_value_row(const BlockContext& c) {
  const Mat delta = unvecr(c.residual, c.L, c.d_v);
  return vecr(delta * c.w_value.transpose()).transpose();
}

Mat residual_row(const BlockContext& c) { return c.residual.transpose(); }

// R_{d_v^2} (I_L ⊗ S), the left factor of the value-row functional blocks.
Mat value_functional_left(const BlockContext& c) {
  return kron(residual_row(c), identity(c.d_v * c.d_v)) * kron(identity(c.L), c.shuffle);
}

// (u^T ⊗ I_{d_v} ⊗ W_K^T) Z2, shared by the (Q,Q) and (Q,K) functional blocks.
Mat query_functional_left_z2(const BlockContext& c) {
  const Mat left = kron(kron(residual_value_row(c), identity(c.d_v)), c.w_key.transpose());
  return left * c.z2;
}

// B from the (Q,K) functional block / T-decomposition, without scales:
// (delta^T (I ⊗ W_V^T) Z1 ⊗ I_{d_v}) S.
Mat qk_hollow_factor(const BlockContext& c) {
  const Mat r = residual_value_row(c) * c.z1;  // 1 x d_v^2
  return kron(r, identity(c.d_v)) * c.shuffle;
}

// Diagonal blocks are symmetric in exact arithmetic; symmetrizing removes
// the last-ulp asymmetry of the matrix products so block(i,j) = block(j,i)^T
// holds exactly across the grid.
Mat symmetrized(Mat m) {
  m = 0.5 * (m + m.transpose()).eval();
  return m;
}

Mat outer_pair(ParamTag row, ParamTag col, const BlockContext& c) {
  const double s = c.sim_scale;
  const double cl = c.loss_scale;
  if (row == ParamTag::value && col == ParamTag::value) {
    return cl * kron(c.m1.transpose() * c.m1, identity(c.d_v));
  }
  if (row == ParamTag::query && col == ParamTag::query) {
    const Mat q = query_cols(c);
    return symmetrized(cl * s * s * (q.transpose() * qk_outer_core(c) * q));
  }
  if (row == ParamTag::key && col == ParamTag::key) {
    const Mat k = key_cols(c);
    return symmetrized(cl * s * s * (k.transpose() * qk_outer_core(c) * k));
  }
  if (row == ParamTag::query && col == ParamTag::key) {
    return cl * s * s * (query_cols(c).transpose() * qk_outer_core(c) * key_cols(c));
  }
  if (row == ParamTag::value && col == ParamTag::query) {
    return cl * s * (kron(c.m1.transpose(), c.w_value.transpose()) * c.z1 * query_cols(c));
  }
  if (row == ParamTag::value && col == ParamTag::key) {
    return cl * s * (kron(c.m1.transpose(), c.w_value.transpose()) * c.z1 * key_cols(c));
  }
  // Remaining arrangements by symmetry of the scalar loss.
  return outer_pair(col, row, c).transpose();
}

Mat functional_pair(ParamTag row, ParamTag col, const BlockContext& c) {
  const double s = c.sim_scale;
  const double cl = c.loss_scale;
  if (row == ParamTag::value && col == ParamTag::value) {
    return Mat::Zero(c.d_v * c.d_v, c.d_v * c.d_v);
  }
  if (row == ParamTag::query && col == ParamTag::query) {
    return symmetrized(cl * s * s * (query_functional_left_z2(c) * query_cols(c)));
  }
  if (row == ParamTag::key && col == ParamTag::key) {
    const Mat left = kron(kron(residual_value_row(c), c.w_query.transpose()), identity(c.d_v));
    return symmetrized(cl * s * s *
                       (commutation(c.d_v, c.d_k) * left * c.z2 * key_cols(c)));
  }
  if (row == ParamTag::query && col == ParamTag::key) {
    Mat block = cl * s * s * (query_functional_left_z2(c) * key_cols(c));
    block += cl * s * kron(qk_hollow_factor(c), identity(c.d_k));
    return block;
  }
  if (row == ParamTag::value && col == ParamTag::query) {
    return cl * s * (value_functional_left(c) * c.z1 * query_cols(c));
  }
  if (row == ParamTag::value && col == ParamTag::key) {
    return cl * s * (value_functional_left(c) * c.z1 * key_cols(c));
  }
  return functional_pair(col, row, c).transpose();
}

HessianGrid make_grid(const AttentionSpec& spec, const Sequence& seq) {
  HessianGrid grid;
  grid.params = parameter_order(spec);
  for (const ParamKey& k : grid.params) grid.sizes.push_back(parameter_size(spec, k));
  grid.outer_blocks.resize(grid.params.size() * grid.params.size());
  grid.functional_blocks.resize(grid.params.size() * grid.params.size());
  grid.seq_len = seq.seq_len();
  grid.embed_dim = seq.embed_dim();
  grid.key_dim = spec.key_dim();
  return grid;
}

void set_block(HessianGrid& grid, Part part, std::size_t i, std::size_t j, Mat m) {
  auto& store = part == Part::outer ? grid.outer_blocks : grid.functional_blocks;
  store[i * grid.count() + j] = std::move(m);
}

void mirror_lower(HessianGrid& grid) {
  for (std::size_t i = 0; i < grid.count(); ++i) {
    for (std::size_t j = i + 1; j < grid.count(); ++j) {
      set_block(grid, Part::outer, j, i, grid.outer(i, j).transpose());
      set_block(grid, Part::functional, j, i, grid.functional(i, j).transpose());
    }
  }
}

HessianGrid assemble_single_matrix(const AttentionSpec& spec, const Sequence& seq) {
  const ForwardCache cache = forward(spec, seq);
  const MomentSet terms = data_terms(spec, cache, seq, 0);
  const Index L = seq.seq_len();
  const Index d_v = seq.embed_dim();
  const double cl = 2.0 / static_cast<double>(L * d_v);
  const double s = 1.0 / spec.temperature;
  const Mat& w_value = spec.w_value_single;
  const Mat shuffle = shuffle_matrix(d_v);

  const Mat delta = unvecr(cache.residual, L, d_v);
  const Mat u_row = vecr(delta * w_value.transpose()).transpose();

  HessianGrid grid = make_grid(spec, seq);  // params [QK, V]
  const Mat mid = kron(identity(L), w_value * w_value.transpose());
  set_block(grid, Part::outer, 0, 0,
            symmetrized(cl * s * s * (terms.z1.transpose() * mid * terms.z1)));
  set_block(grid, Part::functional, 0, 0,
            symmetrized(cl * s * s * (kron(u_row, identity(d_v * d_v)) * terms.z2)));

  set_block(grid, Part::outer, 1, 1, cl * kron(terms.m1.transpose() * terms.m1, identity(d_v)));
  set_block(grid, Part::functional, 1, 1, Mat::Zero(d_v * d_v, d_v * d_v));

  // (V, QK) as in the classical (V, Q) block with the W_K column factor dropped.
  const Mat outer_v_qk = cl * s * (kron(terms.m1.transpose(), w_value.transpose()) * terms.z1);
  const Mat func_v_qk =
      cl * s *
      (kron(cache.residual.transpose(), identity(d_v * d_v)) * kron(identity(L), shuffle) * terms.z1);
  set_block(grid, Part::outer, 0, 1, outer_v_qk.transpose());
  set_block(grid, Part::functional, 0, 1, func_v_qk.transpose());
  mirror_lower(grid);
  return grid;
}

struct TParts {
  Mat t_outer, t_functional, v, u, b_tilde;
};

TParts assemble_t_parts(const FrozenQK& frozen, double temperature) {
  if (temperature <= 0.0) throw ValidationError("temperature must be positive");
  const Index L = frozen.seq_len;
  const Index d_v = frozen.w_value.rows();
  const Index d_k = frozen.w_query.cols();
  const double cl = 2.0 / static_cast<double>(L * d_v);
  const double inv_t = 1.0 / temperature;

  const Mat delta = unvecr(frozen.residual, L, d_v);
  const Mat u_row = vecr(delta * frozen.w_value.transpose()).transpose();

  TParts parts;
  parts.u = cl * inv_t * inv_t *
            (frozen.z1.transpose() * kron(identity(L), frozen.w_value * frozen.w_value.transpose()) *
                 frozen.z1 +
             kron(u_row, identity(d_v * d_v)) * frozen.z2);

  parts.v = Mat(d_v * d_v, 2 * d_v * d_k);
  parts.v.leftCols(d_v * d_k) = kron(identity(d_v), frozen.w_key);
  parts.v.rightCols(d_v * d_k) = kron(frozen.w_query, identity(d_v)) * commutation(d_k, d_v);

  parts.t_outer = parts.v.transpose() * parts.u * parts.v / static_cast<double>(d_k);

  const Mat shuffle = shuffle_matrix(d_v);
  const Mat r = u_row * frozen.z1;  // 1 x d_v^2
  parts.b_tilde = cl * inv_t * (kron(r, identity(d_v)) * shuffle);

  Mat hollow = Mat::Zero(2 * d_v, 2 * d_v);
  hollow.block(0, d_v, d_v, d_v) = parts.b_tilde;
  hollow.block(d_v, 0, d_v, d_v) = parts.b_tilde.transpose();
  parts.t_functional = kron(hollow, identity(d_k)) / std::sqrt(static_cast<double>(d_k));
  return parts;
}

}  // namespace

const Mat& HessianGrid::outer(std::size_t i, std::size_t j) const {
  return outer_blocks.at(i * count() + j);
}

const Mat& HessianGrid::functional(std::size_t i, std::size_t j) const {
  return functional_blocks.at(i * count() + j);
}

Mat HessianGrid::full(std::size_t i, std::size_t j) const { return outer(i, j) + functional(i, j); }

Mat HessianGrid::block(Part part, std::size_t i, std::size_t j) const {
  switch (part) {
    case Part::outer: return outer(i, j);
    case Part::functional: return functional(i, j);
    case Part::full: return full(i, j);
  }
  throw ValidationError("unknown part");
}

Index HessianGrid::total_size() const {
  Index total = 0;
  for (Index s : sizes) total += s;
  return total;
}

Mat HessianGrid::matrix(Part part) const {
  const Index n = total_size();
  Mat out(n, n);
  Index r = 0;
  for (std::size_t i = 0; i < count(); ++i) {
    Index c = 0;
    for (std::size_t j = 0; j < count(); ++j) {
      out.block(r, c, sizes[i], sizes[j]) = block(part, i, j);
      c += sizes[j];
    }
    r += sizes[i];
  }
  return out;
}

std::size_t HessianGrid::index_of(const ParamKey& key) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i] == key) return i;
  }
  throw ValidationError("parameter not in grid");
}

std::string param_label(const ParamKey& key, bool with_head) {
  std::string tag;
  switch (key.tag) {
    case ParamTag::query: tag = "Q"; break;
    case ParamTag::key: tag = "K"; break;
    case ParamTag::value: tag = "V"; break;
    case ParamTag::qk_combined: tag = "QK"; break;
  }
  if (with_head) return "h" + std::to_string(key.head) + ":" + tag;
  return tag;
}

std::string part_label(Part part) {
  switch (part) {
    case Part::outer: return "outer";
    case Part::functional: return "functional";
    case Part::full: return "full";
  }
  return "?";
}

HessianBlock outer_block(ParamTag row, ParamTag col, const AttentionSpec& spec,
                         const ForwardCache& cache, const MomentSet& terms) {
  if (spec.parameterization != Parameterization::classical) {
    throw ValidationError("outer_block requires the classical parameterization");
  }
  const BlockContext c = make_context(spec, cache, terms, 0);
  return {{0, row}, {0, col}, Part::outer, outer_pair(row, col, c)};
}

HessianBlock functional_block(ParamTag row, ParamTag col, const AttentionSpec& spec,
                              const ForwardCache& cache, const MomentSet& terms) {
  if (spec.parameterization != Parameterization::classical) {
    throw ValidationError("functional_block requires the classical parameterization");
  }
  const BlockContext c = make_context(spec, cache, terms, 0);
  return {{0, row}, {0, col}, Part::functional, functional_pair(row, col, c)};
}

HessianGrid assemble(const AttentionSpec& spec, const Sequence& seq) {
  validate(spec, seq);
  if (spec.parameterization == Parameterization::single_matrix) {
    return assemble_single_matrix(spec, seq);
  }
  return multihead_assemble(spec, seq);
}

HessianGrid multihead_assemble(const AttentionSpec& spec, const Sequence& seq) {
  validate(spec, seq);
  if (spec.parameterization != Parameterization::classical) {
    throw ValidationError("multihead_assemble requires the classical parameterization");
  }
  const ForwardCache cache = forward(spec, seq);
  HessianGrid grid = make_grid(spec, seq);
  const std::size_t n_heads = spec.heads.size();
  const double cl = 2.0 / static_cast<double>(seq.seq_len() * seq.embed_dim());

  std::vector<BlockContext> contexts;
  contexts.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    contexts.push_back(make_context(spec, cache, data_terms(spec, cache, seq, h), h));
  }

  // Intra-head blocks take the closed forms; inter-head functional blocks
  // vanish (each weight enters exactly one head's summand), so inter-head
  // full blocks reduce to Jacobian cross products.
  std::vector<std::vector<Mat>> jacs;
  if (n_heads > 1) {
    jacs.resize(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
      jacs[h] = {jac_query(spec, cache, seq, h), jac_key(spec, cache, seq, h),
                 jac_value(cache, seq, h)};
    }
  }

  for (std::size_t i = 0; i < grid.count(); ++i) {
    for (std::size_t j = i; j < grid.count(); ++j) {
      const ParamKey pi = grid.params[i];
      const ParamKey pj = grid.params[j];
      if (pi.head == pj.head) {
        const BlockContext& c = contexts[pi.head];
        set_block(grid, Part::outer, i, j, outer_pair(pi.tag, pj.tag, c));
        set_block(grid, Part::functional, i, j, functional_pair(pi.tag, pj.tag, c));
      } else {
        const auto slot = [](ParamTag t) { return t == ParamTag::query ? 0 : t == ParamTag::key ? 1 : 2; };
        set_block(grid, Part::outer, i, j,
                  cl * (jacs[pi.head][slot(pi.tag)].transpose() * jacs[pj.head][slot(pj.tag)]));
        set_block(grid, Part::functional, i, j,
                  Mat::Zero(parameter_size(spec, pi), parameter_size(spec, pj)));
      }
    }
  }
  mirror_lower(grid);
  return grid;
}

HessianGrid linear_blocks(const AttentionSpec& spec, const Sequence& seq) {
  validate(spec, seq);
  if (spec.activation != Activation::identity) {
    throw ValidationError("linear_blocks requires the identity activation");
  }
  if (spec.parameterization != Parameterization::classical || spec.heads.size() != 1) {
    throw ValidationError("linear_blocks covers single-head classical attention");
  }
  const Mat& x = seq.embeddings;
  const Index L = seq.seq_len();
  const Index d_v = seq.embed_dim();
  const Index d_k = spec.key_dim();
  const double t = spec.temperature;
  const Mat& w_q = spec.heads[0].w_query;
  const Mat& w_k = spec.heads[0].w_key;
  const Mat& w_v = spec.heads[0].w_value;

  const Mat sigma = x.transpose() * x / static_cast<double>(L);
  const Mat comm_kv = commutation(d_k, d_v);
  const double c0 = 2.0 * L * L / (static_cast<double>(d_v * d_k) * t * t);
  const double c1 = 2.0 / (static_cast<double>(d_v) * std::sqrt(static_cast<double>(d_k)) * t);

  const ForwardCache cache = forward(spec, seq);
  const Mat delta_row = cache.residual.transpose();
  const Mat shuffle = shuffle_matrix(d_v);
  const Mat value_left = kron(delta_row, identity(d_v * d_v)) * kron(identity(L), shuffle);

  HessianGrid grid = make_grid(spec, seq);  // params [Q, K, V]
  const auto zero = [&](Index a, Index b) { return Mat::Zero(a, b); };

  set_block(grid, Part::outer, 0, 0,
            symmetrized(c0 * kron(sigma, w_k.transpose() * sigma * w_v * w_v.transpose() * sigma * w_k)));
  set_block(grid, Part::outer, 1, 1,
            symmetrized(c0 * (commutation(d_v, d_k) *
                              kron(w_q.transpose() * sigma * w_q, sigma * w_v * w_v.transpose() * sigma) *
                              comm_kv)));
  set_block(grid, Part::outer, 2, 2,
            symmetrized(c0 * kron(sigma * w_k * w_q.transpose() * sigma * w_q * w_k.transpose() * sigma,
                                  identity(d_v))));
  set_block(grid, Part::outer, 0, 1,
            c0 * (kron(sigma * w_q, w_k.transpose() * sigma * w_v * w_v.transpose() * sigma) * comm_kv));
  const Mat outer_vq = c0 * kron(sigma * w_k * w_q.transpose() * sigma, w_v.transpose() * sigma * w_k);
  set_block(grid, Part::outer, 0, 2, outer_vq.transpose());
  const Mat outer_vk = c0 * (kron(sigma * w_k * w_q.transpose() * sigma * w_q, w_v.transpose() * sigma) * comm_kv);
  set_block(grid, Part::outer, 1, 2, outer_vk.transpose());

  set_block(grid, Part::functional, 0, 0, zero(d_v * d_k, d_v * d_k));
  set_block(grid, Part::functional, 1, 1, zero(d_v * d_k, d_v * d_k));
  set_block(grid, Part::functional, 2, 2, zero(d_v * d_v, d_v * d_v));

  const Mat r_lin = delta_row * kron(x, w_v.transpose() * sigma);  // 1 x d_v^2
  set_block(grid, Part::functional, 0, 1, c1 * kron(kron(r_lin, identity(d_v)) * shuffle, identity(d_k)));
  const Mat func_vq = c1 * (value_left * kron(x, sigma * w_k));
  set_block(grid, Part::functional, 0, 2, func_vq.transpose());
  const Mat func_vk = c1 * (value_left * kron(x * w_q, sigma) * comm_kv);
  set_block(grid, Part::functional, 1, 2, func_vk.transpose());

  mirror_lower(grid);
  return grid;
}

HessianBlock single_matrix_block(const AttentionSpec& spec, const Sequence& seq) {
  if (spec.parameterization != Parameterization::single_matrix) {
    throw ValidationError("single_matrix_block requires the single-matrix parameterization");
  }
  const HessianGrid grid = assemble(spec, seq);
  return {{0, ParamTag::qk_combined}, {0, ParamTag::qk_combined}, Part::full, grid.full(0, 0)};
}

HessianGrid assemble_batch_mean(const AttentionSpec& spec, const std::vector<Sequence>& batch) {
  if (batch.empty()) throw ValidationError("assemble_batch_mean: empty batch");
  HessianGrid mean = assemble(spec, batch.front());
  for (std::size_t s = 1; s < batch.size(); ++s) {
    const HessianGrid grid = assemble(spec, batch[s]);
    for (std::size_t b = 0; b < mean.outer_blocks.size(); ++b) {
      mean.outer_blocks[b] += grid.outer_blocks[b];
      mean.functional_blocks[b] += grid.functional_blocks[b];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < mean.outer_blocks.size(); ++b) {
    mean.outer_blocks[b] *= inv;
    mean.functional_blocks[b] *= inv;
  }
  return mean;
}

FrozenQK freeze_qk(const AttentionSpec& spec, const Sequence& seq) {
  validate(spec, seq);
  if (spec.parameterization != Parameterization::classical || spec.heads.size() != 1) {
    throw ValidationError("freeze_qk covers single-head classical attention");
  }
  const ForwardCache cache = forward(spec, seq);
  const MomentSet terms = data_terms(spec, cache, seq, 0);
  return {terms.z1,          terms.z2,          cache.residual,
          spec.heads[0].w_query, spec.heads[0].w_key, spec.heads[0].w_value,
          seq.seq_len()};
}

TDecomposition t_decompose(const AttentionSpec& spec, const Sequence& seq) {
  if (spec.parameterization != Parameterization::classical ||
      spec.activation != Activation::softmax) {
    throw ValidationError("t_decompose requires classical softmax attention");
  }
  const FrozenQK frozen = freeze_qk(spec, seq);
  const TParts parts = assemble_t_parts(frozen, spec.temperature);

  // The decomposition must reproduce the [Q,K]x[Q,K] sub-grid exactly.
  const HessianGrid grid = assemble(spec, seq);
  const Index n = seq.embed_dim() * spec.key_dim();
  Mat sub(2 * n, 2 * n);
  sub.topLeftCorner(n, n) = grid.full(0, 0);
  sub.topRightCorner(n, n) = grid.full(0, 1);
  sub.bottomLeftCorner(n, n) = grid.full(1, 0);
  sub.bottomRightCorner(n, n) = grid.full(1, 1);
  const double err = (parts.t_outer + parts.t_functional - sub).norm();
  if (err > 1e-10 * std::max(1.0, sub.norm())) {
    throw ValidationError("t_decompose: decomposition does not match the query-key sub-grid");
  }
  return {parts.t_outer, parts.t_functional, parts.v, parts.u, parts.b_tilde.transpose()};
}

std::pair<Mat, Mat> temperature_prefactors(const FrozenQK& frozen, double temperature) {
  const TParts parts = assemble_t_parts(frozen, temperature);
  return {parts.t_outer, parts.t_functional};
}

}  // namespace attnhess
