#include "attnhess/attention.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace attnhess {

namespace {

void require(bool ok, const char* msg) {
  if (!ok) throw ShapeError(msg);
}

void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw ValidationError(std::string(what) + " contains non-finite entries");
}

}  // namespace

std::size_t AttentionSpec::head_count() const {
  return parameterization == Parameterization::classical ? heads.size() : 1;
}

Index AttentionSpec::embed_dim() const {
  return parameterization == Parameterization::classical ? heads.at(0).w_value.rows()
                                                         : w_value_single.rows();
}

Index AttentionSpec::key_dim() const {
  return parameterization == Parameterization::classical ? heads.at(0).w_query.cols()
                                                         : w_qk.rows();
}

AttentionSpec classical_spec(Mat w_query, Mat w_key, Mat w_value, Activation activation,
                             double temperature) {
  AttentionSpec spec;
  spec.parameterization = Parameterization::classical;
  spec.activation = activation;
  spec.temperature = temperature;
  spec.heads.push_back({std::move(w_query), std::move(w_key), std::move(w_value)});
  return spec;
}

AttentionSpec single_matrix_spec(Mat w_qk, Mat w_value, Activation activation,
                                 double temperature) {
  AttentionSpec spec;
  spec.parameterization = Parameterization::single_matrix;
  spec.activation = activation;
  spec.temperature = temperature;
  spec.w_qk = std::move(w_qk);
  spec.w_value_single = std::move(w_value);
  return spec;
}

AttentionSpec multihead_spec(std::vector<HeadWeights> heads, Activation activation,
                             double temperature) {
  AttentionSpec spec;
  spec.parameterization = Parameterization::classical;
  spec.activation = activation;
  spec.temperature = temperature;
  spec.heads = std::move(heads);
  return spec;
}

void validate(const AttentionSpec& spec, const Sequence& seq) {
  require(seq.embeddings.rows() >= 1 && seq.embeddings.cols() >= 1, "sequence must be non-empty");
  require(seq.labels.rows() == seq.embeddings.rows() && seq.labels.cols() == seq.embeddings.cols(),
          "labels must have the same shape as the embeddings");
  require_finite(seq.embeddings, "embeddings");
  require_finite(seq.labels, "labels");
  if (spec.temperature <= 0.0) throw ValidationError("temperature must be positive");

  const Index d_v = seq.embed_dim();
  if (spec.parameterization == Parameterization::classical) {
    require(!spec.heads.empty(), "classical spec needs at least one head");
    const Index d_k = spec.heads.front().w_query.cols();
    for (const HeadWeights& h : spec.heads) {
      require(h.w_query.rows() == d_v && h.w_query.cols() == d_k, "w_query must be d_v x d_k");
      require(h.w_key.rows() == d_v && h.w_key.cols() == d_k, "w_key must be d_v x d_k");
      require(h.w_value.rows() == d_v && h.w_value.cols() == d_v, "w_value must be d_v x d_v");
      require_finite(h.w_query, "w_query");
      require_finite(h.w_key, "w_key");
      require_finite(h.w_value, "w_value");
    }
  } else {
    require(spec.w_qk.rows() == d_v && spec.w_qk.cols() == d_v, "w_qk must be d_v x d_v");
    require(spec.w_value_single.rows() == d_v && spec.w_value_single.cols() == d_v,
            "w_value must be d_v x d_v");
    require_finite(spec.w_qk, "w_qk");
    require_finite(spec.w_value_single, "w_value");
  }
}

std::vector<ParamKey> parameter_order(const AttentionSpec& spec) {
  std::vector<ParamKey> keys;
  if (spec.parameterization == Parameterization::classical) {
    for (std::size_t h = 0; h < spec.heads.size(); ++h) {
      keys.push_back({h, ParamTag::query});
      keys.push_back({h, ParamTag::key});
      keys.push_back({h, ParamTag::value});
    }
  } else {
    keys.push_back({0, ParamTag::qk_combined});
    keys.push_back({0, ParamTag::value});
  }
  return keys;
}

const Mat& parameter_matrix(const AttentionSpec& spec, const ParamKey& key) {
  if (spec.parameterization == Parameterization::classical) {
    const HeadWeights& h = spec.heads.at(key.head);
    switch (key.tag) {
      case ParamTag::query: return h.w_query;
      case ParamTag::key: return h.w_key;
      case ParamTag::value: return h.w_value;
      default: break;
    }
    throw ValidationError("qk_combined is not a classical parameter");
  }
  switch (key.tag) {
    case ParamTag::qk_combined: return spec.w_qk;
    case ParamTag::value: return spec.w_value_single;
    default: break;
  }
  throw ValidationError("query/key are not single-matrix parameters");
}

Index parameter_size(const AttentionSpec& spec, const ParamKey& key) {
  return parameter_matrix(spec, key).size();
}

Vec pack_parameters(const AttentionSpec& spec, const std::vector<ParamKey>& keys) {
  Index total = 0;
  for (const ParamKey& k : keys) total += parameter_size(spec, k);
  Vec theta(total);
  Index offset = 0;
  for (const ParamKey& k : keys) {
    const Mat& w = parameter_matrix(spec, k);
    theta.segment(offset, w.size()) = vecr(w);
    offset += w.size();
  }
  return theta;
}

AttentionSpec with_parameters(const AttentionSpec& spec, const std::vector<ParamKey>& keys,
                              const Vec& theta) {
  AttentionSpec out = spec;
  Index offset = 0;
  for (const ParamKey& k : keys) {
    const Mat& w = parameter_matrix(spec, k);
    Mat replacement = unvecr(theta.segment(offset, w.size()), w.rows(), w.cols());
    offset += w.size();
    if (out.parameterization == Parameterization::classical) {
      HeadWeights& h = out.heads.at(k.head);
      (k.tag == ParamTag::query ? h.w_query
       : k.tag == ParamTag::key ? h.w_key
                                : h.w_value) = std::move(replacement);
    } else {
      (k.tag == ParamTag::qk_combined ? out.w_qk : out.w_value_single) = std::move(replacement);
    }
  }
  if (offset != theta.size()) throw ShapeError("with_parameters: parameter vector size mismatch");
  return out;
}

Mat similarity(const AttentionSpec& spec, const Sequence& seq, std::size_t head) {
  validate(spec, seq);
  const Mat& x = seq.embeddings;
  if (spec.parameterization == Parameterization::classical) {
    const HeadWeights& h = spec.heads.at(head);
    const double scale = 1.0 / (spec.temperature * std::sqrt(static_cast<double>(h.w_query.cols())));
    return scale * (x * h.w_query * h.w_key.transpose() * x.transpose());
  }
  return (x * spec.w_qk * x.transpose()) / spec.temperature;
}

Mat attend(const AttentionSpec& spec, const Mat& sim) {
  if (sim.rows() != sim.cols()) throw ShapeError("attend: similarity must be square");
  if (spec.activation == Activation::identity) return sim;
  Mat out(sim.rows(), sim.cols());
  for (Index i = 0; i < sim.rows(); ++i) {
    // Row-max subtraction keeps the exponentials bounded without changing
    // the softmax value.
    const double row_max = sim.row(i).maxCoeff();
    Eigen::RowVectorXd e = (sim.row(i).array() - row_max).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

ForwardCache forward(const AttentionSpec& spec, const Sequence& seq) {
  validate(spec, seq);
  ForwardCache cache;
  cache.output = Mat::Zero(seq.seq_len(), seq.embed_dim());
  const std::size_t n_heads = spec.head_count();
  for (std::size_t h = 0; h < n_heads; ++h) {
    HeadCache hc;
    hc.similarity = similarity(spec, seq, h);
    hc.attention = attend(spec, hc.similarity);
    const Mat& w_value = spec.parameterization == Parameterization::classical
                             ? spec.heads[h].w_value
                             : spec.w_value_single;
    cache.output += hc.attention * seq.embeddings * w_value;
    cache.heads.push_back(std::move(hc));
  }
  cache.residual = vecr(cache.output - seq.labels);
  return cache;
}

double loss(const ForwardCache& cache, const Sequence& seq) {
  const double n = static_cast<double>(seq.seq_len() * seq.embed_dim());
  return cache.residual.squaredNorm() / n;
}

Vec loss_gradient(const ForwardCache& cache, const Sequence& seq) {
  const double n = static_cast<double>(seq.seq_len() * seq.embed_dim());
  return (2.0 / n) * cache.residual;
}

Mat loss_hessian(const Sequence& seq) {
  const Index n = seq.seq_len() * seq.embed_dim();
  return (2.0 / static_cast<double>(n)) * Mat::Identity(n, n);
}

}  // namespace attnhess
