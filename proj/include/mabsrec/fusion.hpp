#pragma once

#include <cstddef>

#include "mabsrec/error.hpp"
#include "mabsrec/numeric/kernels.hpp"
#include "mabsrec/numeric/params.hpp"

namespace mabsrec {

using numeric::ParamSet;
using numeric::Rng;
using numeric::Tape;
using numeric::Tensor;
using numeric::Var;

inline constexpr std::size_t kFusionBlocks = 6;

/// Gating head: W1 maps the 6d fused feature to d, W2 maps d to 3 view scores.
inline void init_fusion_params(ParamSet& params, std::size_t d, Rng& rng) {
  params.add("fusion.w1", numeric::init::fan_avg_uniform(kFusionBlocks * d, d, rng));
  params.add("fusion.b1", Tensor::vector(d, 0.0));
  params.add("fusion.w2", numeric::init::fan_avg_uniform(d, 3, rng));
  params.add("fusion.b2", Tensor::vector(3, 0.0));
}

inline std::size_t fusion_param_count(std::size_t d) { return kFusionBlocks * d * d + d + d * 3 + 3; }

/// Row-wise [x_P, x_A, x_D, x_P+x_A, x_P+x_D, x_A+x_D]. With `triple_sum`
/// the last block is x_P+x_A+x_D instead.
inline Var fuse_features(Var x_pop, Var x_subj, Var x_deb, bool triple_sum = false) {
  if (!x_pop.value().same_shape(x_subj.value()) || !x_pop.value().same_shape(x_deb.value())) {
    throw ShapeError("fuse_features: view encodings differ in shape");
  }
  Var last = triple_sum ? numeric::add(numeric::add(x_pop, x_subj), x_deb) : numeric::add(x_subj, x_deb);
  return numeric::concat_cols({x_pop, x_subj, x_deb, numeric::add(x_pop, x_subj), numeric::add(x_pop, x_deb), last});
}

/// sigmoid(ReLU(o W1 + b1) W2 + b2), one 3-score row per input row.
inline Var bias_scores(Tape& tape, ParamSet& params, Var fused) {
  Var w1 = tape.parameter(params, "fusion.w1");
  if (fused.value().cols() != w1.value().rows()) {
    throw ShapeError("bias_scores: fused width " + std::to_string(fused.value().cols()) + ", expected " +
                     std::to_string(w1.value().rows()));
  }
  Var hidden = numeric::relu(numeric::add_bias(numeric::matmul(fused, w1), tape.parameter(params, "fusion.b1")));
  Var logits = numeric::add_bias(numeric::matmul(hidden, tape.parameter(params, "fusion.w2")), tape.parameter(params, "fusion.b2"));
  return numeric::sigmoid(logits);
}

/// Score-weighted sum s0*x_P + s1*x_A + s2*x_D per row.
inline Var predict_vector(Var scores, Var x_pop, Var x_subj, Var x_deb) {
  if (scores.value().cols() != 3 || scores.value().rows() != x_pop.value().rows()) {
    throw ShapeError("predict_vector: expected one 3-score row per view encoding row");
  }
  Var a = numeric::scale_rows(x_pop, numeric::slice_cols(scores, 0, 1));
  Var b = numeric::scale_rows(x_subj, numeric::slice_cols(scores, 1, 1));
  Var c = numeric::scale_rows(x_deb, numeric::slice_cols(scores, 2, 1));
  return numeric::add(numeric::add(a, b), c);
}

}  // namespace mabsrec
