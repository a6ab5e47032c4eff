// Language-dependent adapter: a residual bottleneck whose down/up projections
// are partitioned per language and selected row-wise by the batch's one-hot
// language matrix.
//
// Weights are stored stacked: D is (K*d) x h and U is (K*h) x d, with biases
// K x h and K x d. Language k owns rows [k*d, (k+1)*d) of D and [k*h, (k+1)*h)
// of U, so selection is a row gather and its backward touches no other
// language's rows. The adapter layer norm is shared across languages and is
// not part of any per-language slice.

#pragma once

#include "ldasr/ops.hpp"
#include "ldasr/tensor.hpp"

namespace ldasr {

struct AdapterBlock {
  Tensor down;       // (K*d) x h
  Tensor up;         // (K*h) x d
  Tensor down_bias;  // K x h
  Tensor up_bias;    // K x d
  Tensor ln_gamma;   // d, shared across languages
  Tensor ln_beta;    // d
  int languages = 0;
  int width = 0;   // d
  int hidden = 0;  // h
};

struct SelectedWeights {
  Tensor down;       // B x d x h
  Tensor up;         // B x h x d
  Tensor down_bias;  // B x h
  Tensor up_bias;    // B x d
};

// Up projection and biases start at zero so the adapter is an exact identity
// until training moves it.
inline AdapterBlock make_adapter_block(int languages, int width, int hidden, Rng& rng,
                                       float down_init_scale = 0.02f) {
  if (hidden < 1 || hidden >= width)
    throw ConfigError("adapter hidden width must satisfy 1 <= h < d");
  if (languages < 1) throw ConfigError("adapter needs at least one language");
  AdapterBlock b;
  b.languages = languages;
  b.width = width;
  b.hidden = hidden;
  b.down = Tensor::zeros({(int64_t)languages * width, hidden});
  fill_normal(b.down, rng, down_init_scale);
  b.up = Tensor::zeros({(int64_t)languages * hidden, width});
  b.down_bias = Tensor::zeros({languages, hidden});
  b.up_bias = Tensor::zeros({languages, width});
  b.ln_gamma = Tensor::from({width}, std::vector<float>(width, 1.0f));
  b.ln_beta = Tensor::zeros({width});
  return b;
}

// Exact one-hot rows only: every entry 0 or 1 and each row summing to 1.
inline std::vector<int> language_ids_from_onehot(const Tensor& onehot) {
  if (onehot.rank() != 2) throw DimError("language one-hot must be B x K");
  const int64_t b = onehot.dim(0), k = onehot.dim(1);
  std::vector<int> ids(b, -1);
  for (int64_t i = 0; i < b; ++i) {
    float sum = 0.0f;
    for (int64_t j = 0; j < k; ++j) {
      const float v = onehot.ptr()[i * k + j];
      if (v != 0.0f && v != 1.0f)
        throw ContractError("language row " + std::to_string(i) + " is not one-hot");
      sum += v;
      if (v == 1.0f) ids[i] = (int)j;
    }
    if (sum != 1.0f)
      throw ContractError("language row " + std::to_string(i) + " does not sum to 1");
  }
  return ids;
}

inline SelectedWeights select_language_weights(const AdapterBlock& block, const Tensor& onehot) {
  const std::vector<int> langs = language_ids_from_onehot(onehot);
  if (onehot.dim(1) != block.languages)
    throw DimError("one-hot width does not match adapter language count");
  const int64_t b = (int64_t)langs.size();
  const int d = block.width, h = block.hidden;
  std::vector<int> d_rows, u_rows;
  d_rows.reserve(b * d);
  u_rows.reserve(b * h);
  for (int lang : langs) {
    for (int r = 0; r < d; ++r) d_rows.push_back(lang * d + r);
    for (int r = 0; r < h; ++r) u_rows.push_back(lang * h + r);
  }
  SelectedWeights sel;
  sel.down = reshape(gather_rows(block.down, d_rows), {b, d, h});
  sel.up = reshape(gather_rows(block.up, u_rows), {b, h, d});
  sel.down_bias = gather_rows(block.down_bias, langs);
  sel.up_bias = gather_rows(block.up_bias, langs);
  return sel;
}

// x' = U_x(ReLU(D_x(LN(x)) + D_b)) + U_b + x, applied per utterance with that
// utterance's language slice.
inline Tensor adapter_forward(Tensor x, const AdapterBlock& block, const Tensor& onehot,
                              float ln_eps = 1e-6f, bool use_bias = true) {
  if (x.rank() != 3 || x.dim(2) != block.width)
    throw DimError("adapter_forward: input " + shape_str(x.shape()) + " does not match d=" +
                   std::to_string(block.width));
  if (x.dim(0) != onehot.dim(0))
    throw DimError("adapter_forward: batch size mismatch with one-hot");
  SelectedWeights sel = select_language_weights(block, onehot);
  Tensor normed = layer_norm(x, block.ln_gamma, block.ln_beta, ln_eps);
  Tensor hidden = bmm(normed, sel.down);
  if (use_bias) hidden = add_rows(hidden, sel.down_bias);
  Tensor out = bmm(relu(hidden), sel.up);
  if (use_bias) out = add_rows(out, sel.up_bias);
  return add(x, out);
}

// Trainable parameters per language, as a fraction of the backbone size.
// The shared adapter layer norm is excluded on purpose.
inline int64_t adapter_params_per_language(int64_t d, int64_t h, int64_t layer_count) {
  return layer_count * (2 * d * h + h + d);
}

// K only validates: the per-language fraction does not depend on it.
inline double adapter_param_budget(int64_t d, int64_t h, int64_t languages, int64_t layer_count,
                                   double backbone_total) {
  if (d < 1 || h < 1 || languages < 1 || layer_count < 1 || backbone_total <= 0)
    throw ContractError("adapter_param_budget: arguments must be positive");
  return (double)adapter_params_per_language(d, h, layer_count) / backbone_total;
}

}  // namespace ldasr
