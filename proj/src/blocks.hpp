#pragma once

// Residual block shared by the VAE and the denoiser.

#include <torch/torch.h>

#include <optional>
#include <string>

#include "osediff/layers.hpp"

namespace osediff::blocks {

inline void declare_res(LayerTable& t, const std::string& name, int64_t ci, int64_t co,
                        int64_t temb_dim, bool adaptable) {
  t.norm(name + ".norm1", ci);
  t.conv(name + ".conv1", ci, co, 3, adaptable);
  if (temb_dim > 0) {
    t.linear(name + ".temb", temb_dim, co, false);
  }
  t.norm(name + ".norm2", co);
  t.conv(name + ".conv2", co, co, 3, adaptable);
  if (ci != co) {
    t.conv(name + ".skip", ci, co, 1, adaptable);
  }
}

inline torch::Tensor res(const WeightView& w, const std::string& name, const torch::Tensor& x,
                         const std::optional<torch::Tensor>& temb = std::nullopt) {
  namespace F = torch::nn::functional;
  const int64_t ci = x.size(1);
  auto h = ops::conv2d(w, name + ".conv1", F::silu(ops::group_norm(w, name + ".norm1", x,
                                                                   ops::norm_groups(ci))));
  const int64_t co = h.size(1);
  if (temb) {
    h = h + ops::linear(w, name + ".temb", F::silu(*temb)).unsqueeze(-1).unsqueeze(-1);
  }
  h = ops::conv2d(w, name + ".conv2",
                  F::silu(ops::group_norm(w, name + ".norm2", h, ops::norm_groups(co))));
  auto skip = ci == co ? x : ops::conv2d(w, name + ".skip", x);
  return h + skip;
}

}  // namespace osediff::blocks
