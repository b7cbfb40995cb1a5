#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hedgehog {

struct AdamWConfig {
  double lr = 1e-2;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  static AdamWState zeros(std::size_t n);

  friend bool operator==(const AdamWState&, const AdamWState&) = default;
};

// Bias-corrected Adam moments with decoupled weight decay:
//   theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
// Non-finite gradients throw before anything is modified.
void adamw_step(std::span<double> params, std::span<const double> grads, AdamWState& state,
                const AdamWConfig& config);

std::string serialize_adamw_state(const AdamWState& state);
AdamWState parse_adamw_state(std::string_view text);

}  // namespace hedgehog
