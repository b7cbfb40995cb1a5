#include "hedgehog/optim.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hedgehog/text_io.hpp"

namespace hedgehog {

AdamWState AdamWState::zeros(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0}; }

void adamw_step(std::span<double> params, std::span<const double> grads, AdamWState& state,
                const AdamWConfig& config) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adamw_step: parameter, gradient and state sizes differ");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      std::ostringstream msg;
      msg << "adamw_step: non-finite gradient at coordinate " << i;
      throw std::domain_error(msg.str());
    }
  }
  const std::uint64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  const double decay = 1.0 - config.lr * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] = params[i] * decay - config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
  }
  state.step = t;
}

std::string serialize_adamw_state(const AdamWState& state) {
  std::ostringstream out;
  out << "step=" << state.step << '\n';
  out << "size=" << state.m.size() << '\n';
  out << "m=" << format_doubles(state.m) << '\n';
  out << "v=" << format_doubles(state.v) << '\n';
  return out.str();
}

AdamWState parse_adamw_state(std::string_view text) {
  AdamWState state;
  long long size = -1;
  bool have_step = false;
  bool have_m = false;
  bool have_v = false;
  for (const auto& kv : parse_key_values(text)) {
    try {
      if (kv.key == "step") {
        const long long s = parse_integer(kv.value);
        if (s < 0) throw ParseError("negative step", kv.line);
        state.step = static_cast<std::uint64_t>(s);
        have_step = true;
      } else if (kv.key == "size") {
        size = parse_integer(kv.value);
      } else if (kv.key == "m") {
        state.m = parse_doubles(kv.value);
        have_m = true;
      } else if (kv.key == "v") {
        state.v = parse_doubles(kv.value);
        have_v = true;
      } else {
        throw ParseError("unknown key '" + kv.key + "'", kv.line);
      }
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), kv.line);
    }
  }
  if (!have_step || !have_m || !have_v || size < 0) throw ParseError("optimizer state is incomplete", 0);
  if (state.m.size() != static_cast<std::size_t>(size) || state.v.size() != static_cast<std::size_t>(size)) {
    throw ParseError("optimizer moment length does not match size", 0);
  }
  return state;
}

}  // namespace hedgehog
