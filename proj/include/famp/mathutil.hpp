#pragma once

#include <algorithm>
#include <cmath>
#include <span>

namespace famp {

// Max-subtracted softmax of plain values.
inline void softmax_into(std::span<const double> x, std::span<double> out) {
  const double m = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += out[i] = std::exp(x[i] - m);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] /= z;
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace famp
