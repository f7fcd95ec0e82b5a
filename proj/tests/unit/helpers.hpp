#pragma once

#include <seekgp/seekgp.hpp>

#include <initializer_list>

namespace testutil {

using namespace seekgp;

inline Points points(std::initializer_list<std::initializer_list<double>> rows) {
  Points X(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) X(i, j++) = v;
    ++i;
  }
  return X;
}

inline Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

inline Points random_points(Rng& rng, Index n, Index P, double lo = -1.0, double hi = 1.0) {
  Points X(n, P);
  for (Index i = 0; i < n; ++i)
    for (Index p = 0; p < P; ++p) X(i, p) = uniform(rng, lo, hi);
  return X;
}

inline Point pt(const Vector& v) { return Point(v.data(), static_cast<std::size_t>(v.size())); }

}  // namespace testutil
