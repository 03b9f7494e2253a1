#pragma once

#include <cstddef>
#include <vector>

// Pearson chi-square statistic of observed counts against a uniform law.
inline double chi_square_uniform(const std::vector<std::size_t>& counts) {
  double n = 0.0;
  for (auto c : counts) n += double(c);
  const double e = n / double(counts.size());
  double x = 0.0;
  for (auto c : counts) x += (double(c) - e) * (double(c) - e) / e;
  return x;
}

// Upper 0.1% critical values of the chi-square law by degrees of freedom.
inline double chi_square_critical_999(std::size_t df) {
  static const double table[] = {0,      10.828, 13.816, 16.266, 18.467, 20.515, 22.458, 24.322,
                                 26.124, 27.877, 29.588, 31.264, 32.909, 34.528, 36.123, 37.697};
  return table[df];
}

struct Moments {
  double mean = 0.0, var = 0.0;
};

inline Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x / double(v.size());
  for (double x : v) m.var += (x - m.mean) * (x - m.mean) / double(v.size() - 1);
  return m;
}
