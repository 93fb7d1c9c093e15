#include "erpbench/fft.hpp"

#include <cmath>
#include <cstddef>

namespace erpbench {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Iterative radix-2, n must be a power of two. No scaling.
void fft_radix2(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (n < 2) return;

  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }

  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * kPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

// Bluestein's algorithm: expresses an arbitrary-length DFT as a convolution,
// evaluated with a power-of-two FFT. Chirp exponents use k^2 mod 2n to keep
// the angle argument small.
void fft_bluestein(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  const std::size_t m = next_power_of_two(2 * n - 1);
  const double sign = inverse ? 1.0 : -1.0;

  std::vector<std::complex<double>> chirp(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t k2 = static_cast<std::size_t>(
        (static_cast<unsigned long long>(k) * k) % (2ull * n));
    const double ang = sign * kPi * static_cast<double>(k2) / static_cast<double>(n);
    chirp[k] = {std::cos(ang), std::sin(ang)};
  }

  std::vector<std::complex<double>> fa(m, {0.0, 0.0});
  std::vector<std::complex<double>> fb(m, {0.0, 0.0});
  for (std::size_t k = 0; k < n; ++k) fa[k] = a[k] * chirp[k];
  fb[0] = std::conj(chirp[0]);
  for (std::size_t k = 1; k < n; ++k) {
    fb[k] = std::conj(chirp[k]);
    fb[m - k] = std::conj(chirp[k]);
  }

  fft_radix2(fa, false);
  fft_radix2(fb, false);
  for (std::size_t k = 0; k < m; ++k) fa[k] *= fb[k];
  fft_radix2(fa, true);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t k = 0; k < n; ++k) a[k] = fa[k] * inv_m * chirp[k];
}

}  // namespace

void fft(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (n < 2) return;
  if (is_power_of_two(n)) {
    fft_radix2(a, inverse);
  } else {
    fft_bluestein(a, inverse);
  }
  if (inverse) {
    const double inv_n = 1.0 / static_cast<double>(n);
    for (auto& v : a) v *= inv_n;
  }
}

std::vector<std::complex<double>> rfft(std::span<const double> x) {
  std::vector<std::complex<double>> a(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) a[i] = {x[i], 0.0};
  fft(a, false);
  a.resize(x.size() / 2 + 1);
  return a;
}

}  // namespace erpbench
