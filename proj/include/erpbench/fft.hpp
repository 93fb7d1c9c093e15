#pragma once

#include <complex>
#include <span>
#include <vector>

namespace erpbench {

// In-place complex DFT of arbitrary length: radix-2 Cooley-Tukey for powers of
// two, Bluestein's chirp-z algorithm otherwise. Inverse includes the 1/n scale.
void fft(std::vector<std::complex<double>>& a, bool inverse);

// Forward DFT of a real signal; returns the n/2+1 non-negative-frequency bins.
std::vector<std::complex<double>> rfft(std::span<const double> x);

}  // namespace erpbench
