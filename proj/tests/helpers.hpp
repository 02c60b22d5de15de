#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("recx_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Pearson statistic against equal expected counts.
inline double pearson_uniform(const std::vector<double>& counts) {
  double total = 0;
  for (double c : counts) total += c;
  const double e = total / static_cast<double>(counts.size());
  double x = 0;
  for (double c : counts) x += (c - e) * (c - e) / e;
  return x;
}

// Upper critical values of chi-square at alpha = 0.01, via the Wilson-Hilferty
// cube approximation (accurate to well under 1% for dof >= 3).
inline double chi_square_critical_01(double dof) {
  const double z = 2.3263478740408408;  // standard normal 0.99 quantile
  const double a = 2.0 / (9.0 * dof);
  const double t = 1.0 - a + z * std::sqrt(a);
  return dof * t * t * t;
}
