#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "mtst/ndcore.hpp"
#include "mtst/rng.hpp"

namespace mtst::test {

inline std::vector<double> values(const nd::Tensor& t) { return {t.values().begin(), t.values().end()}; }
inline std::vector<double> grad(const nd::Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

inline nd::Tensor random_tensor(nd::Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> v(nd::element_count(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return nd::Tensor(std::move(shape), std::move(v), requires_grad);
}

// Fresh empty directory under the system temp dir, unique per name.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mtst_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace mtst::test
