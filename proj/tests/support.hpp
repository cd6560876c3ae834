#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "xfb/io.hpp"
#include "xfb/json.hpp"
#include "xfb/model.hpp"
#include "xfb/rng.hpp"

namespace xfb::test {

inline std::string fixture(const std::string& name) { return std::string(XFB_FIXTURE_DIR) + "/" + name; }

inline Json load_json(const std::string& path) { return Json::parse(read_file(path)); }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("xfb-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Model with N(0, scale^2) parameters.
inline Model random_model(const ArchitectureSpec& arch, std::uint64_t seed, double scale = 0.5) {
  Model m = Model::zeros(arch);
  Rng rng(seed);
  for (double& p : m.params) p = scale * rng.normal();
  return m;
}

inline double rel_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

}  // namespace xfb::test
