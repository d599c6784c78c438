#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

namespace empcause::testing {

inline std::filesystem::path source_dir() { return EMPCAUSE_SOURCE_DIR; }
inline std::filesystem::path test_data_dir() { return EMPCAUSE_TEST_DATA_DIR; }
inline std::filesystem::path demo_dir() { return source_dir() / "data" / "demo"; }

/// Scratch directory removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string &tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("empcause-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir &) = delete;
    TempDir &operator=(const TempDir &) = delete;

    const std::filesystem::path &path() const { return path_; }
    std::filesystem::path operator/(const std::string &name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

} // namespace empcause::testing
