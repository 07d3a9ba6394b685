#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <utility>

#include "json.hpp"
#include "nasp/fourier/fourier.hpp"

namespace nasp::cli::detail {

std::pair<int, int> parse_shape(const std::string& s);
std::filesystem::path prepare_run_dir(const std::string& out);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
// artifact=true reports a missing file as a missing-dependency failure.
nlohmann::json read_json_file(const std::filesystem::path& path, bool artifact);
double seconds_since(std::chrono::steady_clock::time_point t0);
void write_mask_png(const std::filesystem::path& path, const fourier::SamplingMask& m);
std::filesystem::path find_checkpoint(const std::string& dir, const char* subdir);

}  // namespace nasp::cli::detail
