#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "vmim/volume.hpp"

namespace vmim::cli {

// A dataset directory holds case_NNN.vol (+ .volh) images and, for labeled
// data, matching case_NNN.lab (+ .labh) label maps.
std::filesystem::path case_stem(const std::filesystem::path& dir, std::size_t index);

void save_case(const std::filesystem::path& dir, std::size_t index, const LabeledVolume& item);

// Payload paths of every case_*.vol in name order.
std::vector<std::filesystem::path> list_cases(const std::filesystem::path& dir);

std::vector<Volume> load_images(const std::filesystem::path& dir);
std::vector<LabeledVolume> load_labeled(const std::filesystem::path& dir);

}  // namespace vmim::cli
