#include "dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace vmim::cli {

namespace fs = std::filesystem;

fs::path case_stem(const fs::path& dir, std::size_t index) {
    char name[32];
    std::snprintf(name, sizeof name, "case_%03zu", index);
    return dir / name;
}

void save_case(const fs::path& dir, std::size_t index, const LabeledVolume& item) {
    fs::create_directories(dir);
    const fs::path stem = case_stem(dir, index);
    save_volume(item.image, fs::path(stem).replace_extension(".vol"));
    save_labels(item.labels, fs::path(stem).replace_extension(".lab"));
}

std::vector<fs::path> list_cases(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw std::runtime_error("dataset directory " + dir.string() + " does not exist");
    }
    std::vector<fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const fs::path& p = entry.path();
        if (p.extension() == ".vol" && p.filename().string().rfind("case_", 0) == 0) out.push_back(p);
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) {
        throw std::runtime_error("no case_*.vol volumes in " + dir.string());
    }
    return out;
}

std::vector<Volume> load_images(const fs::path& dir) {
    std::vector<Volume> out;
    for (const auto& p : list_cases(dir)) out.push_back(load_volume(p));
    return out;
}

std::vector<LabeledVolume> load_labeled(const fs::path& dir) {
    std::vector<LabeledVolume> out;
    for (const auto& p : list_cases(dir)) {
        const fs::path lab = fs::path(p).replace_extension(".lab");
        if (!fs::exists(lab)) {
            throw std::runtime_error("missing label map " + lab.string());
        }
        LabeledVolume item{load_volume(p), load_labels(lab)};
        if (item.labels.extents() != item.image.extents()) {
            throw std::runtime_error("label extents differ from image in " + p.string());
        }
        out.push_back(std::move(item));
    }
    return out;
}

}  // namespace vmim::cli
