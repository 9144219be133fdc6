#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "coa/tensor.hpp"

namespace coa {

/// Loads an 8-bit PNG as a (1, 3, h, w) image in [0, 1]. Grey and alpha
/// inputs are converted to RGB.
Image read_png(const std::filesystem::path& path);

/// Writes an RGB image as 8-bit PNG; values are clipped and rounded half to even.
void write_png(const std::filesystem::path& path, const Image& image);

/// Paths of a dataset manifest, resolved relative to the manifest file.
struct DatasetManifest {
  struct Pair {
    std::filesystem::path hazy;
    std::filesystem::path clean;
  };
  std::vector<Pair> pairs;
  std::vector<std::filesystem::path> images;
};

DatasetManifest read_manifest(const std::filesystem::path& file);

/// Writes paths relative to the manifest's directory when possible.
void write_manifest(const std::filesystem::path& file, const DatasetManifest& manifest);

}  // namespace coa
