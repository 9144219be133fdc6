#include "coa/image_io.hpp"

#include <png.h>

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace coa {

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw InputError("read_png: cannot open " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&png);
    throw InputError("read_png: decode failed for " + path.string() + ": " + png.message);
  }
  const Index h = png.height;
  const Index w = png.width;
  Image img(1, 3, h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) img(0, c, y, x) = static_cast<float>(buffer[(y * w + x) * 3 + c]) / 255.0f;
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw DimensionError("write_png: expected (1,3,h,w), got " + s.str());
  std::vector<unsigned char> buffer(static_cast<std::size_t>(s.h * s.w * 3));
  for (Index y = 0; y < s.h; ++y)
    for (Index x = 0; x < s.w; ++x)
      for (Index c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(image(0, c, y, x)), 0.0, 1.0) * 255.0;
        // nearbyint honours the default FE_TONEAREST mode: ties go to even
        buffer[(y * s.w + x) * 3 + c] = static_cast<unsigned char>(std::nearbyint(v));
      }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(s.w);
  png.height = static_cast<png_uint_32>(s.h);
  png.format = PNG_FORMAT_RGB;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    throw InputError("write_png: cannot write " + path.string() + ": " + png.message);
  }
}

DatasetManifest read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw InputError("read_manifest: cannot open " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("read_manifest: " + file.string() + ": " + e.what());
  }
  const auto base = file.parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
  };
  DatasetManifest m;
  if (j.contains("pairs")) {
    for (const auto& p : j["pairs"]) m.pairs.push_back({resolve(p.at("hazy")), resolve(p.at("clean"))});
  }
  if (j.contains("images")) {
    for (const auto& p : j["images"]) m.images.push_back(resolve(p.get<std::string>()));
  }
  if (m.pairs.empty() && m.images.empty()) throw InputError("read_manifest: no entries in " + file.string());
  return m;
}

void write_manifest(const std::filesystem::path& file, const DatasetManifest& manifest) {
  const auto base = file.parent_path().empty() ? std::filesystem::path(".") : file.parent_path();
  auto rel = [&](const std::filesystem::path& p) { return std::filesystem::relative(p, base).generic_string(); };
  nlohmann::json j;
  if (!manifest.pairs.empty()) {
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : manifest.pairs) j["pairs"].push_back({{"hazy", rel(p.hazy)}, {"clean", rel(p.clean)}});
  }
  if (!manifest.images.empty()) {
    j["images"] = nlohmann::json::array();
    for (const auto& p : manifest.images) j["images"].push_back(rel(p));
  }
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream(file) << j.dump(2) << "\n";
}

}  // namespace coa
