#include <algorithm>

#include "hydra/datakit.hpp"
#include "hydra/errors.hpp"
#include "hydra/parallel.hpp"
#include "hydra/ops.hpp"

namespace hydra::data {

Tensor raster_to_tensor(const Raster& raster, std::size_t height, std::size_t width, const Normalization& norm) {
  if (raster.channels != 3) throw FormatError("expected a colour (P6) image");
  if (height == 0 || width == 0) throw ConfigError("target resolution must be positive");
  const std::size_t plane = raster.width * raster.height;
  std::vector<float> chw(3 * plane);
  for (std::size_t q = 0; q < plane; ++q) {
    for (std::size_t c = 0; c < 3; ++c) chw[c * plane + q] = static_cast<float>(raster.pixels[q * 3 + c]) / 255.f;
  }
  Tensor t({1, 3, raster.height, raster.width}, std::move(chw));
  if (raster.height != height || raster.width != width) {
    NoGradGuard guard;
    t = bilinear_resize(t, height, width);
  }
  std::vector<float> out(t.data().begin(), t.data().end());
  const std::size_t out_plane = height * width;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t q = 0; q < out_plane; ++q) {
      out[c * out_plane + q] = (out[c * out_plane + q] - norm.mean[c]) / norm.std[c];
    }
  }
  return Tensor({3, height, width}, std::move(out));
}

Tensor load_image(const std::filesystem::path& path, std::size_t height, std::size_t width,
                  const Normalization& norm) {
  const Raster r = read_pnm(path);
  if (r.channels != 3) throw FormatError(path.string() + ": expected a P6 colour image");
  return raster_to_tensor(r, height, width, norm);
}

LoadedSplit load_records(const Manifest& manifest, const std::filesystem::path& root,
                         std::span<const std::size_t> indices, std::size_t height, std::size_t width,
                         const Normalization& norm) {
  if (indices.empty()) throw UsageError("cannot load an empty split");
  LoadedSplit out;
  out.num_attributes = manifest.attributes.size();
  const std::size_t per = 3 * height * width;
  std::vector<float> pixels(indices.size() * per);
  for (std::size_t row = 0; row < indices.size(); ++row) {
    if (indices[row] >= manifest.records.size()) throw IndexError("record index out of range");
    const auto& rec = manifest.records[indices[row]];
    out.attrs.insert(out.attrs.end(), rec.attrs.begin(), rec.attrs.end());
    out.ids.push_back(rec.id);
    out.cameras.push_back(rec.camera);
  }
  parallel_for(indices.size(), [&](std::size_t row) {
    NoGradGuard guard;
    const Tensor img = load_image(root / manifest.records[indices[row]].path, height, width, norm);
    std::copy(img.data().begin(), img.data().end(), pixels.begin() + static_cast<long>(row * per));
  });
  out.images = Tensor({indices.size(), 3, height, width}, std::move(pixels));
  return out;
}

Tensor gather_images(const LoadedSplit& split, std::span<const std::size_t> rows) {
  const auto& d = split.images.dims();
  const std::size_t per = d[1] * d[2] * d[3];
  std::vector<float> out(rows.size() * per);
  auto src = split.images.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= d[0]) throw IndexError("row index out of range");
    std::copy_n(src.begin() + static_cast<long>(rows[i] * per), per, out.begin() + static_cast<long>(i * per));
  }
  return Tensor({rows.size(), d[1], d[2], d[3]}, std::move(out));
}

LoadedSplit subset(const LoadedSplit& split, std::span<const std::size_t> rows) {
  LoadedSplit out;
  out.num_attributes = split.num_attributes;
  out.images = gather_images(split, rows);
  for (auto r : rows) {
    auto l = split.labels(r);
    out.attrs.insert(out.attrs.end(), l.begin(), l.end());
    out.ids.push_back(split.ids[r]);
    out.cameras.push_back(split.cameras[r]);
  }
  return out;
}

}  // namespace hydra::data
