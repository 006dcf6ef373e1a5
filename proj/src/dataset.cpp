#include "smi/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace smi {

Dataset Dataset::subset(std::size_t begin, std::size_t count) const {
  Dataset out;
  out.num_classes = num_classes;
  const std::size_t end = std::min(size(), begin + count);
  for (std::size_t i = begin; i < end; ++i) {
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

void normalize_in_place(Dataset& data, const Normalization& norm) {
  for (auto& img : data.images) {
    for (auto& v : img.values()) v = norm.to_model(v);
  }
}

namespace {

// Glyph membership on the unit square; u is the row coordinate, v the column.
bool glyph_at(int cls, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5;
  const double r = std::sqrt(du * du + dv * dv);
  switch (cls % 10) {
    case 0: return u > 0.1 && u < 0.9 && v > 0.1 && v < 0.9;
    case 1: return (u < 0.2 || u > 0.8 || v < 0.2 || v > 0.8);
    case 2: return std::abs(du) < 0.13 || std::abs(dv) < 0.13;
    case 3: return std::abs(du - dv) < 0.14 || std::abs(du + dv) < 0.14;
    case 4: return r > 0.3 && r < 0.48;
    case 5: return r < 0.32;
    case 6: return u > 0.1 && std::abs(dv) < 0.5 * (u - 0.05);
    case 7: return (u > 0.1 && u < 0.32) || (u > 0.68 && u < 0.9);
    case 8: return (v > 0.1 && v < 0.32) || (v > 0.68 && v < 0.9);
    default: return (u < 0.5) != (v < 0.5);
  }
}

double texture_at(int tex, int r, int c, double phase) {
  const double pi = std::numbers::pi;
  switch (tex % 10) {
    case 0: return 0.5 + 0.5 * std::sin(2 * pi * (r + phase) / 4.0);
    case 1: return 0.5 + 0.5 * std::sin(2 * pi * (c + phase) / 4.0);
    case 2: return 0.5 + 0.5 * std::sin(2 * pi * (r + c + phase) / 6.0);
    case 3: return 0.5 + 0.5 * std::sin(2 * pi * (r - c + phase) / 6.0);
    case 4: return ((r / 2 + c / 2) % 2) ? 1.0 : 0.0;
    case 5: return (((r + static_cast<int>(phase)) / 4 + c / 4) % 2) ? 1.0 : 0.0;
    case 6: return ((r + static_cast<int>(phase)) % 4 == 0 && c % 4 == 0) ? 1.0 : 0.0;
    case 7: return 0.5 + 0.5 * std::sin(2 * pi * (r + phase) / 9.0);
    case 8: return 0.5 + 0.5 * std::sin(2 * pi * (c + phase) / 9.0);
    default: {
      const double dr = r - 13.5, dc = c - 13.5;
      return 0.5 + 0.5 * std::sin(std::sqrt(dr * dr + dc * dc) * 2 * pi / 7.0 + phase);
    }
  }
}

}  // namespace

SyntheticSample make_synthetic_sample(const SyntheticConfig& cfg, int label, Rng& rng) {
  const int n = cfg.image_size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> tex_dist(0, 9);
  std::normal_distribution<double> noise(0.0, cfg.pixel_noise);

  const int texture = unit(rng) < cfg.spurious_rho ? label % 10 : tex_dist(rng);
  const double phase = unit(rng) * 8.0;
  const int size = std::uniform_int_distribution<int>(cfg.min_glyph, cfg.max_glyph)(rng);
  const int r0 = std::uniform_int_distribution<int>(1, n - size - 1)(rng);
  const int c0 = std::uniform_int_distribution<int>(1, n - size - 1)(rng);
  const double intensity = 0.85 + 0.15 * unit(rng);

  SyntheticSample s{Tensor(Shape{n, n, 1}), std::vector<std::uint8_t>(static_cast<std::size_t>(n * n), 0), label,
                    texture};
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      double v = cfg.texture_amplitude * texture_at(texture, r, c, phase);
      const bool inside = r >= r0 && r < r0 + size && c >= c0 && c < c0 + size;
      if (inside && glyph_at(label, (r - r0 + 0.5) / size, (c - c0 + 0.5) / size)) {
        v = intensity;
        s.foreground[static_cast<std::size_t>(r * n + c)] = 1;
      }
      v += noise(rng);
      s.image[r * n + c] = std::clamp(v, 0.0, 1.0);
    }
  }
  return s;
}

Dataset make_synthetic(const SyntheticConfig& cfg, Rng& rng) {
  Dataset d;
  d.num_classes = cfg.num_classes;
  std::uniform_int_distribution<int> label_dist(0, cfg.num_classes - 1);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    auto s = make_synthetic_sample(cfg, label_dist(rng), rng);
    d.images.push_back(std::move(s.image));
    d.labels.push_back(s.label);
  }
  return d;
}

}  // namespace smi
