#pragma once

#include <cstdint>
#include <vector>

#include "smi/rng.hpp"
#include "smi/tensor/tensor.hpp"

namespace smi {

/// Affine map between display range [0,1] and model input space.
struct Normalization {
  double mean = 0.0;
  double stddev = 1.0;

  double to_model(double display) const { return (display - mean) / stddev; }
  double to_display(double model) const { return model * stddev + mean; }
};

/// Labeled images, each [H,W,C].
struct Dataset {
  std::vector<Tensor> images;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return images.size(); }
  Dataset subset(std::size_t begin, std::size_t count) const;
};

/// Maps every pixel from display range into model space.
void normalize_in_place(Dataset& data, const Normalization& norm);

struct SyntheticConfig {
  int image_size = 28;
  int num_classes = 10;
  std::size_t count = 2000;
  // Probability that the background texture index equals the label; otherwise
  // it is drawn uniformly. 0 leaves backgrounds uninformative.
  double spurious_rho = 0.0;
  double texture_amplitude = 0.35;
  double pixel_noise = 0.05;
  int min_glyph = 10;
  int max_glyph = 14;
};

/// Class-determined glyph at a random location on a structured background, in
/// display range [0,1], single channel. Deterministic given the rng state.
Dataset make_synthetic(const SyntheticConfig& config, Rng& rng);

/// Per-pixel mask (true = glyph) returned alongside each synthetic image, for
/// foreground probes.
struct SyntheticSample {
  Tensor image;
  std::vector<std::uint8_t> foreground;
  int label;
  int texture;
};
SyntheticSample make_synthetic_sample(const SyntheticConfig& config, int label, Rng& rng);

/// The normalization used for the synthetic data: [0,1] -> [-1,1].
inline Normalization synthetic_normalization() { return {0.5, 0.5}; }

}  // namespace smi
