#pragma once

#include <string>
#include <vector>

#include "maskpoint/png_io.hpp"
#include "maskpoint/synth.hpp"

namespace maskpoint {

/// COCO-convention run-length encoding: column-major traversal, counts
/// alternating background/foreground and starting with background.
std::vector<long> rle_encode(const BinaryMask& mask);
BinaryMask rle_decode(const std::vector<long>& counts, int height, int width);

/// Writes `index.json` plus `images/*.png` under `dir`. Masks are stored both
/// as exact boundary polygons and as an RLE fallback.
void write_dataset(const std::vector<SceneRecord>& records, const std::string& dir);

/// Reads a dataset directory (or an index JSON path directly). Masks prefer
/// the RLE field and fall back to polygons.
std::vector<SceneRecord> read_dataset(const std::string& path);

struct LabelOptions {
  int k = 16;
  SamplingKind sampling = SamplingKind::uniform;
  double epsilon = 2.0;
  bool center = true;
  std::uint64_t seed = 0;
};

/// Fills in contour_points for instances that lack them or whose stored
/// settings disagree with `options`. Returns the number of instances labelled.
int ensure_contour_labels(std::vector<SceneRecord>& records, const LabelOptions& options);

/// JSON-level label augmentation: reads an annotation index, adds
/// `contour_points` / `center` / `contour_meta` per instance and writes the
/// otherwise unchanged document to `out_path`.
void augment_annotations_file(const std::string& in_path, const std::string& out_path,
                              const LabelOptions& options);

Tensor image_from_u8(const ImageU8& image);
ImageU8 image_to_u8(const Tensor& image);

}  // namespace maskpoint
