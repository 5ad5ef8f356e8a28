#include "maskpoint/dataset.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unordered_map>

namespace maskpoint {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<long> rle_encode(const BinaryMask& mask) {
  std::vector<long> counts;
  long run = 0;
  std::uint8_t current = 0;  // runs start counting background
  for (int c = 0; c < mask.width(); ++c)
    for (int r = 0; r < mask.height(); ++r) {
      const std::uint8_t v = mask.at(r, c) ? 1 : 0;
      if (v == current) {
        ++run;
      } else {
        counts.push_back(run);
        current = v;
        run = 1;
      }
    }
  counts.push_back(run);
  return counts;
}

BinaryMask rle_decode(const std::vector<long>& counts, int height, int width) {
  BinaryMask mask(height, width);
  long pos = 0;
  std::uint8_t value = 0;
  for (const long count : counts) {
    for (long i = 0; i < count; ++i, ++pos) {
      if (pos >= static_cast<long>(height) * width)
        throw FormatError("rle_decode: counts exceed mask size");
      if (value) mask.at(static_cast<int>(pos % height), static_cast<int>(pos / height)) = 1;
    }
    value = value ? 0 : 1;
  }
  if (pos != static_cast<long>(height) * width)
    throw FormatError("rle_decode: counts do not cover mask");
  return mask;
}

Tensor image_from_u8(const ImageU8& image) {
  Tensor t({image.height, image.width, image.channels});
  for (Eigen::Index i = 0; i < t.size(); ++i)
    t(i) = static_cast<double>(image.data[static_cast<std::size_t>(i)]) / 255.0;
  return t;
}

ImageU8 image_to_u8(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("image_to_u8: expected [H, W, C]");
  ImageU8 out;
  out.height = static_cast<int>(image.extent(0));
  out.width = static_cast<int>(image.extent(1));
  out.channels = static_cast<int>(image.extent(2));
  out.data.resize(static_cast<std::size_t>(image.size()));
  for (Eigen::Index i = 0; i < image.size(); ++i)
    out.data[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(std::lround(std::clamp(image(i), 0.0, 1.0) * 255.0));
  return out;
}

namespace {

std::string scene_file_name(int scene_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "images/scene_%05d.png", scene_id);
  return buf;
}

json polygons_to_json(const std::vector<std::vector<Point>>& rings) {
  json out = json::array();
  for (const auto& ring : rings) {
    json flat = json::array();
    for (const Point& p : ring) {
      flat.push_back(p.y());  // x = col
      flat.push_back(p.x());  // y = row
    }
    out.push_back(std::move(flat));
  }
  return out;
}

std::vector<std::vector<Point>> polygons_from_json(const json& seg) {
  std::vector<std::vector<Point>> rings;
  for (const auto& flat : seg) {
    std::vector<Point> ring;
    for (std::size_t i = 0; i + 1 < flat.size(); i += 2)
      ring.emplace_back(flat[i + 1].get<double>(), flat[i].get<double>());  // (row, col)
    rings.push_back(std::move(ring));
  }
  return rings;
}

json point_set_to_json(const ContourPointSet& set, json& annotation) {
  json pts = json::array();
  for (const Point& p : set.points) pts.push_back(json::array({p.x(), p.y()}));
  annotation["contour_points"] = std::move(pts);
  if (set.center)
    annotation["center"] = json::array({set.center->x(), set.center->y()});
  annotation["contour_meta"] = {{"k", set.k},
                                {"sampling", to_string(set.sampling)},
                                {"pad_count", set.pad_count},
                                {"seed", set.seed}};
  return annotation;
}

ContourPointSet point_set_from_json(const json& annotation) {
  ContourPointSet set;
  for (const auto& p : annotation.at("contour_points"))
    set.points.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
  if (annotation.contains("center"))
    set.center = Point{annotation["center"].at(0).get<double>(),
                       annotation["center"].at(1).get<double>()};
  if (annotation.contains("contour_meta")) {
    const json& meta = annotation["contour_meta"];
    set.k = meta.value("k", static_cast<int>(set.points.size()));
    set.sampling = meta.value("sampling", std::string("uniform")) == "corner"
                       ? SamplingKind::corner
                       : SamplingKind::uniform;
    set.pad_count = meta.value("pad_count", 0);
    set.seed = meta.value("seed", std::uint64_t{0});
  } else {
    set.k = static_cast<int>(set.points.size());
  }
  return set;
}

BinaryMask mask_from_annotation(const json& ann, int height, int width) {
  if (ann.contains("rle")) {
    const json& rle = ann["rle"];
    const int h = rle.at("size").at(0).get<int>();
    const int w = rle.at("size").at(1).get<int>();
    if (h != height || w != width) throw FormatError("annotation RLE size mismatch");
    return rle_decode(rle.at("counts").get<std::vector<long>>(), h, w);
  }
  if (ann.contains("segmentation"))
    return polygon_fill(polygons_from_json(ann["segmentation"]), height, width, 0.5, false);
  throw FormatError("annotation carries neither rle nor segmentation");
}

json dataset_to_json(const std::vector<SceneRecord>& records) {
  json images = json::array(), annotations = json::array();
  int next_ann = 1;
  int max_class = -1;
  for (const SceneRecord& rec : records) {
    images.push_back({{"id", rec.scene_id},
                      {"file_name", scene_file_name(rec.scene_id)},
                      {"height", rec.image.extent(0)},
                      {"width", rec.image.extent(1)},
                      {"seed", rec.seed}});
    for (const InstanceAnnotation& inst : rec.instances) {
      max_class = std::max(max_class, inst.class_id);
      json ann = {{"id", next_ann++},
                  {"image_id", rec.scene_id},
                  {"category_id", inst.class_id + 1},
                  {"iscrowd", 0},
                  {"area", inst.mask.foreground_count()},
                  {"bbox", json::array({inst.box.left, inst.box.top, inst.box.width,
                                        inst.box.height})},
                  {"segmentation", polygons_to_json(mask_to_crack_polygons(inst.mask))},
                  {"rle",
                   {{"size", json::array({inst.mask.height(), inst.mask.width()})},
                    {"counts", rle_encode(inst.mask)}}}};
      if (inst.contour_points) point_set_to_json(*inst.contour_points, ann);
      annotations.push_back(std::move(ann));
    }
  }
  json categories = json::array();
  for (int c = 0; c <= max_class; ++c)
    categories.push_back({{"id", c + 1}, {"name", "class" + std::to_string(c)}});
  return {{"images", std::move(images)},
          {"annotations", std::move(annotations)},
          {"categories", std::move(categories)}};
}

}  // namespace

void write_dataset(const std::vector<SceneRecord>& records, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  for (const SceneRecord& rec : records)
    write_png((fs::path(dir) / scene_file_name(rec.scene_id)).string(),
              image_to_u8(rec.image));
  std::ofstream out(fs::path(dir) / "index.json");
  if (!out) throw FormatError("write_dataset: cannot open index.json under " + dir);
  out << dataset_to_json(records).dump() << '\n';
}

std::vector<SceneRecord> read_dataset(const std::string& path) {
  fs::path index(path);
  if (fs::is_directory(index)) index /= "index.json";
  std::ifstream in(index);
  if (!in) throw FormatError("read_dataset: cannot open " + index.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw FormatError("read_dataset: malformed JSON in " + index.string() + ": " + e.what());
  }
  const fs::path base = index.parent_path();

  std::vector<SceneRecord> records;
  std::unordered_map<long, std::size_t> by_image;
  for (const json& img : doc.value("images", json::array())) {
    SceneRecord rec;
    try {
      rec.scene_id = img.at("id").get<int>();
      rec.seed = img.value("seed", std::uint64_t{0});
      const fs::path file = base / img.at("file_name").get<std::string>();
      if (!fs::exists(file))
        throw FormatError("read_dataset: missing image file for image id " +
                          std::to_string(rec.scene_id) + ": " + file.string());
      rec.image = image_from_u8(read_png(file.string()));
      if (rec.image.extent(0) != img.at("height").get<int>() ||
          rec.image.extent(1) != img.at("width").get<int>())
        throw FormatError("read_dataset: size mismatch for image id " +
                          std::to_string(rec.scene_id));
    } catch (const json::exception& e) {
      throw FormatError(std::string("read_dataset: bad image record: ") + e.what());
    }
    by_image[rec.scene_id] = records.size();
    records.push_back(std::move(rec));
  }

  for (const json& ann : doc.value("annotations", json::array())) {
    long ann_id = -1;
    try {
      ann_id = ann.value("id", -1);
      const long image_id = ann.at("image_id").get<long>();
      const auto it = by_image.find(image_id);
      if (it == by_image.end())
        throw FormatError("read_dataset: annotation " + std::to_string(ann_id) +
                          " references unknown image " + std::to_string(image_id));
      SceneRecord& rec = records[it->second];
      InstanceAnnotation inst;
      inst.class_id = ann.at("category_id").get<int>() - 1;
      inst.mask = mask_from_annotation(ann, static_cast<int>(rec.image.extent(0)),
                                       static_cast<int>(rec.image.extent(1)));
      inst.box = tight_box(inst.mask);
      if (ann.contains("contour_points")) inst.contour_points = point_set_from_json(ann);
      rec.instances.push_back(std::move(inst));
    } catch (const json::exception& e) {
      throw FormatError("read_dataset: bad annotation record " + std::to_string(ann_id) + ": " +
                        e.what());
    }
  }
  return records;
}

namespace {

ContourPointSet make_point_set(const BinaryMask& mask, const LabelOptions& options,
                               std::uint64_t instance_seed) {
  const ClosedContour contour = trace_contour(mask);
  ContourPointSet set = options.sampling == SamplingKind::uniform
                            ? uniform_sample(contour, options.k, instance_seed)
                            : corner_sample(contour, options.k, options.epsilon, instance_seed);
  if (options.center) set.center = centroid(mask);
  return set;
}

bool labels_match(const ContourPointSet& set, const LabelOptions& options) {
  return set.k == options.k && set.sampling == options.sampling &&
         set.center.has_value() == options.center;
}

}  // namespace

int ensure_contour_labels(std::vector<SceneRecord>& records, const LabelOptions& options) {
  int labelled = 0;
  for (SceneRecord& rec : records)
    for (std::size_t i = 0; i < rec.instances.size(); ++i) {
      InstanceAnnotation& inst = rec.instances[i];
      if (inst.contour_points && labels_match(*inst.contour_points, options)) continue;
      const std::uint64_t instance_seed = mix_seed(
          mix_seed(options.seed, "labels"),
          (static_cast<std::uint64_t>(rec.scene_id) << 20) ^ static_cast<std::uint64_t>(i));
      inst.contour_points = make_point_set(inst.mask, options, instance_seed);
      ++labelled;
    }
  return labelled;
}

void augment_annotations_file(const std::string& in_path, const std::string& out_path,
                              const LabelOptions& options) {
  fs::path index(in_path);
  if (fs::is_directory(index)) index /= "index.json";
  std::ifstream in(index);
  if (!in) throw FormatError("make-labels: cannot open " + index.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw FormatError("make-labels: malformed JSON: " + std::string(e.what()));
  }

  std::unordered_map<long, std::pair<int, int>> image_sizes;  // id -> (h, w)
  for (const json& img : doc.value("images", json::array()))
    image_sizes[img.at("id").get<long>()] = {img.at("height").get<int>(),
                                             img.at("width").get<int>()};

  std::unordered_map<long, int> per_image_index;
  for (json& ann : doc["annotations"]) {
    const long image_id = ann.at("image_id").get<long>();
    const auto size_it = image_sizes.find(image_id);
    if (size_it == image_sizes.end())
      throw FormatError("make-labels: annotation references unknown image " +
                        std::to_string(image_id));
    const BinaryMask mask =
        mask_from_annotation(ann, size_it->second.first, size_it->second.second);
    const int idx = per_image_index[image_id]++;
    const std::uint64_t instance_seed =
        mix_seed(mix_seed(options.seed, "labels"),
                 (static_cast<std::uint64_t>(image_id) << 20) ^ static_cast<std::uint64_t>(idx));
    point_set_to_json(make_point_set(mask, options, instance_seed), ann);
  }

  std::ofstream out(out_path);
  if (!out) throw FormatError("make-labels: cannot open output " + out_path);
  out << doc.dump() << '\n';
}

}  // namespace maskpoint
