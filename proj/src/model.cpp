#include "maskpoint/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace maskpoint {

const char* to_string(FusionDesign d) {
  switch (d) {
    case FusionDesign::a: return "a";
    case FusionDesign::b: return "b";
    case FusionDesign::c: return "c";
    default: return "d";
  }
}
const char* to_string(ReductionKind r) {
  switch (r) {
    case ReductionKind::maxpool: return "maxpool";
    case ReductionKind::avgpool: return "avgpool";
    default: return "strided_conv";
  }
}
const char* to_string(FuseMode m) {
  switch (m) {
    case FuseMode::add: return "add";
    case FuseMode::max: return "max";
    default: return "multiply";
  }
}

FusionDesign fusion_design_from_string(const std::string& s) {
  if (s == "a") return FusionDesign::a;
  if (s == "b") return FusionDesign::b;
  if (s == "c") return FusionDesign::c;
  if (s == "d") return FusionDesign::d;
  throw FormatError("unknown fusion design: " + s);
}
ReductionKind reduction_from_string(const std::string& s) {
  if (s == "maxpool") return ReductionKind::maxpool;
  if (s == "avgpool") return ReductionKind::avgpool;
  if (s == "strided_conv") return ReductionKind::strided_conv;
  throw FormatError("unknown reduction: " + s);
}
FuseMode fuse_mode_from_string(const std::string& s) {
  if (s == "add") return FuseMode::add;
  if (s == "max") return FuseMode::max;
  if (s == "multiply") return FuseMode::multiply;
  throw FormatError("unknown fusion mode: " + s);
}

std::string ModelConfig::digest_string() const {
  std::ostringstream os;
  os << "classes=" << classes << ";features=" << feature_channels << ";roi=" << roi_size
     << ";mask_ch=" << effective_mask_channels() << ";kp_ch=" << effective_keypoint_channels()
     << ";kp_branch=" << with_keypoint_branch << ";design=" << to_string(fusion.design)
     << ";reduction=" << to_string(fusion.reduction) << ";mode=" << to_string(fusion.mode)
     << ";k=" << fusion.k << ";use_center=" << fusion.use_center << ";alpha=" << fusion.alpha
     << ";enabled=" << fusion.enabled << ";center_in_fusion=" << fusion.center_in_fusion;
  return os.str();
}

NodePtr ParamStore::create(const std::string& name, std::vector<Eigen::Index> shape,
                           double init_bound, std::uint64_t seed) {
  if (index_.count(name)) throw ShapeError("ParamStore: duplicate parameter " + name);
  Tensor value(std::move(shape));
  if (init_bound > 0.0) {
    // Seeded per parameter name so shared layers initialize identically
    // across model variants that register different parameter subsets.
    Rng rng(mix_seed(seed, name));
    for (Eigen::Index i = 0; i < value.size(); ++i)
      value(i) = rng.uniform(-init_bound, init_bound);
  }
  NodePtr node = leaf(std::move(value));
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(node));
  return entries_.back().second;
}

NodePtr ParamStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ShapeError("ParamStore: unknown parameter " + name);
  return entries_[it->second].second;
}

void ParamStore::zero_grads() {
  for (auto& [name, node] : entries_)
    if (node->has_grad()) node->grad.array().setZero();
}

long ParamStore::parameter_count() const {
  long total = 0;
  for (const auto& [name, node] : entries_) total += node->value.size();
  return total;
}

namespace {

double he_uniform_bound(Eigen::Index fan_in) {
  return std::sqrt(6.0 / static_cast<double>(fan_in));
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  const auto conv = [&](const std::string& name, Eigen::Index kh, Eigen::Index kw,
                        Eigen::Index ci, Eigen::Index co) {
    params_.create(name + ".w", {kh, kw, ci, co}, he_uniform_bound(kh * kw * ci), init_seed);
    params_.create(name + ".b", {co}, 0.0, init_seed);
  };
  const auto deconv = [&](const std::string& name, Eigen::Index ci, Eigen::Index co) {
    params_.create(name + ".w", {ci, 2, 2, co}, he_uniform_bound(ci), init_seed);
    params_.create(name + ".b", {co}, 0.0, init_seed);
  };
  const auto fc = [&](const std::string& name, Eigen::Index d, Eigen::Index u) {
    params_.create(name + ".w", {d, u}, he_uniform_bound(d), init_seed);
    params_.create(name + ".b", {u}, 0.0, init_seed);
  };

  const int f = config_.feature_channels;
  const int widths[7] = {3, 16, 32, 48, 64, 64, f};
  for (int i = 0; i < 6; ++i)
    conv("backbone.conv" + std::to_string(i + 1), 3, 3, widths[i], widths[i + 1]);

  const Eigen::Index roi_flat = config_.roi_size * config_.roi_size * f;
  const int c = config_.classes;
  fc("box_head.fc1", roi_flat, 256);
  fc("box_head.fc2", 256, 256);
  fc("box_head.cls", 256, c + 1);
  fc("box_head.box", 256, 4 * c);

  const int mc = config_.effective_mask_channels();
  conv("mask_head.conv1", 3, 3, f, mc);
  for (int i = 2; i <= 4; ++i) conv("mask_head.conv" + std::to_string(i), 3, 3, mc, mc);
  deconv("mask_head.deconv", mc, mc);
  conv("mask_head.out", 1, 1, mc, c);

  if (config_.with_keypoint_branch) {
    const int kc = config_.effective_keypoint_channels();
    const int maps = config_.fusion.keypoint_channels();
    conv("kp_head.conv1", 3, 3, f, kc);
    for (int i = 2; i <= 8; ++i) conv("kp_head.conv" + std::to_string(i), 3, 3, kc, kc);
    deconv("kp_head.deconv1", kc, kc);
    if (config_.fusion.design != FusionDesign::d) deconv("kp_head.deconv2", kc, kc);
    conv("kp_head.out", 1, 1, kc, maps);

    if (config_.fusion.enabled) {
      if (config_.fusion.design == FusionDesign::a) {
        conv("fusion.reduce", 3, 3, 1, 1);
      } else if (config_.fusion.design == FusionDesign::b &&
                 config_.fusion.reduction == ReductionKind::strided_conv) {
        conv("fusion.reduce", 3, 3, maps, maps);
      } else if (config_.fusion.design == FusionDesign::c) {
        deconv("fusion.mask_up", c, c);
      }
    }
  }
}

NodePtr Model::conv_relu(const NodePtr& x, const std::string& name, Eigen::Index stride) const {
  return relu(conv2d(x, params_.get(name + ".w"), params_.get(name + ".b"), stride, 1));
}

NodePtr Model::backbone_forward(const NodePtr& images) const {
  if (images->value.rank() != 4 || images->value.extent(3) != 3)
    throw ShapeError("backbone_forward: expected [B, H, W, 3]");
  if (images->value.extent(1) % 4 != 0 || images->value.extent(2) % 4 != 0)
    throw ShapeError("backbone_forward: H and W must be divisible by 4");
  NodePtr x = conv_relu(images, "backbone.conv1", 2);
  x = conv_relu(x, "backbone.conv2", 1);
  x = conv_relu(x, "backbone.conv3", 2);
  x = conv_relu(x, "backbone.conv4", 1);
  x = conv_relu(x, "backbone.conv5", 1);
  x = conv_relu(x, "backbone.conv6", 1);
  return x;
}

std::pair<NodePtr, NodePtr> Model::box_head_forward(const NodePtr& rois) const {
  const auto r = rois->value.extent(0);
  NodePtr x = reshape(rois, {r, rois->value.size() / std::max<Eigen::Index>(r, 1)});
  x = relu(linear(x, params_.get("box_head.fc1.w"), params_.get("box_head.fc1.b")));
  x = relu(linear(x, params_.get("box_head.fc2.w"), params_.get("box_head.fc2.b")));
  NodePtr cls = linear(x, params_.get("box_head.cls.w"), params_.get("box_head.cls.b"));
  NodePtr box = linear(x, params_.get("box_head.box.w"), params_.get("box_head.box.b"));
  return {cls, box};
}

NodePtr Model::mask_head_forward(const NodePtr& rois) const {
  NodePtr x = rois;
  for (int i = 1; i <= 4; ++i) x = conv_relu(x, "mask_head.conv" + std::to_string(i), 1);
  x = relu(conv_transpose2x2(x, params_.get("mask_head.deconv.w"),
                             params_.get("mask_head.deconv.b")));
  return conv2d(x, params_.get("mask_head.out.w"), params_.get("mask_head.out.b"), 1, 0);
}

NodePtr Model::keypoint_head_forward(const NodePtr& rois) const {
  if (!config_.with_keypoint_branch)
    throw ShapeError("keypoint_head_forward: model built without keypoint branch");
  NodePtr x = rois;
  for (int i = 1; i <= 8; ++i) x = conv_relu(x, "kp_head.conv" + std::to_string(i), 1);
  x = relu(conv_transpose2x2(x, params_.get("kp_head.deconv1.w"),
                             params_.get("kp_head.deconv1.b")));
  if (config_.fusion.design != FusionDesign::d)
    x = relu(conv_transpose2x2(x, params_.get("kp_head.deconv2.w"),
                               params_.get("kp_head.deconv2.b")));
  return conv2d(x, params_.get("kp_head.out.w"), params_.get("kp_head.out.b"), 1, 0);
}

Model::FusionOut Model::fuse(const NodePtr& keypoint_logits, const NodePtr& mask_logits) const {
  const FusionConfig& fc = config_.fusion;
  if (!fc.enabled) throw ShapeError("fuse: fusion is disabled in this configuration");
  const Eigen::Index summed = fc.summed_channels();
  NodePtr ok;
  NodePtr target = mask_logits;
  switch (fc.design) {
    case FusionDesign::a:
      // Channel-wise sum first, then the stride-2 reduction convolution.
      // No activation after the reduction.
      ok = channel_sum(keypoint_logits, summed);
      ok = conv2d(ok, params_.get("fusion.reduce.w"), params_.get("fusion.reduce.b"), 2, 1);
      break;
    case FusionDesign::b: {
      NodePtr reduced;
      switch (fc.reduction) {
        case ReductionKind::maxpool: reduced = pool2x2(keypoint_logits, PoolKind::max); break;
        case ReductionKind::avgpool: reduced = pool2x2(keypoint_logits, PoolKind::avg); break;
        case ReductionKind::strided_conv:
          reduced = conv2d(keypoint_logits, params_.get("fusion.reduce.w"),
                           params_.get("fusion.reduce.b"), 2, 1);
          break;
      }
      ok = channel_sum(reduced, summed);
      break;
    }
    case FusionDesign::c:
      target = conv_transpose2x2(mask_logits, params_.get("fusion.mask_up.w"),
                                 params_.get("fusion.mask_up.b"));
      ok = channel_sum(keypoint_logits, summed);
      break;
    case FusionDesign::d:
      ok = channel_sum(keypoint_logits, summed);
      break;
  }
  if (ok->value.extent(1) != target->value.extent(1) ||
      ok->value.extent(2) != target->value.extent(2))
    throw ShapeError("fuse: keypoint map and mask logits disagree spatially");
  return {broadcast_combine(ok, target, fc.mode), ok};
}

namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
  // little-endian
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void Model::save_checkpoint(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("save_checkpoint: cannot open " + path);
  out.write(kCheckpointMagic, 7);
  write_u64(out, config_.digest());

  // Blocks sorted by name for a canonical byte layout.
  std::vector<std::pair<std::string, NodePtr>> sorted(params_.entries().begin(),
                                                      params_.entries().end());
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [name, node] : sorted) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, static_cast<std::uint64_t>(node->value.rank()));
    for (const auto extent : node->value.shape())
      write_u64(out, static_cast<std::uint64_t>(extent));
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(node->value.data()),
              static_cast<std::streamsize>(node->value.size() * 8));
  }
  if (!out) throw FormatError("save_checkpoint: write failed for " + path);
}

void Model::load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load_checkpoint: cannot open " + path);
  char magic[7];
  in.read(magic, 7);
  if (!in || std::memcmp(magic, kCheckpointMagic, 7) != 0)
    throw FormatError("load_checkpoint: bad magic in " + path);
  const std::uint64_t digest = read_u64(in);
  if (digest != config_.digest())
    throw FormatError("load_checkpoint: configuration digest mismatch in " + path);

  std::size_t loaded = 0;
  while (true) {
    const std::uint64_t name_len = read_u64(in);
    if (in.eof()) break;
    if (!in) throw FormatError("load_checkpoint: truncated block header in " + path);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t rank = read_u64(in);
    std::vector<Eigen::Index> shape(rank);
    for (auto& extent : shape) extent = static_cast<Eigen::Index>(read_u64(in));
    NodePtr node;
    try {
      node = params_.get(name);
    } catch (const ShapeError&) {
      throw FormatError("load_checkpoint: unknown parameter " + name + " in " + path);
    }
    if (node->value.shape() != shape)
      throw FormatError("load_checkpoint: shape mismatch for " + name + " in " + path);
    in.read(reinterpret_cast<char*>(node->value.data()),
            static_cast<std::streamsize>(node->value.size() * 8));
    if (!in) throw FormatError("load_checkpoint: truncated values for " + name + " in " + path);
    ++loaded;
  }
  if (loaded != params_.entries().size())
    throw FormatError("load_checkpoint: parameter count mismatch in " + path);
}

}  // namespace maskpoint
