#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "geqbev/errors.hpp"
#include "geqbev/group.hpp"
#include "geqbev/layers.hpp"
#include "geqbev/serialize.hpp"

namespace geqbev {

enum class Arch { geq, plain };

inline std::string_view to_string(Arch a) { return a == Arch::geq ? "geq" : "plain"; }

inline Arch parse_arch(std::string_view name) {
  if (name == "geq") return Arch::geq;
  if (name == "plain") return Arch::plain;
  throw InvalidConfig("unknown arch '" + std::string(name) + "' (expected geq or plain)");
}

struct ModelConfig {
  Arch arch = Arch::geq;
  std::size_t depth = 3;  // number of (bn -> relu -> conv) blocks after the stem
  std::size_t channels = 4;
  PoolSpec pool{PoolMethod::beveq};
  std::size_t kernel_size = 3;
  std::size_t in_channels = 2;
  /// plain arch only: widen channels to match the geq parameter count
  bool match_params = true;

  void validate() const {
    if (depth < 1) throw InvalidConfig("model.depth must be >= 1");
    if (channels < 2) throw InvalidConfig("model.channels must be >= 2 (the head reads channel pairs)");
    if (in_channels < 1) throw InvalidConfig("model.in_channels must be >= 1");
    if (kernel_size % 2 == 0) throw InvalidConfig("model.kernel_size must be odd");
  }
};

/// Channel widths of one stack: `hidden` for the stem and every block but
/// the last, `last` for the final conv output (which feeds pool and head).
struct StackWidths {
  std::size_t hidden = 0;
  std::size_t last = 0;
  friend bool operator==(const StackWidths&, const StackWidths&) = default;
};

using Layer = std::variant<LiftLayer, GroupConvLayer, GroupBatchNorm, Relu, GroupPool, PlainConv,
                           OrientationHead>;

inline std::string_view layer_kind(const Layer& layer) {
  struct Visitor {
    std::string_view operator()(const LiftLayer&) const { return "lift"; }
    std::string_view operator()(const GroupConvLayer&) const { return "gconv"; }
    std::string_view operator()(const GroupBatchNorm&) const { return "bn"; }
    std::string_view operator()(const Relu&) const { return "relu"; }
    std::string_view operator()(const GroupPool&) const { return "pool"; }
    std::string_view operator()(const PlainConv&) const { return "conv"; }
    std::string_view operator()(const OrientationHead&) const { return "head"; }
  };
  return std::visit(Visitor{}, layer);
}

/// Ordered composition of layers.
class LayerStack {
 public:
  void push(Layer layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& x, bool training) {
    Tensor h = x;
    for (Layer& layer : layers_) {
      h = std::visit(
          [&](auto& l) -> Tensor {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, GroupBatchNorm>) return l.forward(h, training);
            else return l.forward(h);
          },
          layer);
    }
    return h;
  }

  /// Learnable tensors, named "<index>.<kind>.<name>".
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      std::visit(
          [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (!std::is_same_v<L, Relu>) {
              for (auto& p : l.parameters()) out.push_back({prefix(i) + p.name, p.tensor});
            }
          },
          layers_[i]);
    }
    return out;
  }

  /// Non-learnable state (batch-norm running statistics).
  std::vector<NamedTensor> buffers() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (const auto* bn = std::get_if<GroupBatchNorm>(&layers_[i])) {
        for (auto& b : bn->buffers()) out.push_back({prefix(i) + b.name, b.tensor});
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  std::vector<std::string> kinds() const {
    std::vector<std::string> out;
    for (const auto& l : layers_) out.emplace_back(layer_kind(l));
    return out;
  }

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  std::string prefix(std::size_t i) const {
    return std::to_string(i) + "." + std::string(layer_kind(layers_[i])) + ".";
  }

  std::vector<Layer> layers_;
};

struct Model {
  ModelConfig config;
  GroupSpec group;
  StackWidths widths;
  LayerStack stack;

  Tensor forward(const Tensor& x, bool training) { return stack.forward(x, training); }
};

namespace detail {

/// Learnable parameter count of a stack, in closed form.
inline std::size_t stack_parameter_count(const ModelConfig& cfg, std::size_t R, StackWidths w) {
  const std::size_t K2 = cfg.kernel_size * cfg.kernel_size;
  std::size_t n = w.hidden * cfg.in_channels * K2 + w.hidden;  // stem
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::size_t out = i + 1 == cfg.depth ? w.last : w.hidden;
    n += 2 * w.hidden;                            // bn
    n += out * w.hidden * R * K2 + out;           // conv
  }
  if (cfg.pool.method == PoolMethod::beveq) n += w.last * w.last * R + w.last;
  n += 2 * w.last * w.last;  // head
  return n;
}

}  // namespace detail

/// Plain widths whose parameter count is within `tolerance` of the geq
/// model with `cfg.channels` and `group`; prefers hidden and last widths
/// close to each other, then the closest count.
inline StackWidths match_plain_widths(const ModelConfig& cfg, GroupSpec group,
                                      double tolerance = 0.05) {
  const std::size_t C = cfg.channels;
  const auto target = static_cast<double>(detail::stack_parameter_count(
      cfg, static_cast<std::size_t>(group.order()), {C, C}));
  std::optional<StackWidths> best;
  double best_gap = 0.0;
  std::size_t best_spread = 0;
  const std::size_t limit = 8 * C + 16;
  for (std::size_t h = 1; h <= limit; ++h) {
    for (std::size_t l = 2; l <= limit; ++l) {
      const double n = static_cast<double>(detail::stack_parameter_count(cfg, 1, {h, l}));
      const double gap = std::abs(n - target) / target;
      if (gap > tolerance) continue;
      const std::size_t spread = h > l ? h - l : l - h;
      if (!best || spread < best_spread || (spread == best_spread && gap < best_gap)) {
        best = StackWidths{h, l};
        best_gap = gap;
        best_spread = spread;
      }
    }
  }
  if (!best) {
    throw InvalidConfig("no plain widths reach a parameter count within " +
                        std::to_string(tolerance * 100) + "% of the geq model");
  }
  return *best;
}

/// geq:   lift -> (bn -> relu -> gconv)^N -> pool -> head
/// plain: conv -> (bn -> relu -> conv)^N  -> pool -> head
/// The plain stack is the geq stack over the trivial group, with widths
/// chosen by match_plain_widths when cfg.match_params is set.
inline Model build_model(const ModelConfig& cfg, GroupSpec group, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Model m{cfg, group, {cfg.channels, cfg.channels}, {}};
  const std::size_t K = cfg.kernel_size;

  if (cfg.arch == Arch::geq) {
    const std::size_t C = cfg.channels;
    m.stack.push(LiftLayer(cfg.in_channels, C, K, group, rng));
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      m.stack.push(GroupBatchNorm(C));
      m.stack.push(Relu{});
      m.stack.push(GroupConvLayer(C, C, K, group, rng));
    }
    m.stack.push(GroupPool(cfg.pool, C, group, rng));
    m.stack.push(OrientationHead(C, rng));
    return m;
  }

  if (cfg.match_params) m.widths = match_plain_widths(cfg, group);
  const auto [hidden, last] = m.widths;
  m.stack.push(PlainConv(cfg.in_channels, hidden, K, rng));
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    m.stack.push(GroupBatchNorm(hidden));
    m.stack.push(Relu{});
    m.stack.push(PlainConv(hidden, i + 1 == cfg.depth ? last : hidden, K, rng));
  }
  m.stack.push(GroupPool(cfg.pool, last, GroupSpec::c1(), rng));
  m.stack.push(OrientationHead(last, rng));
  return m;
}

// ---------------------------------------------------------------------------
// checkpoints
//
//   8 bytes  magic "GEQBEVCK"
//   u32      format version (1)
//   u32      header length, then that many bytes of JSON header
//            {"model": {...}, "group": "c4", "widths": [h, l]}
//   u32      tensor count, then per tensor:
//            u32 name length | name bytes | tensor blob (serialize.hpp)
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'G', 'E', 'Q', 'B', 'E', 'V', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"arch", std::string(to_string(c.arch))},
          {"depth", c.depth},
          {"channels", c.channels},
          {"pool", std::string(to_string(c.pool.method))},
          {"kernel_size", c.kernel_size},
          {"in_channels", c.in_channels},
          {"match_params", c.match_params}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.arch = parse_arch(j.at("arch").get<std::string>());
  c.depth = j.at("depth").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.pool.method = parse_pool_method(j.at("pool").get<std::string>());
  c.kernel_size = j.at("kernel_size").get<std::size_t>();
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.match_params = j.at("match_params").get<bool>();
  return c;
}

inline std::vector<NamedTensor> state_tensors(const Model& m) {
  auto out = m.stack.parameters();
  for (auto& b : m.stack.buffers()) out.push_back(b);
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  const std::string header =
      nlohmann::json{{"model", to_json(m.config)},
                     {"group", std::string(m.group.name())},
                     {"widths", {m.widths.hidden, m.widths.last}}}
          .dump();
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  const auto tensors = state_tensors(m);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_tensor(os, t.tensor);
  }
  if (!os) throw FormatError("failed writing checkpoint " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw FormatError(path.string() + " is not a geqbev checkpoint");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string header(detail::read_le<std::uint32_t>(is), '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(header.size()))) {
    throw FormatError("truncated checkpoint header");
  }
  const auto h = nlohmann::json::parse(header);
  const ModelConfig cfg = model_config_from_json(h.at("model"));
  const GroupSpec group = GroupSpec::from_name(h.at("group").get<std::string>());
  Model m = build_model(cfg, group, 0);
  const StackWidths stored{h.at("widths").at(0).get<std::size_t>(),
                           h.at("widths").at(1).get<std::size_t>()};
  if (stored != m.widths) throw FormatError("checkpoint widths disagree with its model config");

  auto slots = state_tensors(m);
  const auto count = detail::read_le<std::uint32_t>(is);
  if (count != slots.size()) throw FormatError("checkpoint tensor count mismatch");
  for (auto& slot : slots) {
    std::string name(detail::read_le<std::uint32_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (name != slot.name) throw FormatError("checkpoint expected '" + slot.name + "', found '" + name + "'");
    const Tensor t = read_tensor(is);
    if (t.shape() != slot.tensor.shape()) throw FormatError("shape mismatch for " + name);
    std::copy(t.data().begin(), t.data().end(), slot.tensor.mutable_data().begin());
  }
  return m;
}

}  // namespace geqbev
