#include "dapnet/config.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

#include "dapnet/errors.hpp"

namespace dapnet {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double parse_double(std::string_view key, std::string_view text) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ConfigError("invalid value for '" + std::string(key) + "': expected a number, got '" +
                      std::string(text) + "'");
  }
  return v;
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view text) {
  Int v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ConfigError("invalid value for '" + std::string(key) + "': expected an integer, got '" +
                      std::string(text) + "'");
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("invalid value for '" + std::string(key) + "': expected true/false, got '" +
                    std::string(text) + "'");
}

struct Field {
  std::function<void(ExperimentConfig&, std::string_view key, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field real_field(T ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.*member = parse_double(k, v);
          },
          [member](const ExperimentConfig& c) { return format_double(c.*member); }};
}

template <typename T>
Field int_field(T ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.*member = parse_int<T>(k, v);
          },
          [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

Field bool_field(bool ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.*member = parse_bool(k, v);
          },
          [member](const ExperimentConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

Field string_field(std::string ExperimentConfig::*member) {
  return {[member](ExperimentConfig& c, std::string_view, std::string_view v) { c.*member = v; },
          [member](const ExperimentConfig& c) { return c.*member; }};
}

// Ordered: this is also the serialization order.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"alpha", real_field(&ExperimentConfig::alpha)},
      {"lambda_img", real_field(&ExperimentConfig::lambda_img)},
      {"lambda_feat", real_field(&ExperimentConfig::lambda_feat)},
      {"dice_smooth", real_field(&ExperimentConfig::dice_smooth)},
      {"adv_symmetric", bool_field(&ExperimentConfig::adv_symmetric)},
      {"base_lr", real_field(&ExperimentConfig::base_lr)},
      {"total_epochs", int_field(&ExperimentConfig::total_epochs)},
      {"constant_epochs", int_field(&ExperimentConfig::constant_epochs)},
      {"batch_size", int_field(&ExperimentConfig::batch_size)},
      {"adam_beta1_g", real_field(&ExperimentConfig::adam_beta1_g)},
      {"adam_beta2_g", real_field(&ExperimentConfig::adam_beta2_g)},
      {"adam_beta1_d", real_field(&ExperimentConfig::adam_beta1_d)},
      {"adam_beta2_d", real_field(&ExperimentConfig::adam_beta2_d)},
      {"crop_size", int_field(&ExperimentConfig::crop_size)},
      {"crops_per_image", int_field(&ExperimentConfig::crops_per_image)},
      {"hflip", bool_field(&ExperimentConfig::hflip)},
      {"num_classes", int_field(&ExperimentConfig::num_classes)},
      {"variant",
       {[](ExperimentConfig& c, std::string_view, std::string_view v) { c.variant = parse_variant(v); },
        [](const ExperimentConfig& c) { return std::string(to_string(c.variant)); }}},
      {"channel_width_scale",
       {[](ExperimentConfig& c, std::string_view, std::string_view v) {
          c.channel_width_scale = WidthScale::parse(v);
        },
        [](const ExperimentConfig& c) { return c.channel_width_scale.str(); }}},
      {"seed", int_field(&ExperimentConfig::seed)},
      {"deterministic", bool_field(&ExperimentConfig::deterministic)},
      {"checkpoint_every", int_field(&ExperimentConfig::checkpoint_every)},
      {"eval_stride", int_field(&ExperimentConfig::eval_stride)},
      {"threshold", real_field(&ExperimentConfig::threshold)},
      {"source_manifest", string_field(&ExperimentConfig::source_manifest)},
      {"target_manifest", string_field(&ExperimentConfig::target_manifest)},
      {"output_dir", string_field(&ExperimentConfig::output_dir)},
  };
  return table;
}

const Field& find_field(std::string_view key) {
  for (const auto& [name, field] : fields()) {
    if (name == key) return field;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::NA: return "NA";
    case Variant::IA: return "IA";
    case Variant::FA: return "FA";
    case Variant::FULL: return "FULL";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  if (text == "NA") return Variant::NA;
  if (text == "IA") return Variant::IA;
  if (text == "FA") return Variant::FA;
  if (text == "FULL") return Variant::FULL;
  throw ConfigError("invalid value for 'variant': expected NA|IA|FA|FULL, got '" +
                    std::string(text) + "'");
}

std::int64_t WidthScale::apply(std::int64_t channels) const {
  return std::max<std::int64_t>(8, channels * num / den);
}

std::string WidthScale::str() const {
  return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

WidthScale WidthScale::parse(std::string_view text) {
  const std::string_view key = "channel_width_scale";
  WidthScale s;
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) {
    s.num = parse_int<std::int64_t>(key, trim(text));
  } else {
    s.num = parse_int<std::int64_t>(key, trim(text.substr(0, slash)));
    s.den = parse_int<std::int64_t>(key, trim(text.substr(slash + 1)));
  }
  if (s.num <= 0 || s.den <= 0) {
    throw ConfigError("invalid value for 'channel_width_scale': must be a positive rational");
  }
  const auto g = std::gcd(s.num, s.den);
  s.num /= g;
  s.den /= g;
  return s;
}

Override parse_override(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("invalid override '" + std::string(text) + "': expected key=value");
  }
  return {std::string(trim(text.substr(0, eq))), std::string(trim(text.substr(eq + 1)))};
}

void apply_override(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  find_field(key).set(cfg, key, value);
}

void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("invalid value for '" + key + "': " + why);
  };
  if (!(c.alpha >= 0)) fail("alpha", "must be >= 0");
  if (!(c.lambda_img >= 0)) fail("lambda_img", "must be >= 0");
  if (!(c.lambda_feat >= 0)) fail("lambda_feat", "must be >= 0");
  if (!(c.dice_smooth > 0)) fail("dice_smooth", "must be > 0");
  if (!(c.base_lr > 0)) fail("base_lr", "must be > 0");
  if (c.total_epochs <= 0) fail("total_epochs", "must be > 0");
  if (c.constant_epochs <= 0) fail("constant_epochs", "must be > 0");
  if (c.constant_epochs > c.total_epochs) fail("constant_epochs", "must be <= total_epochs");
  if (c.batch_size <= 0) fail("batch_size", "must be > 0");
  if (c.crop_size <= 0) fail("crop_size", "must be > 0");
  if (c.crop_size % 8 != 0) fail("crop_size", std::to_string(c.crop_size) + " not divisible by 8");
  // The patch discriminators need 16 pixels per side: p is S/8, f is S/4.
  if (c.variant != Variant::NA && c.crop_size < 64) {
    fail("crop_size", "must be >= 64 when adaptation is enabled (the image-level map is crop_size / 8)");
  }
  if (c.crops_per_image <= 0) fail("crops_per_image", "must be > 0");
  if (c.num_classes != 2) fail("num_classes", "only binary segmentation (2) is supported");
  for (double b : {c.adam_beta1_g, c.adam_beta2_g, c.adam_beta1_d, c.adam_beta2_d}) {
    if (!(b >= 0 && b < 1)) fail("adam_beta*", "must lie in [0, 1)");
  }
  if (c.checkpoint_every <= 0) fail("checkpoint_every", "must be > 0");
  if (c.eval_stride < 0 || c.eval_stride > c.crop_size) {
    fail("eval_stride", "must lie in [0, crop_size]");
  }
  if (!(c.threshold > 0 && c.threshold < 1)) fail("threshold", "must lie in (0, 1)");
}

ExperimentConfig parse_config(std::string_view text, const std::vector<Override>& overrides) {
  ExperimentConfig cfg;
  std::map<std::string, int, std::less<>> seen;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = std::string(trim(line.substr(0, eq)));
    if (auto [it, inserted] = seen.emplace(key, line_no); !inserted) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    apply_override(cfg, key, trim(line.substr(eq + 1)));
  }
  for (const auto& [key, value] : overrides) apply_override(cfg, key, value);
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<Override>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config not found: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), overrides);
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : fields()) {
    out += name;
    out += " = ";
    out += field.get(cfg);
    out += '\n';
  }
  return out;
}

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write config: " + path.string());
  out << serialize_config(cfg);
}

std::uint32_t config_hash(const ExperimentConfig& cfg) {
  // Where outputs go does not change what is computed.
  ExperimentConfig c = cfg;
  c.output_dir.clear();
  const auto text = serialize_config(c);
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
}

double lr_at_epoch(const ExperimentConfig& cfg, int epoch) {
  if (epoch < 0 || epoch > cfg.total_epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [0, " +
                            std::to_string(cfg.total_epochs) + "]");
  }
  if (epoch < cfg.constant_epochs) return cfg.base_lr;
  if (cfg.total_epochs == cfg.constant_epochs) return 0.0;
  const double remaining = static_cast<double>(cfg.total_epochs - epoch) /
                           static_cast<double>(cfg.total_epochs - cfg.constant_epochs);
  return cfg.base_lr * remaining;
}

}  // namespace dapnet
