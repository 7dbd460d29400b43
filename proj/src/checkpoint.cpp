#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "dapnet/errors.hpp"
#include "dapnet/training.hpp"

namespace dapnet {
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'A', 'P', 'N'};

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void put_blob(const std::string& name, const torch::Tensor& t) {
    put_string(name);
    auto f = t.detach().to(torch::kFloat32).contiguous();
    put<std::uint32_t>(static_cast<std::uint32_t>(f.dim()));
    for (auto d : f.sizes()) put<std::int64_t>(d);
    put_bytes(f.data_ptr(), f.nbytes());
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    return std::string(take(n), n);
  }
  torch::Tensor get_blob_data() {
    const auto rank = get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("corrupt checkpoint: implausible tensor rank");
    std::vector<std::int64_t> dims(rank);
    std::int64_t numel = 1;
    for (auto& d : dims) {
      d = get<std::int64_t>();
      if (d < 0) throw CheckpointError("corrupt checkpoint: negative dimension");
      numel *= d;
    }
    auto t = torch::empty(dims, torch::kFloat32);
    const auto bytes = static_cast<std::size_t>(numel) * sizeof(float);
    std::memcpy(t.data_ptr(), take(bytes), bytes);
    return t;
  }

 private:
  const char* take(std::size_t n) {
    if (n > end_ - pos_) throw CheckpointError("corrupt checkpoint: truncated");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

struct NamedNet {
  std::string prefix;
  torch::nn::Module* module;
  torch::optim::Adam* optimizer;
};

std::vector<NamedNet> networks(const TrainState& s) {
  return {{"G", s.models.generator.ptr().get(), s.opt_g.get()},
          {"Dimg", s.models.image_disc.ptr().get(), s.opt_img.get()},
          {"Dfeat", s.models.feature_disc.ptr().get(), s.opt_feat.get()}};
}

torch::optim::AdamParamState* adam_state(torch::optim::Adam& opt, const torch::Tensor& p) {
  auto& states = opt.state();
  auto it = states.find(p.unsafeGetTensorImpl());
  if (it == states.end()) return nullptr;
  return static_cast<torch::optim::AdamParamState*>(it->second.get());
}

}  // namespace

void save_checkpoint(const TrainState& state, const ExperimentConfig& cfg, const fs::path& path,
                     const nlohmann::json& metrics) {
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(state.config_hash);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(state.epoch));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(state.global_step));
  std::ostringstream rng;
  rng << state.rng;
  w.put_string(rng.str());
  w.put_string(serialize_config(cfg));
  w.put_string(metrics.dump());

  std::vector<std::pair<std::string, torch::Tensor>> blobs;
  for (const auto& net : networks(state)) {
    for (const auto& item : net.module->named_parameters()) {
      blobs.emplace_back(net.prefix + ".param." + item.key(), item.value());
      if (const auto* st = adam_state(*net.optimizer, item.value())) {
        const auto key = net.prefix + ".adam." + item.key();
        blobs.emplace_back(key + ".step", torch::full({1}, static_cast<float>(st->step())));
        blobs.emplace_back(key + ".exp_avg", st->exp_avg());
        blobs.emplace_back(key + ".exp_avg_sq", st->exp_avg_sq());
      }
    }
    for (const auto& item : net.module->named_buffers()) {
      blobs.emplace_back(net.prefix + ".buffer." + item.key(), item.value());
    }
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(blobs.size()));
  for (const auto& [name, t] : blobs) w.put_blob(name, t);

  const auto& bytes = w.bytes();
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string() + " (disk full?)");
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint not found: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint (bad magic): " + path.string());
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (this reader expects " +
                          std::to_string(kCheckpointVersion) + "): " + path.string());
  }
  const std::size_t body = bytes.size() - sizeof(std::uint32_t);
  std::uint32_t stored_crc = 0;
  std::memcpy(&stored_crc, bytes.data() + body, sizeof(stored_crc));
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body)));
  if (crc != stored_crc) throw CheckpointError("checkpoint checksum mismatch (corrupt or truncated): " + path.string());

  ByteReader r(bytes, body);
  r.get<std::uint32_t>();  // magic
  r.get<std::uint32_t>();  // version
  const auto hash = r.get<std::uint32_t>();
  const auto epoch = r.get<std::uint32_t>();
  const auto step = r.get<std::uint64_t>();
  const auto rng_text = r.get_string();
  const auto cfg_text = r.get_string();
  const auto metrics_text = r.get_string();

  LoadedCheckpoint out;
  out.cfg = parse_config(cfg_text);
  out.metrics = nlohmann::json::parse(metrics_text);
  out.state = make_train_state(out.cfg);
  TrainState& s = out.state;
  s.config_hash = hash;
  s.epoch = static_cast<int>(epoch);
  s.global_step = static_cast<std::int64_t>(step);
  std::istringstream rng(rng_text);
  rng >> s.rng;
  if (!rng) throw CheckpointError("corrupt checkpoint: bad RNG state");

  std::map<std::string, torch::Tensor> blobs;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string();
    blobs.emplace(std::move(name), r.get_blob_data());
  }
  auto take = [&](const std::string& name, const torch::Tensor& like) {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw CheckpointError("checkpoint is missing '" + name + "'");
    if (it->second.sizes() != like.sizes()) throw CheckpointError("shape mismatch for '" + name + "'");
    return it->second.to(like.scalar_type());
  };

  torch::NoGradGuard no_grad;
  for (const auto& net : networks(s)) {
    for (auto& item : net.module->named_parameters()) {
      item.value().copy_(take(net.prefix + ".param." + item.key(), item.value()));
      const auto key = net.prefix + ".adam." + item.key();
      if (blobs.count(key + ".step")) {
        auto st = std::make_unique<torch::optim::AdamParamState>();
        st->step(static_cast<std::int64_t>(blobs.at(key + ".step").item<float>()));
        st->exp_avg(take(key + ".exp_avg", item.value()).clone());
        st->exp_avg_sq(take(key + ".exp_avg_sq", item.value()).clone());
        net.optimizer->state()[item.value().unsafeGetTensorImpl()] = std::move(st);
      }
    }
    for (auto& item : net.module->named_buffers()) {
      item.value().copy_(take(net.prefix + ".buffer." + item.key(), item.value()));
    }
  }
  return out;
}

}  // namespace dapnet
