#include "fvlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "fvlm/error.hpp"

namespace fvlm {

namespace {

constexpr char kMagic[4] = {'F', 'V', 'L', 'M'};

// --- byte writers -----------------------------------------------------------

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    out_.append(static_cast<const char*>(data), n);
  }
  template <class T>
  void uint(T value) {
    for (std::size_t k = 0; k < sizeof(T); ++k) {
      out_.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * k)) & 0xff));
    }
  }
  void str(const std::string& s) {
    uint<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  template <class T>
  T uint(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t k = 0; k < sizeof(T); ++k) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + k])) << (8 * k);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string str(const char* what, std::size_t limit) {
    const auto n = uint<std::uint32_t>(what);
    if (n > limit) throw CheckpointError(std::string("checkpoint corrupt: oversized ") + what);
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  const std::string& data_;
  std::size_t pos_ = 0;
};

// --- config text ------------------------------------------------------------

void put_config(std::ostringstream& out, const std::string& prefix, const LmConfig& c,
                std::size_t vocab_size) {
  out << prefix << "vocab_size=" << vocab_size << '\n'
      << prefix << "embed_dim=" << c.embed_dim << '\n'
      << prefix << "hidden_dim=" << c.hidden_dim << '\n'
      << prefix << "num_layers=" << c.num_layers << '\n'
      << prefix << "mt_shared_layers=" << c.mt_shared_layers << '\n'
      << prefix << "mt_branch_layers=" << c.mt_branch_layers << '\n'
      << prefix << "lambda_mt=" << std::bit_cast<std::uint64_t>(c.lambda_mt) << '\n'
      << prefix << "fv_dim=" << c.fv_dim << '\n';
}

using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_text(const std::string& text) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("checkpoint corrupt: bad config line '" + line + "'");
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

std::uint64_t get_u64(const ConfigMap& map, const std::string& key) {
  auto it = map.find(key);
  if (it == map.end()) throw CheckpointError("checkpoint config lacks '" + key + "'");
  try {
    std::size_t used = 0;
    const auto v = std::stoull(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint config value for '" + key + "' is not a number");
  }
}

std::pair<LmConfig, std::size_t> get_config(const ConfigMap& map, const std::string& prefix) {
  LmConfig c;
  const std::size_t vocab = get_u64(map, prefix + "vocab_size");
  c.embed_dim = get_u64(map, prefix + "embed_dim");
  c.hidden_dim = get_u64(map, prefix + "hidden_dim");
  c.num_layers = get_u64(map, prefix + "num_layers");
  c.mt_shared_layers = get_u64(map, prefix + "mt_shared_layers");
  c.mt_branch_layers = get_u64(map, prefix + "mt_branch_layers");
  c.lambda_mt = std::bit_cast<double>(get_u64(map, prefix + "lambda_mt"));
  c.fv_dim = get_u64(map, prefix + "fv_dim");
  // Guard against absurd shapes from a damaged header before allocating.
  constexpr std::size_t kLimit = 1u << 24;
  for (std::size_t v : {vocab, c.embed_dim, c.hidden_dim, c.num_layers, c.fv_dim}) {
    if (v == 0 || v > kLimit) throw CheckpointError("checkpoint config holds an invalid size");
  }
  return {c, vocab};
}

// Mutable views over every block that goes on disk, in file order.
ParamSet all_blocks(AnyModel& model) {
  if (auto* e = std::get_if<EnhancedLm>(&model)) {
    ParamSet out = e->params();
    for (auto& p : e->predictor.params()) {
      p.name = "predictor." + p.name;
      out.push_back(std::move(p));
    }
    return out;
  }
  return std::visit([](auto& m) { return m.params(); }, model);
}

std::size_t vocab_of(const AnyModel& model) {
  return std::visit([](const auto& m) { return m.vocab_size(); }, model);
}

const LmConfig& config_of(const AnyModel& model) {
  return std::visit([](const auto& m) -> const LmConfig& { return m.config; }, model);
}

}  // namespace

ArchKind kind_of(const AnyModel& model) {
  if (const auto* b = std::get_if<BaselineLm>(&model)) return b->kind;
  if (std::holds_alternative<FvPredictor>(model)) return ArchKind::fv_predictor;
  if (std::holds_alternative<EnhancedLm>(model)) return ArchKind::enhanced;
  return ArchKind::multitask;
}

std::string serialize_checkpoint(const AnyModel& model, std::uint64_t vocab_hash, FloatWidth width) {
  AnyModel& mutable_model = const_cast<AnyModel&>(model);  // views are only read here
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(kind_of(model)));

  std::ostringstream cfg;
  put_config(cfg, "", config_of(model), vocab_of(model));
  if (const auto* e = std::get_if<EnhancedLm>(&model)) {
    put_config(cfg, "predictor.", e->predictor.config, e->predictor.vocab_size());
  }
  w.str(cfg.str());
  w.uint<std::uint64_t>(vocab_hash);

  const ParamSet blocks = all_blocks(mutable_model);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    w.str(b.name);
    w.uint<std::uint64_t>(b.rows);
    w.uint<std::uint64_t>(b.cols);
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(width));
    for (double v : b.values) {
      if (width == FloatWidth::f64) {
        w.uint<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
      } else {
        w.uint<std::uint32_t>(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  r.need(sizeof(kMagic), "magic");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  for (std::size_t k = 0; k < sizeof(kMagic); ++k) r.uint<std::uint8_t>("magic");
  const auto version = r.uint<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version mismatch: expected " +
                          std::to_string(kCheckpointVersion) + ", found " + std::to_string(version));
  }
  const auto tag = r.uint<std::uint32_t>("architecture tag");
  if (tag > static_cast<std::uint32_t>(ArchKind::multitask)) {
    throw CheckpointError("checkpoint holds unknown architecture tag " + std::to_string(tag));
  }
  const auto kind = static_cast<ArchKind>(tag);
  const ConfigMap cfg = parse_config_text(r.str("config block", 1u << 20));

  Checkpoint out;
  const auto [config, vocab] = get_config(cfg, "");
  try {
    switch (kind) {
      case ArchKind::baseline:
      case ArchKind::reversed: out.model = BaselineLm(vocab, config, kind); break;
      case ArchKind::fv_predictor: out.model = FvPredictor(vocab, config); break;
      case ArchKind::enhanced: {
        const auto [pconfig, pvocab] = get_config(cfg, "predictor.");
        out.model = EnhancedLm(FvPredictor(pvocab, pconfig), config);
        break;
      }
      case ArchKind::multitask: out.model = MultiTaskLm(vocab, config); break;
    }
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  out.vocab_hash = r.uint<std::uint64_t>("vocabulary hash");

  ParamSet blocks = all_blocks(out.model);
  std::map<std::string, ParamView*> by_name;
  for (auto& b : blocks) by_name[b.name] = &b;

  const auto count = r.uint<std::uint32_t>("block count");
  if (count != blocks.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " parameter blocks, " +
                          std::string(to_string(kind)) + " model expects " +
                          std::to_string(blocks.size()));
  }
  bool first = true;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = r.str("block name", 4096);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint has unexpected block '" + name + "'");
    ParamView& dst = *it->second;
    const auto rows = r.uint<std::uint64_t>("block rows");
    const auto cols = r.uint<std::uint64_t>("block cols");
    if (rows != dst.rows || cols != dst.cols) {
      throw CheckpointError("block '" + name + "' is " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", model expects " + std::to_string(dst.rows) +
                            "x" + std::to_string(dst.cols));
    }
    const auto w = r.uint<std::uint8_t>("float width");
    if (w != 4 && w != 8) throw CheckpointError("block '" + name + "' has float width " + std::to_string(w));
    if (first) {
      out.width = static_cast<FloatWidth>(w);
      first = false;
    }
    r.need(static_cast<std::size_t>(rows * cols) * w, "block payload");
    for (double& v : dst.values) {
      v = w == 8 ? std::bit_cast<double>(r.uint<std::uint64_t>("payload"))
                 : static_cast<double>(std::bit_cast<float>(r.uint<std::uint32_t>("payload")));
    }
    by_name.erase(it);
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  return out;
}

void save_checkpoint(const AnyModel& model, std::uint64_t vocab_hash,
                     const std::filesystem::path& path, FloatWidth width) {
  write_file_atomic(path, serialize_checkpoint(model, vocab_hash, width));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, ArchKind expected) {
  Checkpoint c = load_checkpoint(path);
  const ArchKind found = kind_of(c.model);
  if (found != expected) {
    throw CheckpointError(path.string() + ": expected a " + std::string(to_string(expected)) +
                          " checkpoint, found " + std::string(to_string(found)));
  }
  return c;
}

std::optional<std::string> vocab_mismatch(const Checkpoint& checkpoint, const Vocabulary& vocab) {
  if (checkpoint.vocab_hash == vocab.hash()) return std::nullopt;
  std::ostringstream msg;
  msg << "checkpoint vocabulary hash " << std::hex << checkpoint.vocab_hash
      << " differs from the supplied vocabulary (" << vocab.hash() << ")";
  return msg.str();
}

LanguageModel to_language_model(AnyModel model) {
  if (auto* b = std::get_if<BaselineLm>(&model)) return std::move(*b);
  if (auto* e = std::get_if<EnhancedLm>(&model)) return std::move(*e);
  if (auto* m = std::get_if<MultiTaskLm>(&model)) return std::move(*m);
  throw CheckpointError("an FV predictor checkpoint is not a language model");
}

}  // namespace fvlm
