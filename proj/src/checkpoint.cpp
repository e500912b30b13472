#include "trfeddis/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace trfeddis::checkpoint {

namespace {

constexpr const char* kMagic = "trfeddis-checkpoint";

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

}  // namespace

void write(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ostringstream manifest;
  manifest << kMagic << ' ' << kFormatVersion << '\n';
  manifest << "client " << ckpt.client_id << '\n';
  manifest << "seed " << ckpt.seed << '\n';
  manifest << "round " << ckpt.round << '\n';
  manifest << "experiment " << config::to_json(ckpt.experiment).dump() << '\n';
  manifest << "model " << config::model_config_to_json(ckpt.model.config).dump() << '\n';
  std::size_t offset = 0;
  for (const auto& e : ckpt.model.params.entries()) {
    manifest << "param " << e.name << ' ' << model::to_string(e.tag) << ' ' << (e.trainable ? 1 : 0) << ' '
             << e.value.rank();
    for (auto d : e.value.shape()) manifest << ' ' << d;
    manifest << ' ' << offset << ' ' << e.value.size() << '\n';
    offset += e.value.size();
  }
  manifest << "payload " << offset * 4 << '\n';

  std::vector<char> payload(offset * 4);
  std::size_t at = 0;
  for (const auto& e : ckpt.model.params.entries()) {
    for (float v : e.value.data()) {
      const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(v));
      std::memcpy(payload.data() + at, &bits, 4);
      at += 4;
    }
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("checkpoint: cannot write " + path.string());
  const std::string text = manifest.str();
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw CheckpointError("checkpoint: write failed for " + path.string());
}

Checkpoint read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in " + path.string();

  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw Truncated("checkpoint: manifest ends early" + where);
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  auto expect_field = [&](const std::string& key) {
    std::string line = next_line();
    if (line.rfind(key + ' ', 0) != 0) throw Inconsistent("checkpoint: expected '" + key + "' line" + where);
    return line.substr(key.size() + 1);
  };

  Checkpoint ck;
  {
    std::istringstream head(next_line());
    std::string magic;
    int version = -1;
    head >> magic >> version;
    if (magic != kMagic) throw CheckpointError("checkpoint: not a checkpoint file" + where);
    if (version != kFormatVersion) {
      throw VersionMismatch("checkpoint: format version " + std::to_string(version) + ", this build reads " +
                            std::to_string(kFormatVersion) + where);
    }
  }
  try {
    ck.client_id = std::stoull(expect_field("client"));
    ck.seed = std::stoull(expect_field("seed"));
    ck.round = std::stoull(expect_field("round"));
    ck.experiment = config::from_json(nlohmann::json::parse(expect_field("experiment")));
    ck.model.config = config::model_config_from_json(nlohmann::json::parse(expect_field("model")));
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw Inconsistent(std::string("checkpoint: bad header field: ") + e.what() + where);
  }

  struct Slot {
    std::string name;
    model::PartitionTag tag;
    bool trainable;
    nd::Shape shape;
    std::size_t offset, count;
  };
  std::vector<Slot> slots;
  std::size_t payload_bytes = 0;
  for (;;) {
    std::string line = next_line();
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "payload") {
      if (!(ls >> payload_bytes)) throw Inconsistent("checkpoint: bad payload line" + where);
      break;
    }
    if (kind != "param") throw Inconsistent("checkpoint: unexpected manifest line '" + kind + "'" + where);
    Slot s;
    std::string tag;
    int trainable = 0;
    std::size_t rank = 0;
    ls >> s.name >> tag >> trainable >> rank;
    s.shape.resize(rank);
    for (auto& d : s.shape) ls >> d;
    ls >> s.offset >> s.count;
    if (!ls) throw Inconsistent("checkpoint: malformed param line for '" + s.name + "'" + where);
    try {
      s.tag = model::parse_tag(tag);
    } catch (const std::invalid_argument& e) {
      throw Inconsistent(std::string("checkpoint: ") + e.what() + where);
    }
    s.trainable = trainable != 0;
    slots.push_back(std::move(s));
  }

  const std::size_t available = bytes.size() - pos;
  if (available < payload_bytes) {
    throw Truncated("checkpoint: payload has " + std::to_string(available) + " of " +
                    std::to_string(payload_bytes) + " bytes" + where);
  }
  if (available > payload_bytes) throw Inconsistent("checkpoint: trailing bytes after payload" + where);
  if (payload_bytes % 4 != 0) throw Inconsistent("checkpoint: payload is not a whole number of floats" + where);

  std::size_t expected_offset = 0;
  for (const auto& s : slots) {
    if (nd::numel(s.shape) != s.count || s.offset != expected_offset) {
      throw Inconsistent("checkpoint: parameter '" + s.name + "' does not tile the payload" + where);
    }
    expected_offset += s.count;
    nd::Tensor t(s.shape);
    for (std::size_t i = 0; i < s.count; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + pos + 4 * (s.offset + i), 4);
      t[i] = std::bit_cast<float>(to_le(bits));
    }
    try {
      ck.model.params.add(s.name, s.tag, s.trainable, std::move(t));
    } catch (const std::invalid_argument& e) {
      throw Inconsistent(std::string("checkpoint: ") + e.what() + where);
    }
  }
  if (expected_offset * 4 != payload_bytes) {
    throw Inconsistent("checkpoint: manifest covers " + std::to_string(expected_offset * 4) + " of " +
                       std::to_string(payload_bytes) + " payload bytes" + where);
  }

  // The parameter layout must be exactly what the recorded architecture builds.
  specfun::RngStream scratch(0, 0);
  const auto layout = model::init_model(ck.model.config, scratch);
  const auto& want = layout.params.entries();
  const auto& got = ck.model.params.entries();
  if (want.size() != got.size()) {
    throw Inconsistent("checkpoint: " + std::to_string(got.size()) + " parameters, architecture has " +
                       std::to_string(want.size()) + where);
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i].name != got[i].name || want[i].tag != got[i].tag || want[i].trainable != got[i].trainable ||
        want[i].value.shape() != got[i].value.shape()) {
      throw Inconsistent("checkpoint: parameter '" + got[i].name + "' disagrees with the architecture" + where);
    }
  }
  return ck;
}

}  // namespace trfeddis::checkpoint
