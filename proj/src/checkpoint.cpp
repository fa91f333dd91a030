#include "cdiffdet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

namespace {

constexpr char kMagic[4] = {'C', 'D', 'F', 'D'};
constexpr std::uint8_t kDtypeF32 = 0;
const std::string kMomentM = "adam_m/";
const std::string kMomentV = "adam_v/";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_record(std::string& out, const std::string& name, const Shape& shape, const std::vector<double>& values) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  out.push_back(static_cast<char>(kDtypeF32));
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}
  bool done() const { return pos_ == b_.size(); }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string cfg = ckpt.config.dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  for (const auto& [name, t] : ckpt.params.items()) put_record(out, name, t.shape(), t.values());
  if (ckpt.optimizer) {
    for (const auto& [name, t] : ckpt.params.items()) {
      const auto& m = ckpt.optimizer->m.count(name) ? ckpt.optimizer->m.at(name) : std::vector<double>(t.numel());
      const auto& v = ckpt.optimizer->v.count(name) ? ckpt.optimizer->v.at(name) : std::vector<double>(t.numel());
      put_record(out, kMomentM + name, t.shape(), m);
      put_record(out, kMomentV + name, t.shape(), v);
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(4) != std::string(kMagic, 4)) throw ParseError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  try {
    ck.config = nlohmann::json::parse(r.bytes(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint config blob: ") + e.what());
  }
  OptimizerState opt;
  bool has_opt = false;
  while (!r.done()) {
    const std::string name = r.bytes(r.u32());
    const std::uint8_t dtype = r.u8();
    if (dtype != kDtypeF32) throw ParseError("record '" + name + "': unknown dtype " + std::to_string(dtype));
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<double>(std::bit_cast<float>(r.u32()));
    if (name.rfind(kMomentM, 0) == 0) {
      opt.m[name.substr(kMomentM.size())] = std::move(values);
      has_opt = true;
    } else if (name.rfind(kMomentV, 0) == 0) {
      opt.v[name.substr(kMomentV.size())] = std::move(values);
      has_opt = true;
    } else {
      ck.params.add(name, Tensor(shape, std::move(values)));
    }
  }
  if (has_opt) {
    if (ck.config.contains("train_state") && ck.config["train_state"].contains("step")) {
      opt.step = ck.config["train_state"]["step"].get<std::size_t>();
    }
    ck.optimizer = std::move(opt);
  }
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace cdiffdet
