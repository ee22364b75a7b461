// SPDX-License-Identifier: Apache-2.0
#include "diffuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace diffuse {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[] = "DIFFUSE-CKPT";
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void tensor(const std::string& name, const MatrixT<float>& m) {
    le(static_cast<std::uint16_t>(name.size()));
    bytes(name.data(), name.size());
    le(static_cast<std::uint32_t>(m.rows()));
    le(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) f32(m.data()[i]);
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string where) : buf_(std::move(data)), where_(std::move(where)) {}
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError("truncated checkpoint " + where_);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  void tensor_into(const std::string& expected, MatrixT<float>& m) {
    const auto len = le<std::uint16_t>();
    const std::string name = bytes(len);
    if (name != expected) throw FormatError("checkpoint " + where_ + ": expected tensor '" + expected + "', found '" + name + "'");
    const auto rows = le<std::uint32_t>();
    const auto cols = le<std::uint32_t>();
    if (rows != m.rows() || cols != m.cols())
      throw FormatError("checkpoint " + where_ + ": tensor '" + name + "' has shape " + std::to_string(rows) + "x" +
                        std::to_string(cols) + ", expected " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = f32();
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::string buf_;
  std::string where_;
  std::size_t pos_ = 0;
};

void write_tensors(Writer& w, const PredictorParams<float>& p, const std::string& prefix) {
  p.for_each([&](const std::string& name, const MatrixT<float>& m, bool) { w.tensor(prefix + name, m); });
}

void read_tensors(Reader& r, PredictorParams<float>& p, const std::string& prefix) {
  p.for_each([&](const std::string& name, MatrixT<float>& m, bool) { r.tensor_into(prefix + name, m); });
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  std::map<std::string, std::string> header = ckpt.params.config.to_map();
  {
    std::istringstream sched(ckpt.schedule.to_text());
    std::string line;
    while (std::getline(sched, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos) header[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos || v.find('\n') != std::string::npos)
      throw std::invalid_argument("checkpoint metadata keys/values must be single-line, keys without '='");
    header["meta." + k] = v;
  }
  std::string text;
  for (const auto& [k, v] : header) text += k + "=" + v + "\n";

  Writer w;
  w.bytes(kMagic, sizeof(kMagic) - 1);
  w.le(kVersion);
  w.le(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  std::uint32_t count = 0;
  ckpt.params.for_each([&](const std::string&, const MatrixT<float>&, bool) { ++count; });
  w.le(count);
  write_tensors(w, ckpt.params, "");
  w.le(static_cast<std::uint8_t>(ckpt.optimizer ? 1 : 0));
  if (ckpt.optimizer) {
    w.le(ckpt.optimizer->step);
    write_tensors(w, ckpt.optimizer->m, "adam.m.");
    write_tensors(w, ckpt.optimizer->v, "adam.v.");
  }

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw IoError("write failed for checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(data), path.string());
  if (r.bytes(sizeof(kMagic) - 1) != std::string(kMagic)) throw FormatError("not a checkpoint: " + path.string());
  const auto version = r.le<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::string text = r.bytes(r.le<std::uint32_t>());

  std::map<std::string, std::string> header;
  std::string schedule_text;
  Checkpoint ckpt;
  {
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      header[key] = value;
      if (key.rfind("schedule.", 0) == 0) schedule_text += line + "\n";
      if (key.rfind("meta.", 0) == 0) ckpt.meta[key.substr(5)] = value;
    }
  }
  ckpt.schedule = NoiseSchedule::from_text(schedule_text);
  const PredictorConfig config = PredictorConfig::from_map(header);
  Rng shape_only(0);
  ckpt.params = init_params<float>(config, shape_only);
  const auto count = r.le<std::uint32_t>();
  std::uint32_t expected = 0;
  ckpt.params.for_each([&](const std::string&, const MatrixT<float>&, bool) { ++expected; });
  if (count != expected)
    throw FormatError("checkpoint " + path.string() + " holds " + std::to_string(count) + " tensors, model needs " +
                      std::to_string(expected));
  read_tensors(r, ckpt.params, "");
  if (r.le<std::uint8_t>()) {
    AdamState st{ckpt.params.zeros_like(), ckpt.params.zeros_like(), 0};
    st.step = r.le<std::uint64_t>();
    read_tensors(r, st.m, "adam.m.");
    read_tensors(r, st.v, "adam.v.");
    ckpt.optimizer = std::move(st);
  }
  if (!r.done()) throw FormatError("trailing bytes in checkpoint " + path.string());
  return ckpt;
}

}  // namespace diffuse
