#include "rtdforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rtdforge/error.hpp"

namespace rtdforge {

namespace {

constexpr std::string_view kMagic = "rtdforge-ckpt v1\n";

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void tensor(const CheckpointTensor& t) {
    str(t.name);
    u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) {
      u64(d);
    }
    raw(t.data.data(), t.data.size() * sizeof(float));
  }
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  CheckpointTensor tensor() {
    CheckpointTensor t;
    t.name = str();
    const std::uint32_t rank = u32();
    if (rank > 8) {
      throw DataError("checkpoint: implausible rank for tensor " + t.name);
    }
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.shape.push_back(static_cast<std::size_t>(u64()));
      count *= t.shape.back();
    }
    need(count * sizeof(float));
    t.data.resize(count);
    raw(t.data.data(), count * sizeof(float));
    return t;
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::vector<CheckpointTensor> read_tensors(Reader& r) {
  const std::uint32_t n = r.u32();
  std::vector<CheckpointTensor> tensors;
  tensors.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    tensors.push_back(r.tensor());
  }
  return tensors;
}

void write_tensors(Writer& w, const std::vector<CheckpointTensor>& tensors) {
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const CheckpointTensor& t : tensors) {
    w.tensor(t);
  }
}

const CheckpointTensor* find_in(const std::vector<CheckpointTensor>& tensors, std::string_view name) {
  for (const CheckpointTensor& t : tensors) {
    if (t.name == name) {
      return &t;
    }
  }
  return nullptr;
}

}  // namespace

const CheckpointTensor* CheckpointSection::find(std::string_view tensor_name) const {
  return find_in(tensors, tensor_name);
}

const CheckpointTensor* Checkpoint::find(std::string_view name) const {
  if (const CheckpointTensor* t = find_in(tensors, name)) {
    return t;
  }
  for (const auto& [alias, canonical] : aliases) {
    if (alias == name) {
      return find_in(tensors, canonical);
    }
  }
  return nullptr;
}

const CheckpointSection* Checkpoint::section(std::string_view name) const {
  for (const CheckpointSection& s : sections) {
    if (s.name == name) {
      return &s;
    }
  }
  return nullptr;
}

CheckpointSection& Checkpoint::add_section(std::string name) {
  sections.push_back(CheckpointSection{std::move(name), {}, {}});
  return sections.back();
}

std::string serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.raw(kMagic.data(), kMagic.size());
  w.str(c.config_text);
  write_tensors(w, c.tensors);
  w.u32(static_cast<std::uint32_t>(c.aliases.size()));
  for (const auto& [alias, canonical] : c.aliases) {
    w.str(alias);
    w.str(canonical);
  }
  w.u32(static_cast<std::uint32_t>(c.sections.size()));
  for (const CheckpointSection& s : c.sections) {
    w.str(s.name);
    w.str(s.text);
    write_tensors(w, s.tensors);
  }
  return w.take();
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kMagic.size()) != kMagic) {
    throw DataError("not an rtdforge-ckpt v1 file (bad header)");
  }
  Reader r(bytes.substr(kMagic.size()));
  Checkpoint c;
  c.config_text = r.str();
  c.tensors = read_tensors(r);
  const std::uint32_t n_alias = r.u32();
  for (std::uint32_t i = 0; i < n_alias; ++i) {
    std::string alias = r.str();
    std::string canonical = r.str();
    c.aliases.emplace_back(std::move(alias), std::move(canonical));
  }
  const std::uint32_t n_sections = r.u32();
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    CheckpointSection s;
    s.name = r.str();
    s.text = r.str();
    s.tensors = read_tensors(r);
    c.sections.push_back(std::move(s));
  }
  if (!r.at_end()) {
    throw DataError("checkpoint has trailing bytes");
  }
  for (const auto& [alias, canonical] : c.aliases) {
    if (find_in(c.tensors, canonical) == nullptr) {
      throw DataError("checkpoint alias " + alias + " points at missing tensor " + canonical);
    }
  }
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw DataError("cannot write checkpoint " + tmp.string());
    }
    const std::string bytes = serialize_checkpoint(checkpoint);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw DataError("short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open checkpoint " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_checkpoint(buffer.str());
}

template <typename T>
CheckpointTensor to_checkpoint_tensor(std::string name, const Tensor<T>& tensor) {
  CheckpointTensor t;
  t.name = std::move(name);
  t.shape = tensor.shape();
  t.data.assign(tensor.data().begin(), tensor.data().end());
  return t;
}

template <typename T>
void assign_from(Tensor<T>& tensor, const CheckpointTensor& source) {
  if (source.shape != tensor.shape()) {
    throw DataError("checkpoint tensor " + source.name + " has shape " + shape_str(source.shape) +
                    ", expected " + shape_str(tensor.shape()));
  }
  std::copy(source.data.begin(), source.data.end(), tensor.data().begin());
}

template CheckpointTensor to_checkpoint_tensor<float>(std::string, const Tensor<float>&);
template CheckpointTensor to_checkpoint_tensor<double>(std::string, const Tensor<double>&);
template void assign_from<float>(Tensor<float>&, const CheckpointTensor&);
template void assign_from<double>(Tensor<double>&, const CheckpointTensor&);

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace rtdforge
