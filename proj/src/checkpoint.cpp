#include "grail/checkpoint.hpp"

#include "grail/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace grail {

namespace {

constexpr char kMagic[8] = {'G', 'R', 'A', 'I', 'L', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written in host order; big-endian hosts are unsupported");

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw ParseError(path.string() + ": truncated checkpoint header");
  }
  return v;
}

}  // namespace

void TensorArchive::put(const std::string& name, Mat value) {
  tensors.emplace_back(name, std::move(value));
}

void TensorArchive::put(const std::string& prefix, const nn::ParamSet& params) {
  for (const auto& [name, v] : params.items()) put(prefix + name, v.value());
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& [n, _] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const Mat& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw ParseError("checkpoint has no tensor '" + name + "'");
}

void TensorArchive::restore(const std::string& prefix, nn::ParamSet& params) const {
  std::vector<Mat> values;
  values.reserve(params.size());
  for (const auto& [name, _] : params.items()) values.push_back(get(prefix + name));
  params.load_values(values);
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json header;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, m] : archive.tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, m] : archive.tensors) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open checkpoint");
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw ParseError(path.string() + ": not a checkpoint (bad magic at offset 0)");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw ParseError(path.string() + ": unsupported checkpoint version " +
                     std::to_string(version));
  }
  const auto len = read_pod<std::uint64_t>(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw ParseError(path.string() + ": truncated checkpoint header at offset 20");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": checkpoint header: " + e.what());
  }

  TensorArchive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    Mat m(rows, cols);
    if (!in.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(m.size() * sizeof(double)))) {
      throw ParseError(path.string() + ": truncated payload for tensor '" +
                       t.at("name").get<std::string>() + "'");
    }
    archive.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  return archive;
}

void expect_kind(const TensorArchive& archive, const std::string& kind,
                 const std::filesystem::path& path) {
  const std::string got = archive.meta.value("kind", std::string{});
  if (got != kind) {
    throw ParseError(path.string() + ": expected a '" + kind + "' checkpoint, found '" + got +
                     "'");
  }
}

}  // namespace grail
