#include "m2d/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace m2d {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

namespace {

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error("archive " + path.string() + ": " + what);
}

}  // namespace

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header;
  header["format_version"] = kArchiveFormatVersion;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, value] : archive.tensors) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(value.size()) * sizeof(double);
    header["tensors"].push_back({{"name", name},
                                 {"dtype", "f64"},
                                 {"shape", {value.rows(), value.cols()}},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(tmp, "cannot open for writing");
    const std::uint64_t header_len = text.size();
    out.write(kArchiveMagic, sizeof(kArchiveMagic));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, value] : archive.tensors) {
      out.write(reinterpret_cast<const char*>(value.data()),
                static_cast<std::streamsize>(value.size() * sizeof(double)));
    }
    if (!out) fail(tmp, "write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(path, "rename failed: " + ec.message());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(path, "cannot open for reading");
  char magic[sizeof(kArchiveMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kArchiveMagic, sizeof(magic)) != 0) fail(path, "bad magic");
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len > (1ull << 32)) fail(path, "bad header length");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) fail(path, "truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(path, std::string("header is not valid JSON: ") + e.what());
  }
  if (header.value("format_version", 0) != kArchiveFormatVersion) {
    fail(path, "unsupported format version");
  }

  Archive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  const std::streamoff payload = static_cast<std::streamoff>(16 + header_len);
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name");
    if (entry.at("dtype") != "f64") fail(path, "tensor " + name + " has unsupported dtype");
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (rows < 0 || cols < 0 ||
        nbytes != static_cast<std::uint64_t>(rows * cols) * sizeof(double)) {
      fail(path, "tensor " + name + " has an inconsistent shape");
    }
    Matrix value(rows, cols);
    in.seekg(payload + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(nbytes));
    if (!in) fail(path, "truncated payload for tensor " + name);
    archive.tensors.emplace(name, std::move(value));
  }
  return archive;
}

}  // namespace m2d
