#include "pasta/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

#include "pasta/common.hpp"

namespace pasta {

static_assert(std::endian::native == std::endian::little,
              "container payloads are written in host order; big-endian hosts need byte swaps");

void write_container(const std::filesystem::path& path, const Container& container) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestionError(fmt::format("cannot open {} for writing", path.string()));
  nlohmann::json header = container.header;
  header["version"] = container.version;
  header["payload_count"] = container.payload.size();
  const std::string text = header.dump();
  const std::uint64_t length = text.size();
  out << container.version << '\n';
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(container.payload.data()),
            static_cast<std::streamsize>(container.payload.size() * sizeof(float)));
  if (!out) throw IngestionError(fmt::format("write failed for {}", path.string()));
}

Container read_container(const std::filesystem::path& path, const std::string& expected_version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(fmt::format("cannot open {}", path.string()));
  Container box;
  std::getline(in, box.version);
  if (box.version != expected_version) {
    throw IngestionError(fmt::format("{}: expected version '{}', found '{}'", path.string(),
                                     expected_version, box.version));
  }
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (!in || length > (1u << 26)) {
    throw IngestionError(fmt::format("{}: corrupt header length", path.string()));
  }
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw IngestionError(fmt::format("{}: truncated header", path.string()));
  try {
    box.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw IngestionError(fmt::format("{}: header is not valid JSON ({})", path.string(), ex.what()));
  }
  const std::size_t count = box.header.value("payload_count", std::size_t{0});
  box.payload.resize(count);
  in.read(reinterpret_cast<char*>(box.payload.data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) throw IngestionError(fmt::format("{}: truncated payload", path.string()));
  return box;
}

}  // namespace pasta
