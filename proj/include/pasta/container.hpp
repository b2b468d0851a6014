#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pasta {

// Binary container shared by checkpoint and trigger files:
//
//   <version>\n
//   <u64 little-endian header length>
//   <JSON header>
//   <payload: little-endian IEEE-754 float32 values>
//
// The header describes how the payload is sliced.
struct Container {
  std::string version;
  nlohmann::json header;
  std::vector<float> payload;
};

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path, const std::string& expected_version);

}  // namespace pasta
