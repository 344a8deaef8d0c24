#pragma once

// Shared envelope for dataset and checkpoint files: 4-byte magic, u32 LE
// version, u32 LE header length, JSON header, little-endian f64 payload.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace mode::container {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kPreamble = 12;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);
std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t at);
double get_f64(const std::vector<std::uint8_t>& in, std::size_t at);

// Preamble plus header; the caller appends the payload.
std::vector<std::uint8_t> begin(const char (&magic)[5], const nlohmann::json& header);

struct Envelope {
  nlohmann::json header;
  std::size_t payload = 0;  // byte offset of the first payload value
};

// Validates preamble and header. `what` prefixes error messages.
Envelope open(const std::vector<std::uint8_t>& in, const char (&magic)[5], const std::string& what);

// Exact-size check of the payload against `expected_end`.
void check_size(const std::vector<std::uint8_t>& in, std::size_t expected_end, const std::string& what);

void write_file(const std::vector<std::uint8_t>& bytes, const std::string& path);
std::vector<std::uint8_t> read_file(const std::string& path);

}  // namespace mode::container
