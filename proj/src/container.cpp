#include "container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mode/error.hpp"

namespace mode::container {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

double get_f64(const std::vector<std::uint8_t>& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  return std::bit_cast<double>(v);
}

std::vector<std::uint8_t> begin(const char (&magic)[5], const nlohmann::json& header) {
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(magic, magic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

Envelope open(const std::vector<std::uint8_t>& in, const char (&magic)[5], const std::string& what) {
  if (in.size() < kPreamble) throw FormatError(what + ": file shorter than the 12-byte preamble", in.size());
  if (std::memcmp(in.data(), magic, 4) != 0) {
    throw FormatError(what + ": bad magic, expected " + std::string(magic, 4), 0);
  }
  if (const auto v = get_u32(in, 4); v != kVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(v), 4);
  }
  const std::size_t header_len = get_u32(in, 8);
  if (kPreamble + header_len > in.size()) throw FormatError(what + ": header runs past end of file", 8);
  Envelope env;
  env.payload = kPreamble + header_len;
  try {
    env.header = nlohmann::json::parse(in.begin() + kPreamble, in.begin() + static_cast<std::ptrdiff_t>(env.payload));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(what + ": malformed header JSON: " + e.what(), kPreamble + (e.byte ? e.byte - 1 : 0));
  }
  return env;
}

void check_size(const std::vector<std::uint8_t>& in, std::size_t expected_end, const std::string& what) {
  if (in.size() < expected_end) {
    throw FormatError(what + ": payload truncated, expected " + std::to_string(expected_end) + " bytes", in.size());
  }
  if (in.size() > expected_end) throw FormatError(what + ": trailing bytes after payload", expected_end);
}

void write_file(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ArgumentError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ArgumentError("write to '" + path + "' failed");
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArgumentError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace mode::container
