// SPDX-License-Identifier: Apache-2.0
#include "bevcon/serialize.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "bevcon/rng.hpp"

namespace bevcon {

std::string format_g17(double v) {
  if (!std::isfinite(v)) throw std::runtime_error("non-finite value in serialization");
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

void dump_rec(const nlohmann::json& j, int indent, int depth, std::string& out) {
  const bool compact = indent < 0;  // single line, jsonl style
  const std::string pad(compact ? 0 : static_cast<size_t>(indent) * (depth + 1), ' ');
  const std::string pad_close(compact ? 0 : static_cast<size_t>(indent) * depth, ' ');
  const char* open_sep = compact ? "" : "\n";
  const char* item_sep = compact ? "," : ",\n";
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{";
      out += open_sep;
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += item_sep;
        first = false;
        out += pad;
        out += nlohmann::json(it.key()).dump();
        out += ": ";
        dump_rec(it.value(), indent, depth + 1, out);
      }
      out += open_sep + pad_close + "}";
      return;
    }
    case nlohmann::json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out += "[";
      out += open_sep;
      for (size_t i = 0; i < j.size(); ++i) {
        if (i) out += item_sep;
        out += pad;
        dump_rec(j[i], indent, depth + 1, out);
      }
      out += open_sep + pad_close + "]";
      return;
    }
    case nlohmann::json::value_t::number_float:
      out += format_g17(j.get<double>());
      return;
    default:
      out += j.dump();
      return;
  }
}

}  // namespace

std::string dump_json_17g(const nlohmann::json& j, int indent) {
  std::string out;
  dump_rec(j, indent, 0, out);
  out += "\n";
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + tmp);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::string hash_hex(const std::string& content) {
  std::uint64_t h = fnv1a64(content.data(), content.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace bevcon
