#pragma once

// File helpers: atomic writes, tensor files, JSON configs with dotted-path
// overrides.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qens/error.hpp"
#include "qens/tensor.hpp"

namespace qens::io {

namespace fs = std::filesystem;

inline void ensure_dir(const fs::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

/// Writes via a sibling temporary file and renames it into place, so
/// readers never observe a partial file.
template <typename Fn>
void atomic_write(const fs::path& path, Fn&& writer) {
  ensure_dir(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  std::error_code ec;
  try {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    writer(os);
    os.flush();
    if (!os) throw IoError("write to '" + tmp.string() + "' failed");
  } catch (...) {
    fs::remove(tmp, ec);
    throw;
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "'");
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  atomic_write(path, [&](std::ostream& os) { os << text; });
}

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& ex) {
    throw FormatError("'" + path.string() + "': " + ex.what());
  }
}

template <typename T>
void save_tensor(const fs::path& path, const Tensor<T>& t) {
  atomic_write(path, [&](std::ostream& os) { write_tensor(os, t); });
}

template <typename T>
Tensor<T> load_tensor(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  try {
    return read_tensor<T>(is);
  } catch (const FormatError& ex) {
    throw FormatError("'" + path.string() + "': " + ex.what());
  }
}

/// Parses an override value: JSON literal when it parses, string otherwise.
inline nlohmann::json parse_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    return text;
  }
}

/// Applies "a.b.c=value" to `cfg`, creating intermediate objects.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValueError("override '" + assignment + "' must look like key.path=value");
  const std::string key = assignment.substr(0, eq);
  nlohmann::json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValueError("override '" + assignment + "' has an empty key segment");
    if (!node->is_object()) {
      if (!node->is_null()) throw ValueError("override '" + assignment + "': '" + part + "' is below a non-object");
      *node = nlohmann::json::object();
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = parse_value(assignment.substr(eq + 1));
}

inline nlohmann::json load_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json cfg = path.empty() ? nlohmann::json::object() : read_json(path);
  if (!cfg.is_object()) throw FormatError("config '" + path + "' must be a JSON object");
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

}  // namespace qens::io
