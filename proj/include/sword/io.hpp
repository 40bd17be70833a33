#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <system_error>

#include "sword/error.hpp"

namespace sword::io {

/// Writes through a sibling temp file and renames it over `path`, so readers
/// see either the old content or the complete new content.
inline void write_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::MalformedInput, "cannot write " + tmp.string());
    body(out);
    out.flush();
    if (!out) throw Error(ErrorCode::MalformedInput, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::MalformedInput, "rename failed for " + path.string() + ": " + ec.message());
}

inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  write_atomic(path, [&](std::ostream& out) { out << content; });
}

}  // namespace sword::io
