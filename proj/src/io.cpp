#include "midilm/io.h"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace midilm::io {

namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw IoError(IoErrc::NotFound, path + ": no such file");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::ReadFailed, path + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError(IoErrc::ReadFailed, path + ": read error");
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& data) {
  fs::path target(path);
  std::error_code ec;
  if (target.has_parent_path()) fs::create_directories(target.parent_path(), ec);
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrc::WriteFailed, path + ": cannot open for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) throw IoError(IoErrc::WriteFailed, path + ": write error");
  }
  fs::rename(tmp, target, ec);
  if (ec) throw IoError(IoErrc::WriteFailed, path + ": rename failed: " + ec.message());
}

std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace midilm::io
