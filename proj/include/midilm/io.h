#pragma once

// Small file helpers shared by the pipeline stages.

#include <string>
#include <vector>

#include "midilm/error.h"

namespace midilm::io {

enum class IoErrc { NotFound, ReadFailed, WriteFailed };
using IoError = KindedError<IoErrc>;

std::string read_file(const std::string& path);

/// Writes to a sibling temp file and renames it over `path`, creating parent
/// directories as needed.
void write_file_atomic(const std::string& path, const std::string& data);

/// Non-empty lines of a text file.
std::vector<std::string> read_lines(const std::string& path);

}  // namespace midilm::io
