#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace metamer {

std::string sha1_hex(std::string_view bytes);
// Git blob object id: sha1("blob <len>\0" + bytes).
std::string git_blob_hash(std::string_view bytes);
std::string file_git_hash(const std::filesystem::path& p);

std::string read_file(const std::filesystem::path& p);
// Write to a temporary sibling and rename over `p`.
void write_file_atomic(const std::filesystem::path& p, std::string_view bytes);

}  // namespace metamer
