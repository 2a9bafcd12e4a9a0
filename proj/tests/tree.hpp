// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "beamckm/serialize.hpp"

/// Relative path -> bytes for every regular file under dir.
inline std::map<std::string, std::string> tree_bytes(const std::filesystem::path& dir, bool recursive = true) {
  namespace fs = std::filesystem;
  std::map<std::string, std::string> out;
  if (recursive) {
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = beamckm::read_bytes(e.path());
  } else {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) out[e.path().filename().string()] = beamckm::read_bytes(e.path());
  }
  return out;
}

/// Names present in only one tree or with different bytes.
inline std::vector<std::string> differing(const std::map<std::string, std::string>& a,
                                          const std::map<std::string, std::string>& b) {
  std::vector<std::string> out;
  for (const auto& [k, v] : a)
    if (!b.count(k) || b.at(k) != v) out.push_back(k);
  for (const auto& [k, v] : b)
    if (!a.count(k)) out.push_back(k);
  return out;
}
