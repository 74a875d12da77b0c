#pragma once

// Single-file archive: a plain-text manifest (path, shape, dtype) followed
// by raw little-endian f64 payloads in manifest order. Used for model
// checkpoints and for externally supplied view-feature files. Round-trips
// must be bit-exact, so payloads are written straight from memory
// (little-endian hosts only, which this project targets).

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "slotnav/tensor.hpp"

namespace slotnav {

struct ArchiveEntry {
  std::string path;
  Shape shape;
  std::vector<double> data;
};

class Archive {
 public:
  void add(std::string path, Shape shape, std::vector<double> data) {
    if (index_.count(path)) throw std::invalid_argument("Archive: duplicate path " + path);
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("Archive: payload size mismatch for " + path);
    index_[path] = entries_.size();
    entries_.push_back({std::move(path), std::move(shape), std::move(data)});
  }

  bool contains(const std::string& path) const { return index_.count(path) != 0; }

  const ArchiveEntry& at(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw std::invalid_argument("Archive: missing path " + path);
    return entries_[it->second];
  }

  const std::vector<ArchiveEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Atomic write: temp file in the same directory, then rename.
  void save(const std::string& file) const {
    namespace fs = std::filesystem;
    const fs::path target(file);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw std::runtime_error("Archive: cannot open " + tmp.string());
      out << "slotnav-archive v1\n";
      out << "count " << entries_.size() << "\n";
      for (const auto& e : entries_) {
        out << e.path << " ";
        if (e.shape.empty()) {
          out << "scalar";
        } else {
          for (std::size_t i = 0; i < e.shape.size(); ++i) {
            if (i) out << "x";
            out << e.shape[i];
          }
        }
        out << " f64\n";
      }
      out << "payload\n";
      for (const auto& e : entries_)
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  static_cast<std::streamsize>(e.data.size() * sizeof(double)));
      if (!out) throw std::runtime_error("Archive: write failed for " + tmp.string());
    }
    fs::rename(tmp, target);
  }

  static Archive load(const std::string& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("Archive: cannot open " + file);
    std::string line;
    if (!std::getline(in, line) || line != "slotnav-archive v1")
      throw std::runtime_error("Archive: bad header in " + file);
    if (!std::getline(in, line) || line.rfind("count ", 0) != 0)
      throw std::runtime_error("Archive: missing count in " + file);
    const std::size_t count = std::stoull(line.substr(6));
    Archive a;
    std::vector<std::pair<std::string, Shape>> manifest;
    manifest.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::getline(in, line)) throw std::runtime_error("Archive: truncated manifest");
      std::istringstream ls(line);
      std::string path, shape_s, dtype;
      ls >> path >> shape_s >> dtype;
      if (dtype != "f64") throw std::runtime_error("Archive: unsupported dtype " + dtype + " for " + path);
      Shape shape;
      if (shape_s != "scalar") {
        std::size_t pos = 0;
        while (pos < shape_s.size()) {
          auto next = shape_s.find('x', pos);
          if (next == std::string::npos) next = shape_s.size();
          shape.push_back(std::stoull(shape_s.substr(pos, next - pos)));
          pos = next + 1;
        }
      }
      manifest.emplace_back(std::move(path), std::move(shape));
    }
    if (!std::getline(in, line) || line != "payload")
      throw std::runtime_error("Archive: missing payload marker");
    for (auto& [path, shape] : manifest) {
      std::vector<double> data(shape_numel(shape));
      in.read(reinterpret_cast<char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
      if (!in) throw std::runtime_error("Archive: truncated payload at " + path);
      a.add(path, shape, std::move(data));
    }
    return a;
  }

 private:
  std::vector<ArchiveEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace slotnav
