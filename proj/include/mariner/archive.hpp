#pragma once

// World hand-off files: ASCII STL meshes and the single-file world archive
// (a zip holding manifest.json, heightfield.bin, props/*.stl, labels.json).

#include "mariner/world.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mariner {

/// ASCII STL. Normals are recomputed on write and ignored on read.
std::string write_stl(const Mesh& mesh, std::string_view name = "mesh");
Mesh parse_stl(std::string_view text);
Mesh load_stl(const std::filesystem::path& path);

struct ZipEntry {
    std::string name;
    std::string data;

    friend bool operator==(const ZipEntry&, const ZipEntry&) = default;
};

/// Stored (uncompressed) zip with fixed timestamps, entries in the given
/// order, so equal inputs give byte-identical archives.
std::string write_zip(const std::vector<ZipEntry>& entries);

/// Reads stored and deflated entries. Throws FormatError on a damaged
/// archive or a CRC mismatch.
std::vector<ZipEntry> read_zip(std::string_view bytes);

inline constexpr const char* kWorldArchiveFormat = "mariner-world";

/// Heightfield depths are stored as float64 little endian, prop meshes in
/// their local frame with pose and label in the manifest, so a read archive
/// reproduces the world geometry exactly.
std::string world_archive_bytes(const World& world);
World parse_world_archive(std::string_view bytes);

void write_world_archive(const World& world, const std::filesystem::path& path);
World read_world_archive(const std::filesystem::path& path);

}  // namespace mariner
