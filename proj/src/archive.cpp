#include "mariner/archive.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace mariner {

using nlohmann::json;

// ---------------------------------------------------------------------------
// STL

std::string write_stl(const Mesh& mesh, std::string_view name) {
    std::string out = fmt::format("solid {}\n", name);
    for (const auto& t : mesh) {
        Vec3 n = (t.b - t.a).cross(t.c - t.a);
        if (n.norm() > 0.0) n.normalize();
        out += fmt::format("  facet normal {} {} {}\n    outer loop\n", n.x(), n.y(), n.z());
        for (const Vec3* v : {&t.a, &t.b, &t.c}) out += fmt::format("      vertex {} {} {}\n", v->x(), v->y(), v->z());
        out += "    endloop\n  endfacet\n";
    }
    out += fmt::format("endsolid {}\n", name);
    return out;
}

Mesh parse_stl(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string word;
    if (!(in >> word) || word != "solid") throw FormatError("stl: missing 'solid' header");
    std::getline(in, word);  // solid name
    Mesh mesh;
    std::vector<Vec3> loop;
    int line_vertices = 0;
    while (in >> word) {
        if (word == "vertex") {
            double x, y, z;
            if (!(in >> x >> y >> z)) throw FormatError(fmt::format("stl: bad vertex in facet {}", mesh.size()));
            loop.emplace_back(x, y, z);
            ++line_vertices;
        } else if (word == "endloop") {
            if (loop.size() != 3)
                throw FormatError(fmt::format("stl: facet {} has {} vertices", mesh.size(), loop.size()));
            mesh.push_back({loop[0], loop[1], loop[2]});
            loop.clear();
        } else if (word == "endsolid") {
            return mesh;
        } else if (word == "facet" || word == "normal" || word == "outer" || word == "loop" || word == "endfacet") {
            continue;
        } else {
            // normal components follow "normal"; anything else numeric is skipped there.
            char* end = nullptr;
            std::strtod(word.c_str(), &end);
            if (end == word.c_str() || *end != '\0') throw FormatError(fmt::format("stl: unexpected token '{}'", word));
        }
    }
    throw FormatError("stl: missing 'endsolid'");
}

Mesh load_stl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open mesh {}", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_stl(ss.str());
}

// ---------------------------------------------------------------------------
// Zip

namespace {

void put16(std::string& s, std::uint32_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put32(std::string& s, std::uint32_t v) {
    put16(s, v & 0xffff);
    put16(s, v >> 16);
}

std::uint32_t get16(std::string_view s, std::size_t at) {
    if (at + 2 > s.size()) throw FormatError("zip: truncated");
    return static_cast<unsigned char>(s[at]) | (static_cast<unsigned char>(s[at + 1]) << 8);
}

std::uint32_t get32(std::string_view s, std::size_t at) { return get16(s, at) | (get16(s, at + 2) << 16); }

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint32_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01

std::uint32_t crc_of(std::string_view data) {
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
}

std::string inflate_raw(std::string_view in, std::size_t expected) {
    std::string out(expected, '\0');
    z_stream zs{};
    if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw Error("zip: inflate init failed");
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = reinterpret_cast<Bytef*>(out.data());
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || zs.total_out != expected) throw FormatError("zip: corrupt deflate stream");
    return out;
}

}  // namespace

std::string write_zip(const std::vector<ZipEntry>& entries) {
    std::string out, central;
    for (const auto& e : entries) {
        const std::uint32_t crc = crc_of(e.data);
        const auto size = static_cast<std::uint32_t>(e.data.size());
        const auto offset = static_cast<std::uint32_t>(out.size());
        put32(out, kLocalSig);
        put16(out, 20);
        put16(out, 0);  // flags
        put16(out, 0);  // stored
        put16(out, 0);  // time
        put16(out, kDosDate);
        put32(out, crc);
        put32(out, size);
        put32(out, size);
        put16(out, static_cast<std::uint32_t>(e.name.size()));
        put16(out, 0);
        out += e.name;
        out += e.data;

        put32(central, kCentralSig);
        put16(central, 20);
        put16(central, 20);
        put16(central, 0);
        put16(central, 0);
        put16(central, 0);
        put16(central, kDosDate);
        put32(central, crc);
        put32(central, size);
        put32(central, size);
        put16(central, static_cast<std::uint32_t>(e.name.size()));
        put16(central, 0);
        put16(central, 0);
        put16(central, 0);
        put16(central, 0);
        put32(central, 0);
        put32(central, offset);
        central += e.name;
    }
    const auto cd_offset = static_cast<std::uint32_t>(out.size());
    out += central;
    put32(out, kEndSig);
    put16(out, 0);
    put16(out, 0);
    put16(out, static_cast<std::uint32_t>(entries.size()));
    put16(out, static_cast<std::uint32_t>(entries.size()));
    put32(out, static_cast<std::uint32_t>(central.size()));
    put32(out, cd_offset);
    put16(out, 0);
    return out;
}

std::vector<ZipEntry> read_zip(std::string_view bytes) {
    if (bytes.size() < 22) throw FormatError("zip: too short");
    std::size_t end = std::string_view::npos;
    for (std::size_t at = bytes.size() - 22 + 1; at-- > 0;) {
        if (get32(bytes, at) == kEndSig) {
            end = at;
            break;
        }
        if (bytes.size() - at > 22 + 0xffff) break;
    }
    if (end == std::string_view::npos) throw FormatError("zip: no end of central directory");
    const std::uint32_t count = get16(bytes, end + 10);
    std::size_t at = get32(bytes, end + 16);
    std::vector<ZipEntry> entries;
    for (std::uint32_t k = 0; k < count; ++k) {
        if (get32(bytes, at) != kCentralSig) throw FormatError("zip: bad central directory");
        const std::uint32_t method = get16(bytes, at + 10);
        const std::uint32_t crc = get32(bytes, at + 16);
        const std::uint32_t csize = get32(bytes, at + 20);
        const std::uint32_t usize = get32(bytes, at + 24);
        const std::uint32_t name_len = get16(bytes, at + 28);
        const std::uint32_t extra_len = get16(bytes, at + 30);
        const std::uint32_t comment_len = get16(bytes, at + 32);
        const std::uint32_t local = get32(bytes, at + 42);
        if (at + 46 + name_len > bytes.size()) throw FormatError("zip: truncated");
        ZipEntry e;
        e.name = std::string(bytes.substr(at + 46, name_len));
        at += 46 + name_len + extra_len + comment_len;

        if (get32(bytes, local) != kLocalSig) throw FormatError(fmt::format("zip: bad local header for {}", e.name));
        const std::size_t data_at = local + 30 + get16(bytes, local + 26) + get16(bytes, local + 28);
        if (data_at + csize > bytes.size()) throw FormatError(fmt::format("zip: truncated data for {}", e.name));
        const auto raw = bytes.substr(data_at, csize);
        if (method == 0) {
            e.data = std::string(raw);
        } else if (method == 8) {
            e.data = inflate_raw(raw, usize);
        } else {
            throw FormatError(fmt::format("zip: unsupported method {} for {}", method, e.name));
        }
        if (crc_of(e.data) != crc) throw FormatError(fmt::format("zip: CRC mismatch for {}", e.name));
        entries.push_back(std::move(e));
    }
    return entries;
}

// ---------------------------------------------------------------------------
// World archive

namespace {

json label_json(const SemanticLabel& l) { return {{"class_id", l.class_id}, {"instance_id", l.instance_id}}; }

SemanticLabel label_from(const json& j) {
    return {j.at("class_id").get<int>(), j.at("instance_id").get<std::int64_t>()};
}

const char* class_name(int id) {
    switch (id) {
        case classes::kUnlabeled: return "unlabeled";
        case classes::kSeafloor: return "seafloor";
        case classes::kRock: return "rock";
        case classes::kPipe: return "pipe";
        case classes::kDebris: return "debris";
        case classes::kDam: return "dam";
        case classes::kSpawned: return "spawned";
        default: return nullptr;
    }
}

}  // namespace

std::string world_archive_bytes(const World& world) {
    json manifest = {{"format", kWorldArchiveFormat}, {"version", 1}};
    std::vector<ZipEntry> files;
    std::map<int, std::string> used_classes;

    if (const auto& hf = world.heightfield()) {
        std::string bin;
        bin.reserve(hf->depth.size() * 8);
        for (double d : hf->depth) {
            const auto bits = std::bit_cast<std::uint64_t>(d);
            for (int b = 0; b < 8; ++b) bin.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
        }
        manifest["heightfield"] = {{"file", "heightfield.bin"},
                                   {"origin", {hf->origin.x(), hf->origin.y()}},
                                   {"cell_size", hf->cell_size},
                                   {"nx", hf->nx},
                                   {"ny", hf->ny},
                                   {"label", label_json(hf->label)},
                                   {"layout", "float64le, row-major i * ny + j"}};
        files.push_back({"heightfield.bin", std::move(bin)});
        used_classes[hf->label.class_id];
    } else {
        manifest["heightfield"] = nullptr;
    }

    json props = json::array();
    for (const auto& p : world.props()) {
        const std::string file = fmt::format("props/{:06d}.stl", p.id);
        props.push_back({{"id", p.id},
                         {"file", file},
                         {"pose", {p.pose[0], p.pose[1], p.pose[2], p.pose[3], p.pose[4], p.pose[5]}},
                         {"label", label_json(p.label)}});
        files.push_back({file, write_stl(p.mesh, fmt::format("prop_{}", p.id))});
        used_classes[p.label.class_id];
    }
    manifest["props"] = props;

    json labels = json::object();
    for (const auto& [id, _] : used_classes) {
        const char* name = class_name(id);
        labels[std::to_string(id)] = name ? name : fmt::format("class_{}", id);
    }

    std::vector<ZipEntry> entries{{"manifest.json", manifest.dump(2) + "\n"}};
    for (auto& f : files) entries.push_back(std::move(f));
    entries.push_back({"labels.json", json{{"classes", labels}}.dump(2) + "\n"});
    return write_zip(entries);
}

World parse_world_archive(std::string_view bytes) {
    std::map<std::string, std::string> files;
    for (auto& e : read_zip(bytes)) files[e.name] = std::move(e.data);
    auto file = [&](const std::string& name) -> const std::string& {
        const auto it = files.find(name);
        if (it == files.end()) throw FormatError(fmt::format("world archive: missing {}", name));
        return it->second;
    };
    World world;
    try {
        const json manifest = json::parse(file("manifest.json"));
        if (manifest.value("format", "") != kWorldArchiveFormat || manifest.value("version", 0) != 1)
            throw FormatError("world archive: not a version 1 world archive");
        const auto& h = manifest.at("heightfield");
        if (!h.is_null()) {
            Heightfield hf;
            hf.origin = Vec2(h.at("origin").at(0).get<double>(), h.at("origin").at(1).get<double>());
            hf.cell_size = h.at("cell_size").get<double>();
            hf.nx = h.at("nx").get<int>();
            hf.ny = h.at("ny").get<int>();
            hf.label = label_from(h.at("label"));
            const std::string& bin = file(h.at("file").get<std::string>());
            const std::size_t n = static_cast<std::size_t>(hf.nx) * static_cast<std::size_t>(hf.ny);
            if (hf.nx < 0 || hf.ny < 0 || bin.size() != n * 8)
                throw FormatError("world archive: heightfield size does not match its header");
            hf.depth.resize(n);
            for (std::size_t k = 0; k < n; ++k) {
                std::uint64_t bits = 0;
                for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bin[8 * k + b])) << (8 * b);
                hf.depth[k] = std::bit_cast<double>(bits);
            }
            world.set_heightfield(std::move(hf));
        }
        for (const auto& p : manifest.at("props")) {
            Vec6 pose;
            for (int i = 0; i < 6; ++i) pose[i] = p.at("pose").at(i).get<double>();
            world.spawn_prop(parse_stl(file(p.at("file").get<std::string>())), pose, label_from(p.at("label")));
        }
    } catch (const json::exception& e) {
        throw FormatError(fmt::format("world archive: {}", e.what()));
    } catch (const InvalidArgument& e) {
        throw FormatError(fmt::format("world archive: {}", e.what()));
    }
    return world;
}

void write_world_archive(const World& world, const std::filesystem::path& path) {
    const std::string bytes = world_archive_bytes(world);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(fmt::format("failed writing {}", path.string()));
}

World read_world_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(fmt::format("cannot open world archive {}", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_world_archive(ss.str());
}

}  // namespace mariner
