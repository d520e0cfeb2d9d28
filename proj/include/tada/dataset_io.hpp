#pragma once

// On-disk dataset layout:
//
//   <dir>/index.json          format tag, version, spec echo, per-file
//                             checksums and per-sample metadata
//   <dir>/<domain>_<split>.bin one binary array file per (domain, split)
//
// Binary files are little-endian. Header: 8-byte magic "TADADSET", then
// u32 version, count, size, anchor kind (0 seg, 1 keypoints), anchor dim.
// Each sample follows as: image f32[size*size*3] (HWC), normals
// f32[size*size*3], valid u8[size*size], then either classes u8[size*size]
// or keypoints f32[K*3] as (u, v, depth).

#include <bit>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "tada/datagen.hpp"

namespace tada::data {

class DatasetIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr char kDatasetMagic[8] = {'T', 'A', 'D', 'A', 'D', 'S', 'E', 'T'};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "dataset files are little-endian; big-endian hosts need byte swapping");

class Writer {
 public:
  explicit Writer(const std::filesystem::path& p) : out_(p, std::ios::binary) {
    if (!out_) throw DatasetIoError("cannot open " + p.string() + " for writing");
  }
  template <class T>
  void put(const T& v) { raw(&v, sizeof v); }
  template <class T>
  void put_array(const std::vector<T>& v) { raw(v.data(), v.size() * sizeof(T)); }
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    hash_ = fnv1a(p, n, hash_);
    bytes_ += n;
  }
  void close() {
    out_.close();
    if (!out_) throw DatasetIoError("write failed");
  }
  [[nodiscard]] std::uint64_t hash() const { return hash_; }
  [[nodiscard]] std::uint64_t bytes() const { return bytes_; }

 private:
  std::ofstream out_;
  std::uint64_t hash_ = 1469598103934665603ULL;
  std::uint64_t bytes_ = 0;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& p) : path_(p), in_(p, std::ios::binary) {
    if (!in_) throw DatasetIoError("cannot open " + p.string());
  }
  template <class T>
  T get() {
    T v{};
    raw(&v, sizeof v);
    return v;
  }
  template <class T>
  void get_array(std::vector<T>& v, std::size_t n) {
    v.resize(n);
    raw(v.data(), n * sizeof(T));
  }
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw DatasetIoError(path_.string() + ": truncated file");
    }
    hash_ = fnv1a(p, n, hash_);
    bytes_ += n;
  }
  [[nodiscard]] bool at_eof() { return in_.peek() == std::ifstream::traits_type::eof(); }
  [[nodiscard]] std::uint64_t hash() const { return hash_; }
  [[nodiscard]] std::uint64_t bytes() const { return bytes_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t hash_ = 1469598103934665603ULL;
  std::uint64_t bytes_ = 0;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline std::string part_file_name(Domain d, Split s) {
  return std::string(to_string(d)) + "_" + to_string(s) + ".bin";
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json index;
  index["format"] = "tada-dataset";
  index["version"] = kDatasetVersion;
  index["spec"] = ds.spec;
  index["spec_hash"] = spec_hash(ds.spec);
  index["files"] = nlohmann::json::array();
  index["samples"] = nlohmann::json::array();
  const bool seg = ds.spec.anchor_kind == AnchorKind::segmentation;
  const auto size = static_cast<std::uint32_t>(ds.spec.image_size);
  const std::size_t npx = static_cast<std::size_t>(size) * size;
  for (Domain d : kDomains) {
    for (Split s : kSplits) {
      const auto& part = ds.part(d, s);
      detail::Writer w(dir / part_file_name(d, s));
      w.raw(kDatasetMagic, sizeof kDatasetMagic);
      w.put(kDatasetVersion);
      w.put(static_cast<std::uint32_t>(part.size()));
      w.put(size);
      w.put(static_cast<std::uint32_t>(seg ? 0 : 1));
      w.put(static_cast<std::uint32_t>(ds.spec.anchor_channels()));
      for (const auto& smp : part) {
        if (smp.size != static_cast<int>(size) || smp.image.size() != npx * 3 ||
            smp.normals.size() != npx * 3 || smp.valid.size() != npx) {
          throw DatasetIoError("sample arrays do not match the spec image size");
        }
        w.put_array(smp.image);
        w.put_array(smp.normals);
        w.put_array(smp.valid);
        if (seg) {
          w.put_array(std::get<SegLabel>(smp.anchor).classes);
        } else {
          for (const auto& k : std::get<KeypointLabel>(smp.anchor).points) {
            w.put(k.u);
            w.put(k.v);
            w.put(k.depth);
          }
        }
        index["samples"].push_back({{"domain", to_string(d)},
                                    {"split", to_string(s)},
                                    {"index", smp.index},
                                    {"tilt_x_deg", smp.tilt_x_deg},
                                    {"tilt_y_deg", smp.tilt_y_deg},
                                    {"light", smp.light}});
      }
      w.close();
      index["files"].push_back({{"domain", to_string(d)},
                                {"split", to_string(s)},
                                {"file", part_file_name(d, s)},
                                {"count", part.size()},
                                {"bytes", w.bytes()},
                                {"fnv1a", detail::hex64(w.hash())}});
    }
  }
  std::ofstream out(dir / "index.json");
  if (!out) throw DatasetIoError("cannot write index.json in " + dir.string());
  out << index.dump(1) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  std::ifstream in(index_path);
  if (!in) throw DatasetIoError("missing dataset index " + index_path.string());
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DatasetIoError("corrupted index.json: " + std::string(e.what()));
  }
  if (index.value("format", "") != "tada-dataset") throw DatasetIoError("not a dataset index");
  if (index.value("version", 0u) != kDatasetVersion) {
    throw DatasetIoError("dataset version mismatch: file has " + index.value("version", nlohmann::json(0)).dump() +
                         ", expected " + std::to_string(kDatasetVersion));
  }
  Dataset ds;
  try {
    ds.spec = index.at("spec").get<ToyWorldSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw DatasetIoError("corrupted spec in index.json: " + std::string(e.what()));
  }
  const bool seg = ds.spec.anchor_kind == AnchorKind::segmentation;
  const auto& samples_meta = index.at("samples");
  std::size_t meta_pos = 0;
  for (const auto& f : index.at("files")) {
    const std::string dname = f.at("domain"), sname = f.at("split");
    const Domain d = dname == "source" ? Domain::source : Domain::target;
    Split s = Split::train;
    if (sname == "val") s = Split::val;
    if (sname == "test") s = Split::test;
    detail::Reader r(dir / f.at("file").get<std::string>());
    char magic[8];
    r.raw(magic, sizeof magic);
    if (!std::equal(magic, magic + 8, kDatasetMagic)) throw DatasetIoError(f.at("file").get<std::string>() + ": bad magic");
    if (r.get<std::uint32_t>() != kDatasetVersion) throw DatasetIoError("array file version mismatch");
    const auto count = r.get<std::uint32_t>();
    const auto size = r.get<std::uint32_t>();
    const auto kind = r.get<std::uint32_t>();
    const auto dim = r.get<std::uint32_t>();
    if (count != f.at("count").get<std::uint32_t>() || static_cast<int>(size) != ds.spec.image_size ||
        kind != (seg ? 0u : 1u) || static_cast<int>(dim) != ds.spec.anchor_channels()) {
      throw DatasetIoError(f.at("file").get<std::string>() + ": header disagrees with index");
    }
    const std::size_t npx = static_cast<std::size_t>(size) * size;
    auto& part = ds.part(d, s);
    part.resize(count);
    for (auto& smp : part) {
      if (meta_pos >= samples_meta.size()) throw DatasetIoError("index has fewer sample records than files");
      const auto& m = samples_meta[meta_pos++];
      smp.size = static_cast<int>(size);
      smp.domain = d;
      smp.split = s;
      smp.index = m.at("index");
      smp.tilt_x_deg = m.at("tilt_x_deg");
      smp.tilt_y_deg = m.at("tilt_y_deg");
      smp.light = m.at("light");
      r.get_array(smp.image, npx * 3);
      r.get_array(smp.normals, npx * 3);
      r.get_array(smp.valid, npx);
      if (seg) {
        SegLabel lab{static_cast<int>(size), {}};
        r.get_array(lab.classes, npx);
        smp.anchor = std::move(lab);
      } else {
        KeypointLabel lab{static_cast<int>(size), std::vector<Keypoint>(dim)};
        for (auto& k : lab.points) {
          k.u = r.get<float>();
          k.v = r.get<float>();
          k.depth = r.get<float>();
        }
        smp.anchor = std::move(lab);
      }
    }
    if (!r.at_eof()) throw DatasetIoError(f.at("file").get<std::string>() + ": trailing bytes");
    if (detail::hex64(r.hash()) != f.at("fnv1a").get<std::string>() || r.bytes() != f.at("bytes").get<std::uint64_t>()) {
      throw DatasetIoError(f.at("file").get<std::string>() + ": checksum mismatch");
    }
  }
  if (meta_pos != samples_meta.size()) throw DatasetIoError("index lists more samples than files hold");
  return ds;
}

}  // namespace tada::data
