#pragma once

// Persistence: 8-bit PGM images and masks, the dataset manifest with
// SHA-256 checksums, and binary checkpoints.

#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "advseg/adversarial.hpp"
#include "advseg/config.hpp"
#include "advseg/model.hpp"
#include "advseg/synth.hpp"

namespace advseg {

namespace fs = std::filesystem;

/// Missing, unreadable or malformed input files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Bytes and checksums
// ---------------------------------------------------------------------------

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + p.string());
}

inline std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255)
// ---------------------------------------------------------------------------

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

inline std::string encode_pgm(const GrayImage& img) {
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height) throw ShapeError("PGM: pixel count mismatch");
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline GrayImage decode_pgm(const std::string& bytes, const std::string& what = "PGM") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw DataError(what + ": malformed header");
    return std::stoi(bytes.substr(start, pos - start));
  };
  if (bytes.size() < 2 || bytes.compare(0, 2, "P5") != 0) throw DataError(what + ": not a binary PGM (P5)");
  pos = 2;
  GrayImage img;
  img.width = number();
  img.height = number();
  const int maxval = number();
  if (maxval != 255) throw DataError(what + ": only maxval 255 is supported, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw DataError(what + ": malformed header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  if (bytes.size() - pos != n) {
    throw DataError(what + ": expected " + std::to_string(n) + " pixel bytes, found " + std::to_string(bytes.size() - pos));
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

/// [1,H,W] or [H,W] intensities in [0,1] to 8 bits (rounded 255 * value).
inline GrayImage to_gray(const Tensor& t) {
  const int h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
  if (t.size() != static_cast<std::size_t>(h) * w) throw ShapeError("to_gray: expected a single plane, got " + to_string(t.shape()));
  GrayImage g{w, h, std::vector<std::uint8_t>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) {
    g.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(t[i], 0.0, 1.0) * 255.0));
  }
  return g;
}

inline GrayImage mask_to_gray(const Tensor& mask) {
  require_binary(mask, "mask_to_gray");
  GrayImage g = to_gray(mask);
  return g;
}

inline Tensor image_from_gray(const GrayImage& g) {
  Tensor t({1, g.height, g.width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = g.pixels[i] / 255.0;
  return t;
}

inline Tensor mask_from_gray(const GrayImage& g, const std::string& what) {
  Tensor t({g.height, g.width});
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (g.pixels[i] != 0 && g.pixels[i] != 255) throw DataError(what + ": mask pixels must be 0 or 255");
    t[i] = g.pixels[i] == 255 ? 1.0 : 0.0;
  }
  return t;
}

/// Mask pixels predicted as mass that touch a predicted background pixel.
inline Tensor predicted_boundary(const Tensor& mask) {
  Tensor b(mask.shape());
  for (std::size_t i : boundary_pixels(mask))
    if (mask[i] == 1.0) b[i] = 1.0;
  return b;
}

/// Grayscale copy of the image with predicted boundary pixels drawn white
/// and, when a truth mask is given, its boundary drawn black.
inline GrayImage overlay(const Tensor& image, const Tensor& pred, const Tensor* truth = nullptr) {
  GrayImage g = to_gray(image);
  if (truth) {
    const Tensor tb = predicted_boundary(*truth);
    for (std::size_t i = 0; i < tb.size(); ++i)
      if (tb[i] == 1.0) g.pixels[i] = 0;
  }
  const Tensor pb = predicted_boundary(pred);
  for (std::size_t i = 0; i < pb.size(); ++i)
    if (pb[i] == 1.0) g.pixels[i] = 255;
  return g;
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

inline constexpr const char* kManifestName = "dataset.json";

inline std::string image_file(std::size_t i) { return "sample_" + std::to_string(i) + "_img.pgm"; }
inline std::string mask_file(std::size_t i) { return "sample_" + std::to_string(i) + "_mask.pgm"; }

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::string checksum;  // SHA-256 of the manifest's file table
  Json manifest;
};

/// Writes PGM files and the manifest. Returns the dataset checksum.
inline std::string write_dataset(const fs::path& dir, const RunConfig& cfg, const std::vector<Sample>& samples) {
  fs::create_directories(dir);
  Json files = Json::array();
  const int train_n = cfg.data.train_count();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string img = encode_pgm(to_gray(samples[i].image));
    const std::string msk = encode_pgm(mask_to_gray(samples[i].mask));
    write_file(dir / image_file(i), img);
    write_file(dir / mask_file(i), msk);
    files.push_back({{"index", i},
                     {"split", static_cast<int>(i) < train_n ? "train" : "test"},
                     {"image", image_file(i)},
                     {"mask", mask_file(i)},
                     {"image_sha256", sha256_hex(img)},
                     {"mask_sha256", sha256_hex(msk)}});
  }
  const std::string checksum = sha256_hex(files.dump());
  Json m;
  m["format"] = "advseg-dataset";
  m["seed"] = cfg.seed;
  m["count"] = samples.size();
  m["train_count"] = train_n;
  m["test_count"] = static_cast<int>(samples.size()) - train_n;
  m["config"] = to_json(cfg)["data"];
  m["checksum"] = checksum;
  m["files"] = files;
  write_file(dir / kManifestName, m.dump(2) + "\n");
  return checksum;
}

/// Reads a dataset directory and verifies every checksum.
inline Dataset read_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifestName;
  if (!fs::exists(manifest_path)) throw DataError("no " + std::string(kManifestName) + " in " + dir.string());
  Dataset d;
  try {
    d.manifest = Json::parse(read_file(manifest_path));
    const Json& files = d.manifest.at("files");
    d.checksum = sha256_hex(files.dump());
    if (d.checksum != d.manifest.at("checksum").get<std::string>()) throw DataError("manifest checksum mismatch");
    for (const Json& f : files) {
      const std::string img_bytes = read_file(dir / f.at("image").get<std::string>());
      const std::string msk_bytes = read_file(dir / f.at("mask").get<std::string>());
      if (sha256_hex(img_bytes) != f.at("image_sha256").get<std::string>() ||
          sha256_hex(msk_bytes) != f.at("mask_sha256").get<std::string>()) {
        throw DataError("checksum mismatch for sample " + std::to_string(f.at("index").get<int>()));
      }
      const GrayImage img = decode_pgm(img_bytes, f.at("image").get<std::string>());
      const GrayImage msk = decode_pgm(msk_bytes, f.at("mask").get<std::string>());
      if (img.width != kImageSize || img.height != kImageSize || msk.width != kImageSize || msk.height != kImageSize) {
        throw DataError("sample " + std::to_string(f.at("index").get<int>()) + " is not 40x40");
      }
      Sample s{image_from_gray(img), mask_from_gray(msk, f.at("mask").get<std::string>())};
      const std::string split = f.at("split").get<std::string>();
      if (split == "train") d.train.push_back(std::move(s));
      else if (split == "test") d.test.push_back(std::move(s));
      else throw DataError("unknown split '" + split + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest: " + std::string(e.what()));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Checkpoints: "AFCR" | u32 version | u64 header length | JSON header |
// little-endian f64 payload.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainState state;
  NormStats norm;
  PositionPrior prior;
  RunConfig config;
  std::string dataset_checksum;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw DataError("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

/// Every tensor stored in a checkpoint, by name, in a fixed order.
template <class C, class F>
void checkpoint_tensors(C& ck, F&& f) {
  auto& model = ck.state.model;
  for (std::size_t s = 0; s < model.nets.size(); ++s) {
    const std::string prefix = model.configs[s].name + ".";
    model.nets[s].for_each([&](const char* layer, auto& t) { f(prefix + layer, t); });
  }
  f(std::string("scale.w"), model.scale.w);
  f(std::string("crf.w"), model.crf.kernel_weights);
  for (auto& [name, t] : ck.state.m) f("adam.m." + name, t);
  for (auto& [name, t] : ck.state.v) f("adam.v." + name, t);
  f(std::string("norm.mean"), ck.norm.mean);
  f(std::string("norm.std"), ck.norm.std);
  f(std::string("prior"), ck.prior.prior);
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  Json header;
  header["variant"] = std::string(to_string(ck.state.model.variant));
  header["step"] = ck.state.step;
  header["epoch"] = ck.state.epoch;
  header["dataset_checksum"] = ck.dataset_checksum;
  header["config"] = to_json(ck.config);
  Json table = Json::array();
  std::string payload;
  std::size_t offset = 0;
  detail::checkpoint_tensors(ck, [&](const std::string& name, const Tensor& t) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    for (double v : t.data()) detail::put_le(payload, v);
    offset += t.size();
  });
  header["tensors"] = table;
  const std::string h = header.dump();
  std::string out = "AFCR";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, h.size());
  out += h;
  out += payload;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "AFCR") != 0) throw DataError("not a checkpoint (bad magic)");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw DataError("checkpoint truncated");
  Checkpoint ck;
  try {
    const Json header = Json::parse(bytes.substr(pos, hlen));
    pos += hlen;
    ck.config = from_json(header.at("config"));
    const Variant v = parse_variant(header.at("variant").get<std::string>());
    if (v != ck.config.train.variant) throw DataError("checkpoint variant disagrees with its config");
    ck.state = make_train_state(make_model(v, ck.config.model, ck.config.seed));
    ck.state.step = header.at("step").get<std::int64_t>();
    ck.state.epoch = header.at("epoch").get<int>();
    ck.dataset_checksum = header.at("dataset_checksum").get<std::string>();
    ck.norm = {Tensor({1, kImageSize, kImageSize}), Tensor({1, kImageSize, kImageSize})};
    ck.prior = {Tensor({kImageSize, kImageSize})};

    std::map<std::string, Json> table;
    for (const Json& e : header.at("tensors")) table.emplace(e.at("name").get<std::string>(), e);
    const std::size_t payload_start = pos;
    const std::size_t payload_doubles = (bytes.size() - payload_start) / sizeof(double);
    if ((bytes.size() - payload_start) % sizeof(double) != 0) throw DataError("checkpoint payload is not a whole number of f64");
    std::size_t consumed = 0;
    detail::checkpoint_tensors(ck, [&](const std::string& name, Tensor& t) {
      auto it = table.find(name);
      if (it == table.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
      const Shape shape = it->second.at("shape").get<Shape>();
      if (shape != t.shape()) {
        throw DataError("tensor '" + name + "' has shape " + to_string(shape) + ", model expects " + to_string(t.shape()));
      }
      const std::size_t off = it->second.at("offset").get<std::size_t>();
      if (off + t.size() > payload_doubles) throw DataError("tensor '" + name + "' runs past the payload");
      std::size_t p = payload_start + off * sizeof(double);
      for (double& x : t.data()) x = detail::get_le<double>(bytes, p);
      consumed += t.size();
      table.erase(it);
    });
    if (!table.empty()) throw DataError("checkpoint has unexpected tensor '" + table.begin()->first + "'");
    if (consumed != payload_doubles) throw DataError("checkpoint payload has trailing data");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint header: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw DataError("checkpoint config: " + std::string(e.what()));
  }
  return ck;
}

inline void save_checkpoint(const fs::path& p, const Checkpoint& ck) { write_file(p, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const fs::path& p) { return decode_checkpoint(read_file(p)); }

}  // namespace advseg
