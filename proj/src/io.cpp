#include "smi/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace smi::io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

namespace {

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string what) : b_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw Error(ErrorCode::TruncatedFile, what_ + ": unexpected end of file");
  }
  std::uint32_t u32_be() {
    need(4);
    std::uint32_t v = (std::uint32_t{b_[pos_]} << 24) | (std::uint32_t{b_[pos_ + 1]} << 16) |
                      (std::uint32_t{b_[pos_ + 2]} << 8) | std::uint32_t{b_[pos_ + 3]};
    pos_ += 4;
    return v;
  }
  std::uint32_t u32_le() {
    need(4);
    std::uint32_t v = std::uint32_t{b_[pos_]} | (std::uint32_t{b_[pos_ + 1]} << 8) |
                      (std::uint32_t{b_[pos_ + 2]} << 16) | (std::uint32_t{b_[pos_ + 3]} << 24);
    pos_ += 4;
    return v;
  }
  float f32_le() { return std::bit_cast<float>(u32_le()); }
  const std::uint8_t* bytes(std::size_t n) {
    need(n);
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

class Writer {
 public:
  void u32_be(std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u32_le(std::uint32_t v) {
    for (int s = 0; s <= 24; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void f32_le(float f) { u32_le(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), c, c + n);
  }
  std::vector<std::uint8_t> out;
};

std::uint8_t to_byte(double x) {
  return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0)));
}

}  // namespace

// ---------------------------------------------------------------------------
// IDX

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  Reader ir(ib, images.string()), lr(lb, labels.string());

  const std::uint32_t im = ir.u32_be();
  if (im != 0x00000803u && im != 0x00000804u) {
    throw Error(ErrorCode::BadMagic, images.string() + ": not an IDX image file");
  }
  const std::uint32_t n = ir.u32_be(), h = ir.u32_be(), w = ir.u32_be();
  const std::uint32_t c = im == 0x00000804u ? ir.u32_be() : 1u;
  if (lr.u32_be() != 0x00000801u) throw Error(ErrorCode::BadMagic, labels.string() + ": not an IDX label file");
  const std::uint32_t nl = lr.u32_be();
  if (nl != n) {
    throw Error(ErrorCode::CountMismatch, std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  }
  const std::size_t per = std::size_t{h} * w * c;
  if (ir.remaining() < per * n) throw Error(ErrorCode::TruncatedFile, images.string() + ": pixel payload truncated");
  if (ir.remaining() > per * n) throw Error(ErrorCode::CountMismatch, images.string() + ": trailing bytes");
  if (lr.remaining() < n) throw Error(ErrorCode::TruncatedFile, labels.string() + ": label payload truncated");

  Dataset d;
  d.num_classes = num_classes;
  d.images.reserve(n);
  const std::uint8_t* lab = lr.bytes(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint8_t* px = ir.bytes(per);
    Tensor t(Shape{Index{h}, Index{w}, Index{c}});
    for (std::size_t k = 0; k < per; ++k) t[static_cast<Index>(k)] = px[k] / 255.0;
    if (lab[i] >= num_classes) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(lab[i]) + " at index " + std::to_string(i));
    }
    d.images.push_back(std::move(t));
    d.labels.push_back(lab[i]);
  }
  return d;
}

void save_idx(const Dataset& data, const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (data.images.size() != data.labels.size()) throw Error(ErrorCode::CountMismatch, "images vs labels");
  Writer iw, lw;
  const Index h = data.size() ? data.images[0].dim(0) : 0, w = data.size() ? data.images[0].dim(1) : 0;
  const Index c = data.size() ? data.images[0].dim(2) : 1;
  iw.u32_be(c == 1 ? 0x00000803u : 0x00000804u);
  iw.u32_be(static_cast<std::uint32_t>(data.size()));
  iw.u32_be(static_cast<std::uint32_t>(h));
  iw.u32_be(static_cast<std::uint32_t>(w));
  if (c != 1) iw.u32_be(static_cast<std::uint32_t>(c));
  lw.u32_be(0x00000801u);
  lw.u32_be(static_cast<std::uint32_t>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.images[i].shape() != Shape{h, w, c}) throw Error(ErrorCode::ShapeMismatch, "ragged dataset");
    for (double v : data.images[i].values()) iw.out.push_back(to_byte(v));
    lw.out.push_back(static_cast<std::uint8_t>(data.labels[i]));
  }
  write_file(images, iw.out);
  write_file(labels, lw.out);
}

// ---------------------------------------------------------------------------
// PNM

Pnm to_pnm(const Tensor& img) {
  if (img.rank() != 3 || (img.dim(2) != 1 && img.dim(2) != 3)) {
    throw Error(ErrorCode::ShapeMismatch, "PNM needs an [H,W,1] or [H,W,3] image");
  }
  Pnm p{static_cast<int>(img.dim(1)), static_cast<int>(img.dim(0)), static_cast<int>(img.dim(2)), {}};
  p.pixels.reserve(static_cast<std::size_t>(img.numel()));
  for (double v : img.values()) p.pixels.push_back(to_byte(v));
  return p;
}

void write_pnm(const Pnm& image, const std::filesystem::path& path) {
  std::ostringstream head;
  head << (image.channels == 1 ? "P5" : "P6") << "\n" << image.width << " " << image.height << "\n255\n";
  const std::string h = head.str();
  std::vector<std::uint8_t> bytes(h.begin(), h.end());
  bytes.insert(bytes.end(), image.pixels.begin(), image.pixels.end());
  write_file(path, bytes);
}

Pnm read_pnm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (std::isspace(bytes[pos])) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw Error(ErrorCode::BadMagic, path.string() + ": not binary PGM/PPM");
  Pnm p;
  p.channels = magic == "P5" ? 1 : 3;
  try {
    p.width = std::stoi(token());
    p.height = std::stoi(token());
    if (std::stoi(token()) != 255) throw Error(ErrorCode::BadMagic, path.string() + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::TruncatedFile, path.string() + ": bad header");
  }
  ++pos;  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(p.width) * p.height * p.channels;
  if (bytes.size() < pos + n) throw Error(ErrorCode::TruncatedFile, path.string() + ": pixel data truncated");
  p.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return p;
}

void write_image(const SparseImage& image, const Normalization& norm, const std::filesystem::path& path) {
  Tensor display = image.canvas;
  for (auto& v : display.values()) v = norm.to_display(v);
  SparseImage shown = image;
  shown.canvas = std::move(display);
  write_pnm(to_pnm(shown.masked(0.0)), path);
}

// ---------------------------------------------------------------------------
// Checkpoint

void save_checkpoint(const VitModel& model, const std::filesystem::path& path) {
  Writer w;
  w.bytes("SMIV", 4);
  w.u32_le(kCheckpointVersion);
  const auto& c = model.config;
  for (int v : {c.image_size, c.channels, c.patch_size, c.embed_dim, c.num_heads, c.num_layers, c.ffn_hidden,
                c.num_classes}) {
    w.u32_le(static_cast<std::uint32_t>(v));
  }
  std::uint32_t count = 0;
  visit_parameters(model.params, [&](const std::string&, const Tensor&) { ++count; });
  w.u32_le(count);
  visit_parameters(model.params, [&](const std::string& name, const Tensor& t) {
    w.u32_le(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32_le(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) w.u32_le(static_cast<std::uint32_t>(d));
    for (double v : t.values()) w.f32_le(static_cast<float>(v));
  });
  write_file(path, w.out);
}

VitModel load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  Reader r(bytes, path.string());
  const std::uint8_t* magic = r.bytes(4);
  if (std::memcmp(magic, "SMIV", 4) != 0) throw Error(ErrorCode::BadMagic, path.string() + ": not an SMIV checkpoint");
  const std::uint32_t version = r.u32_le();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::VersionMismatch, path.string() + ": checkpoint version " + std::to_string(version) +
                                                ", expected " + std::to_string(kCheckpointVersion));
  }
  VitConfig c;
  for (int* f : {&c.image_size, &c.channels, &c.patch_size, &c.embed_dim, &c.num_heads, &c.num_layers,
                 &c.ffn_hidden, &c.num_classes}) {
    *f = static_cast<int>(r.u32_le());
  }
  c.validate();
  Rng unused(0);
  VitModel m = VitModel::init(c, unused);
  std::uint32_t expected = 0;
  visit_parameters(m.params, [&](const std::string&, const Tensor&) { ++expected; });
  const std::uint32_t count = r.u32_le();
  if (count != expected) {
    throw Error(ErrorCode::CountMismatch, "checkpoint holds " + std::to_string(count) + " tensors, model needs " +
                                              std::to_string(expected));
  }
  visit_parameters(m.params, [&](const std::string& name, Tensor& t) {
    const std::uint32_t len = r.u32_le();
    const std::string got(reinterpret_cast<const char*>(r.bytes(len)), len);
    if (got != name) throw Error(ErrorCode::CountMismatch, "expected tensor " + name + ", found " + got);
    const std::uint32_t rank = r.u32_le();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(r.u32_le()));
    if (shape != t.shape()) {
      throw Error(ErrorCode::ShapeMismatch, name + ": shape " + shape_string(shape) + " vs " + shape_string(t.shape()));
    }
    for (auto& v : t.values()) v = static_cast<double>(r.f32_le());
  });
  if (r.remaining() != 0) throw Error(ErrorCode::CountMismatch, path.string() + ": trailing bytes");
  return m;
}

}  // namespace smi::io
