#include "carotidseg/volume_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace carotidseg {

Tensor Volume::slice(std::int64_t k) const {
  if (k < 0 || k >= depth()) throw std::out_of_range("Volume::slice: index out of range");
  Tensor img({height(), width()});
  std::copy_n(data.data() + k * height() * width(), height() * width(), img.data());
  return img;
}

void Volume::set_slice(std::int64_t k, const Tensor& img) {
  if (k < 0 || k >= depth()) throw std::out_of_range("Volume::set_slice: index out of range");
  if (img.rank() != 2 || img.dim(0) != height() || img.dim(1) != width())
    throw std::invalid_argument("Volume::set_slice: slice shape mismatch");
  std::copy_n(img.data(), height() * width(), data.data() + k * height() * width());
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// ---- raw float32 volume (.rvol + .rvol.hdr sidecar) ----

Volume load_rvol(const std::filesystem::path& path) {
  std::filesystem::path hdr_path = path.string() + ".hdr";
  std::ifstream hdr(hdr_path);
  if (!hdr) throw std::runtime_error("rvol: missing header file " + hdr_path.string());
  std::string magic;
  int version = 0;
  hdr >> magic >> version;
  if (magic != "rvol" || version != 1)
    throw std::runtime_error("rvol: bad header magic/version in " + hdr_path.string());
  std::string key;
  std::int64_t H = 0, W = 0, K = 0;
  hdr >> key >> H >> W >> K;
  if (key != "dims" || H <= 0 || W <= 0 || K <= 0)
    throw std::runtime_error("rvol: bad dims line in " + hdr_path.string());

  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("rvol: cannot open " + path.string());
  Volume v = Volume::zeros(K, H, W);
  in.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(v.data.numel() * 4));
  if (in.gcount() != static_cast<std::streamsize>(v.data.numel() * 4))
    throw std::runtime_error("rvol: truncated data file " + path.string());
  return v;
}

void save_rvol(const Volume& v, const std::filesystem::path& path) {
  std::ofstream hdr(path.string() + ".hdr");
  if (!hdr) throw std::runtime_error("rvol: cannot write header for " + path.string());
  hdr << "rvol 1\n"
      << "dims " << v.height() << " " << v.width() << " " << v.depth() << "\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("rvol: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(v.data.data()),
            static_cast<std::streamsize>(v.data.numel() * 4));
}

// ---- NIfTI-1 ----

#pragma pack(push, 1)
struct NiftiHeader {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtInt32 = 8;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtFloat64 = 64;

std::vector<char> read_file_maybe_gz(const std::filesystem::path& path, bool gz) {
  if (!gz) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> out;
  char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.insert(out.end(), buf, buf + n);
  bool bad = n < 0;
  gzclose(f);
  if (bad) throw std::runtime_error("gzip read error in " + path.string());
  return out;
}

Volume load_nifti(const std::filesystem::path& path, bool gz) {
  auto bytes = read_file_maybe_gz(path, gz);
  if (bytes.size() < sizeof(NiftiHeader))
    throw std::runtime_error("nifti: file too small (corrupt): " + path.string());
  NiftiHeader h;
  std::memcpy(&h, bytes.data(), sizeof(h));
  if (h.sizeof_hdr != 348 || std::strncmp(h.magic, "n+1", 3) != 0)
    throw std::runtime_error("nifti: bad magic/header in " + path.string());
  if (h.dim[0] < 2 || h.dim[0] > 3)
    throw std::runtime_error("nifti: only 2D/3D volumes supported: " + path.string());
  std::int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[0] == 3 ? h.dim[3] : 1;
  if (nx <= 0 || ny <= 0 || nz <= 0) throw std::runtime_error("nifti: bad dims in " + path.string());

  std::int64_t nvox = nx * ny * nz;
  std::size_t elem;
  switch (h.datatype) {
    case kDtUint8: elem = 1; break;
    case kDtInt16: elem = 2; break;
    case kDtInt32: elem = 4; break;
    case kDtFloat32: elem = 4; break;
    case kDtFloat64: elem = 8; break;
    default:
      throw std::runtime_error("nifti: unsupported datatype " + std::to_string(h.datatype) + " in " +
                               path.string());
  }
  std::size_t off = static_cast<std::size_t>(h.vox_offset);
  if (off < 348) off = 352;
  if (bytes.size() < off + static_cast<std::size_t>(nvox) * elem)
    throw std::runtime_error("nifti: truncated data (corrupt): " + path.string());
  const char* src = bytes.data() + off;

  float slope = h.scl_slope == 0.0f ? 1.0f : h.scl_slope;
  float inter = h.scl_inter;

  // NIfTI stores x fastest; map x->column, y->row, z->slice.
  Volume v = Volume::zeros(nz, ny, nx);
  auto fetch = [&](std::int64_t i) -> float {
    switch (h.datatype) {
      case kDtUint8: return static_cast<float>(reinterpret_cast<const std::uint8_t*>(src)[i]);
      case kDtInt16: { std::int16_t t; std::memcpy(&t, src + i * 2, 2); return static_cast<float>(t); }
      case kDtInt32: { std::int32_t t; std::memcpy(&t, src + i * 4, 4); return static_cast<float>(t); }
      case kDtFloat32: { float t; std::memcpy(&t, src + i * 4, 4); return t; }
      default: { double t; std::memcpy(&t, src + i * 8, 8); return static_cast<float>(t); }
    }
  };
  std::int64_t i = 0;
  for (std::int64_t z = 0; z < nz; ++z)
    for (std::int64_t y = 0; y < ny; ++y)
      for (std::int64_t x = 0; x < nx; ++x, ++i)
        v.data.at(z, y, x) = fetch(i) * slope + inter;
  return v;
}

void save_nifti(const Volume& v, const std::filesystem::path& path, bool gz) {
  NiftiHeader h;
  std::memset(&h, 0, sizeof(h));
  h.sizeof_hdr = 348;
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(v.width());
  h.dim[2] = static_cast<std::int16_t>(v.height());
  h.dim[3] = static_cast<std::int16_t>(v.depth());
  h.dim[4] = h.dim[5] = h.dim[6] = h.dim[7] = 1;
  h.datatype = kDtFloat32;
  h.bitpix = 32;
  for (int i = 0; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // mm
  std::memcpy(h.magic, "n+1", 4);

  std::vector<char> bytes(352 + static_cast<std::size_t>(v.data.numel()) * 4, 0);
  std::memcpy(bytes.data(), &h, sizeof(h));
  char* dst = bytes.data() + 352;
  for (std::int64_t z = 0; z < v.depth(); ++z)
    for (std::int64_t y = 0; y < v.height(); ++y)
      for (std::int64_t x = 0; x < v.width(); ++x) {
        float f = v.data.at(z, y, x);
        std::memcpy(dst, &f, 4);
        dst += 4;
      }

  if (!gz) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("nifti: cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    return;
  }
  gzFile f = gzopen(path.string().c_str(), "wb6");
  if (!f) throw std::runtime_error("nifti: cannot write " + path.string());
  int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  gzclose(f);
  if (n != static_cast<int>(bytes.size()))
    throw std::runtime_error("nifti: gzip write failed for " + path.string());
}

}  // namespace

Volume load_volume(const std::filesystem::path& path) {
  std::string s = path.string();
  if (ends_with(s, ".rvol")) return load_rvol(path);
  if (ends_with(s, ".nii.gz")) return load_nifti(path, true);
  if (ends_with(s, ".nii")) return load_nifti(path, false);
  throw std::runtime_error("load_volume: unsupported format: " + s + " (expect .rvol, .nii, .nii.gz)");
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  std::string s = path.string();
  if (ends_with(s, ".rvol")) return save_rvol(v, path);
  if (ends_with(s, ".nii.gz")) return save_nifti(v, path, true);
  if (ends_with(s, ".nii")) return save_nifti(v, path, false);
  throw std::runtime_error("save_volume: unsupported format: " + s + " (expect .rvol, .nii, .nii.gz)");
}

}  // namespace carotidseg
