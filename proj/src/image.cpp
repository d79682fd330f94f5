#include "osediff/image.hpp"

#include <jpeglib.h>
#include <png.h>
#include <torch/torch.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "osediff/errors.hpp"

namespace osediff {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

Rgb8 to_rgb8(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw DimensionError("expected a [3,H,W] image");
  }
  auto q = ((image.detach().to(torch::kDouble).clamp(-1.0, 1.0) + 1.0) * 127.5)
               .round()
               .clamp(0, 255)
               .to(torch::kUInt8)
               .permute({1, 2, 0})
               .contiguous();
  Rgb8 out;
  out.height = image.size(1);
  out.width = image.size(2);
  out.data.assign(q.data_ptr<uint8_t>(), q.data_ptr<uint8_t>() + q.numel());
  return out;
}

torch::Tensor from_rgb8(const Rgb8& r) {
  auto t = torch::from_blob(const_cast<uint8_t*>(r.data.data()), {r.height, r.width, 3},
                            torch::kUInt8)
               .clone();
  return t.permute({2, 0, 1}).to(torch::kFloat).div(127.5).sub(1.0).contiguous();
}

torch::Tensor quantize(const torch::Tensor& image) {
  return ((image.clamp(-1.0, 1.0) + 1.0) * 127.5).round() / 127.5 - 1.0;
}

// ---------------------------------------------------------------------------
// PNG

namespace {

void png_error_fn(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }
void png_warn_fn(png_structp, png_const_charp) {}

void png_write_fn(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}
void png_flush_fn(png_structp) {}

struct PngReader {
  const std::vector<uint8_t>* bytes;
  size_t pos = 0;
};

void png_read_fn(png_structp png, png_bytep data, png_size_t len) {
  auto* r = static_cast<PngReader*>(png_get_io_ptr(png));
  if (r->pos + len > r->bytes->size()) {
    png_error(png, "truncated stream");
  }
  std::memcpy(data, r->bytes->data() + r->pos, len);
  r->pos += len;
}

}  // namespace

std::vector<uint8_t> encode_png(const Rgb8& r) {
  std::vector<uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn,
                                            png_warn_fn);
  png_infop info = png_create_info_struct(png);
  try {
    png_set_write_fn(png, &out, png_write_fn, png_flush_fn);
    png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height),
                 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int64_t y = 0; y < r.height; ++y) {
      png_write_row(png, const_cast<png_bytep>(r.data.data() + y * r.width * 3));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

Rgb8 decode_png(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw IoError("not a PNG stream");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn,
                                           png_warn_fn);
  png_infop info = png_create_info_struct(png);
  PngReader reader{&bytes, 0};
  Rgb8 out;
  try {
    png_set_read_fn(png, &reader, png_read_fn);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) {
      png_set_strip_16(png);
    }
    if (color == PNG_COLOR_TYPE_PALETTE) {
      png_set_palette_to_rgb(png);
    }
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
      if (depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
      }
      png_set_gray_to_rgb(png);
    }
    if (png_get_valid(png, info, PNG_INFO_tRNS)) {
      png_set_tRNS_to_alpha(png);
    }
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.data.resize(static_cast<size_t>(out.width * out.height * 3));
    for (int64_t y = 0; y < out.height; ++y) {
      png_read_row(png, out.data.data() + y * out.width * 3, nullptr);
    }
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

std::vector<uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const fs::path& path, const std::vector<uint8_t>& bytes) {
  static std::atomic<uint64_t> counter{0};
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("cannot write " + tmp.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw IoError("short write to " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename into " + path.string() + ": " + ec.message());
  }
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  write_file_atomic(path, std::vector<uint8_t>(bytes.begin(), bytes.end()));
}

Rgb8 read_png(const fs::path& path) {
  try {
    return decode_png(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

torch::Tensor load_png(const fs::path& path) { return from_rgb8(read_png(path)); }

void save_png(const fs::path& path, const torch::Tensor& image) {
  write_file_atomic(path, encode_png(to_rgb8(image)));
}

std::vector<fs::path> list_pngs(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    throw IoError("not a directory: " + dir.string());
  }
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// JPEG

namespace {

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace

Rgb8 jpeg_roundtrip(const Rgb8& r, int quality) {
  if (quality < 1 || quality > 100) {
    throw RangeError("JPEG quality must be in [1, 100]");
  }
  unsigned char* buf = nullptr;
  unsigned long size = 0;
  {
    jpeg_compress_struct c{};
    JpegErr err{};
    c.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
      jpeg_destroy_compress(&c);
      std::free(buf);
      throw IoError(std::string("jpeg encode: ") + err.message);
    }
    jpeg_create_compress(&c);
    jpeg_mem_dest(&c, &buf, &size);
    c.image_width = static_cast<JDIMENSION>(r.width);
    c.image_height = static_cast<JDIMENSION>(r.height);
    c.input_components = 3;
    c.in_color_space = JCS_RGB;
    jpeg_set_defaults(&c);
    c.dct_method = JDCT_ISLOW;
    jpeg_set_quality(&c, quality, TRUE);
    jpeg_start_compress(&c, TRUE);
    while (c.next_scanline < c.image_height) {
      JSAMPROW row = const_cast<JSAMPROW>(r.data.data() + c.next_scanline * r.width * 3);
      jpeg_write_scanlines(&c, &row, 1);
    }
    jpeg_finish_compress(&c);
    jpeg_destroy_compress(&c);
  }
  Rgb8 out;
  {
    jpeg_decompress_struct d{};
    JpegErr err{};
    d.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
      jpeg_destroy_decompress(&d);
      std::free(buf);
      throw IoError(std::string("jpeg decode: ") + err.message);
    }
    jpeg_create_decompress(&d);
    jpeg_mem_src(&d, buf, size);
    jpeg_read_header(&d, TRUE);
    d.out_color_space = JCS_RGB;
    d.dct_method = JDCT_ISLOW;
    jpeg_start_decompress(&d);
    out.width = d.output_width;
    out.height = d.output_height;
    out.data.resize(static_cast<size_t>(out.width * out.height * 3));
    while (d.output_scanline < d.output_height) {
      JSAMPROW row = out.data.data() + d.output_scanline * out.width * 3;
      jpeg_read_scanlines(&d, &row, 1);
    }
    jpeg_finish_decompress(&d);
    jpeg_destroy_decompress(&d);
  }
  std::free(buf);
  return out;
}

torch::Tensor resize_bicubic(const torch::Tensor& image, int64_t height, int64_t width) {
  const bool single = image.dim() == 3;
  auto x = single ? image.unsqueeze(0) : image;
  if (x.dim() != 4) {
    throw DimensionError("resize expects [3,H,W] or [B,3,H,W]");
  }
  if (x.size(2) == height && x.size(3) == width) {
    return image.clone();
  }
  auto y = F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBicubic)
                                 .align_corners(false)
                                 .antialias(true));
  return single ? y.squeeze(0) : y;
}

torch::Tensor luma(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw DimensionError("expected a [3,H,W] image");
  }
  auto x = (image.to(torch::kDouble).clamp(-1.0, 1.0) + 1.0) * 0.5;
  return 16.0 + 65.481 * x[0] + 128.553 * x[1] + 24.966 * x[2];
}

}  // namespace osediff
