#include <algorithm>
#include <csetjmp>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "deepwaste/errors.hpp"
#include "deepwaste/imaging.hpp"

namespace deepwaste {

std::string_view format_name(ImageFormat format) { return format == ImageFormat::kPng ? "png" : "jpeg"; }

std::optional<ImageFormat> sniff_format(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPngMagic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngMagic, 8) == 0) return ImageFormat::kPng;
  if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) return ImageFormat::kJpeg;
  return std::nullopt;
}

namespace {

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

// libpng's simplified reader stops after the last IDAT row, so a stream cut
// inside the trailing chunks decodes silently. Walk the chunk list first.
void require_complete_png(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 8;
  while (pos + 8 <= bytes.size()) {
    const std::uint64_t length = be32(bytes.data() + pos);
    const bool end = std::memcmp(bytes.data() + pos + 4, "IEND", 4) == 0;
    pos += 12 + length;
    if (pos > bytes.size()) break;
    if (end) return;
  }
  throw DecodeError("png: truncated stream (no complete IEND chunk)");
}

ImageRGB8 decode_png(std::span<const std::uint8_t> bytes) {
  require_complete_png(bytes);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DecodeError("png: " + msg);
  }
  // read as RGBA and drop alpha ourselves; asking for RGB would composite
  image.format = PNG_FORMAT_RGBA;
  if (image.width == 0 || image.height == 0) {
    png_image_free(&image);
    throw DecodeError("png: empty image");
  }
  std::vector<std::uint8_t> rgba(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgba.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DecodeError("png: " + msg);
  }
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
  std::vector<std::uint8_t> pixels(n * 3);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(rgba.data() + i * 4, 3, pixels.data() + i * 3);
  return ImageRGB8(image.width, image.height, std::move(pixels));
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

[[noreturn]] void jpeg_fail(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

// libjpeg reports a truncated stream as a warning and pads with grey; treat
// every warning as fatal so partial images never come back.
void jpeg_warn(j_common_ptr cinfo, int level) {
  if (level < 0) jpeg_fail(cinfo);
}

ImageRGB8 decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  err.mgr.emit_message = jpeg_warn;
  err.message[0] = '\0';
  // Everything touched after setjmp and read after longjmp lives outside this frame.
  auto pixels = std::make_unique<std::vector<std::uint8_t>>();
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DecodeError(std::string("jpeg: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  if (cinfo.jpeg_color_space == JCS_CMYK || cinfo.jpeg_color_space == JCS_YCCK) {
    std::strcpy(err.message, "CMYK images are not supported");
    std::longjmp(err.jump, 1);
  }
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const std::size_t width = cinfo.output_width, height = cinfo.output_height;
  pixels->resize(width * height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels->data() + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return ImageRGB8(width, height, std::move(*pixels));
}

}  // namespace

ImageRGB8 decode(std::span<const std::uint8_t> bytes, ImageFormat format) {
  const auto sniffed = sniff_format(bytes);
  if (sniffed != format) {
    throw DecodeError("data is not a " + std::string(format_name(format)) + " stream");
  }
  return format == ImageFormat::kPng ? decode_png(bytes) : decode_jpeg(bytes);
}

ImageRGB8 decode(std::span<const std::uint8_t> bytes) {
  const auto format = sniff_format(bytes);
  if (!format) throw DecodeError("unrecognized image data (expected PNG or JPEG)");
  return decode(bytes, *format);
}

ImageRGB8 decode(std::string_view bytes) {
  return decode(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

std::vector<std::uint8_t> encode_png(const ImageRGB8& img) {
  if (img.empty()) throw InvalidArgument("encode_png: empty image");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.raw(), 0, nullptr)) {
    throw Error(std::string("png encode: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.raw(), 0, nullptr)) {
    throw Error(std::string("png encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_jpeg(const ImageRGB8& img, int quality) {
  if (img.empty()) throw InvalidArgument("encode_jpeg: empty image");
  jpeg_compress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  struct Dest {
    unsigned char* buffer = nullptr;
    unsigned long size = 0;
  };
  // heap-held for the same setjmp reason as in decode_jpeg
  auto dest = std::make_unique<Dest>();
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(dest->buffer);
    throw Error(std::string("jpeg encode: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &dest->buffer, &dest->size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width());
  cinfo.image_height = static_cast<JDIMENSION>(img.height());
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, std::clamp(quality, 1, 100), TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<std::uint8_t*>(img.raw()) + static_cast<std::size_t>(cinfo.next_scanline) * img.width() * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> out(dest->buffer, dest->buffer + dest->size);
  jpeg_destroy_compress(&cinfo);
  std::free(dest->buffer);
  return out;
}

}  // namespace deepwaste
