#include "dapnet/image_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>

#include "dapnet/errors.hpp"

namespace dapnet {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  return FilePtr(std::fopen(path.c_str(), mode));
}

// libpng reports errors by longjmp; the message is parked here for the caller to rethrow.
thread_local std::string g_png_error;

[[noreturn]] void png_error_handler(png_structp png, png_const_charp msg) {
  g_png_error = msg;
  png_longjmp(png, 1);
}
void png_warning_handler(png_structp, png_const_charp) {}

class PngReader {
 public:
  explicit PngReader(const std::filesystem::path& path) : path_(path), file_(open_file(path, "rb")) {
    if (!file_) throw DataError("cannot open image: " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, file_.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
      throw DataError("unreadable image header (not a PNG): " + path.string());
    }
    png_ = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler,
                                  png_warning_handler);
    info_ = png_create_info_struct(png_);
    png_init_io(png_, file_.get());
    png_set_sig_bytes(png_, 8);
  }
  ~PngReader() { png_destroy_read_struct(&png_, &info_, nullptr); }
  PngReader(const PngReader&) = delete;
  PngReader& operator=(const PngReader&) = delete;

  PngHeader header() {
    if (setjmp(png_jmpbuf(png_))) {
      throw DataError("unreadable image header: " + path_.string() + ": " + g_png_error);
    }
    png_read_info(png_, info_);
    return {static_cast<int>(png_get_image_height(png_, info_)),
            static_cast<int>(png_get_image_width(png_, info_))};
  }

  Image8 pixels(const PngHeader& hdr) {
    if (setjmp(png_jmpbuf(png_))) {
      throw DataError("failed to decode " + path_.string() + ": " + g_png_error);
    }
    const auto color = png_get_color_type(png_, info_);
    if (png_get_bit_depth(png_, info_) == 16) png_set_strip_16(png_);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png_);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png_, info_) < 8) {
      png_set_expand_gray_1_2_4_to_8(png_);
    }
    if (png_get_valid(png_, info_, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png_);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png_, info_, PNG_INFO_tRNS)) {
      png_set_strip_alpha(png_);
    }
    png_read_update_info(png_, info_);
    const int channels = png_get_channels(png_, info_);
    if (channels != 1 && channels != 3) {
      throw DataError("unsupported channel layout in " + path_.string());
    }
    img_ = Image8(hdr.height, hdr.width, channels);
    rows_.resize(hdr.height);
    for (int y = 0; y < hdr.height; ++y) {
      rows_[y] = img_.data.data() + static_cast<std::size_t>(y) * hdr.width * channels;
    }
    png_read_image(png_, rows_.data());
    png_read_end(png_, nullptr);
    return std::move(img_);
  }

 private:
  std::filesystem::path path_;
  FilePtr file_;
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
  // Members rather than locals so nothing with a destructor lives across setjmp.
  Image8 img_;
  std::vector<png_bytep> rows_;
};

}  // namespace

PngHeader read_png_header(const std::filesystem::path& path) { return PngReader(path).header(); }

Image8 read_png(const std::filesystem::path& path) {
  PngReader reader(path);
  const auto hdr = reader.header();
  return reader.pixels(hdr);
}

void write_png(const Image8& image, const std::filesystem::path& path) {
  if (image.channels != 1 && image.channels != 3) {
    throw DataError("write_png supports 1 or 3 channels, got " + std::to_string(image.channels));
  }
  FilePtr file = open_file(path, "wb");
  if (!file) throw DataError("cannot write image: " + path.string());
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed to encode " + path.string() + ": " + g_png_error);
  }
  {
    png_init_io(png, file.get());
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, image.width, image.height, 8,
                 image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y) {
      png_write_row(png, const_cast<png_bytep>(image.data.data() +
                                               static_cast<std::size_t>(y) * image.width *
                                                   image.channels));
    }
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
}

}  // namespace dapnet
