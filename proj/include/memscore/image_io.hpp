#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "memscore/error.hpp"
#include "memscore/tensor.hpp"

namespace memscore {

enum class ImageFormat { unknown, png, jpeg };

inline ImageFormat sniff_format(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() >= 8 && std::equal(png_sig, png_sig + 8, bytes.begin())) return ImageFormat::png;
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return ImageFormat::jpeg;
  return ImageFormat::unknown;
}

/// 8-bit BGR/BGRA/gray mat to a 3-channel RGB tensor in [0,1]. Alpha is
/// dropped and grayscale is expanded to three identical channels.
inline ImageTensor from_mat(const cv::Mat& m) {
  if (m.empty()) throw DecodeError("empty image");
  cv::Mat u8;
  if (m.depth() == CV_16U) m.convertTo(u8, CV_8U, 1.0 / 257.0);
  else if (m.depth() == CV_8U) u8 = m;
  else throw DecodeError("unsupported pixel depth");
  const int ch = u8.channels();
  if (ch != 1 && ch != 3 && ch != 4) throw DecodeError("unsupported channel count " + std::to_string(ch));
  ImageTensor out(1, 3, static_cast<std::size_t>(u8.rows), static_cast<std::size_t>(u8.cols));
  for (int y = 0; y < u8.rows; ++y) {
    const std::uint8_t* row = u8.ptr<std::uint8_t>(y);
    for (int x = 0; x < u8.cols; ++x) {
      const std::uint8_t* px = row + static_cast<std::ptrdiff_t>(x) * ch;
      const float r = (ch == 1 ? px[0] : px[2]) / 255.0f;
      const float g = (ch == 1 ? px[0] : px[1]) / 255.0f;
      const float b = px[0] / 255.0f;
      out(0, 0, y, x) = r;
      out(0, 1, y, x) = g;
      out(0, 2, y, x) = b;
    }
  }
  return out;
}

/// 3-channel RGB tensor (values clipped to [0,1]) to an 8-bit BGR mat.
inline cv::Mat to_mat(const ImageTensor& img) {
  if (img.c() != 3 && img.c() != 1) throw ShapeError("to_mat expects 1 or 3 channels");
  cv::Mat m(static_cast<int>(img.h()), static_cast<int>(img.w()), CV_8UC3);
  for (std::size_t y = 0; y < img.h(); ++y)
    for (std::size_t x = 0; x < img.w(); ++x) {
      auto q = [&](std::size_t c) {
        const float v = std::clamp(img(0, img.c() == 3 ? c : 0, y, x), 0.0f, 1.0f);
        return static_cast<std::uint8_t>(std::lround(v * 255.0f));
      };
      m.at<cv::Vec3b>(static_cast<int>(y), static_cast<int>(x)) = {q(2), q(1), q(0)};
    }
  return m;
}

/// Decodes PNG or JPEG bytes; anything else is a DecodeError.
inline ImageTensor decode_image(std::span<const std::uint8_t> bytes) {
  if (sniff_format(bytes) == ImageFormat::unknown) throw DecodeError("not a PNG or JPEG image");
  const cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8U, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat m = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DecodeError("corrupt image data");
  return from_mat(m);
}

inline ImageTensor decode_image(const std::string& bytes) {
  return decode_image(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

inline std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_mat(img), out)) throw Error("PNG encoding failed");
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ImageTensor load_image(const std::filesystem::path& path) {
  try {
    return decode_image(read_file(path));
  } catch (const DecodeError& e) {
    throw DecodeError("unreadable image '" + path.string() + "': " + e.what());
  }
}

inline void save_png(const ImageTensor& img, const std::filesystem::path& path) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Rounds every pixel to the nearest 8-bit level, i.e. what a PNG round trip yields.
inline ImageTensor quantize8(const ImageTensor& img) {
  ImageTensor out = img;
  for (auto& v : out.values()) v = std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  return out;
}

}  // namespace memscore
