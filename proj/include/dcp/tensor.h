#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace dcp {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major array of 64-bit reals.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Value of a single-element tensor.
  double item() const;

  // Same data under a new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;

  // Bitwise comparison of shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Per-pixel class ids of an H x W grid, row-major.
struct ClassMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  ClassMask() = default;
  ClassMask(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const {
    return labels[y * width + x];
  }
  std::size_t size() const { return labels.size(); }

  friend bool operator==(const ClassMask&, const ClassMask&) = default;
};

// Flat binary "DCPT" format: magic, u32 rank, u32 dims, little-endian f32
// row-major payload. Values are narrowed to f32 on write.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// Little-endian scalar encoding shared by the binary formats.
namespace le {
void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v);
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
std::uint16_t get_u16(const std::uint8_t* p);
std::uint32_t get_u32(const std::uint8_t* p);
float get_f32(const std::uint8_t* p);
}  // namespace le

}  // namespace dcp
