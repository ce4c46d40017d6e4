#include "dcp/tensor.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "dcp/errors.h"

namespace dcp {

namespace {
constexpr char kTensorMagic[4] = {'D', 'C', 'P', 'T'};
constexpr std::uint32_t kMaxRank = 16;
}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape_) +
                         " does not match " + std::to_string(data_.size()) +
                         " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on non-scalar tensor " +
                        shape_to_string(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " +
                         shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_) return false;
  return a.data_.size() == b.data_.size() &&
         std::memcmp(a.data_.data(), b.data_.data(),
                     a.data_.size() * sizeof(double)) == 0;
}

namespace le {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32(const std::uint8_t* p) {
  return std::bit_cast<float>(get_u32(p));
}

}  // namespace le

void write_tensor(std::ostream& out, const Tensor& t) {
  std::vector<std::uint8_t> buf;
  buf.reserve(12 + 4 * t.rank() + 4 * t.size());
  buf.insert(buf.end(), std::begin(kTensorMagic), std::end(kTensorMagic));
  le::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) le::put_u32(buf, static_cast<std::uint32_t>(d));
  for (double v : t.data()) le::put_f32(buf, static_cast<float>(v));
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("failed writing DCPT tensor");
}

namespace {

void read_exact(std::istream& in, std::uint8_t* dst, std::size_t n,
                const char* what) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw FormatError(std::string("truncated DCPT tensor while reading ") +
                      what);
  }
}

}  // namespace

Tensor read_tensor(std::istream& in) {
  std::uint8_t head[8];
  read_exact(in, head, 8, "header");
  if (std::memcmp(head, kTensorMagic, 4) != 0) {
    throw FormatError("bad DCPT magic");
  }
  const std::uint32_t rank = le::get_u32(head + 4);
  if (rank > kMaxRank) {
    throw FormatError("implausible DCPT rank " + std::to_string(rank));
  }
  std::vector<std::uint8_t> dims(4 * rank);
  read_exact(in, dims.data(), dims.size(), "dims");
  Shape shape(rank);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = le::get_u32(dims.data() + 4 * i);
    count *= shape[i];
    if (count > (std::uint64_t{1} << 32)) {
      throw FormatError("DCPT tensor too large: " + shape_to_string(shape));
    }
  }
  std::vector<std::uint8_t> payload(4 * count);
  read_exact(in, payload.data(), payload.size(), "payload");
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = le::get_f32(payload.data() + 4 * i);
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  Tensor t = read_tensor(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after DCPT tensor in " + path.string());
  }
  return t;
}

}  // namespace dcp
