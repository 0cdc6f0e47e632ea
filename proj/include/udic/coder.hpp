// Range coding with 16-bit cumulative frequency tables.
//
// The coder keeps a 32-bit range and a 33-bit low register with byte-wise
// carry propagation. Streams end with a single flush byte; the decoder checks
// that the stream length matches exactly, so truncation and trailing garbage
// are both reported.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace udic::coder {

inline constexpr int kPrecisionBits = 16;
inline constexpr std::uint32_t kTotal = 1u << kPrecisionBits;

class CodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Quantized distribution over the integers [min_symbol, min_symbol + n) plus
/// an optional escape entry covering everything outside that range.
struct CdfTable {
  std::int32_t min_symbol = 0;
  bool has_escape = false;
  std::vector<std::uint32_t> cumulative;  // entries + 1 values, 0 .. kTotal

  int entries() const { return static_cast<int>(cumulative.size()) - 1; }
  int regular_count() const { return entries() - (has_escape ? 1 : 0); }
  std::int32_t max_symbol() const { return min_symbol + regular_count() - 1; }
  std::uint32_t freq(int index) const { return cumulative[index + 1] - cumulative[index]; }
  bool in_range(std::int32_t value) const { return value >= min_symbol && value <= max_symbol(); }

  /// Exact codelength of `value` under this table, escape payload included.
  double value_bits(std::int32_t value) const;

  bool operator==(const CdfTable&) const = default;
};

/// Builds a table whose counts are proportional to `masses` (the escape mass
/// last, if given), each floored at one count and renormalized to kTotal.
CdfTable build_cdf(std::span<const double> masses, std::int32_t min_symbol, std::optional<double> escape_mass = {});

/// Table for integer indices k of a zero-mean logistic prior with scale `s`
/// discretized into bins of width `interval`, covering |k| <= half_range plus
/// an escape for the tails.
CdfTable logistic_table(double s, double interval, int half_range);

/// Bits spent after an escape symbol on a value `distance` >= 1 outside the
/// table: one direction bit plus an Elias-gamma code.
double escape_payload_bits(std::uint64_t distance);

class RangeEncoder {
 public:
  void encode(std::uint32_t cum, std::uint32_t freq);
  void encode_bit(bool bit);
  /// Writes the value through `table`, escaping out-of-range values. Throws
  /// CodingError if the value is out of range and the table has no escape.
  void encode_value(const CdfTable& table, std::int32_t value);
  std::vector<std::uint8_t> finish();

 private:
  void shift_low();

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  bool phantom_ = true;
  bool finished_ = false;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);

  /// Returns the table entry index of the next symbol.
  int decode_index(const CdfTable& table);
  bool decode_bit();
  std::int32_t decode_value(const CdfTable& table);
  /// Throws CodingError unless exactly the whole stream was consumed and its
  /// final byte is the one the encoder emits.
  void finish() const;

 private:
  std::uint8_t next_byte();
  void normalize();

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::uint64_t shifts_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t low_ = 0;  // encoder's low register modulo 2^32
  std::uint32_t range_ = 0xFFFFFFFFu;
};

std::vector<std::uint8_t> range_encode(std::span<const std::int32_t> values, const CdfTable& table);
std::vector<std::int32_t> range_decode(std::span<const std::uint8_t> bytes, const CdfTable& table, std::size_t count);

/// Sum of -log2(count / kTotal) over the values (escape payloads included).
double ideal_bits(std::span<const std::int32_t> values, const CdfTable& table);

}  // namespace udic::coder
