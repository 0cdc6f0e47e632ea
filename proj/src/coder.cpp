#include "udic/coder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "udic/logistic.hpp"

namespace udic::coder {

namespace {

constexpr std::uint32_t kTop = 1u << 24;
constexpr int kMaxGammaBits = 31;

}  // namespace

double escape_payload_bits(std::uint64_t distance) {
  const int n = std::bit_width(distance) - 1;
  return 1.0 + (n + 1) + n;
}

double CdfTable::value_bits(std::int32_t value) const {
  if (in_range(value)) return -std::log2(static_cast<double>(freq(value - min_symbol)) / kTotal);
  if (!has_escape) throw CodingError("value " + std::to_string(value) + " outside table alphabet");
  const std::int64_t d = value < min_symbol ? std::int64_t{min_symbol} - value : std::int64_t{value} - max_symbol();
  return -std::log2(static_cast<double>(freq(entries() - 1)) / kTotal) + escape_payload_bits(static_cast<std::uint64_t>(d));
}

CdfTable build_cdf(std::span<const double> masses, std::int32_t min_symbol, std::optional<double> escape_mass) {
  std::vector<double> p(masses.begin(), masses.end());
  if (escape_mass) p.push_back(*escape_mass);
  if (p.empty()) throw CodingError("build_cdf: empty alphabet");
  if (p.size() > kTotal) throw CodingError("build_cdf: alphabet larger than the table precision");
  double total = 0;
  for (double m : p) {
    if (!(m >= 0) || !std::isfinite(m)) throw CodingError("build_cdf: masses must be finite and non-negative");
    total += m;
  }
  if (!(total > 0)) throw CodingError("build_cdf: degenerate distribution");

  std::vector<std::int64_t> counts(p.size());
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    counts[i] = std::max<std::int64_t>(1, std::llround(p[i] / total * kTotal));
    sum += counts[i];
  }
  // Settle the rounding difference on the largest entries; ties resolve to
  // the lowest index so the table is a pure function of the masses.
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  std::int64_t diff = static_cast<std::int64_t>(kTotal) - sum;
  if (diff > 0) {
    counts[order.front()] += diff;
  } else {
    while (diff < 0) {
      bool moved = false;
      for (std::size_t idx : order) {
        if (diff == 0) break;
        const std::int64_t take = std::min<std::int64_t>(-diff, std::max<std::int64_t>(0, (counts[idx] - 1) / 2));
        if (take > 0) {
          counts[idx] -= take;
          diff += take;
          moved = true;
        }
      }
      if (!moved) {
        for (std::size_t idx : order) {
          if (diff == 0) break;
          if (counts[idx] > 1) {
            --counts[idx];
            ++diff;
            moved = true;
          }
        }
      }
      if (!moved) throw CodingError("build_cdf: cannot normalize table");
    }
  }

  CdfTable t;
  t.min_symbol = min_symbol;
  t.has_escape = escape_mass.has_value();
  t.cumulative.resize(p.size() + 1, 0);
  for (std::size_t i = 0; i < p.size(); ++i) t.cumulative[i + 1] = t.cumulative[i] + static_cast<std::uint32_t>(counts[i]);
  return t;
}

CdfTable logistic_table(double s, double interval, int half_range) {
  if (!(s > 0)) throw CodingError("logistic_table: scale must be positive");
  if (!(interval > 0)) throw CodingError("logistic_table: interval must be positive");
  if (half_range < 0) throw CodingError("logistic_table: negative range");
  std::vector<double> masses;
  masses.reserve(2 * half_range + 1);
  for (int k = -half_range; k <= half_range; ++k) masses.push_back(logistic::bin_mass(k * interval, interval, 0.0, s));
  const double edge = (half_range + 0.5) * interval;
  const double tail = 2.0 * logistic::sigmoid(-edge / s);
  return build_cdf(masses, -half_range, tail);
}

// ---------------------------------------------------------------- encoder

void RangeEncoder::shift_low() {
  if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    const auto carry = static_cast<std::uint8_t>(low_ >> 32);
    std::uint8_t temp = cache_;
    do {
      if (phantom_) {
        phantom_ = false;
      } else {
        out_.push_back(static_cast<std::uint8_t>(temp + carry));
      }
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<std::uint8_t>(low_ >> 24);
  }
  ++cache_size_;
  low_ = (low_ & 0x00FFFFFFu) << 8;
}

void RangeEncoder::encode(std::uint32_t cum, std::uint32_t freq) {
  if (finished_) throw CodingError("encode after finish");
  if (freq == 0 || cum + freq > kTotal) throw CodingError("encode: invalid frequency interval");
  const std::uint32_t r = range_ >> kPrecisionBits;
  low_ += static_cast<std::uint64_t>(r) * cum;
  range_ = r * freq;
  while (range_ < kTop) {
    range_ <<= 8;
    shift_low();
  }
}

void RangeEncoder::encode_bit(bool bit) { encode(bit ? kTotal / 2 : 0, kTotal / 2); }

void RangeEncoder::encode_value(const CdfTable& table, std::int32_t value) {
  if (table.in_range(value)) {
    const int idx = value - table.min_symbol;
    encode(table.cumulative[idx], table.freq(idx));
    return;
  }
  if (!table.has_escape)
    throw CodingError("symbol " + std::to_string(value) + " outside alphabet [" + std::to_string(table.min_symbol) +
                      ", " + std::to_string(table.max_symbol()) + "]");
  const int esc = table.entries() - 1;
  encode(table.cumulative[esc], table.freq(esc));
  const bool above = value > table.max_symbol();
  const auto d = static_cast<std::uint64_t>(above ? std::int64_t{value} - table.max_symbol()
                                                  : std::int64_t{table.min_symbol} - value);
  encode_bit(above);
  const int n = std::bit_width(d) - 1;
  for (int i = 0; i < n; ++i) encode_bit(true);
  encode_bit(false);
  for (int i = n - 1; i >= 0; --i) encode_bit(((d >> i) & 1u) != 0);
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  if (finished_) throw CodingError("finish called twice");
  finished_ = true;
  // Any value in [low, low + range) identifies the stream; pick the one with
  // a single significant byte. range >= 2^24 guarantees it exists.
  low_ = (low_ + 0xFFFFFFu) & ~std::uint64_t{0xFFFFFFu};
  shift_low();
  shift_low();
  return std::move(out_);
}

// ---------------------------------------------------------------- decoder

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
  if (bytes_.empty()) throw CodingError("range stream is empty");
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

std::uint8_t RangeDecoder::next_byte() {
  const std::uint8_t b = pos_ < bytes_.size() ? bytes_[pos_] : 0;
  ++pos_;
  return b;
}

void RangeDecoder::normalize() {
  while (range_ < kTop) {
    code_ = (code_ << 8) | next_byte();
    low_ <<= 8;
    range_ <<= 8;
    ++shifts_;
    if (shifts_ + 1 > bytes_.size()) throw CodingError("range stream truncated");
  }
}

int RangeDecoder::decode_index(const CdfTable& table) {
  const std::uint32_t r = range_ >> kPrecisionBits;
  const std::uint32_t target = code_ / r;
  if (target >= kTotal) throw CodingError("corrupt range stream");
  const auto it = std::upper_bound(table.cumulative.begin(), table.cumulative.end(), target);
  const int idx = static_cast<int>(it - table.cumulative.begin()) - 1;
  code_ -= r * table.cumulative[idx];
  low_ += r * table.cumulative[idx];
  range_ = r * table.freq(idx);
  normalize();
  return idx;
}

bool RangeDecoder::decode_bit() {
  const std::uint32_t r = range_ >> kPrecisionBits;
  const std::uint32_t target = code_ / r;
  if (target >= kTotal) throw CodingError("corrupt range stream");
  const bool bit = target >= kTotal / 2;
  code_ -= r * (bit ? kTotal / 2 : 0);
  low_ += r * (bit ? kTotal / 2 : 0);
  range_ = r * (kTotal / 2);
  normalize();
  return bit;
}

std::int32_t RangeDecoder::decode_value(const CdfTable& table) {
  const int idx = decode_index(table);
  if (!table.has_escape || idx < table.regular_count()) return table.min_symbol + idx;
  const bool above = decode_bit();
  int n = 0;
  while (decode_bit()) {
    if (++n > kMaxGammaBits) throw CodingError("corrupt escape code");
  }
  std::uint64_t d = 1;
  for (int i = 0; i < n; ++i) d = (d << 1) | (decode_bit() ? 1u : 0u);
  const std::int64_t v = above ? std::int64_t{table.max_symbol()} + static_cast<std::int64_t>(d)
                               : std::int64_t{table.min_symbol} - static_cast<std::int64_t>(d);
  if (v < INT32_MIN || v > INT32_MAX) throw CodingError("escaped value out of range");
  return static_cast<std::int32_t>(v);
}

void RangeDecoder::finish() const {
  if (bytes_.size() != shifts_ + 1)
    throw CodingError("range stream length mismatch: " + std::to_string(bytes_.size()) + " bytes, expected " +
                      std::to_string(shifts_ + 1));
  // The encoder flushes the smallest multiple of 2^24 not below low; any
  // other final byte is a corrupt stream even if it decodes.
  if (static_cast<std::uint32_t>(code_ + low_) != ((low_ + 0xFFFFFFu) & 0xFF000000u))
    throw CodingError("range stream has a non-canonical final byte");
}

std::vector<std::uint8_t> range_encode(std::span<const std::int32_t> values, const CdfTable& table) {
  RangeEncoder enc;
  for (std::int32_t v : values) enc.encode_value(table, v);
  return enc.finish();
}

std::vector<std::int32_t> range_decode(std::span<const std::uint8_t> bytes, const CdfTable& table, std::size_t count) {
  RangeDecoder dec(bytes);
  std::vector<std::int32_t> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(dec.decode_value(table));
  dec.finish();
  return out;
}

double ideal_bits(std::span<const std::int32_t> values, const CdfTable& table) {
  double bits = 0;
  for (std::int32_t v : values) bits += table.value_bits(v);
  return bits;
}

}  // namespace udic::coder
