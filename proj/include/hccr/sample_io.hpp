#pragma once

// CASIA-style sample containers (GNT offline images, POT online trajectories)
// and the line-oriented dataset manifest.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hccr/common.hpp"

namespace hccr {

/// Raw class tag as stored in the container: 2 bytes in GNT, 4 in POT.
/// Kept verbatim; the manifest vocabulary maps it to a dense index.
struct LabelCode {
  std::array<std::uint8_t, 4> bytes{};
  std::uint8_t size = 2;

  static LabelCode gb(std::uint16_t code) {
    LabelCode c;
    c.bytes[0] = static_cast<std::uint8_t>(code >> 8);
    c.bytes[1] = static_cast<std::uint8_t>(code & 0xFF);
    c.size = 2;
    return c;
  }

  std::string hex() const {
    static constexpr char digits[] = "0123456789ABCDEF";
    std::string s;
    for (std::size_t i = 0; i < size; ++i) {
      s += digits[bytes[i] >> 4];
      s += digits[bytes[i] & 0xF];
    }
    return s;
  }

  static LabelCode from_hex(const std::string& s) {
    if (s.size() != 4 && s.size() != 8) throw DataError("label code must be 4 or 8 hex digits: '" + s + "'");
    LabelCode c;
    c.size = static_cast<std::uint8_t>(s.size() / 2);
    for (std::size_t i = 0; i < c.size; ++i) {
      unsigned v = 0;
      for (int k = 0; k < 2; ++k) {
        char ch = s[2 * i + k];
        v <<= 4;
        if (ch >= '0' && ch <= '9') v |= static_cast<unsigned>(ch - '0');
        else if (ch >= 'A' && ch <= 'F') v |= static_cast<unsigned>(ch - 'A' + 10);
        else if (ch >= 'a' && ch <= 'f') v |= static_cast<unsigned>(ch - 'a' + 10);
        else throw DataError("bad hex digit in label code '" + s + "'");
      }
      c.bytes[i] = static_cast<std::uint8_t>(v);
    }
    return c;
  }

  friend auto operator<=>(const LabelCode&, const LabelCode&) = default;
};

struct OfflineSample {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> gray;  // row-major, background 255
  LabelCode code;
  int label = -1;  // dense class index; -1 until resolved by a vocabulary
  std::int64_t writer_id = 0;

  std::uint8_t at(int x, int y) const { return gray[static_cast<std::size_t>(y) * width + x]; }
  friend bool operator==(const OfflineSample&, const OfflineSample&) = default;
};

struct TabletPoint {
  std::int16_t x = 0;
  std::int16_t y = 0;
  friend bool operator==(const TabletPoint&, const TabletPoint&) = default;
};

using Stroke = std::vector<TabletPoint>;

struct OnlineSample {
  std::vector<Stroke> strokes;
  LabelCode code{{}, 4};
  int label = -1;
  std::int64_t writer_id = 0;

  friend bool operator==(const OnlineSample&, const OnlineSample&) = default;
};

// ---------------------------------------------------------------------------
// GNT: [u32 record_size][2-byte tag][u16 width][u16 height][width*height bytes]

inline constexpr std::size_t kGntHeaderSize = 10;

inline std::vector<OfflineSample> parse_gnt(std::span<const std::uint8_t> stream) {
  std::vector<OfflineSample> out;
  ByteReader in(stream);
  while (!in.done()) {
    const std::size_t start = in.offset();
    const auto record_size = in.get<std::uint32_t>("GNT record size");
    auto tag = in.take(2, "GNT tag");
    const auto width = in.get<std::uint16_t>("GNT width");
    const auto height = in.get<std::uint16_t>("GNT height");
    if (width == 0 || height == 0) throw DataError("GNT record has zero width or height", start);
    const std::size_t expected = kGntHeaderSize + static_cast<std::size_t>(width) * height;
    if (record_size != expected) {
      throw DataError("GNT record size " + std::to_string(record_size) + " does not match 10 + " +
                          std::to_string(width) + "*" + std::to_string(height),
                      start);
    }
    auto pixels = in.take(static_cast<std::size_t>(width) * height, "GNT pixel block");
    OfflineSample s;
    s.width = width;
    s.height = height;
    s.code.bytes = {tag[0], tag[1], 0, 0};
    s.code.size = 2;
    s.gray.assign(pixels.begin(), pixels.end());
    out.push_back(std::move(s));
  }
  return out;
}

inline void append_gnt(Bytes& out, const OfflineSample& s) {
  if (s.width < 1 || s.height < 1 || s.width > 0xFFFF || s.height > 0xFFFF)
    throw DataError("GNT sample dimensions out of range");
  if (s.gray.size() != static_cast<std::size_t>(s.width) * s.height)
    throw DataError("GNT sample pixel count does not match width*height");
  if (s.code.size != 2) throw DataError("GNT label code must be 2 bytes");
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(kGntHeaderSize + s.gray.size()));
  out.push_back(s.code.bytes[0]);
  out.push_back(s.code.bytes[1]);
  le::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.width));
  le::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.height));
  le::put_bytes(out, s.gray);
}

inline Bytes serialize_gnt(std::span<const OfflineSample> samples) {
  Bytes out;
  for (const auto& s : samples) append_gnt(out, s);
  return out;
}

// ---------------------------------------------------------------------------
// POT: [u16 sample_size][4-byte tag][u16 stroke_count] then (i16 x, i16 y)
// pairs; (-1, 0) terminates a stroke and (-1, -1) the character.

inline constexpr TabletPoint kStrokeEnd{-1, 0};
inline constexpr TabletPoint kCharEnd{-1, -1};

inline std::size_t pot_record_size(const OnlineSample& s) {
  std::size_t points = 0;
  for (const auto& st : s.strokes) points += st.size() + 1;
  return 8 + 4 * (points + 1);
}

inline std::vector<OnlineSample> parse_pot(std::span<const std::uint8_t> stream) {
  std::vector<OnlineSample> out;
  ByteReader in(stream);
  while (!in.done()) {
    const std::size_t start = in.offset();
    const auto sample_size = in.get<std::uint16_t>("POT sample size");
    auto tag = in.take(4, "POT tag");
    const auto stroke_count = in.get<std::uint16_t>("POT stroke count");
    if (sample_size < 12) throw DataError("POT sample size too small", start);
    // Never read past the declared boundary.
    in.require(sample_size - 8, "POT point block");
    const std::size_t end = start + sample_size;

    OnlineSample s;
    s.code.bytes = {tag[0], tag[1], tag[2], tag[3]};
    s.code.size = 4;
    Stroke current;
    bool finished = false;
    while (in.offset() + 4 <= end) {
      const std::size_t at = in.offset();
      TabletPoint p{in.get<std::int16_t>("POT x"), in.get<std::int16_t>("POT y")};
      if (p == kCharEnd) {
        if (!current.empty()) throw DataError("POT character ended inside an open stroke", at);
        finished = true;
        break;
      }
      if (p == kStrokeEnd) {
        if (current.empty()) throw DataError("POT empty stroke", at);
        s.strokes.push_back(std::move(current));
        current.clear();
        continue;
      }
      current.push_back(p);
    }
    if (!finished) throw DataError("POT record missing end-of-character sentinel", start);
    if (in.offset() != end) throw DataError("POT sample size does not match record content", start);
    if (s.strokes.size() != stroke_count) {
      throw DataError("POT stroke count mismatch: declared " + std::to_string(stroke_count) + ", found " +
                          std::to_string(s.strokes.size()),
                      start);
    }
    if (s.strokes.empty()) throw DataError("POT record has no strokes", start);
    out.push_back(std::move(s));
  }
  return out;
}

inline void append_pot(Bytes& out, const OnlineSample& s) {
  if (s.strokes.empty()) throw DataError("POT sample has no strokes");
  if (s.code.size != 4) throw DataError("POT label code must be 4 bytes");
  const std::size_t size = pot_record_size(s);
  if (size > 0xFFFF) throw DataError("POT sample too large for a 16-bit record size");
  if (s.strokes.size() > 0xFFFF) throw DataError("POT sample has too many strokes");
  le::put<std::uint16_t>(out, static_cast<std::uint16_t>(size));
  le::put_bytes(out, std::span<const std::uint8_t>(s.code.bytes.data(), 4));
  le::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.strokes.size()));
  for (const auto& st : s.strokes) {
    if (st.empty()) throw DataError("POT sample has an empty stroke");
    for (const auto& p : st) {
      if (p == kStrokeEnd || p == kCharEnd) throw DataError("POT data point collides with a sentinel");
      le::put<std::int16_t>(out, p.x);
      le::put<std::int16_t>(out, p.y);
    }
    le::put<std::int16_t>(out, kStrokeEnd.x);
    le::put<std::int16_t>(out, kStrokeEnd.y);
  }
  le::put<std::int16_t>(out, kCharEnd.x);
  le::put<std::int16_t>(out, kCharEnd.y);
}

inline Bytes serialize_pot(std::span<const OnlineSample> samples) {
  Bytes out;
  for (const auto& s : samples) append_pot(out, s);
  return out;
}

// ---------------------------------------------------------------------------
// File helpers

inline Bytes read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// Manifest

enum class Split { train, test, adapt };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::adapt: return "adapt";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "adapt") return Split::adapt;
  throw DataError("unknown split tag '" + s + "'");
}

struct ManifestEntry {
  std::string path;
  std::uint64_t offset = 0;  // byte offset of the record inside `path`
  LabelCode code;
  std::int64_t writer_id = 0;
  Split split = Split::train;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// Code -> dense index table. Indices follow insertion order.
class ClassVocabulary {
 public:
  ClassVocabulary() = default;
  explicit ClassVocabulary(std::vector<LabelCode> codes) {
    for (const auto& c : codes) add(c);
  }

  int add(const LabelCode& c) {
    auto [it, inserted] = index_.try_emplace(c, static_cast<int>(codes_.size()));
    if (inserted) codes_.push_back(c);
    return it->second;
  }

  std::optional<int> find(const LabelCode& c) const {
    auto it = index_.find(c);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int index(const LabelCode& c) const {
    auto i = find(c);
    if (!i) throw DataError("label code " + c.hex() + " is not in the class vocabulary");
    return *i;
  }

  const LabelCode& code(int index) const { return codes_.at(static_cast<std::size_t>(index)); }
  int size() const { return static_cast<int>(codes_.size()); }
  const std::vector<LabelCode>& codes() const { return codes_; }

  friend bool operator==(const ClassVocabulary& a, const ClassVocabulary& b) { return a.codes_ == b.codes_; }

 private:
  std::vector<LabelCode> codes_;
  std::map<LabelCode, int> index_;
};

/// Text format, tab-separated:
///   @class<TAB>HEX              vocabulary, in index order
///   path<TAB>offset<TAB>HEX<TAB>writer<TAB>split
/// Lines starting with '#' are comments.
class DatasetManifest {
 public:
  DatasetManifest() = default;
  explicit DatasetManifest(ClassVocabulary vocab) : vocab_(std::move(vocab)) {}

  void add(ManifestEntry e) {
    vocab_.index(e.code);  // rejects unknown codes
    entries_.push_back(std::move(e));
  }

  int label_of(const ManifestEntry& e) const { return vocab_.index(e.code); }

  const ClassVocabulary& vocabulary() const { return vocab_; }
  const std::vector<ManifestEntry>& entries() const { return entries_; }

  std::vector<ManifestEntry> select(Split split) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries_)
      if (e.split == split) out.push_back(e);
    return out;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "# hccr dataset manifest v1\n";
    for (const auto& c : vocab_.codes()) os << "@class\t" << c.hex() << '\n';
    for (const auto& e : entries_) {
      os << e.path << '\t' << e.offset << '\t' << e.code.hex() << '\t' << e.writer_id << '\t' << to_string(e.split)
         << '\n';
    }
    return os.str();
  }

  static DatasetManifest from_text(const std::string& text) {
    DatasetManifest m;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> fields;
      std::size_t start = 0;
      for (;;) {
        auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
      }
      try {
        if (fields[0] == "@class") {
          if (fields.size() != 2) throw DataError("@class takes one field");
          auto code = LabelCode::from_hex(fields[1]);
          if (m.vocab_.find(code)) throw DataError("duplicate class " + fields[1]);
          m.vocab_.add(code);
          continue;
        }
        if (fields.size() != 5) throw DataError("expected 5 tab-separated fields");
        ManifestEntry e;
        e.path = fields[0];
        e.offset = std::stoull(fields[1]);
        e.code = LabelCode::from_hex(fields[2]);
        e.writer_id = std::stoll(fields[3]);
        e.split = parse_split(fields[4]);
        m.add(std::move(e));
      } catch (const DataError& err) {
        throw DataError("manifest line " + std::to_string(line_no) + ": " + err.what());
      } catch (const std::logic_error&) {
        throw DataError("manifest line " + std::to_string(line_no) + ": bad number");
      }
    }
    return m;
  }

  static DatasetManifest load(const std::string& path) {
    auto bytes = read_file(path);
    return from_text(std::string(bytes.begin(), bytes.end()));
  }

  void save(const std::string& path) const {
    auto text = to_text();
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

 private:
  ClassVocabulary vocab_;
  std::vector<ManifestEntry> entries_;
};

/// Group writer ids in first-appearance order.
inline std::vector<std::int64_t> writers_of(std::span<const ManifestEntry> entries) {
  std::vector<std::int64_t> out;
  for (const auto& e : entries)
    if (std::find(out.begin(), out.end(), e.writer_id) == out.end()) out.push_back(e.writer_id);
  return out;
}

}  // namespace hccr
