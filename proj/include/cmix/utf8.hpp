#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cmix {

// Length of the UTF-8 sequence starting at byte b, or 0 if b cannot start one.
inline int utf8_seq_len(unsigned char b) {
    if (b < 0x80) return 1;
    if ((b & 0xE0) == 0xC0) return 2;
    if ((b & 0xF0) == 0xE0) return 3;
    if ((b & 0xF8) == 0xF0) return 4;
    return 0;
}

// Splits text into codepoint-sized chunks. Bytes that do not form a valid
// UTF-8 sequence are emitted as single-byte chunks, so the concatenation of
// the chunks always equals the input.
inline std::vector<std::string> utf8_chars(std::string_view s) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < s.size()) {
        int n = utf8_seq_len(static_cast<unsigned char>(s[i]));
        if (n == 0 || i + n > s.size()) {
            out.emplace_back(1, s[i]);
            ++i;
            continue;
        }
        bool ok = true;
        for (int k = 1; k < n; ++k) {
            if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) { ok = false; break; }
        }
        if (!ok) {
            out.emplace_back(1, s[i]);
            ++i;
        } else {
            out.emplace_back(s.substr(i, n));
            i += n;
        }
    }
    return out;
}

inline void utf8_append(std::string& out, uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

// Decodes one codepoint from a chunk produced by utf8_chars(). Single invalid
// bytes decode to their byte value.
inline uint32_t utf8_decode(std::string_view chunk) {
    unsigned char b0 = static_cast<unsigned char>(chunk[0]);
    int n = utf8_seq_len(b0);
    if (n <= 1 || static_cast<size_t>(n) != chunk.size()) return b0;
    uint32_t cp = b0 & (0x7F >> n);
    for (int k = 1; k < n; ++k) {
        cp = (cp << 6) | (static_cast<unsigned char>(chunk[k]) & 0x3F);
    }
    return cp;
}

// Simple lowercase mapping over the blocks that matter for romanized social
// media text: ASCII, Latin-1, Latin Extended-A, Greek, Cyrillic. Codepoints
// outside these blocks pass through unchanged.
inline uint32_t lower_codepoint(uint32_t cp) {
    if (cp >= 'A' && cp <= 'Z') return cp + 32;
    if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 32;
    // Latin Extended-A: alternating upper/lower pairs.
    if (cp >= 0x100 && cp <= 0x137) return (cp % 2 == 0) ? cp + 1 : cp;
    if (cp >= 0x139 && cp <= 0x148) return (cp % 2 == 1) ? cp + 1 : cp;
    if (cp >= 0x14A && cp <= 0x177) return (cp % 2 == 0) ? cp + 1 : cp;
    if (cp == 0x178) return 0xFF;
    if (cp >= 0x179 && cp <= 0x17E) return (cp % 2 == 1) ? cp + 1 : cp;
    // Greek.
    if (cp == 0x386) return 0x3AC;
    if (cp >= 0x388 && cp <= 0x38A) return cp + 37;
    if (cp == 0x38C) return 0x3CC;
    if (cp == 0x38E || cp == 0x38F) return cp + 63;
    if (cp >= 0x391 && cp <= 0x3A1) return cp + 32;
    if (cp >= 0x3A3 && cp <= 0x3AB) return cp + 32;
    // Cyrillic.
    if (cp >= 0x400 && cp <= 0x40F) return cp + 80;
    if (cp >= 0x410 && cp <= 0x42F) return cp + 32;
    return cp;
}

inline std::string to_lower_utf8(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (const auto& ch : utf8_chars(s)) {
        uint32_t cp = utf8_decode(ch);
        uint32_t lo = lower_codepoint(cp);
        if (lo == cp) {
            out += ch;
        } else {
            utf8_append(out, lo);
        }
    }
    return out;
}

}  // namespace cmix
