#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cmix/corpus.hpp"
#include "cmix/error.hpp"
#include "cmix/utf8.hpp"

namespace cmix {

enum class Scheme { BPE, BLBPE, WordPiece };

inline const char* scheme_name(Scheme s) {
    switch (s) {
        case Scheme::BPE: return "BPE";
        case Scheme::BLBPE: return "BLBPE";
        case Scheme::WordPiece: return "WordPiece";
    }
    return "?";
}

inline Scheme parse_scheme(std::string_view s) {
    if (s == "BPE" || s == "bpe") return Scheme::BPE;
    if (s == "BLBPE" || s == "blbpe") return Scheme::BLBPE;
    if (s == "WordPiece" || s == "wordpiece") return Scheme::WordPiece;
    throw Error("UnknownScheme", std::string(s));
}

// Special units occupy the first five ids in this order.
constexpr int kPadId = 0;
constexpr int kUnkId = 1;
constexpr int kClsId = 2;
constexpr int kSepId = 3;
constexpr int kMaskId = 4;
constexpr int kNumSpecials = 5;

inline const std::array<std::string, kNumSpecials>& special_tokens() {
    static const std::array<std::string, kNumSpecials> t = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    return t;
}

// End-of-word marker attached to each word's final character in BPE.
inline constexpr std::string_view kEowMarker = "</w>";
// WordPiece continuation prefix.
inline constexpr std::string_view kWpPrefix = "##";

// ---------------------------------------------------------------------------
// Byte-level rendering. Every byte maps to a distinct printable codepoint so
// vocabulary files stay valid UTF-8: printable bytes (0x21-0x7E, 0xA1-0xAC,
// 0xAE-0xFF) render as themselves, the rest are remapped to U+0100 upward in
// byte order. The map is bijective over all 256 values.
// ---------------------------------------------------------------------------
namespace bytemap {

inline const std::array<std::string, 256>& byte_to_char() {
    static const std::array<std::string, 256> table = [] {
        std::array<std::string, 256> t;
        uint32_t next = 256;
        for (int b = 0; b < 256; ++b) {
            bool printable = (b >= 0x21 && b <= 0x7E) || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF);
            std::string s;
            utf8_append(s, printable ? static_cast<uint32_t>(b) : next++);
            t[b] = s;
        }
        return t;
    }();
    return table;
}

inline const std::map<std::string, uint8_t>& char_to_byte() {
    static const std::map<std::string, uint8_t> inv = [] {
        std::map<std::string, uint8_t> m;
        const auto& fwd = byte_to_char();
        for (int b = 0; b < 256; ++b) m[fwd[b]] = static_cast<uint8_t>(b);
        return m;
    }();
    return inv;
}

// Renders a raw byte string through the map.
inline std::string render(std::string_view bytes) {
    std::string out;
    for (unsigned char b : bytes) out += byte_to_char()[b];
    return out;
}

// Inverse of render(); every chunk of a rendered unit maps back to one byte.
inline std::string unrender(std::string_view rendered) {
    std::string out;
    const auto& inv = char_to_byte();
    for (const auto& ch : utf8_chars(rendered)) {
        auto it = inv.find(ch);
        if (it == inv.end()) throw Error("MalformedVocab", "unit contains a non-bytemap character");
        out.push_back(static_cast<char>(it->second));
    }
    return out;
}

}  // namespace bytemap

struct SubwordVocabulary {
    Scheme scheme = Scheme::BPE;
    std::vector<std::string> units;                           // id -> token
    std::unordered_map<std::string, int> unit_ids;            // token -> id
    std::vector<std::pair<std::string, std::string>> merges;  // training order

    int size() const { return static_cast<int>(units.size()); }
    int base_count() const { return size() - kNumSpecials - static_cast<int>(merges.size()); }

    int id_of(const std::string& u) const {
        auto it = unit_ids.find(u);
        return it == unit_ids.end() ? -1 : it->second;
    }

    bool operator==(const SubwordVocabulary& o) const {
        return scheme == o.scheme && units == o.units && merges == o.merges;
    }
};

// Subword ids for one packed sequence plus the bookkeeping the sequence
// layout needs: per-unit source-word index (-1 for specials/pads), segment
// ids, content lengths of both segments and the length budget.
struct Encoding {
    std::vector<int> ids;
    std::vector<int> word_index;
    std::vector<int> segment_ids;
    int seg1_units = 0;  // M
    int seg2_units = 0;  // N
    int max_len = 0;     // T

    int real_len() const {
        int n = 0;
        for (int id : ids) n += (id != kPadId) ? 1 : 0;
        return n;
    }
};

namespace detail {

struct TrainWord {
    std::vector<std::string> units;
    int64_t freq = 0;
};

// Initial decomposition of one word per scheme.
inline std::vector<std::string> initial_units(Scheme scheme, const std::string& word, bool word_initial) {
    std::vector<std::string> units;
    switch (scheme) {
        case Scheme::BPE: {
            auto chars = utf8_chars(word);
            for (size_t i = 0; i < chars.size(); ++i) {
                if (i + 1 == chars.size()) chars[i] += kEowMarker;
                units.push_back(chars[i]);
            }
            break;
        }
        case Scheme::WordPiece: {
            auto chars = utf8_chars(word);
            for (size_t i = 0; i < chars.size(); ++i) {
                units.push_back(i == 0 ? chars[i] : std::string(kWpPrefix) + chars[i]);
            }
            break;
        }
        case Scheme::BLBPE: {
            std::string bytes = word_initial ? word : " " + word;
            for (unsigned char b : bytes) units.push_back(bytemap::byte_to_char()[b]);
            break;
        }
    }
    return units;
}

// Word (BPE/WordPiece) or pre-token (BLBPE: non-initial words carry a space
// prefix) frequencies of a corpus. Ordered map for deterministic iteration.
inline std::map<std::string, int64_t> train_tokens(Scheme scheme, const Corpus& corpus) {
    std::map<std::string, int64_t> freq;
    auto add_sentence = [&](const std::vector<std::string>& words) {
        for (size_t i = 0; i < words.size(); ++i) {
            if (scheme == Scheme::BLBPE && i > 0) {
                ++freq[" " + words[i]];
            } else {
                ++freq[words[i]];
            }
        }
    };
    if (corpus.is_labeled()) {
        for (const auto& s : corpus.labeled) add_sentence(s.words);
    } else {
        for (const auto& line : corpus.raw) add_sentence(tokenize_tweet(line));
    }
    return freq;
}

// Merged token string; WordPiece drops the continuation prefix of the right
// part, the byte/char schemes concatenate verbatim.
inline std::string merge_token(Scheme scheme, const std::string& left, const std::string& right) {
    if (scheme == Scheme::WordPiece && right.rfind(kWpPrefix, 0) == 0) {
        return left + right.substr(kWpPrefix.size());
    }
    return left + right;
}

inline void apply_merge(std::vector<std::string>& units, const std::string& left, const std::string& right,
                        const std::string& merged) {
    size_t w = 0;
    for (size_t r = 0; r < units.size();) {
        if (r + 1 < units.size() && units[r] == left && units[r + 1] == right) {
            units[w++] = merged;
            r += 2;
        } else {
            units[w++] = std::move(units[r]);
            r += 1;
        }
    }
    units.resize(w);
}

inline SubwordVocabulary train_vocab(Scheme scheme, const Corpus& corpus, int target_size) {
    auto freqs = train_tokens(scheme, corpus);
    if (freqs.empty()) throw Error("EmptyCorpus", "cannot train a vocabulary on an empty corpus");

    std::vector<TrainWord> words;
    words.reserve(freqs.size());
    std::map<std::string, int> base;  // deterministic (sorted) base ordering
    for (const auto& [token, f] : freqs) {
        TrainWord w;
        w.units = initial_units(scheme, token, /*word_initial=*/true);
        w.freq = f;
        for (const auto& u : w.units) base.emplace(u, 0);
        words.push_back(std::move(w));
    }

    SubwordVocabulary vocab;
    vocab.scheme = scheme;
    for (const auto& s : special_tokens()) {
        vocab.unit_ids.emplace(s, vocab.size());
        vocab.units.push_back(s);
    }
    if (scheme == Scheme::BLBPE) {
        for (int b = 0; b < 256; ++b) {
            const std::string& u = bytemap::byte_to_char()[b];
            vocab.unit_ids.emplace(u, vocab.size());
            vocab.units.push_back(u);
        }
        if (target_size < vocab.size()) {
            throw Error("VocabBudgetTooSmall",
                        "target " + std::to_string(target_size) + " < bytes+specials " + std::to_string(vocab.size()));
        }
    } else {
        for (const auto& [u, _] : base) {
            vocab.unit_ids.emplace(u, vocab.size());
            vocab.units.push_back(u);
        }
        if (target_size <= vocab.size()) {
            throw Error("VocabBudgetTooSmall",
                        "target " + std::to_string(target_size) + " <= base+specials " + std::to_string(vocab.size()));
        }
    }

    // Greedy merge loop; pair counts are rebuilt each iteration, which keeps
    // the selection trivially equal to the from-scratch oracle.
    while (vocab.size() < target_size) {
        std::map<std::pair<std::string, std::string>, int64_t> pair_count;
        std::map<std::string, int64_t> unit_count;
        for (const auto& w : words) {
            for (size_t i = 0; i < w.units.size(); ++i) {
                unit_count[w.units[i]] += w.freq;
                if (i + 1 < w.units.size()) {
                    pair_count[{w.units[i], w.units[i + 1]}] += w.freq;
                }
            }
        }

        const std::pair<std::string, std::string>* best = nullptr;
        int64_t best_count = 0;
        for (const auto& [pair, count] : pair_count) {
            if (count < 2) continue;  // merging singletons only memorizes the corpus
            bool better;
            if (best == nullptr) {
                better = true;
            } else if (scheme == Scheme::WordPiece) {
                // score = count / (count(left) * count(right)); compared via
                // exact integer cross-multiplication, ties fall back to the
                // lexicographically smaller pair (map order).
                auto den = [&](const std::pair<std::string, std::string>& p) {
                    return static_cast<unsigned __int128>(unit_count.at(p.first)) *
                           static_cast<unsigned __int128>(unit_count.at(p.second));
                };
                unsigned __int128 lhs = static_cast<unsigned __int128>(count) * den(*best);
                unsigned __int128 rhs = static_cast<unsigned __int128>(best_count) * den(pair);
                better = lhs > rhs;
            } else {
                better = count > best_count;
            }
            if (better) {
                best = &pair;
                best_count = count;
            }
        }
        if (best == nullptr) break;  // nothing occurs at least twice

        std::string merged = merge_token(scheme, best->first, best->second);
        if (vocab.unit_ids.count(merged)) {
            throw Error("DuplicateUnit", "merge would recreate existing unit '" + merged + "'");
        }
        vocab.merges.push_back(*best);
        vocab.unit_ids.emplace(merged, vocab.size());
        vocab.units.push_back(merged);
        for (auto& w : words) apply_merge(w.units, vocab.merges.back().first, vocab.merges.back().second, merged);
    }
    return vocab;
}

}  // namespace detail

inline SubwordVocabulary train_bpe(const Corpus& corpus, int target_size) {
    return detail::train_vocab(Scheme::BPE, corpus, target_size);
}

inline SubwordVocabulary train_blbpe(const Corpus& corpus, int target_size) {
    return detail::train_vocab(Scheme::BLBPE, corpus, target_size);
}

inline SubwordVocabulary train_wordpiece(const Corpus& corpus, int target_size) {
    return detail::train_vocab(Scheme::WordPiece, corpus, target_size);
}

inline SubwordVocabulary train_vocabulary(Scheme scheme, const Corpus& corpus, int target_size) {
    return detail::train_vocab(scheme, corpus, target_size);
}

namespace detail {

inline std::vector<int> encode_merge_word(const SubwordVocabulary& vocab, const std::string& word,
                                          bool word_initial) {
    std::vector<std::string> units = initial_units(vocab.scheme, word, word_initial);
    for (const auto& [l, r] : vocab.merges) {
        if (units.size() < 2) break;
        apply_merge(units, l, r, merge_token(vocab.scheme, l, r));
    }
    std::vector<int> ids;
    ids.reserve(units.size());
    for (const auto& u : units) {
        int id = vocab.id_of(u);
        ids.push_back(id < 0 ? kUnkId : id);
    }
    return ids;
}

inline std::vector<int> encode_wordpiece_word(const SubwordVocabulary& vocab, const std::string& word) {
    auto chars = utf8_chars(word);
    std::vector<int> ids;
    size_t pos = 0;
    while (pos < chars.size()) {
        std::string prefix = (pos == 0) ? "" : std::string(kWpPrefix);
        int match_id = -1;
        size_t match_len = 0;
        std::string candidate = prefix;
        // Greedy longest match: grow the candidate and remember the last hit.
        for (size_t end = pos; end < chars.size(); ++end) {
            candidate += chars[end];
            int id = vocab.id_of(candidate);
            if (id >= 0) {
                match_id = id;
                match_len = end - pos + 1;
            }
        }
        if (match_id < 0) return {kUnkId};  // unmatchable word collapses to [UNK]
        ids.push_back(match_id);
        pos += match_len;
    }
    return ids;
}

}  // namespace detail

// Encodes a word sequence; returns unit ids plus the index of the source word
// for every unit. Deterministic; [UNK] is the fallback for BPE/WordPiece,
// byte-level encoding is total.
inline std::pair<std::vector<int>, std::vector<int>> encode(const SubwordVocabulary& vocab,
                                                            const std::vector<std::string>& words) {
    std::vector<int> ids;
    std::vector<int> word_index;
    for (size_t w = 0; w < words.size(); ++w) {
        std::vector<int> piece;
        if (vocab.scheme == Scheme::WordPiece) {
            piece = detail::encode_wordpiece_word(vocab, words[w]);
        } else {
            piece = detail::encode_merge_word(vocab, words[w], /*word_initial=*/w == 0);
        }
        for (int id : piece) {
            ids.push_back(id);
            word_index.push_back(static_cast<int>(w));
        }
    }
    return {std::move(ids), std::move(word_index)};
}

// Byte-exact encoding of an arbitrary byte string (byte-level scheme only).
// The string splits into pre-tokens whose concatenation reproduces the input:
// a single space adhering to the following non-whitespace run, standalone
// whitespace bytes on their own.
inline std::vector<int> encode_bytes(const SubwordVocabulary& vocab, std::string_view bytes) {
    if (vocab.scheme != Scheme::BLBPE) {
        throw Error("SchemeMismatch", "encode_bytes requires a byte-level vocabulary");
    }
    auto is_ws = [](unsigned char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
    };
    std::vector<int> ids;
    auto encode_chunk = [&](std::string_view chunk) {
        std::vector<std::string> units;
        for (unsigned char b : chunk) units.push_back(bytemap::byte_to_char()[b]);
        for (const auto& [l, r] : vocab.merges) {
            if (units.size() < 2) break;
            detail::apply_merge(units, l, r, l + r);
        }
        for (const auto& u : units) ids.push_back(vocab.id_of(u));
    };
    size_t i = 0;
    while (i < bytes.size()) {
        unsigned char c = static_cast<unsigned char>(bytes[i]);
        size_t start = i;
        if (c == ' ' && i + 1 < bytes.size() && !is_ws(static_cast<unsigned char>(bytes[i + 1]))) {
            ++i;
            while (i < bytes.size() && !is_ws(static_cast<unsigned char>(bytes[i]))) ++i;
        } else if (!is_ws(c)) {
            while (i < bytes.size() && !is_ws(static_cast<unsigned char>(bytes[i]))) ++i;
        } else {
            ++i;
        }
        encode_chunk(bytes.substr(start, i - start));
    }
    return ids;
}

// Inverse of encode up to the scheme's information loss; exact for the
// byte-level scheme. [UNK] renders as "<unk>", other specials render empty.
inline std::string decode(const SubwordVocabulary& vocab, const std::vector<int>& ids) {
    std::string out;
    bool first_piece = true;
    for (int id : ids) {
        if (id < 0 || id >= vocab.size()) {
            throw Error("IdOutOfRange", std::to_string(id));
        }
        if (id == kUnkId) {
            if (vocab.scheme == Scheme::WordPiece && !first_piece) out += ' ';
            out += "<unk>";
            if (vocab.scheme == Scheme::BPE) out += ' ';
            first_piece = false;
            continue;
        }
        if (id < kNumSpecials) continue;
        const std::string& unit = vocab.units[id];
        switch (vocab.scheme) {
            case Scheme::BPE: {
                std::string piece = unit;
                size_t at = piece.rfind(kEowMarker);
                bool eow = at != std::string::npos && at == piece.size() - kEowMarker.size();
                if (eow) piece = piece.substr(0, at);
                out += piece;
                if (eow) out += ' ';
                break;
            }
            case Scheme::WordPiece: {
                if (unit.rfind(kWpPrefix, 0) == 0) {
                    out += unit.substr(kWpPrefix.size());
                } else {
                    if (!first_piece) out += ' ';
                    out += unit;
                }
                break;
            }
            case Scheme::BLBPE:
                out += bytemap::unrender(unit);
                break;
        }
        first_piece = false;
    }
    if (vocab.scheme == Scheme::BPE && !out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

// ---------------------------------------------------------------------------
// Vocabulary files: header line, one "token<TAB>id" per special/base unit,
// then "#merges" and one "left right" per line in training order. Merged
// units are reconstructed from the merge list on load.
// ---------------------------------------------------------------------------

inline void serialize_vocab(const SubwordVocabulary& v, std::ostream& out) {
    out << "scheme=" << scheme_name(v.scheme) << " version=1\n";
    if (v.scheme == Scheme::BLBPE) {
        out << "# byte units: printable bytes render as themselves; the rest map bijectively to U+0100.. in byte order\n";
    }
    int listed = v.size() - static_cast<int>(v.merges.size());
    for (int id = 0; id < listed; ++id) {
        out << v.units[id] << '\t' << id << '\n';
    }
    out << "#merges\n";
    for (const auto& [l, r] : v.merges) out << l << ' ' << r << '\n';
}

inline void serialize_vocab(const SubwordVocabulary& v, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("FileWriteFailed", path);
    serialize_vocab(v, out);
}

inline std::string vocab_to_string(const SubwordVocabulary& v) {
    std::ostringstream os;
    serialize_vocab(v, os);
    return os.str();
}

inline SubwordVocabulary parse_vocab(std::istream& in, const std::string& origin) {
    std::string line;
    if (!std::getline(in, line)) throw Error("MalformedVocab", origin + ": empty file");
    SubwordVocabulary v;
    {
        std::istringstream hs(line);
        std::string scheme_kv, version_kv;
        hs >> scheme_kv >> version_kv;
        if (scheme_kv.rfind("scheme=", 0) != 0 || version_kv != "version=1") {
            throw Error("MalformedVocab", origin + ": bad header '" + line + "'");
        }
        v.scheme = parse_scheme(scheme_kv.substr(7));
    }
    bool in_merges = false;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line == "#merges") { in_merges = true; continue; }
        if (line[0] == '#') continue;  // commentary (e.g. byte map note)
        const std::string where = origin + ":" + std::to_string(line_no);
        if (!in_merges) {
            size_t tab = line.find('\t');
            if (tab == std::string::npos) throw Error("MalformedVocab", where + ": expected token<TAB>id");
            std::string token = line.substr(0, tab);
            int id = -1;
            try { id = std::stoi(line.substr(tab + 1)); } catch (const std::exception&) {
                throw Error("MalformedVocab", where + ": bad id");
            }
            if (id != v.size()) throw Error("MalformedVocab", where + ": ids must be contiguous from 0");
            if (v.unit_ids.count(token)) throw Error("DuplicateUnit", where + ": '" + token + "'");
            if (id < kNumSpecials && token != special_tokens()[id]) {
                throw Error("MalformedVocab", where + ": id " + std::to_string(id) + " must be " + special_tokens()[id]);
            }
            v.unit_ids.emplace(token, id);
            v.units.push_back(token);
        } else {
            size_t sp = line.find(' ');
            if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size()) {
                throw Error("MalformedVocab", where + ": expected 'left right'");
            }
            std::string left = line.substr(0, sp);
            std::string right = line.substr(sp + 1);
            if (!v.unit_ids.count(left) || !v.unit_ids.count(right)) {
                throw Error("DanglingMerge", where + ": '" + left + " " + right + "'");
            }
            std::string merged = detail::merge_token(v.scheme, left, right);
            if (v.unit_ids.count(merged)) throw Error("DuplicateUnit", where + ": '" + merged + "'");
            v.merges.emplace_back(left, right);
            v.unit_ids.emplace(merged, v.size());
            v.units.push_back(merged);
        }
    }
    if (v.size() < kNumSpecials) throw Error("MalformedVocab", origin + ": missing special tokens");
    return v;
}

inline SubwordVocabulary load_vocab(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("FileNotFound", path);
    return parse_vocab(in, path);
}

// FNV-1a 64-bit over a file's bytes; checkpoints store this to pin the
// vocabulary they were trained with.
inline uint64_t fnv1a_file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("FileNotFound", path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

inline uint64_t fnv1a_hash(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace cmix
