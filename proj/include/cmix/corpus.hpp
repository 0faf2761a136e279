#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cmix/error.hpp"

namespace cmix {

// Word-level tagset: English, Hindi, Universal, Username, Hashtag, url,
// Named Entity. Closed set; parsing anything else is an error.
enum class Label : int { En = 0, Hi, Univ, User, Hash, U, NE };

constexpr int kNumLabels = 7;

inline const char* label_name(Label l) {
    static const char* names[kNumLabels] = {"En", "Hi", "Univ", "User", "Hash", "U", "NE"};
    return names[static_cast<int>(l)];
}

inline std::optional<Label> try_parse_label(std::string_view s) {
    for (int i = 0; i < kNumLabels; ++i) {
        if (s == label_name(static_cast<Label>(i))) return static_cast<Label>(i);
    }
    return std::nullopt;
}

inline Label parse_label(std::string_view s) {
    auto l = try_parse_label(s);
    if (!l) throw Error("UnknownLabel", "not a label: '" + std::string(s) + "'");
    return *l;
}

// Placeholder surface forms substituted for Username/Hashtag/url tokens.
inline constexpr std::string_view kUserPlaceholder = "<user>";
inline constexpr std::string_view kHashPlaceholder = "<hash>";
inline constexpr std::string_view kUrlPlaceholder = "<url>";

struct LabeledSentence {
    std::vector<std::string> words;
    std::vector<Label> labels;

    bool operator==(const LabeledSentence&) const = default;
};

inline void validate_sentence(const LabeledSentence& s) {
    if (s.words.empty() || s.words.size() != s.labels.size()) {
        throw Error("InvalidSentence", "words/labels length mismatch or empty sentence");
    }
    for (const auto& w : s.words) {
        if (w.empty()) throw Error("InvalidSentence", "empty word");
        for (char c : w) {
            if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') {
                throw Error("InvalidSentence", "word contains whitespace: '" + w + "'");
            }
        }
    }
}

// A corpus is either labeled (sentences with per-word tags) or raw
// (pretraining text, one sentence per line); never both.
struct Corpus {
    std::vector<LabeledSentence> labeled;
    std::vector<std::string> raw;
    std::string provenance;

    bool is_labeled() const { return raw.empty(); }

    bool operator==(const Corpus& o) const {
        return labeled == o.labeled && raw == o.raw;
    }
};

struct LabelDistribution {
    std::array<int64_t, kNumLabels> counts{};

    int64_t total() const {
        int64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }
    int64_t operator[](Label l) const { return counts[static_cast<int>(l)]; }
};

// Whitespace tokenization; preserves all non-whitespace bytes verbatim.
inline std::vector<std::string> tokenize_tweet(std::string_view text) {
    std::vector<std::string> words;
    size_t i = 0;
    auto is_ws = [](char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
    };
    while (i < text.size()) {
        while (i < text.size() && is_ws(text[i])) ++i;
        size_t start = i;
        while (i < text.size() && !is_ws(text[i])) ++i;
        if (i > start) words.emplace_back(text.substr(start, i - start));
    }
    return words;
}

// Replaces User/Hash/U words by their placeholders; everything else is kept.
// Idempotent.
inline LabeledSentence normalize_sentence(const LabeledSentence& s) {
    LabeledSentence out = s;
    for (size_t i = 0; i < out.words.size(); ++i) {
        switch (out.labels[i]) {
            case Label::User: out.words[i] = kUserPlaceholder; break;
            case Label::Hash: out.words[i] = kHashPlaceholder; break;
            case Label::U:    out.words[i] = kUrlPlaceholder; break;
            default: break;
        }
    }
    return out;
}

inline Corpus normalize_corpus(const Corpus& c) {
    Corpus out = c;
    for (auto& s : out.labeled) s = normalize_sentence(s);
    return out;
}

// CoNLL-style TSV: one "word<TAB>label" per line, sentences separated by one
// blank line, trailing newline required.
inline Corpus parse_labeled_corpus(std::istream& in, const std::string& origin) {
    Corpus corpus;
    corpus.provenance = origin;
    LabeledSentence current;
    std::string line;
    int line_no = 0;
    bool pending = false;  // current sentence has words not yet flushed
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            if (!pending) {
                throw Error("EmptySentenceBlock",
                            origin + ":" + std::to_string(line_no) + ": blank line without a preceding sentence");
            }
            validate_sentence(current);
            corpus.labeled.push_back(std::move(current));
            current = {};
            pending = false;
            continue;
        }
        size_t tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || line.find('\t', tab + 1) != std::string::npos) {
            throw Error("MalformedLine",
                        origin + ":" + std::to_string(line_no) + ": expected 'word<TAB>label', got '" + line + "'");
        }
        std::string word = line.substr(0, tab);
        std::string tag = line.substr(tab + 1);
        auto label = try_parse_label(tag);
        if (!label) {
            throw Error("UnknownLabel",
                        origin + ":" + std::to_string(line_no) + ": '" + tag + "'");
        }
        current.words.push_back(std::move(word));
        current.labels.push_back(*label);
        pending = true;
    }
    if (pending) {
        validate_sentence(current);
        corpus.labeled.push_back(std::move(current));
    }
    return corpus;
}

inline Corpus read_labeled_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("FileNotFound", path);
    return parse_labeled_corpus(in, path);
}

inline void write_labeled_corpus(const Corpus& c, std::ostream& out) {
    if (!c.is_labeled()) throw Error("UnlabeledCorpus", "cannot write a raw corpus in TSV form");
    for (const auto& s : c.labeled) {
        validate_sentence(s);
        for (size_t i = 0; i < s.words.size(); ++i) {
            out << s.words[i] << '\t' << label_name(s.labels[i]) << '\n';
        }
        out << '\n';
    }
}

inline void write_labeled_corpus(const Corpus& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("FileWriteFailed", path);
    write_labeled_corpus(c, out);
}

// Raw pretraining corpus: one sentence per line, UTF-8.
inline Corpus read_raw_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("FileNotFound", path);
    Corpus corpus;
    corpus.provenance = path;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) corpus.raw.push_back(line);
    }
    if (!corpus.raw.empty()) corpus.labeled.clear();
    return corpus;
}

inline void write_raw_corpus(const Corpus& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("FileWriteFailed", path);
    for (const auto& s : c.raw) out << s << '\n';
}

inline LabelDistribution label_distribution(const Corpus& c) {
    if (!c.is_labeled()) throw Error("UnlabeledCorpus", "label_distribution needs a labeled corpus");
    LabelDistribution d;
    for (const auto& s : c.labeled) {
        for (Label l : s.labels) ++d.counts[static_cast<int>(l)];
    }
    return d;
}

// Markdown table with per-label train/test word counts, rows ordered as in
// published tag-distribution tables (En, Hi, Univ, Hash, U, User, NE).
inline std::string render_distribution(const LabelDistribution& train, const LabelDistribution& test) {
    static const Label order[kNumLabels] = {Label::En, Label::Hi, Label::Univ, Label::Hash,
                                            Label::U, Label::User, Label::NE};
    static const char* pretty[kNumLabels] = {"English", "Hindi", "Universal", "Hashtags",
                                             "URLs", "Usernames", "Named Entities"};
    std::ostringstream out;
    out << "| Label | # Train words | # Test words |\n";
    out << "|---|---:|---:|\n";
    for (int i = 0; i < kNumLabels; ++i) {
        out << "| " << pretty[i] << " | " << train[order[i]] << " | " << test[order[i]] << " |\n";
    }
    return out.str();
}

}  // namespace cmix
