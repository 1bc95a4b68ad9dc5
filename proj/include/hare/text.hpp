#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <openssl/evp.h>

namespace hare::text {

inline std::string_view trim(std::string_view s) {
    const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
    while (!s.empty() && is_space(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && is_space(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

/// ASCII case-folding. Non-ASCII bytes pass through unchanged.
inline std::string casefold(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline bool contains_folded(std::string_view haystack, std::string_view needle) {
    if (needle.empty()) return true;
    return casefold(haystack).find(casefold(needle)) != std::string::npos;
}

inline bool starts_with(std::string_view s, std::string_view prefix) {
    return s.substr(0, prefix.size()) == prefix;
}

inline std::string capitalize_first(std::string_view s) {
    std::string out(s);
    if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
    return out;
}

inline std::string lowercase_first(std::string_view s) {
    std::string out(s);
    if (!out.empty()) out[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(out[0])));
    return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            parts.emplace_back(s.substr(start));
            return parts;
        }
        parts.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

/// Splits on '\n', dropping a trailing '\r' from every line.
inline std::vector<std::string> lines(std::string_view s) {
    auto out = split(s, '\n');
    for (auto& line : out) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
    }
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

inline bool is_terminal_punct(char c) {
    return c == '.' || c == '!' || c == '?' || c == ',' || c == ';' || c == ':';
}

inline std::string strip_terminal_punct(std::string_view s) {
    s = trim(s);
    while (!s.empty() && is_terminal_punct(s.back())) s.remove_suffix(1);
    return std::string(trim(s));
}

/// Case-fold, strip terminal punctuation and leading articles ("a", "an", "the").
inline std::string normalize_entity(std::string_view s) {
    std::string out = casefold(strip_terminal_punct(s));
    for (const std::string_view article : {"the ", "a ", "an "}) {
        if (starts_with(out, article)) {
            out = std::string(trim(std::string_view(out).substr(article.size())));
            break;
        }
    }
    std::string collapsed;
    bool prev_space = false;
    for (char c : out) {
        const bool sp = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (sp && prev_space) continue;
        collapsed += sp ? ' ' : c;
        prev_space = sp;
    }
    return collapsed;
}

/// Words plus punctuation marks; the prompt-length estimate used for context guards.
inline std::size_t estimate_tokens(std::string_view s) {
    std::size_t count = 0;
    bool in_word = false;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c >= 0x80 || c == '\'') {
            if (!in_word) ++count;
            in_word = true;
        } else {
            in_word = false;
            if (!std::isspace(c)) ++count;
        }
    }
    return count;
}

inline std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0x0f];
    }
    return out;
}

inline std::string base64_encode(std::string_view bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(bytes.data()),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::string base64_decode(std::string_view encoded) {
    if (encoded.size() % 4 != 0) throw std::invalid_argument("base64 length not a multiple of 4");
    if (encoded.empty()) return {};
    std::string out(3 * encoded.size() / 4, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(encoded.data()),
                                  static_cast<int>(encoded.size()));
    if (n < 0) throw std::invalid_argument("malformed base64");
    // DecodeBlock keeps the zero bytes produced by '=' padding.
    std::size_t pad = 0;
    if (encoded.back() == '=') ++pad;
    if (encoded.size() > 1 && encoded[encoded.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

/// FNV-1a, used where a stable non-cryptographic bucket is enough.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace hare::text
