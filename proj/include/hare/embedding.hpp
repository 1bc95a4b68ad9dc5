#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hare/text.hpp"

namespace hare {

/// Lower-cased token -> dense vector. All vectors share one dimensionality (50 for GloVe-6B-50d).
class EmbeddingTable {
  public:
    EmbeddingTable() = default;

    void insert(std::string token, std::vector<double> vec) {
        if (vec.empty()) throw std::invalid_argument("embedding: empty vector for '" + token + "'");
        if (dim_ == 0) dim_ = vec.size();
        if (vec.size() != dim_) {
            throw std::invalid_argument("embedding: '" + token + "' has dimension " + std::to_string(vec.size()) +
                                        ", table has " + std::to_string(dim_));
        }
        table_[text::casefold(token)] = std::move(vec);
    }

    /// nullptr on a miss; a missing token is never a zero vector.
    const std::vector<double>* lookup(std::string_view token) const {
        auto it = table_.find(text::casefold(token));
        return it == table_.end() ? nullptr : &it->second;
    }

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return table_.size(); }

    /// GloVe text layout: `token v1 v2 ... vd` per line.
    static EmbeddingTable load_glove(std::istream& in) {
        EmbeddingTable t;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (text::trim(line).empty()) continue;
            std::istringstream ss(line);
            std::string token;
            ss >> token;
            std::vector<double> vec;
            double x = 0;
            while (ss >> x) vec.push_back(x);
            if (!ss.eof()) throw std::runtime_error("embedding: non-numeric value on line " + std::to_string(lineno));
            t.insert(std::move(token), std::move(vec));
        }
        return t;
    }

    static EmbeddingTable load_glove(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open embedding file " + path.string());
        return load_glove(in);
    }

    /// Component-wise mean of the token vectors of a (possibly multi-word) entity; nullopt if any token is absent.
    std::optional<std::vector<double>> phrase_vector(std::string_view phrase) const {
        std::istringstream ss{std::string(phrase)};
        std::string tok;
        std::vector<double> sum;
        std::size_t n = 0;
        while (ss >> tok) {
            const auto* v = lookup(tok);
            if (!v) return std::nullopt;
            if (sum.empty()) sum.assign(v->size(), 0.0);
            for (std::size_t i = 0; i < v->size(); ++i) sum[i] += (*v)[i];
            ++n;
        }
        if (n == 0) return std::nullopt;
        for (auto& x : sum) x /= static_cast<double>(n);
        return sum;
    }

  private:
    std::unordered_map<std::string, std::vector<double>> table_;
    std::size_t dim_ = 0;
};

/// No candidate had embeddings on both sides; callers fall back to exact string match.
class AllCandidatesOOV : public std::runtime_error {
  public:
    AllCandidatesOOV() : std::runtime_error("no candidate entity pair has embeddings on both sides") {}
};

inline std::optional<double> cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return std::nullopt;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct EntityMatch {
    std::size_t index = 0;
    std::pair<std::string, std::string> pair;
    double similarity = 0;
};

/// Argmax of cosine similarity over candidate entity pairs. Pairs with an OOV side are skipped;
/// ties keep the lowest candidate index.
inline EntityMatch match_conflicting_entities(const std::vector<std::pair<std::string, std::string>>& candidates,
                                              const EmbeddingTable& table) {
    if (candidates.empty()) throw std::invalid_argument("match_conflicting_entities: no candidates");
    std::optional<EntityMatch> best;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto a = table.phrase_vector(candidates[i].first);
        const auto b = table.phrase_vector(candidates[i].second);
        if (!a || !b) continue;
        const auto c = cosine(*a, *b);
        if (!c) continue;
        if (!best || *c > best->similarity) best = EntityMatch{i, candidates[i], *c};
    }
    if (!best) throw AllCandidatesOOV();
    return *best;
}

}  // namespace hare
