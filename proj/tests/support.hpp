#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "hare/corpus.hpp"
#include "hare/lexicon.hpp"

namespace hare::support {

inline std::filesystem::path data_dir() { return HARE_DATA_DIR; }

inline const StateLexicon& lexicon() {
    static const StateLexicon lex = StateLexicon::load(data_dir() / "trip_lexicon.json");
    return lex;
}

inline std::vector<StoryPairInstance> mini_trip(const std::string& split) {
    return load_trip(data_dir() / "mini_trip" / (split + ".json"), lexicon()).instances;
}

inline std::vector<ConversionInstance> mini_propara(const std::string& split) {
    return load_conversions(data_dir() / "mini_propara" / (split + ".json")).instances;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("hare-test-" + name + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

/// Small helpers over a seeded engine; every property test owns one.
class Gen {
  public:
    explicit Gen(std::uint64_t seed) : eng_(seed) {}

    int between(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng_); }
    bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(eng_); }
    double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }

    template <typename T>
    const T& pick(const std::vector<T>& v) {
        return v.at(static_cast<std::size_t>(between(0, static_cast<int>(v.size()) - 1)));
    }

    std::mt19937_64& engine() { return eng_; }

  private:
    std::mt19937_64 eng_;
};

}  // namespace hare::support
