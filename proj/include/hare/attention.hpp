#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hare/corpus.hpp"
#include "hare/text.hpp"

namespace hare {

inline constexpr int kAttentionFormatVersion = 1;

class AttentionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
    virtual const char* kind() const { return "AttentionFormatError"; }
};

class FormatVersionUnsupported : public AttentionError {
  public:
    explicit FormatVersionUnsupported(int v) : AttentionError("attention export format_version " + std::to_string(v) + " unsupported") {}
    const char* kind() const override { return "FormatVersionUnsupported"; }
};

class EmptyAfterMask : public AttentionError {
  public:
    explicit EmptyAfterMask(const std::string& id) : AttentionError(id + ": no sentence attention left after masking") {}
    const char* kind() const override { return "EmptyAfterMask"; }
};

class LayerRangeUnavailable : public AttentionError {
  public:
    explicit LayerRangeUnavailable(const std::string& what) : AttentionError(what) {}
    const char* kind() const override { return "LayerRangeUnavailable"; }
};

class ZeroDenominator : public AttentionError {
  public:
    explicit ZeroDenominator(const std::string& id) : AttentionError(id + ": attentional ratio has a zero denominator") {}
    const char* kind() const override { return "ZeroDenominator"; }
};

/// Token span [token_begin, token_end) of one test-block sentence.
struct SentenceSpan {
    Story story = Story::A;
    int index = 1;
    int token_begin = 0;
    int token_end = 0;
};

/// One (example, step) of exported attention. Columns cover the test block only; the exporter has
/// already averaged heads, so `attention[l]` is a gen x tokens row-major matrix for layers[l].
struct AttentionExport {
    std::string example_id;
    std::string step;  // "sentence" | "state"
    std::vector<int> layers;
    int num_model_layers = 0;
    std::vector<std::string> tokens;
    std::vector<std::pair<int, int>> offsets;  // character offsets into the test block
    int masked_count = 0;                      // demonstration/familiarization columns dropped by the exporter
    std::vector<int> special_token_indices;
    std::vector<SentenceSpan> sentences;
    int generated_tokens = 0;
    std::optional<std::pair<int, int>> answer_span;  // generated-token range of the step's answer
    std::vector<std::vector<float>> attention;

    float at(std::size_t layer_pos, int gen, int tok) const {
        return attention[layer_pos][static_cast<std::size_t>(gen) * tokens.size() + static_cast<std::size_t>(tok)];
    }
};

namespace attn_detail {

inline std::string encode_matrix(const std::vector<float>& m) {
    std::string bytes;
    bytes.reserve(m.size() * 4);
    for (float f : m) {
        const auto u = std::bit_cast<std::uint32_t>(f);
        for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
    }
    return text::base64_encode(bytes);
}

inline std::vector<float> decode_matrix(const std::string& b64) {
    std::string bytes;
    try {
        bytes = text::base64_decode(b64);
    } catch (const std::invalid_argument& e) {
        throw AttentionError(std::string("attention matrix: ") + e.what());
    }
    if (bytes.size() % 4 != 0) throw AttentionError("attention matrix byte length is not a multiple of 4");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
        out[i] = std::bit_cast<float>(u);
    }
    return out;
}

}  // namespace attn_detail

inline void validate(const AttentionExport& e) {
    const auto fail = [&](const std::string& m) { throw AttentionError(e.example_id + ": " + m); };
    if (e.step != "sentence" && e.step != "state") fail("step must be sentence or state");
    if (e.generated_tokens < 0) fail("negative generated_tokens");
    if (e.layers.size() != e.attention.size()) fail("one matrix per listed layer required");
    if (!e.offsets.empty() && e.offsets.size() != e.tokens.size()) fail("offsets and tokens differ in length");
    const int ntok = static_cast<int>(e.tokens.size());
    for (int l : e.layers) {
        if (l < 0 || (e.num_model_layers > 0 && l >= e.num_model_layers)) fail("layer index out of range");
    }
    for (const auto& m : e.attention) {
        if (m.size() != static_cast<std::size_t>(e.generated_tokens) * e.tokens.size()) fail("matrix shape mismatch");
        for (float f : m) {
            if (!std::isfinite(f) || f < 0) fail("attention weights must be finite and non-negative");
        }
    }
    for (int i : e.special_token_indices) {
        if (i < 0 || i >= ntok) fail("special token index out of range");
    }
    std::set<std::pair<Story, int>> seen;
    for (const auto& s : e.sentences) {
        if (s.token_begin < 0 || s.token_end > ntok || s.token_begin >= s.token_end) fail("bad sentence span");
        if (!seen.insert({s.story, s.index}).second) fail("duplicate sentence span");
    }
    if (e.answer_span) {
        const auto [b, en] = *e.answer_span;
        if (b < 0 || en > e.generated_tokens || b >= en) fail("bad answer span");
    }
}

inline AttentionExport parse_export(const nlohmann::json& j) {
    const int version = j.value("format_version", -1);
    if (version != kAttentionFormatVersion) throw FormatVersionUnsupported(version);
    AttentionExport e;
    try {
        e.example_id = j.at("example_id").get<std::string>();
        e.step = j.at("step").get<std::string>();
        e.layers = j.at("layers").get<std::vector<int>>();
        e.num_model_layers = j.at("num_model_layers").get<int>();
        e.tokens = j.at("tokens").get<std::vector<std::string>>();
        for (const auto& o : j.value("offsets", nlohmann::json::array())) e.offsets.emplace_back(o.at(0).get<int>(), o.at(1).get<int>());
        e.masked_count = j.value("masked_count", 0);
        e.special_token_indices = j.value("special_token_indices", std::vector<int>{});
        for (const auto& s : j.at("sentences")) {
            const auto story = parse_story(s.at("story").get<std::string>());
            if (!story) throw AttentionError(e.example_id + ": bad story letter");
            e.sentences.push_back({*story, s.at("index").get<int>(), s.at("token_begin").get<int>(), s.at("token_end").get<int>()});
        }
        e.generated_tokens = j.at("generated_tokens").get<int>();
        if (j.contains("answer_span") && !j["answer_span"].is_null()) {
            e.answer_span = std::pair{j["answer_span"].at(0).get<int>(), j["answer_span"].at(1).get<int>()};
        }
        for (const auto& m : j.at("attention")) e.attention.push_back(attn_detail::decode_matrix(m.get<std::string>()));
    } catch (const nlohmann::json::exception& ex) {
        throw AttentionError(e.example_id + ": " + ex.what());
    }
    validate(e);
    return e;
}

inline nlohmann::json to_json(const AttentionExport& e) {
    nlohmann::json j;
    j["format_version"] = kAttentionFormatVersion;
    j["example_id"] = e.example_id;
    j["step"] = e.step;
    j["layers"] = e.layers;
    j["num_model_layers"] = e.num_model_layers;
    j["tokens"] = e.tokens;
    j["offsets"] = nlohmann::json::array();
    for (const auto& [b, en] : e.offsets) j["offsets"].push_back({b, en});
    j["masked_count"] = e.masked_count;
    j["special_token_indices"] = e.special_token_indices;
    j["sentences"] = nlohmann::json::array();
    for (const auto& s : e.sentences) {
        j["sentences"].push_back({{"story", std::string(1, to_char(s.story))},
                                  {"index", s.index},
                                  {"token_begin", s.token_begin},
                                  {"token_end", s.token_end}});
    }
    j["generated_tokens"] = e.generated_tokens;
    j["answer_span"] = e.answer_span ? nlohmann::json{e.answer_span->first, e.answer_span->second} : nlohmann::json(nullptr);
    j["attention"] = nlohmann::json::array();
    for (const auto& m : e.attention) j["attention"].push_back(attn_detail::encode_matrix(m));
    return j;
}

inline std::vector<AttentionExport> read_exports(std::istream& in) {
    std::vector<AttentionExport> out;
    std::string line;
    while (std::getline(in, line)) {
        if (text::trim(line).empty()) continue;
        out.push_back(parse_export(nlohmann::json::parse(line)));
    }
    return out;
}

/// The center-most `width` layers of a `depth`-layer model; all layers when the model is shallower.
inline std::vector<int> center_layers(int depth, int width = 20) {
    std::vector<int> out;
    const int n = std::min(depth, width);
    const int start = (depth - n) / 2;
    for (int i = 0; i < n; ++i) out.push_back(start + i);
    return out;
}

// ---------------------------------------------------------------------------------------------
// Records

struct SentenceWeight {
    Story story = Story::A;
    int index = 1;
    double weight = 0;
};

struct AttentionRecord {
    std::string example_id;
    std::string step;
    std::vector<SentenceWeight> sentences;

    double total() const {
        double t = 0;
        for (const auto& s : sentences) t += s.weight;
        return t;
    }
};

/// Sum each sentence's unmasked columns, average over the chosen generated tokens and layers,
/// then normalize across sentences. Columns outside every sentence span carry no weight.
inline AttentionRecord aggregate_sentence_attention(const AttentionExport& e, const std::vector<int>& layer_range,
                                                    const std::vector<int>& gen_token_subset) {
    if (gen_token_subset.empty()) throw std::invalid_argument(e.example_id + ": empty generated-token subset");
    if (layer_range.empty()) throw LayerRangeUnavailable(e.example_id + ": empty layer range");
    std::vector<std::size_t> layer_pos;
    for (int l : layer_range) {
        const auto it = std::find(e.layers.begin(), e.layers.end(), l);
        if (it == e.layers.end()) throw LayerRangeUnavailable(e.example_id + ": layer " + std::to_string(l) + " not exported");
        layer_pos.push_back(static_cast<std::size_t>(it - e.layers.begin()));
    }
    for (int t : gen_token_subset) {
        if (t < 0 || t >= e.generated_tokens) throw std::out_of_range(e.example_id + ": generated token out of range");
    }
    const std::set<int> special(e.special_token_indices.begin(), e.special_token_indices.end());

    AttentionRecord rec{e.example_id, e.step, {}};
    bool any_column = false;
    long double grand = 0;
    std::vector<long double> sums;
    for (const auto& s : e.sentences) {
        long double acc = 0;
        for (std::size_t lp : layer_pos) {
            for (int t : gen_token_subset) {
                for (int c = s.token_begin; c < s.token_end; ++c) {
                    if (special.count(c)) continue;
                    any_column = true;
                    acc += e.at(lp, t, c);
                }
            }
        }
        acc /= static_cast<long double>(layer_pos.size() * gen_token_subset.size());
        sums.push_back(acc);
        grand += acc;
    }
    if (!any_column || !(grand > 0)) throw EmptyAfterMask(e.example_id);
    for (std::size_t i = 0; i < e.sentences.size(); ++i) {
        rec.sentences.push_back({e.sentences[i].story, e.sentences[i].index, static_cast<double>(sums[i] / grand)});
    }
    return rec;
}

/// Answer-span tokens when the export marks them, otherwise every generated token.
inline std::vector<int> default_gen_tokens(const AttentionExport& e) {
    std::vector<int> out;
    const auto [b, en] = e.answer_span.value_or(std::pair{0, e.generated_tokens});
    for (int t = b; t < en; ++t) out.push_back(t);
    return out;
}

inline AttentionRecord renormalize(AttentionRecord r) {
    const double t = r.total();
    if (!(t > 0)) throw EmptyAfterMask(r.example_id);
    for (auto& s : r.sentences) s.weight /= t;
    return r;
}

// ---------------------------------------------------------------------------------------------
// Ratios, faithfulness, precision/recall

/// The context a correct model should attend to: a whole story, or given sentences of one story.
struct Segment {
    Story story = Story::A;
    std::vector<int> sentences;  // empty = the whole story

    bool contains(const SentenceWeight& s) const {
        if (s.story != story) return false;
        return sentences.empty() || std::find(sentences.begin(), sentences.end(), s.index) != sentences.end();
    }
};

// Running mean: equal weights give back that exact weight.
struct RunningMean {
    double mean = 0;
    int n = 0;
    void add(double x) { mean += (x - mean) / ++n; }
};

inline double mean_weight(const AttentionRecord& r, const Segment& seg) {
    RunningMean m;
    for (const auto& s : r.sentences) {
        if (seg.contains(s)) m.add(s.weight);
    }
    if (m.n == 0) throw std::invalid_argument(r.example_id + ": segment matches no sentence");
    return m.mean;
}

/// Whole-story segment: its mean over the other story's mean. Sentence segment: its mean over the
/// mean of every other sentence in the record.
inline double attentional_ratio(const AttentionRecord& r, const Segment& seg) {
    const double num = mean_weight(r, seg);
    RunningMean den;
    for (const auto& s : r.sentences) {
        const bool other = seg.sentences.empty() ? s.story != seg.story : !seg.contains(s);
        if (other) den.add(s.weight);
    }
    if (den.n == 0 || !(den.mean > 0)) throw ZeroDenominator(r.example_id);
    return num / den.mean;
}

/// Strictly above the threshold counts as faithful.
inline bool classify_faithfulness(const AttentionRecord& r, const Segment& seg, double threshold) {
    if (!(threshold > 0)) throw std::invalid_argument("faithfulness threshold must be positive");
    return mean_weight(r, seg) > threshold;
}

/// 0.080, 0.085, ..., 0.120.
inline std::vector<double> default_thresholds() {
    std::vector<double> out;
    for (int i = 0; i <= 8; ++i) out.push_back((80 + 5 * i) / 1000.0);
    return out;
}

struct PrItem {
    AttentionRecord record;
    Segment segment;
    bool correct = false;
};

struct ThresholdCounts {
    double threshold = 0;
    int tp = 0, fp = 0, tn = 0, fn = 0;
    std::optional<double> precision;  // percent; undefined without positives
    std::optional<double> recall;     // percent; undefined without correct predictions
};

struct PrResult {
    std::vector<ThresholdCounts> per_threshold;
    std::optional<double> precision;  // mean over defined thresholds
    std::optional<double> recall;
    int precision_undefined = 0;  // thresholds skipped
    int recall_undefined = 0;
};

inline PrResult attentional_pr(const std::vector<PrItem>& items, const std::vector<double>& thresholds = default_thresholds()) {
    PrResult out;
    double psum = 0, rsum = 0;
    int pn = 0, rn = 0;
    std::vector<double> means;
    means.reserve(items.size());
    for (const auto& it : items) means.push_back(mean_weight(it.record, it.segment));
    for (double th : thresholds) {
        if (!(th > 0)) throw std::invalid_argument("faithfulness threshold must be positive");
        ThresholdCounts c;
        c.threshold = th;
        for (std::size_t i = 0; i < items.size(); ++i) {
            const bool faithful = means[i] > th;
            const bool correct = items[i].correct;
            (faithful ? (correct ? c.tp : c.fp) : (correct ? c.fn : c.tn))++;
        }
        if (c.tp + c.fp > 0) {
            c.precision = 100.0 * c.tp / (c.tp + c.fp);
            psum += *c.precision;
            ++pn;
        } else {
            ++out.precision_undefined;
        }
        if (c.tp + c.fn > 0) {
            c.recall = 100.0 * c.tp / (c.tp + c.fn);
            rsum += *c.recall;
            ++rn;
        } else {
            ++out.recall_undefined;
        }
        out.per_threshold.push_back(c);
    }
    if (pn > 0) out.precision = psum / pn;
    if (rn > 0) out.recall = rsum / rn;
    return out;
}

// ---------------------------------------------------------------------------------------------
// Heatmaps

struct Heatmap {
    std::string tsv;   // "A1\t0.0984...\n" per sentence, plot-ready
    std::string text;  // monochrome intensity rendering
};

inline std::string sentence_label(const SentenceWeight& s) { return std::string(1, to_char(s.story)) + std::to_string(s.index); }

/// Ten gray levels, light to dark, scaled to the heaviest sentence.
inline int intensity_level(double w, double max_w) {
    if (!(max_w > 0)) return 0;
    return static_cast<int>(std::lround(9.0 * std::clamp(w / max_w, 0.0, 1.0)));
}

inline Heatmap emit_heatmap(const AttentionRecord& r) {
    static constexpr char kShades[] = " .:-=+*#%@";
    double max_w = 0;
    for (const auto& s : r.sentences) max_w = std::max(max_w, s.weight);
    Heatmap h;
    h.text = r.example_id + " [" + r.step + "]\n";
    char buf[64];
    for (const auto& s : r.sentences) {
        std::snprintf(buf, sizeof buf, "%.17g", s.weight);
        h.tsv += sentence_label(s) + "\t" + buf + "\n";
        const int level = intensity_level(s.weight, max_w);
        std::snprintf(buf, sizeof buf, "%.3f", s.weight);
        h.text += sentence_label(s) + " " + std::string(10, kShades[level]) + " " + buf + "\n";
    }
    return h;
}

inline std::vector<SentenceWeight> parse_heatmap_tsv(const std::string& tsv) {
    std::vector<SentenceWeight> out;
    for (const auto& line : text::lines(tsv)) {
        if (line.empty()) continue;
        const auto cells = text::split(line, '\t');
        if (cells.size() != 2 || cells[0].size() < 2) throw std::invalid_argument("bad heatmap line: " + line);
        const auto story = parse_story(cells[0].substr(0, 1));
        if (!story) throw std::invalid_argument("bad heatmap label: " + cells[0]);
        int index = 0;
        const auto digits = cells[0].substr(1);
        const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), index);
        if (ec != std::errc{} || ptr != digits.data() + digits.size() || index < 1) throw std::invalid_argument("bad heatmap label: " + cells[0]);
        double weight = 0.0;
        try {
            std::size_t used = 0;
            weight = std::stod(cells[1], &used);
            if (used != cells[1].size()) throw std::invalid_argument(cells[1]);
        } catch (const std::exception&) {
            throw std::invalid_argument("bad heatmap weight: " + cells[1]);
        }
        out.push_back({*story, index, weight});
    }
    return out;
}

}  // namespace hare
