#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace saessv::corpus {

using TokenId = std::size_t;
using Tokens = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr std::size_t kDefaultVocabSize = 256;
inline constexpr std::size_t kMinTextLen = 8;
inline constexpr std::size_t kMaxTextLen = 64;

enum class Style { A, B };

std::string style_name(Style s);
Style parse_style(const std::string& s);

struct Vocab {
    std::vector<std::string> tokens;

    std::size_t size() const noexcept { return tokens.size(); }
};

// Fixed generative structure shared by every corpus: marker sets, trigger
// tokens and one cyclic successor map per style. Corpora sampled with
// different seeds come from the same world, so a model trained on one
// corpus is meaningful on another.
class World {
public:
    static constexpr std::size_t kMarkersPerClass = 16;

    static const World& standard();

    const Vocab& vocab() const noexcept { return vocab_; }
    // markers(1) are the positive markers, markers(0) the negative ones.
    const std::vector<TokenId>& markers(int label) const { return label ? positive_ : negative_; }
    const std::vector<TokenId>& neutral() const noexcept { return neutral_; }

    bool is_positive_marker(TokenId t) const { return t < kind_.size() && kind_[t] == Kind::positive; }
    bool is_negative_marker(TokenId t) const { return t < kind_.size() && kind_[t] == Kind::negative; }
    bool is_trigger(TokenId t) const { return t < slot_.size() && slot_[t] >= 0; }
    // Marker emitted after trigger `t` for the given label.
    TokenId marker_after(TokenId trigger, int label) const;
    TokenId successor(Style style, TokenId t) const;
    const std::vector<TokenId>& triggers() const noexcept { return triggers_; }

private:
    enum class Kind : std::uint8_t { reserved, positive, negative, neutral };

    explicit World(std::uint64_t seed);

    Vocab vocab_;
    std::vector<Kind> kind_;
    std::vector<int> slot_;
    std::vector<TokenId> positive_, negative_, neutral_, triggers_;
    std::array<std::vector<TokenId>, 2> successor_;
};

struct LabeledText {
    Tokens token_ids;
    int label = 0;
    Style style = Style::A;
    // Texts generated as a twin pair share a neutral skeleton and differ
    // only in their marker tokens; -1 when unknown.
    std::int64_t pair = -1;

    friend bool operator==(const LabeledText&, const LabeledText&) = default;
};

using Corpus = std::vector<LabeledText>;

struct GenOptions {
    std::size_t min_len = 48;
    std::size_t max_len = 64;
    // Probability of following the style's successor map; otherwise a
    // uniformly random neutral token comes next.
    double follow_prob = 0.9;
};

// n/2 twin pairs (one text per label) sampled from the standard world. After
// every trigger token a marker is emitted; it belongs to the text's own
// class with probability (1 + strength) / 2, so the marker-frequency gap
// between classes is proportional to strength.
Corpus generate_corpus(std::uint64_t seed, std::size_t n, Style style, double attribute_strength,
                       const GenOptions& options = {});

struct Split {
    Corpus train;
    Corpus test;
};

// Stratified by label. Twins are kept on the same side whenever the class
// counts allow it.
Split split(const Corpus& corpus, double train_fraction, std::uint64_t seed);

Corpus filter_style(const Corpus& corpus, Style style);
Corpus filter_label(const Corpus& corpus, int label);

void write_jsonl(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_jsonl(const std::filesystem::path& path);
void write_vocab(const std::filesystem::path& path, const Vocab& vocab);
Vocab read_vocab(const std::filesystem::path& path);
std::string corpus_hash(const Corpus& corpus);

}  // namespace saessv::corpus
