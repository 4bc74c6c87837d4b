#include "saessv/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "saessv/error.hpp"
#include "saessv/hash.hpp"

namespace saessv::corpus {

namespace {

constexpr std::uint64_t kWorldSeed = 0x5AE55Fu;
constexpr std::size_t kTriggerEvery = 8;

std::string token_name(const char* prefix, std::size_t i, int width) {
    std::ostringstream out;
    out << prefix;
    out.width(width);
    out.fill('0');
    out << i;
    return out.str();
}

}  // namespace

std::string style_name(Style s) { return s == Style::A ? "A" : "B"; }

Style parse_style(const std::string& s) {
    if (s == "A") return Style::A;
    if (s == "B") return Style::B;
    throw PreconditionError("unknown corpus style '" + s + "'");
}

World::World(std::uint64_t seed) {
    const std::size_t n = kDefaultVocabSize;
    kind_.assign(n, Kind::neutral);
    slot_.assign(n, -1);
    vocab_.tokens.resize(n);
    vocab_.tokens[kPad] = "<pad>";
    vocab_.tokens[kBos] = "<bos>";
    kind_[kPad] = kind_[kBos] = Kind::reserved;

    TokenId next = 2;
    for (std::size_t i = 0; i < kMarkersPerClass; ++i, ++next) {
        positive_.push_back(next);
        kind_[next] = Kind::positive;
        vocab_.tokens[next] = token_name("pos", i, 2);
    }
    for (std::size_t i = 0; i < kMarkersPerClass; ++i, ++next) {
        negative_.push_back(next);
        kind_[next] = Kind::negative;
        vocab_.tokens[next] = token_name("neg", i, 2);
    }
    for (std::size_t i = 0; next < n; ++i, ++next) {
        neutral_.push_back(next);
        vocab_.tokens[next] = token_name("w", i, 3);
    }

    std::mt19937_64 rng(seed);
    auto order = neutral_;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); i += kTriggerEvery) {
        slot_[order[i]] = static_cast<int>(triggers_.size() % kMarkersPerClass);
        triggers_.push_back(order[i]);
    }
    std::sort(triggers_.begin(), triggers_.end());

    for (auto& succ : successor_) {
        succ.assign(n, kPad);
        auto cycle = neutral_;
        std::shuffle(cycle.begin(), cycle.end(), rng);
        for (std::size_t i = 0; i < cycle.size(); ++i) succ[cycle[i]] = cycle[(i + 1) % cycle.size()];
    }
}

const World& World::standard() {
    static const World world(kWorldSeed);
    return world;
}

TokenId World::marker_after(TokenId trigger, int label) const {
    if (!is_trigger(trigger)) throw PreconditionError("token is not a trigger");
    return markers(label)[static_cast<std::size_t>(slot_[trigger])];
}

TokenId World::successor(Style style, TokenId t) const {
    const auto& succ = successor_[style == Style::A ? 0 : 1];
    if (t >= succ.size() || succ[t] == kPad) throw PreconditionError("token has no successor");
    return succ[t];
}

Corpus generate_corpus(std::uint64_t seed, std::size_t n, Style style, double attribute_strength,
                       const GenOptions& options) {
    if (n == 0 || n % 2 != 0) throw PreconditionError("corpus size must be a positive even number");
    if (!(attribute_strength > 0.0 && attribute_strength <= 1.0)) {
        throw DomainError("attribute_strength must lie in (0, 1]");
    }
    if (options.min_len < kMinTextLen || options.max_len > kMaxTextLen || options.min_len > options.max_len) {
        throw PreconditionError("text lengths must lie in [8, 64]");
    }
    const auto& world = World::standard();
    const auto& neutral = world.neutral();
    const auto& triggers = world.triggers();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> len_dist(options.min_len, options.max_len);
    std::uniform_int_distribution<std::size_t> neutral_dist(0, neutral.size() - 1);
    std::uniform_int_distribution<std::size_t> trigger_dist(0, triggers.size() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double own_prob = 0.5 * (1.0 + attribute_strength);

    // Marker slots hold the trigger they follow, flagged by the high bit.
    constexpr TokenId kSlotFlag = TokenId{1} << (sizeof(TokenId) * 8 - 1);

    Corpus out;
    out.reserve(n);
    for (std::size_t pair = 0; pair < n / 2; ++pair) {
        const auto len = len_dist(rng);
        Tokens skeleton{kBos};
        TokenId current = triggers[trigger_dist(rng)];
        skeleton.push_back(current);
        while (skeleton.size() < len) {
            if (world.is_trigger(current) && (skeleton.back() & kSlotFlag) == 0) {
                skeleton.push_back(current | kSlotFlag);
                continue;
            }
            current = unit(rng) < options.follow_prob ? world.successor(style, current) : neutral[neutral_dist(rng)];
            skeleton.push_back(current);
        }
        for (int label : {1, 0}) {
            LabeledText text;
            text.label = label;
            text.style = style;
            text.pair = static_cast<std::int64_t>(pair);
            text.token_ids.reserve(skeleton.size());
            for (auto t : skeleton) {
                if (t & kSlotFlag) {
                    const int cls = unit(rng) < own_prob ? label : 1 - label;
                    text.token_ids.push_back(world.marker_after(t & ~kSlotFlag, cls));
                } else {
                    text.token_ids.push_back(t);
                }
            }
            out.push_back(std::move(text));
        }
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

Split split(const Corpus& corpus, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw DomainError("train_fraction must lie in (0, 1)");
    // Shuffle pair keys so twins share a rank and land on the same side.
    std::vector<std::int64_t> keys(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        keys[i] = corpus[i].pair >= 0 ? corpus[i].pair : -1 - static_cast<std::int64_t>(i);
    }
    auto unique_keys = keys;
    std::sort(unique_keys.begin(), unique_keys.end());
    unique_keys.erase(std::unique(unique_keys.begin(), unique_keys.end()), unique_keys.end());
    std::mt19937_64 rng(seed);
    std::shuffle(unique_keys.begin(), unique_keys.end(), rng);
    std::vector<std::size_t> rank_of(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        rank_of[i] = static_cast<std::size_t>(std::find(unique_keys.begin(), unique_keys.end(), keys[i]) - unique_keys.begin());
    }

    std::array<std::vector<std::size_t>, 2> by_label;
    for (std::size_t i = 0; i < corpus.size(); ++i) by_label[corpus[i].label ? 1 : 0].push_back(i);
    for (auto& members : by_label) {
        std::stable_sort(members.begin(), members.end(),
                         [&](std::size_t a, std::size_t b) { return rank_of[a] < rank_of[b]; });
    }

    const auto total_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(corpus.size())));
    std::array<std::size_t, 2> take{};
    std::array<double, 2> frac{};
    std::size_t assigned = 0;
    for (int c = 0; c < 2; ++c) {
        const double exact = train_fraction * static_cast<double>(by_label[c].size());
        take[c] = static_cast<std::size_t>(std::floor(exact));
        frac[c] = exact - std::floor(exact);
        assigned += take[c];
    }
    while (assigned < total_train) {
        const int c = (frac[1] > frac[0] && take[1] < by_label[1].size()) || take[0] >= by_label[0].size() ? 1 : 0;
        ++take[c];
        frac[c] = -1.0;
        ++assigned;
    }

    std::vector<bool> in_train(corpus.size(), false);
    for (int c = 0; c < 2; ++c) {
        for (std::size_t k = 0; k < take[c]; ++k) in_train[by_label[c][k]] = true;
    }
    Split result;
    for (std::size_t i = 0; i < corpus.size(); ++i) (in_train[i] ? result.train : result.test).push_back(corpus[i]);
    return result;
}

Corpus filter_style(const Corpus& corpus, Style style) {
    Corpus out;
    std::copy_if(corpus.begin(), corpus.end(), std::back_inserter(out), [&](const auto& t) { return t.style == style; });
    return out;
}

Corpus filter_label(const Corpus& corpus, int label) {
    Corpus out;
    std::copy_if(corpus.begin(), corpus.end(), std::back_inserter(out), [&](const auto& t) { return t.label == label; });
    return out;
}

namespace {

std::string to_jsonl(const Corpus& corpus) {
    std::string out;
    for (const auto& text : corpus) {
        nlohmann::ordered_json rec;
        rec["ids"] = text.token_ids;
        rec["label"] = text.label;
        rec["style"] = style_name(text.style);
        if (text.pair >= 0) rec["pair"] = text.pair;
        out += rec.dump();
        out += '\n';
    }
    return out;
}

}  // namespace

void write_jsonl(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << to_jsonl(corpus);
}

Corpus read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot read " + path.string());
    Corpus corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto rec = nlohmann::json::parse(line);
            LabeledText text;
            text.token_ids = rec.at("ids").get<Tokens>();
            text.label = rec.at("label").get<int>();
            text.style = parse_style(rec.value("style", "A"));
            text.pair = rec.value("pair", std::int64_t{-1});
            if (text.label != 0 && text.label != 1) throw PreconditionError("label must be 0 or 1");
            corpus.push_back(std::move(text));
        } catch (const nlohmann::json::exception& e) {
            throw ArtifactError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return corpus;
}

void write_vocab(const std::filesystem::path& path, const Vocab& vocab) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << nlohmann::json(vocab.tokens).dump() << '\n';
}

Vocab read_vocab(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot read " + path.string());
    Vocab v;
    v.tokens = nlohmann::json::parse(in).get<std::vector<std::string>>();
    return v;
}

std::string corpus_hash(const Corpus& corpus) { return content_hash(to_jsonl(corpus)); }

}  // namespace saessv::corpus
