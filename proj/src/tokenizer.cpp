#include "patchlens/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "patchlens/errors.hpp"

namespace patchlens {

namespace {

constexpr std::string_view kSpaceMark = "\xE2\x96\x81";  // U+2581

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80 || c == '\''; }

std::size_t utf8_len(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xE) return 3;
    if ((lead >> 3) == 0x1E) return 4;
    return 1;
}

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> vocab, Specials specials, bool add_dummy_prefix)
    : vocab_(std::move(vocab)), add_dummy_prefix_(add_dummy_prefix) {
    if (vocab_.empty()) throw InputError("tokenizer: empty vocabulary");
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
        index_.emplace(vocab_[i], static_cast<int>(i));
        max_piece_bytes_ = std::max(max_piece_bytes_, vocab_[i].size());
    }
    auto lookup = [&](const std::string& s) -> std::optional<int> {
        if (s.empty()) return std::nullopt;
        return find(s);
    };
    unk_ = lookup(specials.unk).value_or(0);
    bos_ = lookup(specials.bos);
    eos_ = lookup(specials.eos);
    image_ = lookup(specials.image);
}

Tokenizer Tokenizer::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open tokenizer file " + path.string());
    const auto j = nlohmann::json::parse(in);
    const auto& table = j.at("model").at("vocab");
    std::vector<std::string> vocab(table.size());
    for (const auto& [piece, id] : table.items()) {
        const auto i = id.get<std::size_t>();
        if (i >= vocab.size()) vocab.resize(i + 1);
        vocab[i] = piece;
    }
    if (j.contains("added_tokens")) {
        for (const auto& t : j.at("added_tokens")) {
            const auto i = t.at("id").get<std::size_t>();
            if (i >= vocab.size()) vocab.resize(i + 1);
            vocab[i] = t.at("content").get<std::string>();
        }
    }
    return Tokenizer(std::move(vocab));
}

std::optional<int> Tokenizer::find(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::string Tokenizer::piece(int id) const {
    if (id < 0 || id >= size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    return vocab_[static_cast<std::size_t>(id)];
}

std::string Tokenizer::decode(int id) const {
    std::string p = piece(id);
    if (p.size() == 6 && p.rfind("<0x", 0) == 0 && p.back() == '>') {
        return std::string(1, static_cast<char>(std::stoi(p.substr(3, 2), nullptr, 16)));
    }
    std::string out;
    for (std::size_t i = 0; i < p.size();) {
        if (p.compare(i, kSpaceMark.size(), kSpaceMark) == 0) {
            out += ' ';
            i += kSpaceMark.size();
        } else {
            out += p[i++];
        }
    }
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) out += decode(id);
    return out;
}

void Tokenizer::segment_word(std::string_view text, std::size_t begin, std::size_t end, bool leading_space,
                             std::vector<TokenPiece>& out) const {
    std::string s;
    if (leading_space) s += kSpaceMark;
    s.append(text.substr(begin, end - begin));
    const std::size_t mark = leading_space ? kSpaceMark.size() : 0;
    // Map an offset inside `s` to an offset in `text`. The space mark stands for
    // the byte just before `begin` (or nothing, for the dummy prefix).
    auto source = [&](std::size_t i) {
        if (i < mark) return begin > 0 && text[begin - 1] == ' ' ? begin - 1 : begin;
        return begin + (i - mark);
    };

    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t len = std::min(max_piece_bytes_, s.size() - i);
        std::optional<int> hit;
        for (; len > 0; --len) {
            if (auto it = index_.find(s.substr(i, len)); it != index_.end()) {
                hit = it->second;
                break;
            }
        }
        if (hit) {
            out.push_back({*hit, source(i), source(i + len)});
            i += len;
            continue;
        }
        const std::size_t step = std::min(utf8_len(static_cast<unsigned char>(s[i])), s.size() - i);
        for (std::size_t b = 0; b < step; ++b) {
            char buf[8];
            std::snprintf(buf, sizeof buf, "<0x%02X>", static_cast<unsigned char>(s[i + b]));
            if (auto it = index_.find(buf); it != index_.end()) {
                out.push_back({it->second, source(i + b), source(i + b + 1)});
            } else if (b == 0) {
                out.push_back({unk_, source(i), source(i + step)});
            }
        }
        i += step;
    }
}

std::vector<TokenPiece> Tokenizer::encode_impl(std::string_view text, bool dummy_prefix) const {
    std::vector<TokenPiece> out;
    std::size_t i = 0;
    bool pending_space = dummy_prefix && add_dummy_prefix_ && !text.empty() && text.front() != ' ';
    while (i < text.size()) {
        const char c = text[i];
        if (c == ' ') {
            if (pending_space) segment_word(text, i, i, true, out);  // space run: emit the earlier space
            pending_space = true;
            ++i;
            continue;
        }
        std::size_t j = i;
        if (is_word_byte(static_cast<unsigned char>(c))) {
            while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
        } else {
            j = i + utf8_len(static_cast<unsigned char>(c));
        }
        segment_word(text, i, std::min(j, text.size()), pending_space, out);
        pending_space = false;
        i = j;
    }
    if (pending_space && !text.empty() && text.back() == ' ') segment_word(text, text.size(), text.size(), true, out);
    return out;
}

std::vector<TokenPiece> Tokenizer::encode_with_offsets(std::string_view text) const { return encode_impl(text, true); }

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& p : encode_impl(text, true)) ids.push_back(p.id);
    return ids;
}

std::vector<int> Tokenizer::encode_fragment(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& p : encode_impl(text, false)) ids.push_back(p.id);
    return ids;
}

const std::vector<std::string>& toy_colors() {
    static const std::vector<std::string> colors = {"red",   "orange", "yellow", "green", "blue", "purple",
                                                    "pink",  "brown",  "black",  "white", "gray", "gold"};
    return colors;
}

const std::vector<std::string>& toy_animals() {
    static const std::vector<std::string> animals = {"dog",  "cat",  "horse",    "sheep", "cow",    "bear",
                                                     "zebra", "bird", "elephant", "rabbit", "fox", "giraffe"};
    return animals;
}

std::vector<std::string> toy_vocabulary(int size) {
    const std::string mark(kSpaceMark);
    std::vector<std::string> v = {"<unk>", "<s>", "</s>", "<image>", ".", "?", ":", ",", mark};
    for (const auto& c : toy_colors()) v.push_back(mark + c);
    for (const auto& a : toy_animals()) v.push_back(mark + a);
    for (const auto& a : toy_animals()) {
        std::string cap = a;
        cap[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(cap[0])));
        v.push_back(mark + cap);
    }
    for (const char* w : {"Q", "A", "What", "is", "the", "color", "of", "animal", "in", "this", "picture", "left",
                          "right", "bottle", "The", "a", "and"}) {
        v.push_back(mark + w);
    }
    if (size < static_cast<int>(v.size())) throw InputError("toy vocabulary needs at least " + std::to_string(v.size()) + " entries");
    for (int i = static_cast<int>(v.size()); i < size; ++i) v.push_back(mark + "w" + std::to_string(i));
    return v;
}

}  // namespace patchlens
