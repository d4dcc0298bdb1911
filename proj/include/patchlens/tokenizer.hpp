#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace patchlens {

struct TokenPiece {
    int id = 0;
    std::size_t begin = 0;  // byte offsets into the source text
    std::size_t end = 0;
};

struct TokenizerSpecials {
    std::string unk = "<unk>";
    std::string bos = "<s>";
    std::string eos = "</s>";
    std::string image = "<image>";
};

// SentencePiece-style vocabulary tokenizer. Text is pre-split into words
// (leading space kept with the word, "▁" marks it), each word is segmented
// by greedy longest match, unmatched bytes fall back to <0xNN> pieces or <unk>.
class Tokenizer {
public:
    using Specials = TokenizerSpecials;

    Tokenizer(std::vector<std::string> vocab, Specials specials = TokenizerSpecials{}, bool add_dummy_prefix = true);

    // Reads the "model.vocab" table of a tokenizer.json file.
    static Tokenizer from_json_file(const std::filesystem::path& path);

    std::vector<int> encode(std::string_view text) const;
    std::vector<TokenPiece> encode_with_offsets(std::string_view text) const;
    // Encodes a fragment that continues a text (no dummy prefix is added).
    std::vector<int> encode_fragment(std::string_view text) const;

    std::string piece(int id) const;
    // Piece rendered for display: "▁" becomes a space, byte pieces become bytes.
    std::string decode(int id) const;
    std::string decode(const std::vector<int>& ids) const;
    std::optional<int> find(std::string_view piece) const;

    int size() const { return static_cast<int>(vocab_.size()); }
    int unk_id() const { return unk_; }
    std::optional<int> bos_id() const { return bos_; }
    std::optional<int> eos_id() const { return eos_; }
    // Placeholder token id stored at visual positions. Falls back to unk.
    int image_id() const { return image_.value_or(unk_); }
    const std::vector<std::string>& vocab() const { return vocab_; }

private:
    std::vector<TokenPiece> encode_impl(std::string_view text, bool dummy_prefix) const;
    void segment_word(std::string_view text, std::size_t begin, std::size_t end, bool leading_space,
                      std::vector<TokenPiece>& out) const;

    std::vector<std::string> vocab_;
    std::unordered_map<std::string, int> index_;
    std::size_t max_piece_bytes_ = 1;
    int unk_ = 0;
    std::optional<int> bos_, eos_, image_;
    bool add_dummy_prefix_ = true;
};

// Vocabulary used by the toy models: special tokens, punctuation, the color
// and animal words of the color-answering prompts, question words, and filler
// tokens up to `size` entries.
std::vector<std::string> toy_vocabulary(int size = 100);

// Colors and animals known to the toy vocabulary.
const std::vector<std::string>& toy_colors();
const std::vector<std::string>& toy_animals();

}  // namespace patchlens
