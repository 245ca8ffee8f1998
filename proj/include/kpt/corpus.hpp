#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace kpt {

// Special token ids, identical in every vocabulary.
inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kBosId = 5;
inline constexpr int kEosId = 6;
inline constexpr int kNumSpecialTokens = 7;

class CorpusError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

using TokenList = std::vector<std::string>;

class Vocab {
  public:
    /// Vocabulary holding only the special tokens.
    Vocab();

    /// Specials plus every token seen at least `min_freq` times, ordered by
    /// (frequency desc, token asc). Throws on an empty stream list.
    static Vocab build(const std::vector<TokenList>& streams, std::size_t min_freq = 1);

    /// Tokens in id order; the special tokens must come first.
    static Vocab from_tokens(std::vector<std::string> tokens);
    static Vocab load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::size_t size() const { return tokens_.size(); }
    int id(const std::string& token) const;
    bool contains(const std::string& token) const { return index_.count(token) > 0; }
    const std::string& token(int id) const;
    std::vector<int> encode(const TokenList& tokens) const;
    TokenList decode(const std::vector<int>& ids) const;

    const std::vector<std::string>& tokens() const { return tokens_; }
    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

    static const std::vector<std::string>& special_tokens();

  private:
    explicit Vocab(std::vector<std::string> tokens);
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

enum class SpanKind { kb_attribute, usp };

const char* span_kind_name(SpanKind kind);

struct KnowledgeSpan {
    std::size_t start = 0;  // half-open [start, end) within one description
    std::size_t end = 0;
    SpanKind kind = SpanKind::kb_attribute;
    bool operator==(const KnowledgeSpan&) const = default;
};

struct AspectSection {
    TokenList description;
    TokenList summary;
    std::vector<KnowledgeSpan> spans;
    /// Attribute-tagging extension: one BIO label per description token, or empty.
    std::vector<std::string> bio_labels;
    bool operator==(const AspectSection&) const = default;
};

struct ProductDocument {
    std::string id;
    int category = 0;
    std::vector<AspectSection> aspects;
    bool operator==(const ProductDocument&) const = default;
};

using Corpus = std::vector<ProductDocument>;

/// Throws CorpusError naming the document id and offending field.
void validate_document(const ProductDocument& doc);

/// Encoder-ready view of a document: [CLS] + concatenated descriptions.
struct FlatDocument {
    std::vector<int> tokens;
    std::vector<int> boundary_labels;
    std::vector<std::uint8_t> knowledge_mask;
    int category = 0;
    std::vector<std::pair<std::size_t, std::size_t>> aspect_offsets;  // into tokens, half-open
    std::vector<std::vector<int>> summaries;                          // per aspect

    std::size_t content_length() const { return tokens.size() - 1; }
};

/// Errors when the flattened sequence (with [CLS]) would exceed max_len.
FlatDocument flatten(const ProductDocument& doc, const Vocab& vocab, std::size_t max_len);

std::vector<TokenList> corpus_token_streams(const Corpus& corpus);
Vocab build_vocab(const Corpus& corpus, std::size_t min_freq = 1);

Corpus load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
std::string document_to_json_line(const ProductDocument& doc);
ProductDocument document_from_json_line(const std::string& line);

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct GeneratorProfile {
    int n_categories = 40;
    int min_aspects = 2;
    int max_aspects = 12;
    int min_description = 8;
    int max_description = 40;
    int min_summary = 2;
    int max_summary = 8;
    int category_lexicon = 24;  // words per category
    int glue_lexicon = 40;
    int n_attributes = 20;
    int values_per_attribute = 6;
    int usp_lexicon = 80;
    /// Documents are cut (trailing aspects dropped) to fit max_len - 1 tokens.
    std::size_t max_len = 128;

    /// "paper" (512 tokens, 8-12 aspects), "desk" (128 tokens), or "tiny"
    /// (2-3 short aspects, for overfitting runs).
    static GeneratorProfile named(const std::string& name);
};

Corpus generate_synthetic(std::uint64_t seed, std::size_t n_docs,
                          const GeneratorProfile& profile = {});

}  // namespace kpt
