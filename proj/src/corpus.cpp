#include "kpt/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace kpt {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

const std::vector<std::string>& Vocab::special_tokens() {
    static const std::vector<std::string> specials = {"[PAD]",  "[UNK]", "[CLS]", "[SEP]",
                                                      "[MASK]", "[BOS]", "[EOS]"};
    return specials;
}

Vocab::Vocab() : Vocab(special_tokens()) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw CorpusError("duplicate vocabulary token '" + tokens_[i] + "'");
        }
    }
}

Vocab Vocab::build(const std::vector<TokenList>& streams, std::size_t min_freq) {
    if (streams.empty()) throw CorpusError("empty corpus");
    if (min_freq < 1) throw CorpusError("min_freq must be >= 1");
    const auto& specials = special_tokens();
    std::map<std::string, std::size_t> freq;
    for (const auto& stream : streams) {
        for (const auto& tok : stream) {
            if (std::find(specials.begin(), specials.end(), tok) == specials.end()) ++freq[tok];
        }
    }
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [tok, n] : freq) {
        if (n >= min_freq) kept.emplace_back(tok, n);
    }
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens = specials;
    for (auto& [tok, n] : kept) tokens.push_back(tok);
    return Vocab(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
    const auto& specials = special_tokens();
    if (tokens.size() < specials.size() || !std::equal(specials.begin(), specials.end(), tokens.begin())) {
        throw CorpusError("vocabulary must start with the 7 special tokens in fixed order");
    }
    return Vocab(std::move(tokens));
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open vocabulary file " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    try {
        return from_tokens(std::move(tokens));
    } catch (const CorpusError& e) {
        throw CorpusError("vocabulary file " + path.string() + ": " + e.what());
    }
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorpusError("cannot write vocabulary file " + path.string());
    for (const auto& tok : tokens_) out << tok << '\n';
}

int Vocab::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const TokenList& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
}

TokenList Vocab::decode(const std::vector<int>& ids) const {
    TokenList out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
}

// ---------------------------------------------------------------------------
// Documents
// ---------------------------------------------------------------------------

const char* span_kind_name(SpanKind kind) {
    return kind == SpanKind::usp ? "usp" : "kb_attribute";
}

namespace {
[[noreturn]] void doc_error(const ProductDocument& doc, const std::string& field,
                            const std::string& what) {
    throw CorpusError("document '" + doc.id + "': " + field + ": " + what);
}
}  // namespace

void validate_document(const ProductDocument& doc) {
    if (doc.id.empty()) doc_error(doc, "id", "must be non-empty");
    if (doc.category < 0) doc_error(doc, "category", "must be non-negative");
    if (doc.aspects.empty()) doc_error(doc, "aspects", "must be non-empty");
    for (std::size_t a = 0; a < doc.aspects.size(); ++a) {
        const auto& asp = doc.aspects[a];
        const std::string where = "aspects[" + std::to_string(a) + "]";
        if (asp.description.empty()) doc_error(doc, where + ".description", "must be non-empty");
        if (asp.summary.empty()) doc_error(doc, where + ".summary", "must be non-empty");
        std::vector<KnowledgeSpan> spans = asp.spans;
        std::sort(spans.begin(), spans.end(),
                  [](const auto& x, const auto& y) { return x.start < y.start; });
        for (std::size_t s = 0; s < spans.size(); ++s) {
            const auto& sp = spans[s];
            if (!(sp.start < sp.end && sp.end <= asp.description.size())) {
                doc_error(doc, where + ".spans",
                          "span [" + std::to_string(sp.start) + "," + std::to_string(sp.end) +
                              ") out of bounds");
            }
            if (s > 0 && spans[s - 1].end > sp.start) {
                doc_error(doc, where + ".spans",
                          "overlapping spans at token " + std::to_string(sp.start));
            }
        }
        if (!asp.bio_labels.empty() && asp.bio_labels.size() != asp.description.size()) {
            doc_error(doc, where + ".bio_labels", "length does not match description");
        }
    }
}

FlatDocument flatten(const ProductDocument& doc, const Vocab& vocab, std::size_t max_len) {
    FlatDocument flat;
    flat.category = doc.category;
    std::size_t total = 1;
    for (const auto& a : doc.aspects) total += a.description.size();
    if (total > max_len) {
        throw CorpusError("document '" + doc.id + "': flattened length " + std::to_string(total) +
                          " exceeds max_len " + std::to_string(max_len));
    }
    flat.tokens.reserve(total);
    flat.tokens.push_back(kClsId);
    flat.boundary_labels.push_back(0);
    flat.knowledge_mask.push_back(0);
    for (const auto& a : doc.aspects) {
        const std::size_t start = flat.tokens.size();
        for (std::size_t i = 0; i < a.description.size(); ++i) {
            flat.tokens.push_back(vocab.id(a.description[i]));
            flat.boundary_labels.push_back(i == 0 ? 1 : 0);
            flat.knowledge_mask.push_back(0);
        }
        for (const auto& sp : a.spans) {
            for (std::size_t i = sp.start; i < sp.end; ++i) flat.knowledge_mask[start + i] = 1;
        }
        flat.aspect_offsets.emplace_back(start, flat.tokens.size());
        flat.summaries.push_back(vocab.encode(a.summary));
    }
    return flat;
}

std::vector<TokenList> corpus_token_streams(const Corpus& corpus) {
    std::vector<TokenList> streams;
    for (const auto& doc : corpus) {
        for (const auto& a : doc.aspects) {
            streams.push_back(a.description);
            streams.push_back(a.summary);
        }
    }
    return streams;
}

Vocab build_vocab(const Corpus& corpus, std::size_t min_freq) {
    if (corpus.empty()) throw CorpusError("empty corpus");
    return Vocab::build(corpus_token_streams(corpus), min_freq);
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

std::string document_to_json_line(const ProductDocument& doc) {
    json j;
    j["id"] = doc.id;
    j["category"] = doc.category;
    json aspects = json::array();
    for (const auto& a : doc.aspects) {
        json ja;
        ja["description"] = a.description;
        ja["summary"] = a.summary;
        json spans = json::array();
        for (const auto& s : a.spans) {
            spans.push_back(json{{"start", s.start}, {"end", s.end}, {"kind", span_kind_name(s.kind)}});
        }
        ja["spans"] = std::move(spans);
        if (!a.bio_labels.empty()) ja["bio_labels"] = a.bio_labels;
        aspects.push_back(std::move(ja));
    }
    j["aspects"] = std::move(aspects);
    return j.dump();
}

ProductDocument document_from_json_line(const std::string& line) {
    const json j = json::parse(line);
    ProductDocument doc;
    doc.id = j.at("id").get<std::string>();
    doc.category = j.at("category").get<int>();
    for (const auto& ja : j.at("aspects")) {
        AspectSection a;
        a.description = ja.at("description").get<TokenList>();
        a.summary = ja.at("summary").get<TokenList>();
        for (const auto& js : ja.at("spans")) {
            KnowledgeSpan s;
            const auto start = js.at("start").get<long long>();
            const auto end = js.at("end").get<long long>();
            if (start < 0 || end < 0) throw CorpusError("document '" + doc.id + "': negative span index");
            s.start = static_cast<std::size_t>(start);
            s.end = static_cast<std::size_t>(end);
            const auto kind = js.at("kind").get<std::string>();
            if (kind == "usp") {
                s.kind = SpanKind::usp;
            } else if (kind == "kb_attribute") {
                s.kind = SpanKind::kb_attribute;
            } else {
                throw CorpusError("document '" + doc.id + "': unknown span kind '" + kind + "'");
            }
            a.spans.push_back(s);
        }
        if (ja.contains("bio_labels")) a.bio_labels = ja.at("bio_labels").get<std::vector<std::string>>();
        doc.aspects.push_back(std::move(a));
    }
    return doc;
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open corpus file " + path.string());
    Corpus corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ProductDocument doc;
        try {
            doc = document_from_json_line(line);
        } catch (const CorpusError&) {
            throw;
        } catch (const std::exception& e) {
            throw CorpusError(path.string() + ":" + std::to_string(line_no) +
                              ": malformed line: " + e.what());
        }
        validate_document(doc);
        corpus.push_back(std::move(doc));
    }
    if (corpus.empty()) throw CorpusError("empty corpus");
    return corpus;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorpusError("cannot write corpus file " + path.string());
    for (const auto& doc : corpus) out << document_to_json_line(doc) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

GeneratorProfile GeneratorProfile::named(const std::string& name) {
    GeneratorProfile p;
    if (name == "desk") return p;
    if (name == "paper") {
        p.min_aspects = 8;
        p.max_aspects = 12;
        p.max_len = 512;
        return p;
    }
    if (name == "tiny") {
        p.min_aspects = 2;
        p.max_aspects = 3;
        p.min_description = 8;
        p.max_description = 12;
        p.min_summary = 2;
        p.max_summary = 4;
        p.category_lexicon = 3;
        p.glue_lexicon = 10;
        p.n_attributes = 6;
        p.values_per_attribute = 3;
        p.usp_lexicon = 16;
        p.max_len = 64;
        return p;
    }
    throw std::invalid_argument("unknown generator profile '" + name + "'");
}

namespace {

int uniform(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

struct Chunk {
    TokenList tokens;
    std::size_t span_offset = 0;  // span covers tokens[span_offset..]
    bool knowledge = false;
    SpanKind kind = SpanKind::kb_attribute;
};

AspectSection make_aspect(std::mt19937_64& rng, int category, const GeneratorProfile& p) {
    const int length = uniform(rng, p.min_description, p.max_description);
    std::vector<Chunk> chunks;
    std::size_t used = 0;
    TokenList first_value;
    TokenList usp_tokens;

    const int n_kb = uniform(rng, 1, 3);
    for (int k = 0; k < n_kb; ++k) {
        const int attr = uniform(rng, 0, p.n_attributes - 1);
        Chunk c;
        c.tokens.push_back("a" + std::to_string(attr));
        const int n_values = uniform(rng, 1, 2);
        for (int v = 0; v < n_values; ++v) {
            c.tokens.push_back("v" + std::to_string(attr) + "_" +
                               std::to_string(uniform(rng, 0, p.values_per_attribute - 1)));
        }
        c.span_offset = 1;
        c.knowledge = true;
        c.kind = SpanKind::kb_attribute;
        if (used + c.tokens.size() >= static_cast<std::size_t>(length)) break;
        used += c.tokens.size();
        if (first_value.empty()) first_value.assign(c.tokens.begin() + 1, c.tokens.end());
        chunks.push_back(std::move(c));
    }
    const int n_usp = uniform(rng, 0, 2);
    for (int u = 0; u < n_usp; ++u) {
        Chunk c;
        const int words = uniform(rng, 2, 3);
        for (int w = 0; w < words; ++w) c.tokens.push_back("u" + std::to_string(uniform(rng, 0, p.usp_lexicon - 1)));
        c.knowledge = true;
        c.kind = SpanKind::usp;
        if (used + c.tokens.size() >= static_cast<std::size_t>(length)) break;
        used += c.tokens.size();
        usp_tokens.insert(usp_tokens.end(), c.tokens.begin(), c.tokens.end());
        chunks.push_back(std::move(c));
    }
    while (used < static_cast<std::size_t>(length)) {
        Chunk c;
        if (uniform(rng, 0, 3) < 3) {
            c.tokens.push_back("c" + std::to_string(category) + "_" +
                               std::to_string(uniform(rng, 0, p.category_lexicon - 1)));
        } else {
            c.tokens.push_back("g" + std::to_string(uniform(rng, 0, p.glue_lexicon - 1)));
        }
        chunks.push_back(std::move(c));
        ++used;
    }
    std::shuffle(chunks.begin(), chunks.end(), rng);

    AspectSection aspect;
    for (const auto& c : chunks) {
        const std::size_t at = aspect.description.size();
        aspect.description.insert(aspect.description.end(), c.tokens.begin(), c.tokens.end());
        if (c.knowledge) aspect.spans.push_back({at + c.span_offset, aspect.description.size(), c.kind});
    }

    const std::size_t max_summary =
        std::min<std::size_t>(static_cast<std::size_t>(p.max_summary), aspect.description.size() - 1);
    aspect.summary.push_back("s" + std::to_string(uniform(rng, 0, p.glue_lexicon - 1)));
    const TokenList& key = usp_tokens.empty() ? first_value : usp_tokens;
    for (const auto& t : key) {
        if (aspect.summary.size() >= max_summary) break;
        aspect.summary.push_back(t);
    }
    while (aspect.summary.size() < static_cast<std::size_t>(p.min_summary)) {
        aspect.summary.push_back("s" + std::to_string(uniform(rng, 0, p.glue_lexicon - 1)));
    }
    return aspect;
}

}  // namespace

Corpus generate_synthetic(std::uint64_t seed, std::size_t n_docs, const GeneratorProfile& profile) {
    if (profile.n_categories < 1) throw std::invalid_argument("n_categories must be >= 1");
    if (profile.min_aspects < 1 || profile.max_aspects < profile.min_aspects) {
        throw std::invalid_argument("invalid aspect count range");
    }
    std::mt19937_64 rng(seed);
    Corpus corpus;
    corpus.reserve(n_docs);
    for (std::size_t i = 0; i < n_docs; ++i) {
        ProductDocument doc;
        std::ostringstream id;
        id << "doc-" << std::setfill('0') << std::setw(6) << i;
        doc.id = id.str();
        doc.category = static_cast<int>(i % static_cast<std::size_t>(profile.n_categories));
        const int n_aspects = uniform(rng, profile.min_aspects, profile.max_aspects);
        std::size_t total = 0;
        for (int a = 0; a < n_aspects; ++a) {
            AspectSection aspect = make_aspect(rng, doc.category, profile);
            if (total + aspect.description.size() + 1 > profile.max_len) {
                if (!doc.aspects.empty()) break;
                aspect.description.resize(profile.max_len - 1);
                std::erase_if(aspect.spans, [&](const auto& s) { return s.end > aspect.description.size(); });
            }
            total += aspect.description.size();
            doc.aspects.push_back(std::move(aspect));
        }
        corpus.push_back(std::move(doc));
    }
    return corpus;
}

}  // namespace kpt
