#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace beamaggr::retrieval {

struct Document {
    std::string doc_id;
    std::string title;
    std::string body;
};

enum class ResultSource { organic, answer_box, local };

std::string_view to_string(ResultSource source) noexcept;

struct SearchResult {
    std::string title;
    std::string snippet;
    int rank = 0;
    ResultSource source = ResultSource::local;
    std::string doc_id;  // local results only
    double score = 0.0;  // local results only

    bool operator==(const SearchResult&) const = default;
};

/// Characters of body text kept as a result snippet.
inline constexpr std::size_t snippet_length = 400;

/// Lowercased alphanumeric runs; bytes outside ASCII count as word characters.
std::vector<std::string> tokenize(std::string_view text);

struct Posting {
    std::uint32_t doc = 0;  // ordinal into InvertedIndex::docs()
    std::uint32_t tf = 0;

    bool operator==(const Posting&) const = default;
};

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;

    bool operator==(const Bm25Params&) const = default;
};

/// Okapi BM25 inverted index over title + body. Immutable after build.
class InvertedIndex {
public:
    struct StoredDoc {
        std::string doc_id;
        std::string title;
        std::string snippet;
        std::uint32_t length = 0;

        bool operator==(const StoredDoc&) const = default;
    };

    const std::map<std::string, std::vector<Posting>>& postings() const noexcept { return postings_; }
    const std::vector<StoredDoc>& docs() const noexcept { return docs_; }
    std::size_t doc_count() const noexcept { return docs_.size(); }
    double avg_doc_length() const noexcept { return avg_doc_length_; }
    const Bm25Params& params() const noexcept { return params_; }

    /// Ordinal of `doc_id`; throws UnknownDocError.
    std::uint32_t ordinal(const std::string& doc_id) const;
    std::uint32_t doc_length(const std::string& doc_id) const;
    std::uint32_t document_frequency(const std::string& term) const noexcept;
    std::uint32_t term_frequency(const std::string& term, std::uint32_t doc) const noexcept;

    /// ln(1 + (N - n_t + 0.5) / (n_t + 0.5))
    double idf(const std::string& term) const noexcept;

    void save(std::ostream& out) const;
    void save(const std::filesystem::path& path) const;
    static InvertedIndex load(std::istream& in);
    static InvertedIndex load(const std::filesystem::path& path);

    bool operator==(const InvertedIndex&) const = default;

private:
    friend InvertedIndex build_index(const std::vector<Document>& corpus, Bm25Params params);
    void finalize();

    std::map<std::string, std::vector<Posting>> postings_;
    std::vector<StoredDoc> docs_;
    std::unordered_map<std::string, std::uint32_t> by_id_;
    double avg_doc_length_ = 0.0;
    Bm25Params params_;
};

/// Throws EmptyCorpusError or DuplicateDocError.
InvertedIndex build_index(const std::vector<Document>& corpus, Bm25Params params = {});

/// Reads JSONL {"doc_id","title","body"}; throws FormatError with the line number.
std::vector<Document> load_corpus(const std::filesystem::path& path);
std::vector<Document> load_corpus(std::istream& in);

double bm25_score(const InvertedIndex& index, const std::vector<std::string>& query_terms,
                  const std::string& doc_id);

/// Top `top_n` documents by BM25, ties by ascending doc_id; only documents
/// sharing at least one term with the query are returned.
std::vector<SearchResult> search(const InvertedIndex& index, std::string_view query, std::size_t top_n);

/// Source of web-search results for one query, as a Serper-style JSON
/// response ({"answerBox": {...}, "organic": [...]}).
class SerpProvider {
public:
    virtual ~SerpProvider() = default;
    virtual nlohmann::json raw_results(const std::string& query) = 0;
};

/// Lowercased, trimmed, whitespace-collapsed query used for fixture keys.
std::string canonical_query(std::string_view query);
std::string serp_fixture_key(std::string_view query);

/// Replays `<dir>/<serp_fixture_key>.json` files ({"query", "response"});
/// throws FixtureMissError for unknown queries.
class SerpFixtureProvider : public SerpProvider {
public:
    explicit SerpFixtureProvider(std::filesystem::path dir) : dir_(std::move(dir)) {}
    nlohmann::json raw_results(const std::string& query) override;

    /// Writes a fixture file; concurrent writers are serialized.
    void store(const std::string& query, const nlohmann::json& response);

    const std::filesystem::path& dir() const noexcept { return dir_; }

private:
    std::filesystem::path dir_;
    std::mutex write_mutex_;
};

struct SerperConfig {
    std::string endpoint = "https://google.serper.dev/search";
    std::string api_key;  // SERP_API_KEY

    static SerperConfig from_env();
};

/// Live Google search through a Serper-compatible endpoint.
class SerperProvider : public SerpProvider {
public:
    explicit SerperProvider(SerperConfig config);
    nlohmann::json raw_results(const std::string& query) override;

private:
    SerperConfig config_;
};

/// Live lookup that persists every response as a replay fixture.
class RecordingSerpProvider : public SerpProvider {
public:
    RecordingSerpProvider(SerpProvider& inner, SerpFixtureProvider& store) : inner_(inner), store_(store) {}
    nlohmann::json raw_results(const std::string& query) override;

private:
    SerpProvider& inner_;
    SerpFixtureProvider& store_;
};

/// Parses a Serper-style response: the answer box (when present) first, then
/// up to `organic_count` organic results. Ranks restart at 1 per source.
std::vector<SearchResult> parse_serp(const nlohmann::json& response, std::size_t organic_count = 3);

std::vector<SearchResult> fetch_serp(SerpProvider& provider, const std::string& query,
                                     std::size_t organic_count = 3);

} // namespace beamaggr::retrieval
