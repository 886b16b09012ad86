#include "beamaggr/retrieval.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_set>

#include "beamaggr/digest.hpp"
#include "beamaggr/errors.hpp"
#include "beamaggr/llmio.hpp"
#include "beamaggr/text.hpp"

namespace beamaggr::retrieval {

namespace fs = std::filesystem;

namespace {

constexpr char index_magic[8] = {'B', 'A', 'G', 'G', 'I', 'D', 'X', '1'};
constexpr std::uint32_t index_version = 1;

bool is_word_byte(unsigned char c) noexcept
{
    return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}

void put_u32(std::ostream& out, std::uint32_t v)
{
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v)
{
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

void put_f64(std::ostream& out, double v)
{
    std::uint64_t bits;
    static_assert(sizeof bits == sizeof v);
    std::memcpy(&bits, &v, sizeof v);
    put_u64(out, bits);
}

void put_str(std::ostream& out, const std::string& s)
{
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    std::uint64_t u(int bytes)
    {
        unsigned char b[8];
        if (!in_.read(reinterpret_cast<char*>(b), bytes)) throw FormatError(0, "truncated index file");
        std::uint64_t v = 0;
        for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(u(4)); }
    std::uint64_t u64() { return u(8); }
    double f64()
    {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof v);
        return v;
    }
    std::string str()
    {
        const auto n = u32();
        std::string s(n, '\0');
        if (n && !in_.read(s.data(), n)) throw FormatError(0, "truncated index file");
        return s;
    }

private:
    std::istream& in_;
};

} // namespace

std::string_view to_string(ResultSource source) noexcept
{
    switch (source) {
    case ResultSource::organic: return "organic";
    case ResultSource::answer_box: return "answer_box";
    case ResultSource::local: return "local";
    }
    return "local";
}

std::vector<std::string> tokenize(std::string_view input)
{
    const std::string lowered = text::lowercase(input);
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < lowered.size()) {
        while (i < lowered.size() && !is_word_byte(static_cast<unsigned char>(lowered[i]))) ++i;
        std::size_t j = i;
        while (j < lowered.size() && is_word_byte(static_cast<unsigned char>(lowered[j]))) ++j;
        if (j > i) out.emplace_back(lowered.substr(i, j - i));
        i = j;
    }
    return out;
}

InvertedIndex build_index(const std::vector<Document>& corpus, Bm25Params params)
{
    if (corpus.empty()) throw EmptyCorpusError("cannot index an empty corpus");
    InvertedIndex index;
    index.params_ = params;
    for (const auto& doc : corpus) {
        const auto ordinal = static_cast<std::uint32_t>(index.docs_.size());
        if (!index.by_id_.emplace(doc.doc_id, ordinal).second) {
            throw DuplicateDocError("duplicate doc_id \"" + doc.doc_id + "\"");
        }
        auto tokens = tokenize(doc.title);
        auto body_tokens = tokenize(doc.body);
        tokens.insert(tokens.end(), body_tokens.begin(), body_tokens.end());

        std::map<std::string, std::uint32_t> tf;
        for (auto& t : tokens) ++tf[t];
        for (auto& [term, f] : tf) index.postings_[term].push_back({ordinal, f});

        index.docs_.push_back({doc.doc_id, doc.title, text::utf8_prefix(doc.body, snippet_length),
                               static_cast<std::uint32_t>(tokens.size())});
    }
    index.finalize();
    return index;
}

void InvertedIndex::finalize()
{
    by_id_.clear();
    double total = 0.0;
    for (std::uint32_t i = 0; i < docs_.size(); ++i) {
        by_id_.emplace(docs_[i].doc_id, i);
        total += docs_[i].length;
    }
    avg_doc_length_ = docs_.empty() ? 0.0 : total / static_cast<double>(docs_.size());
}

std::uint32_t InvertedIndex::ordinal(const std::string& doc_id) const
{
    auto it = by_id_.find(doc_id);
    if (it == by_id_.end()) throw UnknownDocError("unknown doc_id \"" + doc_id + "\"");
    return it->second;
}

std::uint32_t InvertedIndex::doc_length(const std::string& doc_id) const
{
    return docs_[ordinal(doc_id)].length;
}

std::uint32_t InvertedIndex::document_frequency(const std::string& term) const noexcept
{
    auto it = postings_.find(term);
    return it == postings_.end() ? 0 : static_cast<std::uint32_t>(it->second.size());
}

std::uint32_t InvertedIndex::term_frequency(const std::string& term, std::uint32_t doc) const noexcept
{
    auto it = postings_.find(term);
    if (it == postings_.end()) return 0;
    const auto& list = it->second;
    auto p = std::lower_bound(list.begin(), list.end(), doc,
                              [](const Posting& posting, std::uint32_t d) { return posting.doc < d; });
    return p != list.end() && p->doc == doc ? p->tf : 0;
}

double InvertedIndex::idf(const std::string& term) const noexcept
{
    const double n = document_frequency(term);
    const double N = static_cast<double>(docs_.size());
    return std::log(1.0 + (N - n + 0.5) / (n + 0.5));
}

void InvertedIndex::save(std::ostream& out) const
{
    out.write(index_magic, sizeof index_magic);
    put_u32(out, index_version);
    put_f64(out, params_.k1);
    put_f64(out, params_.b);
    put_u64(out, docs_.size());
    for (const auto& d : docs_) {
        put_str(out, d.doc_id);
        put_str(out, d.title);
        put_str(out, d.snippet);
        put_u32(out, d.length);
    }
    put_u64(out, postings_.size());
    for (const auto& [term, list] : postings_) {
        put_str(out, term);
        put_u32(out, static_cast<std::uint32_t>(list.size()));
        for (const auto& p : list) {
            put_u32(out, p.doc);
            put_u32(out, p.tf);
        }
    }
}

void InvertedIndex::save(const fs::path& path) const
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write index " + path.string());
    save(out);
}

InvertedIndex InvertedIndex::load(std::istream& in)
{
    char magic[sizeof index_magic];
    if (!in.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, index_magic)) {
        throw FormatError(0, "not a BAGGIDX1 index file");
    }
    Reader r(in);
    if (const auto v = r.u32(); v != index_version) {
        throw FormatError(0, "unsupported index version " + std::to_string(v));
    }
    InvertedIndex index;
    index.params_.k1 = r.f64();
    index.params_.b = r.f64();
    const auto doc_count = r.u64();
    for (std::uint64_t i = 0; i < doc_count; ++i) {
        StoredDoc d;
        d.doc_id = r.str();
        d.title = r.str();
        d.snippet = r.str();
        d.length = r.u32();
        index.docs_.push_back(std::move(d));
    }
    const auto term_count = r.u64();
    for (std::uint64_t i = 0; i < term_count; ++i) {
        auto term = r.str();
        const auto n = r.u32();
        std::vector<Posting> list(n);
        for (auto& p : list) {
            p.doc = r.u32();
            p.tf = r.u32();
            if (p.doc >= index.docs_.size()) throw FormatError(0, "posting refers to a missing document");
        }
        index.postings_.emplace(std::move(term), std::move(list));
    }
    index.finalize();
    return index;
}

InvertedIndex InvertedIndex::load(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open index " + path.string());
    return load(in);
}

std::vector<Document> load_corpus(std::istream& in)
{
    std::vector<Document> corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            if (!j.contains("doc_id") || !j.contains("body")) {
                throw FormatError(line_no, "document needs \"doc_id\" and \"body\"");
            }
            const auto& id = j["doc_id"];
            corpus.push_back({id.is_string() ? id.get<std::string>() : id.dump(), j.value("title", ""),
                              j["body"].get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(line_no, e.what());
        }
    }
    return corpus;
}

std::vector<Document> load_corpus(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open corpus " + path.string());
    return load_corpus(in);
}

double bm25_score(const InvertedIndex& index, const std::vector<std::string>& query_terms,
                  const std::string& doc_id)
{
    const auto doc = index.ordinal(doc_id);
    const double len = index.docs()[doc].length;
    const auto& p = index.params();
    const double norm = p.k1 * (1.0 - p.b + p.b * len / index.avg_doc_length());
    double score = 0.0;
    for (const auto& term : query_terms) {
        const double tf = index.term_frequency(term, doc);
        if (tf == 0.0) continue;
        score += index.idf(term) * tf * (p.k1 + 1.0) / (tf + norm);
    }
    return score;
}

std::vector<SearchResult> search(const InvertedIndex& index, std::string_view query, std::size_t top_n)
{
    const auto terms = tokenize(query);
    const auto& p = index.params();
    std::unordered_map<std::uint32_t, double> scores;
    for (const auto& term : terms) {
        auto it = index.postings().find(term);
        if (it == index.postings().end()) continue;
        const double idf = index.idf(term);
        for (const auto& posting : it->second) {
            const double len = index.docs()[posting.doc].length;
            const double norm = p.k1 * (1.0 - p.b + p.b * len / index.avg_doc_length());
            const double tf = posting.tf;
            scores[posting.doc] += idf * tf * (p.k1 + 1.0) / (tf + norm);
        }
    }

    std::vector<std::pair<std::uint32_t, double>> ranked(scores.begin(), scores.end());
    std::sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return index.docs()[a.first].doc_id < index.docs()[b.first].doc_id;
    });
    if (ranked.size() > top_n) ranked.resize(top_n);

    std::vector<SearchResult> out;
    out.reserve(ranked.size());
    int rank = 1;
    for (const auto& [doc, score] : ranked) {
        const auto& d = index.docs()[doc];
        out.push_back({d.title, d.snippet, rank++, ResultSource::local, d.doc_id, score});
    }
    return out;
}

std::string canonical_query(std::string_view query)
{
    return text::collapse_whitespace(text::lowercase(query));
}

std::string serp_fixture_key(std::string_view query)
{
    return sha256_hex(canonical_query(query));
}

nlohmann::json SerpFixtureProvider::raw_results(const std::string& query)
{
    const auto key = serp_fixture_key(query);
    std::ifstream in(dir_ / (key + ".json"), std::ios::binary);
    if (!in) throw FixtureMissError(key, "no search fixture for query \"" + query + "\"");
    try {
        return nlohmann::json::parse(in).at("response");
    } catch (const nlohmann::json::exception& e) {
        throw ProviderError("corrupt search fixture " + key + ": " + e.what());
    }
}

void SerpFixtureProvider::store(const std::string& query, const nlohmann::json& response)
{
    const auto key = serp_fixture_key(query);
    const nlohmann::json j{{"query", query}, {"response", response}};
    std::lock_guard lock(write_mutex_);
    fs::create_directories(dir_);
    const auto tmp = dir_ / (key + ".json.tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << j.dump(2) << '\n';
        if (!out) throw ProviderError("cannot write search fixture " + tmp.string());
    }
    fs::rename(tmp, dir_ / (key + ".json"));
}

SerperConfig SerperConfig::from_env()
{
    SerperConfig config;
    if (const char* v = std::getenv("SERP_API_KEY")) config.api_key = v;
    return config;
}

SerperProvider::SerperProvider(SerperConfig config) : config_(std::move(config))
{
    if (config_.api_key.empty()) throw ConfigError("SERP_API_KEY is not set");
}

nlohmann::json SerperProvider::raw_results(const std::string& query)
{
    const auto [origin, path] = llm::split_url(config_.endpoint);
    httplib::Client client(origin);
    client.set_read_timeout(std::chrono::seconds(60));
    const httplib::Headers headers{{"X-API-KEY", config_.api_key}};
    auto res = client.Post(path, headers, nlohmann::json{{"q", query}}.dump(), "application/json");
    if (!res) throw ProviderError("search request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
        throw ProviderError("search request returned HTTP " + std::to_string(res->status));
    }
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
        throw ProviderError(std::string("search response is not JSON: ") + e.what());
    }
}

nlohmann::json RecordingSerpProvider::raw_results(const std::string& query)
{
    auto response = inner_.raw_results(query);
    store_.store(query, response);
    return response;
}

std::vector<SearchResult> parse_serp(const nlohmann::json& response, std::size_t organic_count)
{
    std::vector<SearchResult> out;
    auto str = [](const nlohmann::json& obj, const char* key) {
        return obj.contains(key) && obj[key].is_string() ? obj[key].get<std::string>() : std::string();
    };
    if (response.contains("answerBox") && response["answerBox"].is_object()) {
        const auto& box = response["answerBox"];
        auto snippet = str(box, "answer");
        if (snippet.empty()) snippet = str(box, "snippet");
        if (!snippet.empty()) out.push_back({str(box, "title"), snippet, 1, ResultSource::answer_box, "", 0.0});
    }
    if (response.contains("organic") && response["organic"].is_array()) {
        int rank = 1;
        for (const auto& item : response["organic"]) {
            if (static_cast<std::size_t>(rank) > organic_count) break;
            out.push_back({str(item, "title"), str(item, "snippet"), rank++, ResultSource::organic, "", 0.0});
        }
    }
    return out;
}

std::vector<SearchResult> fetch_serp(SerpProvider& provider, const std::string& query, std::size_t organic_count)
{
    return parse_serp(provider.raw_results(query), organic_count);
}

} // namespace beamaggr::retrieval
