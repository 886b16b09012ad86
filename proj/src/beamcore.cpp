#include "beamaggr/beamcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include "beamaggr/errors.hpp"
#include "beamaggr/text.hpp"

namespace beamaggr::beam {

namespace {

constexpr double weight_tolerance = 1e-6;
constexpr double dist_tolerance = 1e-9;

bool is_sentence_punct(char c) noexcept
{
    return c == '.' || c == '!' || c == '?' || c == ';' || c == ':' || c == ',';
}

std::string strip_trailing_punct(std::string s)
{
    while (!s.empty() && (is_sentence_punct(s.back()) || text::is_space(s.back()))) s.pop_back();
    return s;
}

void require_positive(std::size_t k, const char* what)
{
    if (k == 0) throw std::invalid_argument(std::string(what) + " must be positive");
}

} // namespace

std::string canonicalize_answer(std::string_view raw)
{
    return strip_trailing_punct(text::collapse_whitespace(text::lowercase(raw)));
}

void FrequencyTable::add(std::string_view surface, int count)
{
    auto canonical = canonicalize_answer(surface);
    if (canonical.empty() || count <= 0) return;
    add_canonical(canonical, strip_trailing_punct(text::collapse_whitespace(surface)), count);
}

void FrequencyTable::add_canonical(const std::string& canonical, const std::string& surface, int count)
{
    if (canonical.empty() || count <= 0) return;
    counts_[canonical] += count;
    variants_[canonical][surface] += count;
}

int FrequencyTable::count(const std::string& canonical) const
{
    auto it = counts_.find(canonical);
    return it == counts_.end() ? 0 : it->second;
}

int FrequencyTable::total() const noexcept
{
    int sum = 0;
    for (const auto& [_, c] : counts_) sum += c;
    return sum;
}

std::string FrequencyTable::surface(const std::string& canonical) const
{
    auto it = variants_.find(canonical);
    if (it == variants_.end()) return canonical;
    const std::string* best = nullptr;
    int best_count = 0;
    for (const auto& [form, c] : it->second) {
        if (c > best_count) {
            best = &form;
            best_count = c;
        }
    }
    return best ? *best : canonical;
}

bool candidate_order(const Candidate& a, const Candidate& b) noexcept
{
    if (a.prob != b.prob) return a.prob > b.prob;
    return a.answer < b.answer;
}

double CandidateSet::prob(const std::string& canonical) const noexcept
{
    for (const auto& c : items) {
        if (c.answer == canonical) return c.prob;
    }
    return 0.0;
}

std::vector<std::string> Combination::surfaces() const
{
    std::vector<std::string> out;
    out.reserve(members.size());
    for (const auto& m : members) out.push_back(m.surface);
    return out;
}

FrequencyTable vote(const std::vector<std::string>& samples)
{
    FrequencyTable table;
    for (const auto& s : samples) table.add(s);
    return table;
}

FrequencyTable merge_votes(const std::vector<FrequencyTable>& tables)
{
    FrequencyTable merged;
    for (const auto& t : tables) {
        for (const auto& [canonical, forms] : t.variants()) {
            for (const auto& [form, c] : forms) merged.add_canonical(canonical, form, c);
        }
    }
    return merged;
}

std::vector<Candidate> softmax_distribution(const FrequencyTable& table, double temperature)
{
    if (table.empty()) throw EmptyTableError("cannot normalize an empty frequency table");
    if (!(temperature > 0.0)) throw std::invalid_argument("vote temperature must be positive");
    int max_f = 0;
    for (const auto& [_, f] : table.counts()) max_f = std::max(max_f, f);

    std::vector<Candidate> out;
    out.reserve(table.size());
    double z = 0.0;
    for (const auto& [answer, f] : table.counts()) {
        const double e = std::exp((f - max_f) / temperature);
        out.push_back({answer, table.surface(answer), e});
        z += e;
    }
    for (auto& c : out) c.prob /= z;
    std::sort(out.begin(), out.end(), candidate_order);
    return out;
}

CandidateSet truncate_renormalize(std::vector<Candidate> ordered, std::size_t k)
{
    require_positive(k, "beam size");
    if (ordered.size() > k) ordered.resize(k);
    double z = 0.0;
    for (const auto& c : ordered) z += c.prob;
    if (z > 0.0) {
        for (auto& c : ordered) c.prob /= z;
    }
    return CandidateSet{std::move(ordered), k};
}

CandidateSet normalize_truncate(const FrequencyTable& table, double temperature, std::size_t k)
{
    return truncate_renormalize(softmax_distribution(table, temperature), k);
}

std::vector<Combination> beam_combine(const std::vector<CandidateSet>& children,
                                      std::size_t max_combinations)
{
    require_positive(max_combinations, "max_combinations");
    for (const auto& c : children) {
        if (c.empty()) throw EmptyCandidatesError("cannot combine an empty candidate set");
    }

    struct Keyed {
        Combination combo;
        std::string key;
    };
    std::vector<Keyed> all;
    std::vector<std::size_t> cursor(children.size(), 0);
    while (true) {
        Keyed k;
        k.combo.joint_prob = 1.0;
        for (std::size_t i = 0; i < children.size(); ++i) {
            const auto& member = children[i].items[cursor[i]];
            k.combo.members.push_back(member);
            k.combo.joint_prob *= member.prob;
            if (i) k.key.push_back('\x1f');
            k.key += member.answer;
        }
        all.push_back(std::move(k));

        // odometer increment, last child fastest
        bool wrapped = true;
        for (std::size_t i = children.size(); i-- > 0;) {
            if (++cursor[i] < children[i].items.size()) {
                wrapped = false;
                break;
            }
            cursor[i] = 0;
        }
        if (wrapped) break;
    }

    std::sort(all.begin(), all.end(), [](const Keyed& a, const Keyed& b) {
        if (a.combo.joint_prob != b.combo.joint_prob) return a.combo.joint_prob > b.combo.joint_prob;
        return a.key < b.key;
    });
    if (all.size() > max_combinations) all.resize(max_combinations);

    std::vector<Combination> out;
    out.reserve(all.size());
    for (auto& k : all) out.push_back(std::move(k.combo));
    return out;
}

std::vector<Candidate> marginalize(const std::vector<WeightedDistribution>& branches)
{
    if (branches.empty()) throw WeightSumError("no branches to aggregate");

    // Fixed summation order makes the result independent of branch order.
    std::vector<const WeightedDistribution*> sorted;
    for (const auto& b : branches) sorted.push_back(&b);
    std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) {
        if (a->weight != b->weight) return a->weight > b->weight;
        return std::lexicographical_compare(
            a->dist.items.begin(), a->dist.items.end(), b->dist.items.begin(), b->dist.items.end(),
            [](const Candidate& x, const Candidate& y) {
                return std::tie(x.answer, x.prob, x.surface) < std::tie(y.answer, y.prob, y.surface);
            });
    });

    double weight_sum = 0.0;
    for (const auto* b : sorted) {
        if (!(b->weight >= 0.0)) throw WeightSumError("negative branch weight");
        double dist_sum = 0.0;
        for (const auto& c : b->dist.items) dist_sum += c.prob;
        if (std::abs(dist_sum - 1.0) > dist_tolerance) {
            throw WeightSumError("branch distribution sums to " + std::to_string(dist_sum));
        }
        weight_sum += b->weight;
    }
    if (std::abs(weight_sum - 1.0) > weight_tolerance) {
        throw WeightSumError("branch weights sum to " + std::to_string(weight_sum));
    }

    struct Mass {
        double prob = 0.0;
        double best_contribution = -1.0;
        std::string surface;
    };
    std::map<std::string, Mass> mass;
    for (const auto* b : sorted) {
        const double w = b->weight / weight_sum;
        for (const auto& c : b->dist.items) {
            auto& m = mass[c.answer];
            const double contribution = w * c.prob;
            m.prob += contribution;
            if (contribution > m.best_contribution ||
                (contribution == m.best_contribution && c.surface < m.surface)) {
                m.best_contribution = contribution;
                m.surface = c.surface;
            }
        }
    }

    std::vector<Candidate> out;
    out.reserve(mass.size());
    for (auto& [answer, m] : mass) out.push_back({answer, std::move(m.surface), m.prob});
    std::sort(out.begin(), out.end(), candidate_order);
    return out;
}

CandidateSet marginal_aggregate(const std::vector<WeightedDistribution>& branches, std::size_t k)
{
    return truncate_renormalize(marginalize(branches), k);
}

std::string final_answer(const CandidateSet& root_candidates)
{
    if (root_candidates.empty()) throw EmptyCandidatesError("root has no candidates");
    return root_candidates.top().surface;
}

nlohmann::json to_json(const FrequencyTable& table)
{
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [answer, count] : table.counts()) {
        out.push_back({{"answer", answer}, {"count", count}, {"surfaces", table.variants().at(answer)}});
    }
    return out;
}

FrequencyTable frequency_table_from_json(const nlohmann::json& j)
{
    FrequencyTable table;
    for (const auto& row : j) {
        const auto answer = row.at("answer").get<std::string>();
        for (const auto& [form, c] : row.at("surfaces").items()) {
            table.add_canonical(answer, form, c.get<int>());
        }
    }
    return table;
}

nlohmann::json to_json(const std::vector<Candidate>& candidates)
{
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : candidates) {
        out.push_back({{"answer", c.answer}, {"surface", c.surface}, {"prob", c.prob}});
    }
    return out;
}

std::vector<Candidate> candidates_from_json(const nlohmann::json& j)
{
    std::vector<Candidate> out;
    for (const auto& row : j) {
        out.push_back({row.at("answer").get<std::string>(), row.at("surface").get<std::string>(),
                       row.at("prob").get<double>()});
    }
    return out;
}

nlohmann::json to_json(const CandidateSet& set)
{
    return {{"capacity", set.capacity}, {"items", to_json(set.items)}};
}

CandidateSet candidate_set_from_json(const nlohmann::json& j)
{
    return CandidateSet{candidates_from_json(j.at("items")), j.at("capacity").get<std::size_t>()};
}

} // namespace beamaggr::beam
