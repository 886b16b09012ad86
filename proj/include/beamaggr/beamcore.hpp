#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

// Answer aggregation: voting, softmax normalization with top-k truncation,
// Cartesian beam combination and marginal aggregation over substituted
// questions.
namespace beamaggr::beam {

/// Lowercase, trimmed, whitespace-collapsed answer with trailing sentence
/// punctuation removed. Empty input gives empty output (a non-vote).
std::string canonicalize_answer(std::string_view raw);

/// Vote counts per canonical answer, plus the surface variants seen for it.
class FrequencyTable {
public:
    /// Adds `count` votes for `surface`; empty canonical forms are ignored.
    void add(std::string_view surface, int count = 1);

    /// Adds `count` votes for an already canonical answer with a given surface.
    void add_canonical(const std::string& canonical, const std::string& surface, int count);

    bool empty() const noexcept { return counts_.empty(); }
    std::size_t size() const noexcept { return counts_.size(); }
    int count(const std::string& canonical) const;
    int total() const noexcept;

    /// Most frequent surface form; ties go to the lexicographically smallest.
    std::string surface(const std::string& canonical) const;

    const std::map<std::string, int>& counts() const noexcept { return counts_; }
    const std::map<std::string, std::map<std::string, int>>& variants() const noexcept
    {
        return variants_;
    }

    bool operator==(const FrequencyTable&) const = default;

private:
    std::map<std::string, int> counts_;
    std::map<std::string, std::map<std::string, int>> variants_;
};

struct Candidate {
    std::string answer;  // canonical
    std::string surface;
    double prob = 0.0;

    bool operator==(const Candidate&) const = default;
};

/// Descending probability, then ascending canonical answer.
bool candidate_order(const Candidate& a, const Candidate& b) noexcept;

/// Beam of a node: at most `capacity` candidates summing to one, ordered by
/// candidate_order.
struct CandidateSet {
    std::vector<Candidate> items;
    std::size_t capacity = 1;

    bool empty() const noexcept { return items.empty(); }
    std::size_t size() const noexcept { return items.size(); }
    const Candidate& top() const { return items.front(); }
    double prob(const std::string& canonical) const noexcept;

    bool operator==(const CandidateSet&) const = default;
};

struct Combination {
    std::vector<Candidate> members;  // one per child, in child order
    double joint_prob = 0.0;

    std::vector<std::string> surfaces() const;
};

struct WeightedDistribution {
    double weight = 0.0;
    CandidateSet dist;
};

FrequencyTable vote(const std::vector<std::string>& samples);

FrequencyTable merge_votes(const std::vector<FrequencyTable>& tables);

/// Softmax of f/τ over every answer in the table, sorted by candidate_order.
std::vector<Candidate> softmax_distribution(const FrequencyTable& table, double temperature);

/// Keeps the first `k` entries of an ordered distribution and renormalizes.
CandidateSet truncate_renormalize(std::vector<Candidate> ordered, std::size_t k);

/// softmax_distribution followed by truncate_renormalize.
CandidateSet normalize_truncate(const FrequencyTable& table, double temperature, std::size_t k);

/// Cartesian product of the children's candidates ordered by descending joint
/// probability (ties on the concatenated canonical answers), capped at
/// `max_combinations`.
std::vector<Combination> beam_combine(const std::vector<CandidateSet>& children,
                                      std::size_t max_combinations);

/// Σ_i weight_i · dist_i(y) for every answer, ordered by candidate_order and
/// not truncated. Weights must sum to one within 1e-6; they are renormalized.
std::vector<Candidate> marginalize(const std::vector<WeightedDistribution>& branches);

CandidateSet marginal_aggregate(const std::vector<WeightedDistribution>& branches, std::size_t k);

/// Surface form of the most probable candidate.
std::string final_answer(const CandidateSet& root_candidates);

nlohmann::json to_json(const FrequencyTable& table);
FrequencyTable frequency_table_from_json(const nlohmann::json& j);
nlohmann::json to_json(const std::vector<Candidate>& candidates);
std::vector<Candidate> candidates_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CandidateSet& set);
CandidateSet candidate_set_from_json(const nlohmann::json& j);

} // namespace beamaggr::beam
