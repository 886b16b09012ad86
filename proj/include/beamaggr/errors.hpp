#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace beamaggr {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// qtree
class SyntaxError : public Error {
public:
    using Error::Error;
};

class StructureError : public Error {
public:
    using Error::Error;
};

class MissingAnswerError : public Error {
public:
    using Error::Error;
};

// beamcore
class EmptyTableError : public Error {
public:
    using Error::Error;
};

class EmptyCandidatesError : public Error {
public:
    using Error::Error;
};

class WeightSumError : public Error {
public:
    using Error::Error;
};

// llmio / retrieval
class BackendError : public Error {
public:
    using Error::Error;
};

class FixtureMissError : public Error {
public:
    FixtureMissError(std::string key, const std::string& what)
        : Error(what + " (fixture key " + key + ")"), key_(std::move(key))
    {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class ProviderError : public Error {
public:
    using Error::Error;
};

class EmptyCorpusError : public Error {
public:
    using Error::Error;
};

class DuplicateDocError : public Error {
public:
    using Error::Error;
};

class UnknownDocError : public Error {
public:
    using Error::Error;
};

// evalkit
class FormatError : public Error {
public:
    FormatError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line)
    {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class IncompleteTraceError : public Error {
public:
    using Error::Error;
};

// strategies / engine
class AllSourcesEmptyError : public Error {
public:
    explicit AllSourcesEmptyError(const std::string& question,
                                  std::optional<int> node = std::nullopt)
        : Error(node ? "no strategy produced an answer at node " + std::to_string(*node) +
                           ": " + question
                     : "no strategy produced an answer: " + question),
          node_(node)
    {}
    std::optional<int> node() const noexcept { return node_; }

private:
    std::optional<int> node_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace beamaggr
