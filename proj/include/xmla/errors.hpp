#pragma once

#include <stdexcept>
#include <string>

namespace xmla {

// Contract violations carry their own type so callers (and tests) can tell
// a shape mismatch from a bad rank or a cache of the wrong variant.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct RankError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct GeometryError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct CacheError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};
struct SpectrumError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct VocabError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct DataError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct KindError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct UnsupportedError : std::logic_error {
    using std::logic_error::logic_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace xmla
