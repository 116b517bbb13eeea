// Exception types shared by every fedmix module.
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedmix {

// Mismatched tensor or model dimensions.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A numeric or count argument outside its documented range.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A partitioner could not produce a valid disjoint cover.
struct PartitionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid run configuration; `field` names the offending key.
struct ConfigError : std::runtime_error {
    ConfigError(std::string field_name, const std::string& message)
        : std::runtime_error(field_name + ": " + message), field(std::move(field_name)) {}
    std::string field;
};

// Non-finite parameters after a local update.
struct DivergenceError : std::runtime_error {
    DivergenceError(std::size_t round_index, std::size_t client_id)
        : std::runtime_error("non-finite parameters in round " + std::to_string(round_index) +
                             " from client " + std::to_string(client_id)),
          round(round_index), client(client_id) {}
    std::size_t round;
    std::size_t client;
};

}  // namespace fedmix
