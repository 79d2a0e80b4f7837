#pragma once

#include <stdexcept>
#include <string>

namespace fwa {

// Error taxonomy shared by the library and the CLI exit-code mapping:
// config/usage problems exit 2, runtime/numeric problems exit 3.

struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct parse_error : std::runtime_error {
    explicit parse_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct schema_error : std::runtime_error {
    explicit schema_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace fwa
