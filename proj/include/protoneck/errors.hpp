#pragma once

#include <stdexcept>
#include <string>

namespace protoneck {

// Error taxonomy shared across the library. The CLI maps these onto
// process exit codes (config 2, checkpoint 3, data 4).
struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& m) : std::runtime_error(m) {}
};

struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& m) : std::runtime_error(m) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& m) : std::runtime_error(m) {}
};

struct training_error : std::runtime_error {
    explicit training_error(const std::string& m) : std::runtime_error(m) {}
};

struct config_error : std::runtime_error {
    explicit config_error(const std::string& m) : std::runtime_error(m) {}
};

struct checkpoint_error : std::runtime_error {
    explicit checkpoint_error(const std::string& m) : std::runtime_error(m) {}
};

struct data_error : std::runtime_error {
    explicit data_error(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace protoneck
