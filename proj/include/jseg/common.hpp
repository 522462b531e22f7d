#pragma once

#include <stdexcept>
#include <string>

namespace jseg {

// Error categories map onto process exit codes: config/usage problems exit 2,
// malformed or inconsistent input data exit 3, numerical failures exit 4.
enum class error_kind { config = 2, data = 3, numeric = 4 };

class error : public std::runtime_error {
public:
    error(error_kind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    error_kind kind() const { return kind_; }
    int exit_code() const { return static_cast<int>(kind_); }

private:
    error_kind kind_;
};

struct config_error : error {
    explicit config_error(const std::string& msg) : error(error_kind::config, msg) {}
};
struct data_error : error {
    explicit data_error(const std::string& msg) : error(error_kind::data, msg) {}
};
struct numeric_error : error {
    explicit numeric_error(const std::string& msg) : error(error_kind::numeric, msg) {}
};

} // namespace jseg
