#pragma once

#include <stdexcept>
#include <string>

namespace ikf {

// Bad inputs: malformed files, out-of-range arguments, schema violations.
class validation_error : public std::runtime_error {
public:
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure: training divergence, degenerate fits, infeasible packing.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace ikf
