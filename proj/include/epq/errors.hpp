#pragma once

#include <stdexcept>
#include <string>

namespace epq {

/// Thrown when a computation needs beta-hat mass at a pair the dataset never
/// visited and no probability floor was requested.
class support_error : public std::runtime_error {
  public:
    explicit support_error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input file; message carries the offending line number.
class parse_error : public std::runtime_error {
  public:
    explicit parse_error(const std::string& what) : std::runtime_error(what) {}
};

/// All states in a dataset share one coordinate; no cluster radius exists.
class degenerate_geometry_error : public std::runtime_error {
  public:
    explicit degenerate_geometry_error(const std::string& what)
        : std::runtime_error(what) {}
};

} // namespace epq
