#ifndef ROCKSCOPE_ERROR_HPP
#define ROCKSCOPE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace rockscope {

// Base for all toolkit errors. The CLI maps these to exit codes:
// IoError -> 2, everything else -> 1.
class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file; carries the 1-based line number when known.
class ParseError : public Error {
  public:
    ParseError(const std::string& msg, std::size_t line)
        : Error("parse error at line " + std::to_string(line) + ": " + msg), line_(line) {}
    std::size_t line() const { return line_; }

  private:
    std::size_t line_;
};

// A structural invariant of a domain type does not hold.
class ValidationError : public Error {
  public:
    explicit ValidationError(const std::string& msg) : Error("validation error: " + msg) {}
};

// Bad configuration value or unknown key.
class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

class IoError : public Error {
  public:
    explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// Degenerate statistical input (zero variance, all-zero differences, ...).
class StatError : public Error {
  public:
    explicit StatError(const std::string& msg) : Error("stat error: " + msg) {}
};

// A stratified sampler ran out of candidates.
class SamplingError : public Error {
  public:
    explicit SamplingError(const std::string& msg) : Error("sampling error: " + msg) {}
};

}  // namespace rockscope

#endif
