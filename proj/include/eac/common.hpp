#pragma once

#include <Eigen/Core>
#include <sstream>
#include <stdexcept>
#include <string>

namespace eac {

/// Base class of everything this library throws.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration (bad shapes, bad hyperparameters, bad config files).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Malformed or out-of-contract data (bad labels, schema violations).
class DataError : public Error {
public:
  using Error::Error;
};

/// Filesystem / serialization failures; message always names the path.
class IoError : public Error {
public:
  using Error::Error;
};

/// Non-finite values where the math requires finite ones.
class NumericError : public Error {
public:
  using Error::Error;
};

/// A caller broke an API precondition (mismatched tensor pairs etc.).
class ContractError : public Error {
public:
  using Error::Error;
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename Head, typename... Tail>
void cat_into(std::ostringstream& os, Head&& head, Tail&&... tail) {
  os << head;
  cat_into(os, std::forward<Tail>(tail)...);
}
} // namespace detail

/// Builds a message from heterogeneous pieces: msg("got ", 3, " items").
template <typename... Args>
std::string msg(Args&&... args) {
  std::ostringstream os;
  os.precision(17);
  detail::cat_into(os, std::forward<Args>(args)...);
  return os.str();
}

/// Deterministic mode serializes all reductions (bitwise-reproducible runs).
/// Fast mode lets the linear-algebra backend use whatever parallelism it has;
/// results stay statistically identical but are not guaranteed bit-stable.
inline bool& deterministic_mode_flag() {
  static bool flag = false;
  return flag;
}

inline void set_deterministic_mode(bool on) {
  deterministic_mode_flag() = on;
  Eigen::setNbThreads(on ? 1 : 0); // 0 restores the backend default
}

inline bool deterministic_mode() { return deterministic_mode_flag(); }

} // namespace eac
