// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace proxsae {

enum class ErrorKind {
  contract,            // precondition or dimension violation
  degenerate_atom,     // zero column where a unit direction is required
  capacity,            // exhaustive search asked to go too large
  divergence,          // non-finite value during iteration or training
  format,              // bad magic / malformed container
  corruption,          // length mismatch, truncation
  unsupported_version,
  undefined_metric,
  coherence,           // planted atoms could not be drawn incoherent enough
  degenerate_concept,  // concept axis with zero length
  schema,              // configuration rejected before compute
  io,
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::contract: return "contract";
    case ErrorKind::degenerate_atom: return "degenerate-atom";
    case ErrorKind::capacity: return "capacity";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::format: return "format";
    case ErrorKind::corruption: return "corruption";
    case ErrorKind::unsupported_version: return "unsupported-version";
    case ErrorKind::undefined_metric: return "undefined-metric";
    case ErrorKind::coherence: return "coherence";
    case ErrorKind::degenerate_concept: return "degenerate-concept";
    case ErrorKind::schema: return "schema";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Base of every error the library throws. `detail` carries the offending
/// index, iteration or byte offset when one exists.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what, std::optional<std::uint64_t> detail = std::nullopt)
      : std::runtime_error(what), kind_(kind), detail_(detail) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::optional<std::uint64_t> detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::optional<std::uint64_t> detail_;
};

template <ErrorKind K>
class TypedError : public Error {
 public:
  explicit TypedError(const std::string& what, std::optional<std::uint64_t> detail = std::nullopt)
      : Error(K, what, detail) {}
};

using ContractViolation = TypedError<ErrorKind::contract>;
using DegenerateAtomError = TypedError<ErrorKind::degenerate_atom>;
using CapacityError = TypedError<ErrorKind::capacity>;
using DivergenceError = TypedError<ErrorKind::divergence>;
using FormatError = TypedError<ErrorKind::format>;
using CorruptionError = TypedError<ErrorKind::corruption>;
using UnsupportedVersionError = TypedError<ErrorKind::unsupported_version>;
using UndefinedMetricError = TypedError<ErrorKind::undefined_metric>;
using CoherenceError = TypedError<ErrorKind::coherence>;
using DegenerateConceptError = TypedError<ErrorKind::degenerate_concept>;
using SchemaError = TypedError<ErrorKind::schema>;
using IoError = TypedError<ErrorKind::io>;

inline void require(bool cond, const char* what) {
  if (!cond) throw ContractViolation(what);
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace proxsae
