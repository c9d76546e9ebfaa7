#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lidargen {

// Base class for all library errors so callers can catch everything from this
// library with a single handler while still being able to discriminate.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input bytes/file do not conform to the expected container layout.
class malformed_input_error : public error {
 public:
  using error::error;
};

// A single record inside an otherwise well-formed container is invalid.
// Carries the zero-based record index for diagnostics.
class corrupt_record_error : public error {
 public:
  corrupt_record_error(const std::string& what, std::size_t record_index)
      : error(what), record_index_(record_index) {}
  std::size_t record_index() const noexcept { return record_index_; }

 private:
  std::size_t record_index_;
};

// An in-memory scan violates its own invariants (e.g. non-finite coordinates).
class invalid_scan_error : public error {
 public:
  using error::error;
};

// A dataset root or stream contained nothing usable.
class empty_dataset_error : public error {
 public:
  using error::error;
};

// An operation was called on arguments that violate its stated preconditions
// (wrong representation, mismatched sizes, empty sets, ...).
class precondition_error : public error {
 public:
  using error::error;
};

// Training produced a non-finite loss and was aborted.
class training_diverged_error : public error {
 public:
  using error::error;
};

// splitmix64 finalizer; decorrelates nearby inputs.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent per-item seed from a base seed and an item index so
// that parallel work on item i never depends on which worker touches it.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  return mix64(base ^ mix64(index + 0x51ed2701u));
}

}  // namespace lidargen
