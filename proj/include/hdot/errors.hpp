#pragma once

#include <stdexcept>
#include <string>

namespace hdot {

/// Base class for all runtime-reported failures.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Misuse of an API contract (bad arguments, bad region, bad buffer).
struct UsageError : Error {
    using Error::Error;
};

/// A nested task declared an access outside its parent's declared regions.
struct ContainmentError : Error {
    using Error::Error;
};

/// Violation of a messaging or reduction protocol (length mismatch, notify
/// without defer, mixed reduction ops, collective op mismatch, lost messages).
struct ProtocolError : Error {
    using Error::Error;
};

/// The watchdog observed no global progress for the configured timeout.
struct WatchdogError : Error {
    using Error::Error;
};

}  // namespace hdot
