#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace kest::diag {

// Process-wide warning counters. Operations that hit a recoverable edge case
// (clamped log argument, all-PAD target, skipped generation) bump a named
// counter instead of failing.
void warn(std::string_view key);
std::uint64_t warning_count(std::string_view key);
std::map<std::string, std::uint64_t> warning_snapshot();
void reset_warnings();

// When enabled, every warning is also echoed to stderr.
void set_verbose(bool verbose);

}  // namespace kest::diag
