#include "kest/diagnostics.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace kest::diag {
namespace {

std::mutex& counters_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, std::uint64_t, std::less<>>& counters() {
  static std::map<std::string, std::uint64_t, std::less<>> c;
  return c;
}

std::atomic<bool> g_verbose{false};

}  // namespace

void warn(std::string_view key) {
  {
    std::lock_guard lock(counters_mutex());
    auto& c = counters();
    auto it = c.find(key);
    if (it == c.end()) {
      c.emplace(std::string(key), 1);
    } else {
      ++it->second;
    }
  }
  if (g_verbose.load(std::memory_order_relaxed)) {
    std::cerr << "warning: " << key << '\n';
  }
}

std::uint64_t warning_count(std::string_view key) {
  std::lock_guard lock(counters_mutex());
  auto it = counters().find(key);
  return it == counters().end() ? 0 : it->second;
}

std::map<std::string, std::uint64_t> warning_snapshot() {
  std::lock_guard lock(counters_mutex());
  return {counters().begin(), counters().end()};
}

void reset_warnings() {
  std::lock_guard lock(counters_mutex());
  counters().clear();
}

void set_verbose(bool verbose) { g_verbose.store(verbose); }

}  // namespace kest::diag
