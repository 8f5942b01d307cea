#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace blurfield {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input (bad file, schema violation, shape mismatch).
class InputError : public Error {
public:
    using Error::Error;
};

/// A numerical procedure failed (divergence, non-convergence, degenerate fit).
class NumericError : public Error {
public:
    using Error::Error;
};

namespace log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

struct Sink {
    Level level = Level::info;
    std::function<void(Level, const std::string&)> handler;
    std::mutex mutex;
};

inline Sink& sink() {
    static Sink s;
    return s;
}

inline void set_level(Level level) { sink().level = level; }

/// Replace the output handler; pass an empty function to restore stderr output.
inline void set_handler(std::function<void(Level, const std::string&)> handler) {
    std::lock_guard lock(sink().mutex);
    sink().handler = std::move(handler);
}

inline void emit(Level level, const std::string& msg) {
    auto& s = sink();
    if (level < s.level) return;
    std::lock_guard lock(s.mutex);
    if (s.handler) {
        s.handler(level, msg);
        return;
    }
    static const char* names[] = {"debug", "info", "warning", "error"};
    std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void debug(const std::string& msg) { emit(Level::debug, msg); }
inline void info(const std::string& msg) { emit(Level::info, msg); }
inline void warn(const std::string& msg) { emit(Level::warn, msg); }

}  // namespace log

// ---------------------------------------------------------------------------
// Threading
//
// Work is split into a fixed set of chunks that depends only on the problem
// size. Threads pick up whole chunks, so any per-chunk reduction done by the
// caller in chunk order is bit-identical for every thread count.
// ---------------------------------------------------------------------------

inline std::atomic<int>& thread_setting() {
    static std::atomic<int> n{0};
    return n;
}

/// Global worker cap. 0 means "not configured": BLURFIELD_THREADS, then 1.
inline int thread_count() {
    int n = thread_setting().load();
    if (n > 0) return n;
    if (const char* env = std::getenv("BLURFIELD_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) return v;
    }
    return 1;
}

inline void set_thread_count(int n) { thread_setting().store(std::max(0, n)); }

/// Calls fn(chunk_index, begin, end) for every chunk of [0, n). Chunk
/// boundaries depend on n and chunk only.
template <class Fn>
void parallel_chunks(std::size_t n, std::size_t chunk, Fn&& fn) {
    if (n == 0) return;
    chunk = std::max<std::size_t>(chunk, 1);
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    const int workers = static_cast<int>(std::min<std::size_t>(thread_count(), n_chunks));
    auto run = [&](std::size_t c) { fn(c, c * chunk, std::min(n, (c + 1) * chunk)); };
    if (workers <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) run(c);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            std::size_t c = next.fetch_add(1);
            if (c >= n_chunks) return;
            try {
                run(c);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int t = 1; t < workers; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

/// Calls fn(i) for i in [0, n); items must be independent.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    parallel_chunks(n, 1, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) fn(i);
    });
}

/// splitmix64 finalizer; used to derive independent RNG seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return mix64(mix64(mix64(seed) ^ a) ^ (b * 0xD6E8FEB86659FD93ULL));
}

}  // namespace blurfield
