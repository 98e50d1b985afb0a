#include "dqd2v/common.hpp"

#include <atomic>
#include <cstdio>

namespace dqd2v {

namespace {
std::atomic<std::int64_t> g_warn_count{0};
std::atomic<bool> g_warn_quiet{false};
}

void warn(const std::string& msg) {
    g_warn_count.fetch_add(1);
    if (!g_warn_quiet.load()) std::fprintf(stderr, "[dqd2v] warning: %s\n", msg.c_str());
}

std::int64_t warn_count() { return g_warn_count.load(); }
void reset_warn_count() { g_warn_count.store(0); }
void set_warn_quiet(bool quiet) { g_warn_quiet.store(quiet); }

}  // namespace dqd2v
