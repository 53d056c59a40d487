#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace gsf {

// Global knob set once by the CLI (--threads); 1 = fully serial.
int thread_count();
void set_thread_count(int n);

// Static range partition; chunk i is always the same slice of [0, n), so
// per-chunk outputs reduced in chunk order are independent of scheduling.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t, int)>& body);

}  // namespace gsf
