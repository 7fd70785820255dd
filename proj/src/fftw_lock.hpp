#pragma once

#include <mutex>

namespace m2d::detail {

// FFTW planning is not thread safe; execution with the new-array functions is.
std::mutex& fftw_planner_mutex();

}  // namespace m2d::detail
