#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace ibf {

inline std::atomic<bool>& log_quiet() {
    static std::atomic<bool> quiet{false};
    return quiet;
}

inline void log_warn(std::string_view msg) {
    if (!log_quiet()) std::cerr << "warning: " << msg << '\n';
}

inline void log_info(std::string_view msg) {
    if (!log_quiet()) std::cerr << msg << '\n';
}

}  // namespace ibf
