#pragma once

#include <stdexcept>

namespace headlens {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace headlens
