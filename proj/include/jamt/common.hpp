#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace jamt {

#ifdef JAMT_REAL32
using real_t = float;
#else
using real_t = double;
#endif

// Error taxonomy maps onto CLI exit codes: usage=1, data=2, numeric=3.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Contract violations on tensor shapes; a kind of data error.
struct ShapeError : DataError {
  using DataError::DataError;
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace jamt
