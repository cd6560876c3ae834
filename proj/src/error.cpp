#include "xfb/error.hpp"

namespace xfb {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation: return "validation";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::parameter: return "parameter";
    case ErrorKind::format: return "format";
    case ErrorKind::mode: return "mode";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::network: return "network";
    case ErrorKind::io: return "io";
    case ErrorKind::runtime: return "runtime";
  }
  return "runtime";
}

}  // namespace xfb
