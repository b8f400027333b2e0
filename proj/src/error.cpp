#include "fskws/error.hpp"

namespace fskws {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "invalid-argument";
        case ErrorKind::Shape: return "shape";
        case ErrorKind::Numeric: return "numeric";
        case ErrorKind::State: return "state";
        case ErrorKind::Format: return "format";
        case ErrorKind::Config: return "config";
        case ErrorKind::Sampling: return "sampling";
        case ErrorKind::Io: return "io";
    }
    return "unknown";
}

}  // namespace fskws
