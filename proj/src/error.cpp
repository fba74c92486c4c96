#include "tinylm/error.hpp"

namespace tinylm {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::sequence_length: return "sequence-length";
        case ErrorKind::io: return "io";
        case ErrorKind::data: return "data";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::usage: return "usage";
    }
    return "unknown";
}

}  // namespace tinylm
