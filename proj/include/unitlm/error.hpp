#pragma once

#include <stdexcept>
#include <string>

namespace unitlm {

enum class ErrorCode {
    invalid_argument,
    template_violation,
    range_violation,
    unparseable,
    insufficient_data,
    truncation_refused,
    decode_failure,
    io_failure,
    divergence,
};

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::invalid_argument: return "invalid-argument";
        case ErrorCode::template_violation: return "template-violation";
        case ErrorCode::range_violation: return "range-violation";
        case ErrorCode::unparseable: return "unparseable";
        case ErrorCode::insufficient_data: return "insufficient-data";
        case ErrorCode::truncation_refused: return "truncation-refused";
        case ErrorCode::decode_failure: return "decode-failure";
        case ErrorCode::io_failure: return "io-failure";
        case ErrorCode::divergence: return "divergence";
    }
    return "unknown";
}

class Error : public std::runtime_error {
  public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

  private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool cond, ErrorCode code, const std::string& message) {
    if (!cond) {
        raise(code, message);
    }
}

} // namespace unitlm
