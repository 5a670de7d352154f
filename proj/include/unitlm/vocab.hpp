#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "unitlm/error.hpp"

namespace unitlm {

using TokenId = int32_t;

// The five structural prompt tokens, in fixed id order.
enum class Prompt : int {
    start_text = 0,
    start_speech = 1,
    generate_text = 2,
    generate_speech = 3,
    enroll_speech = 4,
};

inline constexpr int kNumPrompts = 5;

inline constexpr std::array<const char*, kNumPrompts> kPromptNames = {
    "<start-text>", "<start-speech>", "<generate-text>", "<generate-speech>", "<enroll-speech>",
};

enum class TokenKind { text, speech, prompt, pad };

// Merged id space: [0, text_size) text, then speech, then the five prompts,
// then a single pad id last. The pad id doubles as the end-of-example
// sentinel appended by the sequence builder (see format.hpp).
class Vocabulary {
  public:
    Vocabulary() = default;

    Vocabulary(int text_size, int speech_size) : text_size_(text_size), speech_size_(speech_size) {
        require(text_size >= 1, ErrorCode::invalid_argument, "text vocabulary size must be >= 1");
        require(speech_size >= 1, ErrorCode::invalid_argument, "speech vocabulary size must be >= 1");
    }

    int text_size() const { return text_size_; }
    int speech_size() const { return speech_size_; }
    int total_size() const { return text_size_ + speech_size_ + kNumPrompts + 1; }

    TokenId text_begin() const { return 0; }
    TokenId speech_begin() const { return text_size_; }
    TokenId prompt_begin() const { return text_size_ + speech_size_; }
    TokenId pad_id() const { return total_size() - 1; }

    TokenId prompt_id(Prompt p) const { return prompt_begin() + static_cast<int>(p); }

    TokenId text_id(int c) const {
        require(c >= 0 && c < text_size_, ErrorCode::range_violation, "text token out of range");
        return c;
    }

    TokenId speech_id(int unit) const {
        require(unit >= 0 && unit < speech_size_, ErrorCode::range_violation, "speech unit out of range");
        return speech_begin() + unit;
    }

    // Inverse of speech_id.
    int speech_unit(TokenId id) const {
        require(kind(id) == TokenKind::speech, ErrorCode::range_violation, "id is not a speech token");
        return id - speech_begin();
    }

    TokenKind kind(TokenId id) const {
        require(id >= 0 && id < total_size(), ErrorCode::range_violation,
                "token id " + std::to_string(id) + " outside vocabulary");
        if (id < speech_begin()) {
            return TokenKind::text;
        }
        if (id < prompt_begin()) {
            return TokenKind::speech;
        }
        if (id < pad_id()) {
            return TokenKind::prompt;
        }
        return TokenKind::pad;
    }

    bool is_prompt(TokenId id) const { return kind(id) == TokenKind::prompt; }

    Prompt prompt_at(TokenId id) const {
        require(is_prompt(id), ErrorCode::range_violation, "id is not a prompt token");
        return static_cast<Prompt>(id - prompt_begin());
    }

    const char* prompt_name(Prompt p) const { return kPromptNames[static_cast<size_t>(p)]; }

    bool operator==(const Vocabulary& o) const {
        return text_size_ == o.text_size_ && speech_size_ == o.speech_size_;
    }

  private:
    int text_size_ = 1;
    int speech_size_ = 1;
};

inline Vocabulary merge_vocab(int text_size, int speech_size) {
    return Vocabulary(text_size, speech_size);
}

} // namespace unitlm
